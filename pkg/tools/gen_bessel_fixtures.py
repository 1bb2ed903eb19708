#!/usr/bin/env python3
"""Generate high-precision modified-Bessel reference values.

Writes ``src/pme_lab/data/bessel_reference.txt`` with columns
``nu z I_nu(z) K_nu(z)`` at 25 significant digits, computed with mpmath at
60-digit working precision.  Run from the repository root:

    python3 tools/gen_bessel_fixtures.py
"""

import pathlib

import mpmath as mp

OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "pme_lab" / "data" \
    / "bessel_reference.txt"

ORDERS = [mp.mpf("-0.25"), mp.mpf("0"), mp.mpf("0.25"), mp.mpf("0.5"),
          mp.mpf("1")]
N_POINTS = 20


def main():
    mp.mp.dps = 60
    lo, hi = mp.mpf("0.05"), mp.mpf("60")
    zs = [lo * (hi / lo) ** (mp.mpf(i) / (N_POINTS - 1)) for i in range(N_POINTS)]
    lines = ["# nu z I_nu(z) K_nu(z)  (25 significant digits)"]
    for nu in ORDERS:
        for z in zs:
            i_val = mp.besseli(nu, z)
            k_val = mp.besselk(nu, z)
            lines.append("%s %s %s %s" % (
                mp.nstr(nu, 25), mp.nstr(z, 25),
                mp.nstr(i_val, 25), mp.nstr(k_val, 25)))
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text("\n".join(lines) + "\n")
    print("wrote %s (%d rows)" % (OUT, len(lines) - 1))


if __name__ == "__main__":
    main()
