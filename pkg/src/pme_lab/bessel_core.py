"""One-dimensional degenerate elliptic machinery on the half-line.

The ODE ``z u'' + (1+sigma) u' - z u = -f`` is solved through its fundamental
system ``Psi_1 = z^{-sigma/2} I_{sigma/2}(z)`` (regular at 0, growing) and
``Psi_2 = z^{-sigma/2} K_{sigma/2}(z)`` (singular at 0, decaying), whose
Wronskian is ``-z^{-1-sigma}``.  The induced kernel ``k(z,x)`` and the
first-order kernel ``x^sigma z^{-1-sigma} (z > x)`` drive the solvers and the
Schur-bound integrals below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import integrate, special

from .grids import weighted_cell_moments
from .params import SigmaParam

__all__ = [
    "Z_MAX",
    "BesselSystem",
    "FundamentalKernel",
    "BesselSolution",
    "solve_bessel_ode",
    "solve_first_order",
    "SchurReport",
    "schur_integrals",
    "first_order_kernel_norms",
    "reference_deviation",
]

Z_MAX = 40.0


def _sigma_value(sigma):
    s = float(getattr(sigma, "sigma", sigma))
    if not s > -1.0:
        raise ValueError("sigma must exceed -1 (got %r)" % (s,))
    return s


class BesselSystem:
    """Fundamental system ``Psi_1, Psi_2`` of the degenerate Bessel ODE."""

    def __init__(self, sigma):
        self.sigma = _sigma_value(sigma)
        self.order = 0.5 * self.sigma

    def psi1(self, z):
        nu = self.order
        z = np.asarray(z, dtype=float)
        limit = 2.0**-nu / math.gamma(1.0 + nu)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = np.where(z > 0, z, 1.0) ** -nu * special.iv(nu, z)
        return np.where(z > 1e-290, val, limit)

    def psi2(self, z):
        nu = self.order
        z = np.asarray(z, dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(z > 0, z, 1.0) ** -nu * special.kv(nu, z)

    # d/dz [z^-nu I_nu] = z^-nu I_{nu+1};  d/dz [z^-nu K_nu] = -z^-nu K_{nu+1}

    def psi1_prime(self, z):
        nu = self.order
        z = np.asarray(z, dtype=float)
        return np.where(z > 0, z, 1.0) ** -nu * special.iv(nu + 1.0, z)

    def psi2_prime(self, z):
        nu = self.order
        z = np.asarray(z, dtype=float)
        return -np.where(z > 0, z, 1.0) ** -nu * special.kv(nu + 1.0, z)

    def wronskian(self, z):
        """``Psi_1 Psi_2' - Psi_1' Psi_2`` from the derivative identities."""
        return (self.psi1(z) * self.psi2_prime(z)
                - self.psi1_prime(z) * self.psi2(z))


class FundamentalKernel:
    """``k(z,x) = x^sigma Psi_1(min) Psi_2(max)``, evaluated stably."""

    def __init__(self, sigma):
        self.sigma = _sigma_value(sigma)
        self.system = BesselSystem(self.sigma)

    def __call__(self, z, x):
        z, x = np.broadcast_arrays(np.asarray(z, float), np.asarray(x, float))
        nu = 0.5 * self.sigma
        lo, hi = np.minimum(z, x), np.maximum(z, x)
        # (lo*hi)^-nu ive(nu,lo) kve(nu,hi) e^{lo-hi} never overflows
        lo_s = np.where(lo > 0, lo, 1.0)
        val = (lo_s**-nu * special.ive(nu, lo)
               * np.where(hi > 0, hi, 1.0) ** -nu * special.kve(nu, hi)
               * np.exp(lo - hi))
        small = lo <= 1e-290
        if np.any(small):
            limit = 2.0**-nu / math.gamma(1.0 + nu)
            val = np.where(small, limit * self.system.psi2(hi), val)
        return np.where(x > 0, x, 1.0) ** self.sigma * val


# ---------------------------------------------------------------------------
# quadrature backbone: prefix integrals on the graded node set
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


def _panel(fn, a, b):
    half = 0.5 * (b - a)
    v = a + half * (_GL_NODES + 1.0)
    return half * float(np.dot(_GL_WEIGHTS, fn(v)))


def _first_cell(fn, b, levels=14):
    """Integral of ``fn`` over (0, b) with a geometric subdivision toward 0,
    robust for algebraic endpoint behaviour ``v^beta``, beta > -1."""
    edges = b * 2.0 ** -np.arange(levels + 1)
    total = sum(_panel(fn, lo, hi) for hi, lo in zip(edges[:-1], edges[1:]))
    return total + _panel(fn, 0.0, edges[-1])


def _prefix_integrals(fn, v_edges):
    """``P_i = int_0^{v_i} fn dv`` for the ascending edge set (v_0 = 0)."""
    parts = np.zeros(len(v_edges))
    if len(v_edges) > 1:
        parts[1] = _first_cell(fn, v_edges[1])
        for i in range(2, len(v_edges)):
            parts[i] = _panel(fn, v_edges[i - 1], v_edges[i])
    return np.cumsum(parts)


def graded_nodes(z_max=Z_MAX, n_nodes=600):
    zeta = np.linspace(0.0, math.sqrt(z_max), n_nodes + 1)
    return zeta**2


def _check_decay(f, nodes, label):
    vals = np.abs(np.broadcast_to(np.asarray(f(nodes), dtype=float),
                                  nodes.shape))
    scale = float(np.max(vals))
    tail = float(np.max(vals[nodes >= 0.9 * nodes[-1]]))
    if scale > 0 and tail > 1e-5 * scale:
        raise ValueError(
            "%s does not decay before the truncation radius %.3g "
            "(tail/peak = %.2e)" % (label, nodes[-1], tail / scale))
    return scale, tail


@dataclass(frozen=True)
class BesselSolution:
    """Nodal solution of one of the half-line ODEs plus quality diagnostics."""

    nodes: np.ndarray
    values: np.ndarray
    sigma: float
    residual_sup: float
    tail_ratio: float

    def norm(self, weight=None, multiplier=None):
        w = self.sigma if weight is None else weight
        vals = self.values if multiplier is None else multiplier * self.values
        wts = weighted_cell_moments(self.nodes, w)
        return math.sqrt(float(np.sum(wts * vals**2)))


def _fd_matrix(nodes, order):
    from .grids import _diff_matrix
    return _diff_matrix(nodes, order, order + 4)


def solve_bessel_ode(f_tilde, sigma, z_max=Z_MAX, n_nodes=600):
    """Solve ``z u'' + (1+sigma) u' - z u = -f`` on (0, z_max).

    ``f_tilde`` is a callable; the solution is the kernel representation
    ``u(z) = int k(z,x) f(x) dx`` evaluated by per-cell Gauss quadrature with
    the integral split at each evaluation node (the kernel is only C^0 across
    the diagonal).  The returned residual is an independent finite-difference
    evaluation of the ODE at interior nodes.
    """
    s = _sigma_value(sigma)
    sys = BesselSystem(s)
    nodes = graded_nodes(z_max, n_nodes)
    scale, tail = _check_decay(f_tilde, nodes, "f_tilde")
    v_edges = np.sqrt(nodes)

    def g_part(v):  # x^sigma Psi_1 f, in v = sqrt(x)
        x = v**2
        return 2.0 * v ** (2.0 * s + 1.0) * sys.psi1(x) * f_tilde(x)

    def h_part(v):  # x^sigma Psi_2 f
        x = v**2
        return 2.0 * v ** (2.0 * s + 1.0) * sys.psi2(x) * f_tilde(x)

    pg = _prefix_integrals(g_part, v_edges)
    ph = _prefix_integrals(h_part, v_edges)
    suffix_h = ph[-1] - ph

    with np.errstate(invalid="ignore"):
        lower = np.where(nodes > 0, sys.psi2(nodes) * pg, 0.0)
    lower[0] = 0.0
    values = lower + sys.psi1(nodes) * suffix_h

    residual = _ode_residual(nodes, values, s, f_tilde, scale,
                             lambda z, u, du, d2u: z * d2u + (1 + s) * du
                             - z * u)
    return BesselSolution(nodes, values, s, residual,
                          tail / scale if scale > 0 else 0.0)


def _ode_residual(nodes, values, s, rhs_fn, scale, operator):
    if scale == 0.0:
        return 0.0
    d1 = _fd_matrix(nodes, 1) @ values
    d2 = _fd_matrix(nodes, 2) @ values
    res = operator(nodes, values, d1, d2) + rhs_fn(nodes)
    interior = (nodes >= 0.05) & (nodes <= nodes[-1] * 0.95)
    return float(np.max(np.abs(res[interior])) / scale)


def solve_first_order(f_bar, sigma, z_max=Z_MAX, n_nodes=600):
    """Solve ``z w' + (1+sigma) w = f`` via ``w = z^{-1-sigma} int_0^z x^sigma f``."""
    s = _sigma_value(sigma)
    nodes = graded_nodes(z_max, n_nodes)
    scale, tail = _check_decay(f_bar, nodes, "f_bar")
    v_edges = np.sqrt(nodes)

    def integrand(v):
        x = v**2
        return 2.0 * v ** (2.0 * s + 1.0) * f_bar(x)

    prefix = _prefix_integrals(integrand, v_edges)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(nodes > 0, nodes, 1.0) ** (-1.0 - s) * prefix
    values[0] = f_bar(0.0) / (1.0 + s)

    residual = _ode_residual(nodes, values, s,
                             lambda z: -np.asarray(f_bar(z), dtype=float),
                             scale,
                             lambda z, w, dw, d2w: z * dw + (1 + s) * w)
    return BesselSolution(nodes, values, s, residual,
                          tail / scale if scale > 0 else 0.0)


# ---------------------------------------------------------------------------
# Schur-bound integrals and the first-order kernel norms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchurReport:
    sup_over_z: float
    sup_over_x: float
    arg_z: float
    arg_x: float
    max_quad_error: float
    tail_samples: tuple

    @property
    def finite(self):
        return math.isfinite(self.sup_over_z) and math.isfinite(self.sup_over_x)


def _quad_alg_zero(fn, upper, exponent):
    """``int_0^upper v^exponent fn(v) dv`` (algebraic weight at 0)."""
    val, err = integrate.quad(fn, 0.0, upper, weight="alg",
                              wvar=(exponent, 0.0), limit=200)
    return val, err


def schur_integrals(sigma, l):
    """Row/column integrals ``int z^l k(z,x) x^{-sigma} dmu_sigma`` for the
    Schur test; both suprema over log-spaced sweeps, with tail diagnostics."""
    if l not in (0, 1):
        raise ValueError("l must be 0 or 1")
    s = _sigma_value(sigma)
    nu = 0.5 * s
    sys = BesselSystem(s)
    max_err = 0.0

    def tail_scaled(a, power):
        # e^a int_a^inf z^power Psi_2(z) dz, evaluated without underflow
        return integrate.quad(
            lambda t: (a + t) ** (power - nu) * special.kve(nu, a + t)
            * np.exp(-t), 0.0, np.inf, limit=200)

    def psi1_scaled(a):  # Psi_1(a) e^{-a}
        return a**-nu * special.ive(nu, a)

    def assemble(a, power):
        # int_0^a z^power Psi_1 dz * Psi_2(a) + Psi_1(a) int_a^inf z^power Psi_2
        nonlocal max_err
        near, e1 = _quad_alg_zero(lambda v: 2.0 * sys.psi1(v**2),
                                  math.sqrt(a), 2.0 * power + 1.0)
        far, e2 = tail_scaled(a, power)
        val = sys.psi2(a) * near + psi1_scaled(a) * far
        max_err = max(max_err, (abs(sys.psi2(a)) * e1
                                + psi1_scaled(a) * e2) / abs(val))
        return val

    def row_value(z):
        return z**l * assemble(z, s)

    def col_value(x):
        return assemble(x, s + l)

    probes = np.geomspace(1e-2, 0.9 * Z_MAX, 28)
    rows = np.array([row_value(z) for z in probes])
    cols = np.array([col_value(x) for x in probes])
    tail = tuple(float(v) for v in rows[-4:])
    iz, ix = int(np.argmax(rows)), int(np.argmax(cols))
    report = SchurReport(float(rows[iz]), float(cols[ix]),
                         float(probes[iz]), float(probes[ix]),
                         float(max_err), tail)
    if not report.finite:
        raise RuntimeError("Schur integral quadrature failed to converge: "
                           "tail samples %r" % (tail,))
    return report


def first_order_kernel_norms(sigma, delta, mode):
    """Weighted row/column integrals of the first-order kernel
    ``x^sigma z^{-1-sigma} (z > x)`` with weight ``(z/x)^delta``; the sweep
    supremum is returned (analytically it is constant in the swept variable)."""
    s = _sigma_value(sigma)
    d = float(delta)
    if mode == "sup_row":
        if not d < 1.0 + s:
            raise ValueError("sup_row requires delta < 1 + sigma "
                             "(the integral diverges at 0)")

        def value(z):
            # z^{delta-1-sigma} int_0^z x^{sigma-delta} dx
            val, _ = _quad_alg_zero(lambda v: 2.0 * np.ones_like(v),
                                    math.sqrt(z), 2.0 * (s - d) + 1.0)
            return z ** (d - 1.0 - s) * val

    elif mode == "sup_col":
        if not d < s:
            raise ValueError("sup_col requires delta < sigma "
                             "(the integral diverges at infinity)")

        def value(x):
            val, _ = integrate.quad(lambda z: z ** (d - s - 1.0), x, np.inf,
                                    limit=200)
            return x ** (s - d) * val

    else:
        raise ValueError("mode must be 'sup_row' or 'sup_col'")

    probes = np.geomspace(0.05, 20.0, 12)
    return float(np.max([value(p) for p in probes]))


# ---------------------------------------------------------------------------
# fixture validation
# ---------------------------------------------------------------------------


def reference_deviation():
    """Maximum relative deviation of the Bessel backend from the stored
    high-precision reference values (columns nu, z, I_nu, K_nu)."""
    text = resources.files("pme_lab").joinpath("data/bessel_reference.txt") \
        .read_text()
    worst = 0.0
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        nu, z, i_ref, k_ref = (float(tok) for tok in line.split())
        i_err = abs(special.iv(nu, z) - i_ref) / abs(i_ref)
        k_err = abs(special.kv(nu, z) - k_ref) / abs(k_ref)
        worst = max(worst, i_err, k_err)
    return worst
