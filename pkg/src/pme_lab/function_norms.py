"""Sampled evaluators for the solution and inhomogeneity norms.

The solution norm has two halves: ``x1`` combines a Lipschitz bound with
supremum-over-cylinder averages of second and third spatial derivatives,
``x2`` combines a degenerate pointwise second-derivative bound with cylinder
averages of the time derivative of the gradient.  The inhomogeneity norm
pairs a gradient average with scale weight ``r^theta`` (on-diagonal part)
against a size average with weight ``r^(2-e1) (r+sqrt(z_n))^(-e2)``
(off-diagonal part).

Suprema over all admissible parabolic cylinders are approximated by a
seeded dyadic sampler (:class:`CylinderSampler`).  Cylinder averages use
plain Lebesgue measure, and the discrete cylinder volume ``|Q|`` is computed
with the same node mask and quadrature weights as the numerator, so masking
bias cancels to leading order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .params import DEFAULT_SEED, SigmaParam
from .weighted_measure import WeightedNormSpec, region_mask, weighted_norm

__all__ = [
    "CylinderSampler",
    "NormReport",
    "x1_norm",
    "x2_norm",
    "x_norm",
    "y_norm",
    "norm_report",
    "report_csv",
    "NonlinearityBoundReport",
    "nonlinearity_bound_check",
    "LinearEstimateReport",
    "linear_estimate_check",
]


# ---------------------------------------------------------------------------
# cylinder sampler
# ---------------------------------------------------------------------------


@dataclass
class CylinderSampler:
    """Seeded dyadic family of parabolic cylinders approximating the
    supremum over all cylinders ``(r^2/2, r^2] x B_r(z)`` with ``r^2 <= S``.

    Scales are ``r = 2^{-k} sqrt(S)``; each retained scale carries two strata
    of centers -- near the base (``sqrt(z_n) < r``) and in the interior
    (``sqrt(z_n) >= r``) -- with a fixed quota per stratum.  Scales whose time
    window contains no grid node and strata whose cylinders cannot be placed
    inside the grid domain are dropped and recorded in ``dropped``.
    """

    horizon: float
    grid_fingerprint: str
    scales: tuple
    centers: tuple
    stratum_counts: tuple = ()
    dropped: tuple = ()
    seed: int = DEFAULT_SEED

    @classmethod
    def build(cls, grid, max_level=6, centers_per_stratum=32, seed=None):
        """Sample cylinders on ``grid`` at dyadic scales ``k = 0..max_level``.

        Every retained cylinder is checked to lie inside the grid's
        time-space domain and to contain at least one grid node.
        """
        if centers_per_stratum < 1:
            raise ValueError("centers_per_stratum must be at least 1")
        if max_level < 0:
            raise ValueError("max_level must be nonnegative")
        seed = DEFAULT_SEED if seed is None else int(seed)
        rng = np.random.default_rng(seed)
        root = math.sqrt(grid.s_max)

        scales, blocks, counts, dropped = [], [], [], []
        for k in range(max_level + 1):
            r = root * 2.0 ** (-k)
            lo, hi = 0.5 * r * r, r * r
            if not np.any((grid.times > lo) & (grid.times <= hi)):
                dropped.append((r, "time-unresolved"))
                continue
            rows, kept = [], []
            for stratum in ("boundary", "interior"):
                got = _draw_stratum(grid, r, stratum, centers_per_stratum, rng)
                if got is None:
                    dropped.append((r, stratum))
                else:
                    rows.append(got)
                    kept.append((stratum, len(got)))
            if not rows:
                continue
            scales.append(r)
            blocks.append(np.vstack(rows))
            counts.append(tuple(kept))
        if not scales:
            raise ValueError("no admissible cylinder scale: the grid resolves "
                             "no dyadic time window")
        return cls(horizon=grid.s_max, grid_fingerprint=grid.fingerprint(),
                   scales=tuple(scales), centers=tuple(blocks),
                   stratum_counts=tuple(counts), dropped=tuple(dropped),
                   seed=seed)

    def __len__(self):
        return sum(len(block) for block in self.centers)

    def cylinders(self):
        """Yield ``(r, center, cylinder)`` triples in deterministic order."""
        for r, block in zip(self.scales, self.centers):
            for z in block:
                yield r, z, geometry.ParabolicCylinder(z, r)

    def fingerprint(self):
        h = hashlib.sha1()
        h.update(("cylsampler|%.12g|%s|%d" % (
            self.horizon, self.grid_fingerprint, self.seed)).encode())
        for r, block in zip(self.scales, self.centers):
            h.update(("|%.12g|" % r).encode())
            h.update(np.ascontiguousarray(block, dtype=float).tobytes())
        return h.hexdigest()[:12]

    def validate(self, grid):
        """Re-check every cylinder against ``grid``; returns the count."""
        if grid.fingerprint() != self.grid_fingerprint:
            raise ValueError("sampler was built for a different grid")
        count = 0
        for _r, _z, cyl in self.cylinders():
            tm, sm = region_mask(grid, cyl)
            if not (tm.any() and sm.any()):
                raise ValueError("cylinder contains no grid nodes")
            count += 1
        return count

    def rescaled(self, lam, grid):
        """Image sampler under ``(s, y) -> (lam*s, lam*y)``: radii divide by
        ``sqrt(lam)``, centers by ``lam``; attach to the rescaled ``grid``."""
        if not lam > 0:
            raise ValueError("scaling factor must be positive")
        return CylinderSampler(
            horizon=self.horizon / lam,
            grid_fingerprint=grid.fingerprint(),
            scales=tuple(r / math.sqrt(lam) for r in self.scales),
            centers=tuple(block / lam for block in self.centers),
            stratum_counts=self.stratum_counts,
            dropped=(),
            seed=self.seed,
        )


def _draw_stratum(grid, r, stratum, quota, rng):
    """Rejection-sample ``quota`` centers whose cylinders fit the grid, or
    ``None`` if the stratum cannot be filled."""
    if stratum == "interior" and r * r >= grid.y_max:
        return None
    pts, tries = [], 0
    max_tries = 200 * quota
    while len(pts) < quota and tries < max_tries:
        tries += 1
        z = np.empty(grid.n)
        if stratum == "boundary":
            z[-1] = r * r * rng.uniform(0.0, 1.0)
        else:
            z[-1] = rng.uniform(r * r, grid.y_max)
        if grid.n > 1:
            z[:-1] = rng.uniform(0.0, grid.tangential_extent, grid.n - 1)
        cyl = geometry.ParabolicCylinder(z, r)
        try:
            _tm, sm = region_mask(grid, cyl)
        except ValueError:
            continue
        if not sm.any():
            continue
        pts.append(z)
    if len(pts) < quota:
        return None
    return np.asarray(pts)


# ---------------------------------------------------------------------------
# derivative magnitudes and cylinder averages
# ---------------------------------------------------------------------------


def _derivative_magnitude(u, order):
    """Frobenius magnitude of the order-``order`` spatial derivative tensor:
    ``sqrt( sum_{|alpha|=order} (order!/alpha!) (d^alpha u)^2 )``."""
    total = np.zeros(u.grid.shape)
    for alpha in u.multi_indices(order):
        mult = math.factorial(order)
        for a in alpha:
            mult //= math.factorial(a)
        arr = u.derivative(0, alpha)
        total += mult * arr * arr
    return np.sqrt(total)


def _grad_time_magnitude(u):
    """Magnitude of the time derivative of the gradient."""
    g = u.grid
    total = np.zeros(g.shape)
    for j in range(g.n):
        a = [0] * g.n
        a[j] = 1
        arr = u.derivative(1, tuple(a))
        total += arr * arr
    return np.sqrt(total)


def _cyl_averages(grid, arrays, cyl, p):
    """Volume-normalized Lebesgue averages ``|Q|^{-1/p} ||a||_{L^p(Q)}`` for
    several arrays over one cylinder, sharing the discrete mask."""
    spec = WeightedNormSpec(p, 0.0, cyl)
    den = weighted_norm(np.ones(grid.shape), spec, grid=grid)
    if den == 0.0:
        raise ValueError("cylinder contains no grid nodes")
    return [weighted_norm(a, spec, grid=grid) / den for a in arrays]


def _check_sampler(fld, sampler):
    if sampler is None or len(sampler) == 0:
        raise ValueError("sampler is empty")
    if sampler.grid_fingerprint != fld.grid.fingerprint():
        raise ValueError("sampler was built for a different grid")


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def x1_norm(u, p, sampler):
    """First half of the solution norm:

    ``sup |grad u| + sup_Q [ r (r + sqrt(z_n)) avg_p |D^2 u|
                             + r^2 avg_p |y_n D^3 u| ]``

    with ``avg_p`` the volume-normalized Lebesgue ``L^p`` average over the
    cylinder ``Q`` and the supremum taken over the sampler.
    """
    _check_sampler(u, sampler)
    WeightedNormSpec(p, 0.0)  # validates the exponent
    grad_sup = float(np.max(_derivative_magnitude(u, 1)))
    d2 = _derivative_magnitude(u, 2)
    d3 = _derivative_magnitude(u, 3) * u.grid.meshgrid()[-1]
    best = 0.0
    for r, z, cyl in sampler.cylinders():
        a2, a3 = _cyl_averages(u.grid, (d2, d3), cyl, p)
        best = max(best, r * (r + math.sqrt(z[-1])) * a2 + r * r * a3)
    return grad_sup + best


def x2_norm(u, p, sampler):
    """Second half of the solution norm:

    ``sup |sqrt(s) sqrt(y_n) D^2 u| + sup_Q r^2 avg_p |grad d_s u|``.
    """
    _check_sampler(u, sampler)
    WeightedNormSpec(p, 0.0)
    mesh = u.grid.meshgrid()
    degen = np.sqrt(mesh[0]) * np.sqrt(mesh[-1])
    point = float(np.max(degen * _derivative_magnitude(u, 2)))
    dsgrad = _grad_time_magnitude(u)
    best = 0.0
    for r, _z, cyl in sampler.cylinders():
        (a,) = _cyl_averages(u.grid, (dsgrad,), cyl, p)
        best = max(best, r * r * a)
    return point + best


def x_norm(u, p, sampler):
    """Full solution norm value ``x1 + x2``."""
    return x1_norm(u, p, sampler) + x2_norm(u, p, sampler)


def y_norm(f, p, sampler, theta=2.0, eps1=1.0, eps2=1.0):
    """Inhomogeneity norms ``(on, off)``:

    ``on  = sup_Q r^theta Avg_p |grad f|``
    ``off = sup_Q r^(2-eps1) (r + sqrt(z_n))^(-eps2) avg_p |f|``

    The defaults ``theta=2, eps1=eps2=1`` are the exponents used throughout;
    others are exposed for rescaling experiments.
    """
    _check_sampler(f, sampler)
    WeightedNormSpec(p, 0.0)
    if f.tilt is not None and np.any(f.tilt != 0.0):
        raise ValueError("inhomogeneity with a tangential tilt has no "
                         "periodic size average; remove the tilt")
    gradmag = _derivative_magnitude(f, 1)
    absf = np.abs(f.values)
    on = off = 0.0
    for r, z, cyl in sampler.cylinders():
        a_grad, a_f = _cyl_averages(f.grid, (gradmag, absf), cyl, p)
        on = max(on, r**theta * a_grad)
        off = max(off, r ** (2.0 - eps1)
                  * (r + math.sqrt(z[-1])) ** (-eps2) * a_f)
    return on, off


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormReport:
    """Norm values for one field pair at a fixed exponent.

    ``x1 + x2`` is the solution-norm value; ``max(y_on, y_off)`` is the
    inhomogeneity-norm value.  The derivative schemes used by the evaluators
    are recorded alongside.
    """

    x1: float
    x2: float
    y_on: float
    y_off: float
    p: float
    sampler_fingerprint: str
    tangential_derivative: str = "spectral"
    vertical_derivative_order: int = 4

    def __post_init__(self):
        for name in ("x1", "x2", "y_on", "y_off"):
            if not getattr(self, name) >= 0.0:
                raise ValueError("norm entries must be nonnegative")

    @property
    def x_value(self):
        return self.x1 + self.x2

    @property
    def y_value(self):
        return max(self.y_on, self.y_off)

    def csv_rows(self):
        rows = [("x1", self.x1), ("x2", self.x2), ("x", self.x_value),
                ("y_on", self.y_on), ("y_off", self.y_off),
                ("y", self.y_value)]
        return [(name, self.p, value, self.sampler_fingerprint)
                for name, value in rows]


def norm_report(p, sampler, u=None, f=None):
    """Evaluate the solution norms of ``u`` and/or the inhomogeneity norms of
    ``f`` into a :class:`NormReport` (absent inputs report zero)."""
    if u is None and f is None:
        raise ValueError("at least one of u, f is required")
    x1 = x1_norm(u, p, sampler) if u is not None else 0.0
    x2 = x2_norm(u, p, sampler) if u is not None else 0.0
    y_on, y_off = y_norm(f, p, sampler) if f is not None else (0.0, 0.0)
    return NormReport(x1=x1, x2=x2, y_on=y_on, y_off=y_off, p=p,
                      sampler_fingerprint=sampler.fingerprint())


def report_csv(report):
    """Serialize a :class:`NormReport` to CSV text
    (``norm_name,p,value,sampler_fingerprint``)."""
    lines = ["norm_name,p,value,sampler_fingerprint"]
    for name, p, value, fp in report.csv_rows():
        lines.append("%s,%.12g,%.12g,%s" % (name, p, value, fp))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# quadratic bound for the nonlinearity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NonlinearityBoundReport:
    """Measured constants in the quadratic inhomogeneity bound."""

    p: float
    sigma: float
    ball_radius: float
    x1: float
    y_on: float
    y_off: float
    c_measured: float
    trivial: bool
    pair_difference_x1: float = math.nan
    pair_y_value: float = math.nan
    pair_c_measured: float = math.nan
    sampler_fingerprint: str = ""

    @property
    def y_value(self):
        return max(self.y_on, self.y_off)


def nonlinearity_bound_check(u, R, p, sigma, sampler=None, pair=None):
    """Measure the constant in the quadratic bound for the nonlinearity.

    Evaluates ``f[u]`` and reports
    ``c_measured = ||f[u]||_Y (1-R)^3 / ||u||_{x1}^2`` for a field inside the
    ball ``||u||_{x1} <= R < 1``.  With ``pair=(u1, u2)`` (both inside the
    ball) it also measures the difference-bound constant
    ``||f[u1]-f[u2]||_Y (1-R)^6 / (R ||u1-u2||_{x1})``.
    """
    if not R < 1.0:
        raise ValueError("ball radius R must be strictly below 1: the "
                         "denominator 1 + d_n u in the quadratic term may "
                         "vanish")
    if R < 0.0:
        raise ValueError("ball radius R must be nonnegative")
    from .pme_solvers import nonlinearity_eval

    if sampler is None:
        sampler = CylinderSampler.build(u.grid)
    sig = (sigma.sigma if isinstance(sigma, SigmaParam)
           else SigmaParam(float(sigma)).sigma)

    x1 = x1_norm(u, p, sampler)
    if x1 > R * (1.0 + 1e-9) + 1e-15:
        raise ValueError("field lies outside the admissible ball: x1 value "
                         "%.6g exceeds R = %.6g" % (x1, R))
    y_on, y_off = y_norm(nonlinearity_eval(u, sig), p, sampler)
    trivial = x1 == 0.0
    c_meas = 0.0 if trivial else max(y_on, y_off) * (1.0 - R) ** 3 / x1**2

    d_x1 = y_d = c_pair = math.nan
    if pair is not None:
        u1, u2 = pair
        for fld in (u1, u2):
            v = x1_norm(fld, p, sampler)
            if v > R * (1.0 + 1e-9) + 1e-15:
                raise ValueError("pair field lies outside the admissible "
                                 "ball: x1 value %.6g exceeds R = %.6g"
                                 % (v, R))
        d_x1 = x1_norm(u1 - u2, p, sampler)
        df = nonlinearity_eval(u1, sig) - nonlinearity_eval(u2, sig)
        y_d = max(*y_norm(df, p, sampler))
        c_pair = (0.0 if d_x1 == 0.0 or R == 0.0
                  else y_d * (1.0 - R) ** 6 / (R * d_x1))

    return NonlinearityBoundReport(
        p=p, sigma=sig, ball_radius=R, x1=x1, y_on=y_on, y_off=y_off,
        c_measured=c_meas, trivial=trivial, pair_difference_x1=d_x1,
        pair_y_value=y_d, pair_c_measured=c_pair,
        sampler_fingerprint=sampler.fingerprint())


# ---------------------------------------------------------------------------
# linear solve estimate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearEstimateReport:
    """Measured ratio of the solution norm to the data norm for one linear
    solve ``d_s u = y_n Lap u + (1+sigma) d_n u + f``."""

    p: float
    sigma: float
    x1: float
    x2: float
    grad_initial_sup: float
    y_on: float
    y_off: float
    ratio: float
    trivial: bool
    sampler_fingerprint: str
    grid_fingerprint: str

    @property
    def x_value(self):
        return self.x1 + self.x2

    @property
    def rhs(self):
        return self.grad_initial_sup + max(self.y_on, self.y_off)


def linear_estimate_check(u0, f, p, sigma, sampler=None):
    """Solve the linear equation from data ``(u0, f)`` and measure the ratio
    ``(x1 + x2) / (sup |grad u0| + max(y_on, y_off))``.

    The exponent must satisfy ``p > max(2(n+1), 1/(1+sigma))``; the solve is
    the semigroup representation, the norms are sampled on ``sampler``
    (freshly built on ``u0``'s grid when omitted).
    """
    from .green_semigroup import duhamel_solve

    sig = (sigma.sigma if isinstance(sigma, SigmaParam)
           else SigmaParam(float(sigma)).sigma)
    n = u0.grid.n
    p_min = max(2.0 * (n + 1), 1.0 / (1.0 + sig))
    if not p > p_min:
        raise ValueError("norm exponent p = %g is outside the admissible "
                         "window: the estimate requires p > max(2(n+1), "
                         "1/(1+sigma)) = %g" % (p, p_min))
    if sampler is None:
        sampler = CylinderSampler.build(u0.grid)

    u = duhamel_solve(u0, f, sig)
    x1 = x1_norm(u, p, sampler)
    x2 = x2_norm(u, p, sampler)
    grad0 = float(np.max(_derivative_magnitude(u0, 1)[0]))
    y_on, y_off = y_norm(f, p, sampler) if f is not None else (0.0, 0.0)
    rhs = grad0 + max(y_on, y_off)
    trivial = rhs == 0.0
    ratio = 0.0 if trivial else (x1 + x2) / rhs
    return LinearEstimateReport(
        p=p, sigma=sig, x1=x1, x2=x2, grad_initial_sup=grad0,
        y_on=y_on, y_off=y_off, ratio=ratio, trivial=trivial,
        sampler_fingerprint=sampler.fingerprint(),
        grid_fingerprint=u0.grid.fingerprint())
