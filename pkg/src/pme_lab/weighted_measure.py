"""Weighted measures, norms, the Muckenhoupt window and the Hardy check.

The measure is ``mu_w = y_n^w dy`` on the half-space; norms are evaluated on
grid fields with vertical quadrature weights that integrate piecewise-linear
functions against ``y_n^w`` exactly (closed-form cell moments).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .grids import HalfSpaceGrid, SampledField
from .params import SigmaParam  # noqa: F401  (re-export per module surface)

__all__ = [
    "SigmaParam",
    "WeightedNormSpec",
    "weighted_norm",
    "MuckenhouptWindow",
    "muckenhoupt_window",
    "HardyReport",
    "hardy_check",
    "region_mask",
]


@dataclass(frozen=True)
class WeightedNormSpec:
    """Norm request: exponent p in [1, inf], weight exponent, and region.

    ``region`` is one of: ``"space"`` (whole spatial grid at a fixed time),
    ``"spacetime"`` (whole slab), an :class:`~pme_lab.geometry.IntrinsicBall`
    (spatial), or a :class:`~pme_lab.geometry.ParabolicCylinder` (space-time).
    """

    exponent: float
    weight: float
    region: object = "space"

    def __post_init__(self):
        if not (self.exponent >= 1.0 or self.exponent == math.inf):
            raise ValueError("norm exponent must be >= 1 or inf")
        if self.exponent != math.inf and not self.weight > -1.0:
            raise ValueError("weight exponent must exceed -1 for finite p")


def _min_image(delta, extent):
    return (delta + 0.5 * extent) % extent - 0.5 * extent


def _grid_ref_dist(grid, center):
    """ref_dist from every spatial node to ``center`` with periodic tangential
    wrapping; returns an array of shape ``grid.spatial_shape``."""
    pts = grid.spatial_points()
    delta = pts - center
    if grid.n > 1:
        delta[..., :-1] = _min_image(delta[..., :-1], grid.tangential_extent)
    t = np.sqrt(np.sum(delta**2, axis=-1))
    denom = np.sqrt(pts[..., -1]) + math.sqrt(center[-1]) + np.sqrt(t)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(t > 0, t / np.where(denom > 0, denom, 1.0), 0.0)


def region_mask(grid, region):
    """Boolean masks ``(time_mask, space_mask)`` for a norm region."""
    if isinstance(region, str):
        if region not in ("space", "spacetime"):
            raise ValueError("unknown region %r" % (region,))
        return (np.ones(grid.n_time + 1, bool) if region == "spacetime" else None,
                np.ones(grid.spatial_shape, bool))
    if isinstance(region, geometry.IntrinsicBall):
        _check_ball_fits(grid, region)
        return None, _grid_ref_dist(grid, region.center) < region.radius
    if isinstance(region, geometry.ParabolicCylinder):
        t0, t1 = region.time_window
        if t1 > grid.s_max + 1e-12:
            raise ValueError("cylinder time window exceeds the grid horizon")
        _check_ball_fits(grid, region.ball)
        tm = (grid.times > t0) & (grid.times <= t1)
        return tm, _grid_ref_dist(grid, region.center) < region.ball.radius
    raise ValueError("unknown region %r" % (region,))


def _check_ball_fits(grid, ball):
    _, outer = ball.euclidean_sandwich()
    _, y_hi = ball.vertical_extent()
    if y_hi > grid.y_max * (1 + 1e-12):
        raise ValueError("ball extends above the vertical grid extent")
    if grid.n > 1 and 2.0 * outer > grid.tangential_extent:
        raise ValueError("ball does not fit in the periodic tangential box")


def _spatial_weights(grid, w):
    vw = grid.vertical_weights(w)
    tw = grid.tangential_weight() ** (grid.n - 1)
    shape = (1,) * (grid.n - 1) + (len(vw),)
    return tw * vw.reshape(shape)


def weighted_norm(field, spec, grid=None, time_index=None):
    """Weighted L^p norm of a field over the requested region.

    ``field`` may be a :class:`SampledField` or a plain spatial array (then
    ``grid`` is required).  Spatial regions on a time-dependent field need
    ``time_index``; space-time regions integrate the time axis with the grid's
    step weights.
    """
    if isinstance(field, SampledField):
        grid = field.grid
        values = field.values
        has_time = True
    else:
        if grid is None:
            raise ValueError("grid required for raw-array norms")
        values = np.asarray(field, dtype=float)
        has_time = values.shape == grid.shape
        if not has_time and values.shape != grid.spatial_shape:
            raise ValueError("array shape matches neither grid nor spatial shape")

    time_mask, space_mask = region_mask(grid, spec.region)
    spacetime = time_mask is not None

    if spacetime and not has_time:
        raise ValueError("space-time norm of a purely spatial array")
    if not spacetime and has_time:
        if time_index is None:
            raise ValueError("time_index required for a spatial norm of a "
                             "time-dependent field")
        values = values[time_index]

    if spec.exponent == math.inf:
        sel = values[time_mask][..., space_mask] if spacetime else values[space_mask]
        return float(np.max(np.abs(sel))) if sel.size else 0.0

    wts = _spatial_weights(grid, spec.weight) * space_mask
    p = spec.exponent
    if spacetime:
        core = np.abs(values) ** p * wts
        spatial_sum = core.reshape(core.shape[0], -1).sum(axis=1)
        # half-open cylinder windows get one rectangle weight per node; the
        # full slab uses the trapezoid weights
        time_wts = (grid.time_weights() if spec.region == "spacetime"
                    else np.where(time_mask, grid.ds, 0.0))
        total = float(np.sum(spatial_sum * time_wts))
    else:
        total = float(np.sum(np.abs(values) ** p * wts))
    return total ** (1.0 / p)


# ---------------------------------------------------------------------------
# Muckenhoupt window
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MuckenhouptWindow:
    lo: float
    hi: float
    contains_zero: bool

    def contains(self, theta):
        return self.lo < theta < self.hi


def muckenhoupt_window(sigma, p):
    """Admissible weight-exponent window ``(-1, p(sigma+1)-1)`` for the
    weighted maximal/singular operator theory; reports whether the unweighted
    case (exponent 0) lies strictly inside."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    s = float(getattr(sigma, "sigma", sigma))
    hi = p * (s + 1.0) - 1.0
    return MuckenhouptWindow(-1.0, hi, hi > 0.0)


# ---------------------------------------------------------------------------
# Hardy inequality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HardyReport:
    shift: int
    lhs: float
    rhs: float
    constant: float
    right_weight: float


def hardy_check(field, sigma, shift, grid=None, time_index=0):
    """Measure the constant in ``||u||_{L2_s} <= C ||d_n^shift u||_{L2_{2 shift + s}}``.

    The field must be compactly supported in the vertical direction (it must
    vanish on the top tenth of the vertical mesh).
    """
    if shift not in (1, 2):
        raise ValueError("shift must be 1 or 2")
    s = float(getattr(sigma, "sigma", sigma))
    if isinstance(field, SampledField):
        grid = field.grid
        values = field.values[time_index]
        dn = field.derivative(0, (0,) * (grid.n - 1) + (shift,))[time_index]
    else:
        values = np.asarray(field, dtype=float)
        if grid is None:
            raise ValueError("grid required for raw-array hardy_check")
        dn = np.einsum("ij,...j->...i", grid.vertical_diff_matrix(shift), values)

    top = max(2, (grid.n_vertical + 1) // 10)
    if np.max(np.abs(values[..., -top:])) > 1e-12 * max(np.max(np.abs(values)), 1e-300):
        raise ValueError("field is not compactly supported in the vertical "
                         "direction")

    lhs = weighted_norm(values, WeightedNormSpec(2.0, s, "space"), grid=grid)
    rw = 2.0 * shift + s
    rhs = weighted_norm(dn, WeightedNormSpec(2.0, rw, "space"), grid=grid)
    constant = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return HardyReport(shift, lhs, rhs, constant, rw)
