"""Heat kernel of the degenerate half-space operator and its verifiers.

This module builds the fundamental solution ("Green function") of

    du/ds = L u,      L u = y_n * Laplace(u) + (1 + sigma) * d_n u

on the upper half space ``{y_n >= 0}`` and everything the laboratory needs
around it:

* ``green_vertical`` -- the closed-form vertical (one-dimensional) kernel,
  evaluated through two numerically stable branches (power series close to
  the diagonal degeneracy, exponentially scaled Bessel functions elsewhere).
* ``GreenKernel`` / ``green_eval`` -- the n-dimensional kernel on a periodic
  tangential box, assembled from per-frequency vertical kernels; the
  tangential Fourier reduction turns each frequency ``xi'`` into a vertical
  problem with an extra reaction term ``y_n |xi'|^2`` whose kernel is again
  closed-form (a drifted squared-Bessel bridge).
* ``FiniteVolumeVerticalOracle`` -- an independent conservative
  finite-volume time stepper for the divergence form
  ``y^{-sigma} d(y^{1+sigma} du)``: the dual route against which the closed
  form is checked.
* ``VerticalPropagator`` / ``duhamel_solve`` -- quadrature matrices for the
  solution operator and the Duhamel representation of inhomogeneous
  solutions, with a weak-form residual battery.
* ``gaussian_verify`` -- sampling verifier for the Gaussian bound
  ``|d_tau^j d_z^beta ( z_n^{-sigma} d_s^k d_y^alpha G )|
    <= c * r^{-2k-2j-|a|-|b|} (r+sqrt(y_n))^{-|a|-|b|} |B_r(z)|^{-1}
       exp(-dist^2 / (C r^2))``  with  ``r = sqrt(s-tau)``,
  using exact kernel derivatives generated by a small term algebra.
* ``offdiag_and_lq_checks`` -- space-time L^q norms of the kernel on the
  unit interval (finite inside the admissible exponent window, divergent
  outside), the long-range off-diagonal pointwise bound, and the
  singular-integral bound ``|K| <= c / V`` with ``V`` the volume of the
  parabolic ball of radius ``D((s,y),(tau,z))``.
* ``exp_weight_decay_check`` -- the exponentially weighted L2-Linfty decay
  estimate and the monotone Lyapunov functional from its proof.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .params import DEFAULT_SEED, SigmaParam
from .geometry import (
    C_D,
    C_L,
    IntrinsicBall,
    PsiWeight,
    TimeSpacePoint,
    ball_measure,
    psi_eval,
    ref_dist,
)
from .grids import HalfSpaceGrid, SampledField
from .weighted_measure import WeightedNormSpec, weighted_norm

__all__ = [
    "C_GAUSSIAN",
    "GAUSSIAN_PREFACTOR_CAP",
    "CZO_KERNEL_CAP",
    "OFFDIAG_CAP",
    "GreenKernel",
    "GaussianFit",
    "GaussianOrderFit",
    "FiniteVolumeVerticalOracle",
    "VerticalPropagator",
    "green_vertical",
    "green_eval",
    "vertical_moment",
    "chapman_kolmogorov_gap",
    "duhamel_solve",
    "weak_residual_battery",
    "kernel_derivative",
    "gaussian_verify",
    "gaussian_fit_to_csv",
    "czo_weight_admissible",
    "czo_boundedness_scan",
    "lq_refinement_trend",
    "offdiag_and_lq_checks",
    "OffdiagReport",
    "exp_weight_decay_check",
    "ExpDecayReport",
]

# Gaussian-decay constant of the kernel bound: 32 * c_d^2 * c_L^2.
C_GAUSSIAN = 32 * C_D**2 * C_L**2

# Frozen caps for the measured prefactors of the sampled kernel bounds.  The
# measured constants land well below these for every exercised order and
# sigma; a sample exceeding the cap is counted as a violation.
GAUSSIAN_PREFACTOR_CAP = 64.0
CZO_KERNEL_CAP = 256.0
OFFDIAG_CAP = 64.0

_X_SERIES_MAX = 225.0  # switch point (yz/t^2) between series and Bessel branch


def _sigma_value(sigma):
    s = float(getattr(sigma, "sigma", sigma))
    if not s > -1.0:
        raise ValueError("sigma must exceed -1 (got %r)" % (s,))
    return s


# ---------------------------------------------------------------------------
# vertical kernel core
# ---------------------------------------------------------------------------


def _g_series(x, nu):
    """Entire series ``g(x) = sum_k x^k / (k! Gamma(k + nu + 1))``.

    Equals ``x^{-nu/2} I_nu(2 sqrt x)``; all terms are positive, so the sum
    is cancellation-free.  Intended for ``x <= _X_SERIES_MAX``.
    """
    x = np.asarray(x, dtype=float)
    term = np.full(x.shape, 1.0 / math.gamma(nu + 1.0))
    total = term.copy()
    for k in range(120):
        term = term * x / ((k + 1.0) * (k + 1.0 + nu))
        total += term
        if np.all(term <= 1e-18 * total):
            break
    return total


def _mode_core(t, y, z, sigma, mu=0.0):
    """Symmetric core ``z^{-sigma} G_mu(t, y, z)`` of the vertical kernel.

    ``G_mu`` is the kernel of ``d_t u = y u'' + (1+sigma) u' - mu^2 y u``
    (the vertical problem at tangential frequency ``mu``); ``mu = 0`` is the
    plain vertical kernel.  Closed form via the exponential change of
    variables ``u = e^{-mu y} v`` which turns the reaction problem into a
    drifted squared-Bessel evolution:

        z^{-sigma} G_mu = e^{-(1+sigma) mu t - mu (y - z)}
                          * c^{1+sigma} e^{-u-v} g(u v),
        c = 2 mu / (1 - e^{-2 mu t}),  u = c y e^{-2 mu t},  v = c z.

    The function is symmetric in ``(y, z)`` and reduces to
    ``t^{-1-sigma} e^{-(y+z)/t} g(y z / t^2)`` at ``mu = 0``.
    """
    sig = _sigma_value(sigma)
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    t, y, z = np.broadcast_arrays(t, y, z)
    if np.any(t <= 0):
        raise ValueError("time increment must be positive")
    mu = float(mu)
    b = 2.0 * mu
    if mu == 0.0:
        c = 1.0 / t
        ebt = np.ones_like(t)
        drift_log = np.zeros_like(t)
    else:
        ebt = np.exp(-b * t)
        c = b / (-np.expm1(-b * t))
        drift_log = -(1.0 + sig) * mu * t - mu * (y - z)
    u = c * y * ebt
    v = c * z
    x = u * v

    out = np.empty_like(x)
    small = x <= _X_SERIES_MAX
    if np.any(small):
        expo = drift_log[small] - u[small] - v[small]
        out[small] = (np.exp(expo) * _g_series(x[small], sig)
                      * c[small] ** (1.0 + sig))
    large = ~small
    if np.any(large):
        xl = x[large]
        w = 2.0 * np.sqrt(xl)
        expo = drift_log[large] - (np.sqrt(u[large]) - np.sqrt(v[large])) ** 2
        out[large] = (xl ** (-0.5 * sig) * special.ive(sig, w) * np.exp(expo)
                      * c[large] ** (1.0 + sig))
    return out


def green_vertical(s, y_n, tau, z_n, sigma):
    """Vertical heat kernel ``G(s, y_n, tau, z_n)`` with respect to ``dz``.

    Closed form ``(s-tau)^{-1} (z/y)^{sigma/2} e^{-(y+z)/(s-tau)}
    I_sigma(2 sqrt(yz)/(s-tau))``, evaluated in the stable core form
    ``z^sigma * _mode_core``.  Scalar or broadcastable arrays.
    """
    sig = _sigma_value(sigma)
    s_arr = np.asarray(s, dtype=float)
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(s_arr <= tau_arr):
        raise ValueError("green_vertical needs s > tau")
    y = np.asarray(y_n, dtype=float)
    z = np.asarray(z_n, dtype=float)
    if np.any(y < 0) or np.any(z < 0):
        raise ValueError("vertical coordinates must be nonnegative")
    out = z**sig * _mode_core(s_arr - tau_arr, y, z, sig)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# vertical quadrature in v = sqrt(z)
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_JACOBI_CACHE = {}


def _jacobi_rule(beta):
    """Gauss-Jacobi nodes/weights on (0, 1) for the weight ``v^beta``."""
    key = round(beta, 12)
    if key not in _JACOBI_CACHE:
        x, w = special.roots_jacobi(16, 0.0, beta)
        # map (-1, 1) with weight (1+x)^beta to (0,1) with weight v^beta
        v = 0.5 * (x + 1.0)
        _JACOBI_CACHE[key] = (v, w * 0.5 ** (beta + 1.0))
    return _JACOBI_CACHE[key]


def _integrate_vertical(smooth_fn, weight, v_hi, v_lo=0.0, n_panels=12):
    """``int z^weight * smooth_fn(z) dz`` over ``(v_lo^2, v_hi^2)``.

    Written in ``v = sqrt z``; the weight exponent must satisfy
    ``weight > -1``.  A panel touching ``v = 0`` uses a Gauss-Jacobi rule
    with weight ``v^{2*weight+1}``, the rest 16-point Gauss-Legendre.
    """
    if not weight > -1.0:
        raise ValueError("vertical quadrature needs weight > -1")
    edges = np.linspace(v_lo, v_hi, n_panels + 1)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if a == 0.0:
            beta = 2.0 * weight + 1.0
            vj, wj = _jacobi_rule(beta)
            v = b * vj
            total += b ** (beta + 1.0) * 2.0 * np.sum(wj * smooth_fn(v * v))
        else:
            v = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
            f = 2.0 * v ** (2.0 * weight + 1.0) * smooth_fn(v * v)
            total += 0.5 * (b - a) * np.sum(_GL_WEIGHTS * f)
    return total


def _kernel_window(t, y, sigma):
    """Quadrature window in ``v = sqrt z`` holding the kernel mass at
    height ``y`` (Gaussian tails below 1e-18 outside)."""
    half = (6.5 + math.sqrt(1.0 + max(sigma, 0.0))) * math.sqrt(t)
    center = math.sqrt(y)
    return max(center - half, 0.0), center + half


def vertical_moment(s, y_n, tau, sigma, moment=0, mu=0.0):
    """Quadrature value of ``int z^moment G_mu(s, y_n, tau, z) dz``."""
    sig = _sigma_value(sigma)
    if s <= tau:
        raise ValueError("vertical_moment needs s > tau")
    t = s - tau
    v_lo, v_hi = _kernel_window(t, y_n, sig)

    def smooth(z):
        return z**moment * _mode_core(t, y_n, z, sig, mu)

    return _integrate_vertical(smooth, sig, v_hi, v_lo=v_lo)


def chapman_kolmogorov_gap(s, theta, tau, y_n, z_n, sigma):
    """Relative gap ``|int G(s,y,theta,w) G(theta,w,tau,z) dw - G(s,y,tau,z)|
    / G(s,y,tau,z)`` (semigroup property of the vertical kernel)."""
    if not tau < theta < s:
        raise ValueError("intermediate time must satisfy tau < theta < s")
    sig = _sigma_value(sigma)
    direct = green_vertical(s, y_n, tau, z_n, sig)
    lo1, hi1 = _kernel_window(s - theta, y_n, sig)
    lo2, hi2 = _kernel_window(theta - tau, z_n, sig)
    v_lo, v_hi = min(lo1, lo2), max(hi1, hi2)

    def smooth(w):
        # w^sigma is the quadrature weight; the first factor carries its
        # z-argument weight inside _mode_core's z^{-sigma} normalization.
        return (_mode_core(s - theta, y_n, w, sig)
                * green_vertical(theta, w, tau, z_n, sig))

    composed = _integrate_vertical(smooth, sig, v_hi, v_lo=v_lo, n_panels=24)
    return abs(composed - direct) / abs(direct)


# ---------------------------------------------------------------------------
# n-dimensional kernel on the periodic tangential box
# ---------------------------------------------------------------------------


class GreenKernel:
    """Pointwise kernel evaluator on a periodic tangential box.

    For ``dimension >= 2`` the kernel is assembled from per-frequency
    vertical kernels,

        G(s, y, tau, z) = L^{-(n-1)} * sum_{k in Z^{n-1}}
                          cos(xi_k . (y'-z')) G_{|xi_k|}(s-tau, y_n, z_n),

    with ``xi_k = 2 pi k / L``; the truncation order grows until the last
    frequency shell contributes less than ``tail_tol`` in relative size
    (positivity of the per-mode kernels makes the shell magnitude an upper
    bound for the tail).  Evaluations are cached; the cache supports
    concurrent reads with single-writer insertion.
    """

    def __init__(self, sigma, dimension=1, tangential_modes=None, box=16.0,
                 tail_tol=1e-8):
        self.sigma = _sigma_value(sigma)
        if dimension not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        self.dimension = dimension
        self.tangential_modes = tangential_modes
        self.box = float(box)
        self.tail_tol = float(tail_tol)
        self._cache = {}
        self._lock = threading.Lock()

    def _shell(self, order, t, dy, y_n, z_n):
        """Total contribution and magnitude of the frequency shell
        ``max_i |k_i| = order``."""
        step = 2.0 * math.pi / self.box
        if self.dimension == 2:
            ks = [(order,)] if order else [(0,)]
        else:
            ks = [(a, b)
                  for a in range(-order, order + 1)
                  for b in range(-order, order + 1)
                  if max(abs(a), abs(b)) == order]
        value = 0.0
        magnitude = 0.0
        for k in ks:
            kv = np.asarray(k, dtype=float)
            mu = step * math.sqrt(float(kv @ kv))
            core = float(_mode_core(t, y_n, z_n, self.sigma, mu))
            mode = z_n**self.sigma * core
            phase = math.cos(step * float(kv @ dy))
            mult = 2.0 if (self.dimension == 2 and order > 0) else 1.0
            value += mult * phase * mode
            magnitude += mult * mode
        return value, magnitude

    def __call__(self, a, b):
        if not isinstance(a, TimeSpacePoint) or not isinstance(b, TimeSpacePoint):
            raise TypeError("green kernel evaluates TimeSpacePoint pairs")
        if a.s <= b.s:
            raise ValueError("first argument must carry the later time")
        if a.y.shape != (self.dimension,) or b.y.shape != (self.dimension,):
            raise ValueError("points must match the kernel dimension")
        t = a.s - b.s
        y_n, z_n = a.y[-1], b.y[-1]
        dy = a.y[:-1] - b.y[:-1]
        key = (round(t, 14), round(y_n, 14), round(z_n, 14),
               tuple(np.round(dy, 14)))
        hit = self._cache.get(key)
        if hit is not None:
            return hit

        if self.dimension == 1:
            value = float(green_vertical(a.s, y_n, b.s, z_n, self.sigma))
        else:
            total = 0.0
            mag_total = 0.0
            max_order = (self.tangential_modes
                         if self.tangential_modes is not None else 512)
            converged = False
            for order in range(max_order + 1):
                value, magnitude = self._shell(order, t, dy, y_n, z_n)
                total += value
                mag_total += magnitude
                if order >= 2 and magnitude <= self.tail_tol * mag_total:
                    converged = True
                    break
            if not converged:
                raise ValueError(
                    "truncation insufficient: frequency-shell tail above %g "
                    "after %d shells" % (self.tail_tol, max_order))
            value = total / self.box ** (self.dimension - 1)
        with self._lock:
            self._cache[key] = value
        return value


def green_eval(a, b, sigma, tangential_modes=None, box=16.0, tail_tol=1e-8):
    """Kernel value ``G(a, b)`` for time-space points ``a`` (later) and
    ``b`` (earlier); dimension inferred from the points."""
    n = a.y.shape[0]
    kernel = GreenKernel(sigma, dimension=n, tangential_modes=tangential_modes,
                         box=box, tail_tol=tail_tol)
    return kernel(a, b)


# ---------------------------------------------------------------------------
# finite-volume oracle (independent dual route)
# ---------------------------------------------------------------------------


class FiniteVolumeVerticalOracle:
    """Conservative finite-volume stepper for ``y^{-sigma} d(y^{1+sigma} du)``.

    Cell faces sit on a graded mesh (uniform in ``sqrt y``), unknowns are
    cell values at face midpoints, fluxes ``y^{1+sigma} du/dy`` are evaluated
    at the faces, and the flux at ``y = 0`` vanishes identically (as does
    the weight ``y^{1+sigma}``).  Time stepping is Crank-Nicolson, which
    preserves the discrete weighted mass ``sum_i m_i u_i`` exactly for
    ``mu = 0``.  An optional reaction ``-mu^2 * (cell average of y) * u``
    models the tangential frequency problems.
    """

    def __init__(self, sigma, z_max=24.0, n_cells=1200, mu=0.0):
        self.sigma = _sigma_value(sigma)
        self.mu = float(mu)
        zeta_faces = np.linspace(0.0, math.sqrt(z_max), n_cells + 1)
        self.faces = zeta_faces**2
        self.centers = 0.5 * (self.faces[:-1] + self.faces[1:])
        sig = self.sigma
        self.cell_mass = np.diff(self.faces ** (1.0 + sig)) / (1.0 + sig)
        cell_m1 = np.diff(self.faces ** (2.0 + sig)) / (2.0 + sig)
        self.cell_height = cell_m1 / self.cell_mass  # weighted mean of y

        # flux coefficient at interior faces: y^{1+sigma} / gap between
        # neighbouring cell centers
        gaps = np.diff(self.centers)
        self.face_coef = self.faces[1:-1] ** (1.0 + sig) / gaps

    def _operator_diagonals(self):
        m = self.cell_mass
        c = self.face_coef
        n = m.size
        lower = np.zeros(n)
        upper = np.zeros(n)
        diag = np.zeros(n)
        lower[1:] = c / m[1:]
        upper[:-1] = c / m[:-1]
        diag[:-1] -= c / m[:-1]
        diag[1:] -= c / m[1:]
        diag -= self.mu**2 * self.cell_height
        return lower, diag, upper

    def evolve(self, u, t, n_steps=256):
        """Crank-Nicolson evolution of cell values ``u`` over time ``t``."""
        from scipy.linalg import solve_banded

        lower, diag, upper = self._operator_diagonals()
        dt = t / n_steps
        # banded matrix for (I - dt/2 A)
        ab = np.zeros((3, diag.size))
        ab[0, 1:] = -0.5 * dt * upper[:-1]
        ab[1] = 1.0 - 0.5 * dt * diag
        ab[2, :-1] = -0.5 * dt * lower[1:]
        u = np.asarray(u, dtype=float).copy()
        for _ in range(n_steps):
            rhs = u + 0.5 * dt * (
                diag * u
                + np.concatenate(([0.0], lower[1:] * u[:-1]))
                + np.concatenate((upper[:-1] * u[1:], [0.0])))
            u = solve_banded((1, 1), ab, rhs)
        return u

    def kernel_column(self, t, z, warm_fraction=0.125, n_steps=256):
        """Kernel values ``G(t, centers, 0, z)``: warm start from the closed
        form at ``t0 = warm_fraction * t`` (the initial spike is too sharp
        for any fixed mesh), then finite-volume evolution to ``t``.  The
        warm start only seeds a *short-time* profile; the remaining 7/8 of
        the evolution is pure finite volume, so agreement at time ``t``
        still cross-validates the closed form against the discretized
        divergence-form operator."""
        t0 = warm_fraction * t
        z_arr = np.full_like(self.centers, z)
        u0 = z_arr**self.sigma * _mode_core(
            t0, self.centers, z_arr, self.sigma, mu=self.mu)
        return self.evolve(u0, t - t0, n_steps=n_steps)

    def weighted_mass(self, u):
        return float(np.sum(self.cell_mass * np.asarray(u)))


# ---------------------------------------------------------------------------
# solution-operator matrices and Duhamel representation
# ---------------------------------------------------------------------------


_PROPAGATOR_CACHE = {}
_PROPAGATOR_LOCK = threading.Lock()


def _shared_propagator(zeta_nodes, sigma, mu=0.0):
    """Process-wide propagator pool so repeated solves on the same mesh
    reuse the (expensive) quadrature matrices."""
    nodes = np.asarray(zeta_nodes, dtype=float)
    key = (nodes.tobytes(), round(float(sigma), 14), round(float(mu), 14))
    with _PROPAGATOR_LOCK:
        hit = _PROPAGATOR_CACHE.get(key)
        if hit is None:
            hit = VerticalPropagator(nodes, sigma, mu=mu)
            _PROPAGATOR_CACHE[key] = hit
    return hit


class VerticalPropagator:
    """Quadrature matrices for the vertical solution operator.

    ``matrix(t)[i, j]`` approximates the action of the kernel integral
    ``u(t, y_i) = int G_mu(t, y_i, z) u0(z) dz`` on nodal data: initial
    values on the graded mesh are extended by a degree-5 spline in
    ``sqrt z`` (exact for polynomials of degree <= 2 in ``z``, and
    polynomially extrapolated above the mesh top), and each row integrates
    the kernel against that extension over its Gaussian window
    (Gauss-Jacobi panel at the boundary cell, Gauss-Legendre elsewhere).
    Matrices are cached per time increment; the cache supports concurrent
    reads with single-writer insertion.
    """

    def __init__(self, zeta_nodes, sigma, mu=0.0):
        from scipy.interpolate import make_interp_spline

        self.sigma = _sigma_value(sigma)
        self.mu = float(mu)
        self.zeta_nodes = np.asarray(zeta_nodes, dtype=float)
        self.y_nodes = self.zeta_nodes**2
        self._basis = make_interp_spline(self.zeta_nodes,
                                         np.eye(self.zeta_nodes.size), k=5)
        self._mats = {}
        self._lock = threading.Lock()

    def matrix(self, t):
        key = round(float(t), 14)
        hit = self._mats.get(key)
        if hit is not None:
            return hit
        mat = self._assemble(float(t))
        with self._lock:
            self._mats[key] = mat
        return mat

    def _assemble(self, t):
        if t <= 0:
            raise ValueError("propagator time increment must be positive")
        sig, mu = self.sigma, self.mu
        m = self.y_nodes.size
        beta = 2.0 * sig + 1.0
        vj, wj = _jacobi_rule(beta)

        rows_pts = []
        rows_wts = []
        for i in range(m):
            v_lo, v_hi = _kernel_window(t, self.y_nodes[i], sig)
            edges = np.linspace(v_lo, v_hi, 13)
            pts = []
            wts = []
            for a, b in zip(edges[:-1], edges[1:]):
                if a == 0.0:
                    v = b * vj
                    core = _mode_core(t, self.y_nodes[i], v * v, sig, mu)
                    pts.append(v)
                    wts.append(b ** (beta + 1.0) * 2.0 * wj * core)
                else:
                    v = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
                    core = _mode_core(t, self.y_nodes[i], v * v, sig, mu)
                    w = 0.5 * (b - a) * _GL_WEIGHTS * 2.0 * v ** (2.0 * sig + 1.0) * core
                    pts.append(v)
                    wts.append(w)
            rows_pts.append(np.concatenate(pts))
            rows_wts.append(np.concatenate(wts))

        counts = [p.size for p in rows_pts]
        all_pts = np.concatenate(rows_pts)
        design = self._basis(all_pts)  # (total points, m)
        mat = np.empty((m, m))
        start = 0
        for i, cnt in enumerate(counts):
            block = design[start:start + cnt]
            mat[i] = rows_wts[i] @ block
            start += cnt
        return mat


def _growth_check(grid, values0, horizon):
    """Reject initial data growing exponentially fast in y: the kernel
    decays like ``exp(-z/s)``, so the representation integral needs the
    data to grow slower than ``exp(z/S)``.  Estimated from the log-slope
    between the 3/4 node and the top node (floored to ignore roundoff-level
    values); polynomial growth passes, rate-``exp(y)`` data does not."""
    y = grid.y_nodes
    k3 = int(0.75 * (y.size - 1))
    scale = float(np.max(np.abs(values0)))
    if scale == 0.0:
        return
    floor = 1e-12 * scale
    top = max(float(np.max(np.abs(values0[..., -1]))), floor)
    ref = max(float(np.max(np.abs(values0[..., k3]))), floor)
    rate = (math.log(top) - math.log(ref)) / (y[-1] - y[k3])
    if rate > 0.5 / horizon:
        raise ValueError(
            "u0 growth check failed: exponential rate %.3g exceeds 0.5/S; "
            "the representation integral may diverge" % rate)


def _tangential_frequencies(grid):
    """Per-mode |xi'| magnitudes arranged on the tangential FFT axes."""
    k = grid.tangential_wavenumbers()
    if grid.n == 2:
        return np.abs(k)
    return np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)


def duhamel_solve(u0, f, sigma, horizon=None):
    """Represented solution ``u(s) = e^{sL} u0 + int_0^s e^{(s-tau)L} f dtau``.

    ``u0`` supplies the initial data (its time-slice 0) and the grid;
    ``f`` is the source sampled on the same grid (or ``None``).  The source
    integral uses the midpoint rule in ``tau`` with level-averaged source
    values; the integrand ``tau -> e^{(s-tau)L} f(tau)`` is smooth for
    grid-sampled sources, so no singularity handling is required.  Returns
    a :class:`SampledField`; a tangential tilt on ``u0`` passes through
    unchanged (tangentially affine data is stationary).
    """
    sig = _sigma_value(sigma)
    grid = u0.grid
    if horizon is not None and not math.isclose(horizon, grid.s_max,
                                                rel_tol=1e-12):
        raise ValueError("horizon must match the grid time extent")
    if f is not None:
        if f.grid is not grid and f.grid.fingerprint() != grid.fingerprint():
            raise ValueError("source and initial data live on different grids")
        if f.tilt is not None and np.any(f.tilt != 0.0):
            raise ValueError("source tilt is not supported")
    init = u0.values[0]
    _growth_check(grid, init, grid.s_max)

    n_time = grid.n_time
    ds = grid.ds
    out = np.empty(grid.shape)
    out[0] = init

    if grid.n == 1:
        props = {0.0: _shared_propagator(grid.zeta_nodes, sig)}

        def apply_mode(t, data):
            return props[0.0].matrix(t) @ data

        init_m = init
        src_m = None if f is None else f.values
    else:
        freqs = _tangential_frequencies(grid)
        init_m = np.fft.fftn(init, axes=tuple(range(grid.n - 1)))
        src_m = (None if f is None
                 else np.fft.fftn(f.values, axes=tuple(range(1, grid.n))))
        props = {}
        flat_freqs = np.round(freqs, 12)
        for mu in np.unique(flat_freqs):
            props[mu] = _shared_propagator(grid.zeta_nodes, sig, mu=mu)

        def apply_mode(t, data):
            res = np.empty_like(data)
            it = np.ndindex(data.shape[:-1])
            for idx in it:
                mu = flat_freqs[idx]
                res[idx] = props[mu].matrix(t) @ data[idx]
            return res

    for j in range(1, n_time + 1):
        s_j = j * ds
        acc = apply_mode(s_j, init_m)
        if src_m is not None:
            for k in range(j):
                mid = s_j - (k + 0.5) * ds
                f_mid = 0.5 * (src_m[k] + src_m[k + 1])
                acc = acc + ds * apply_mode(mid, f_mid)
        if grid.n == 1:
            out[j] = acc
        else:
            out[j] = np.real(np.fft.ifftn(acc,
                                          axes=tuple(range(grid.n - 1))))
    return SampledField(grid, out, tilt=None if u0.tilt is None
                        else u0.tilt.copy(), name="duhamel")


def weak_residual_battery(u, f, sigma, count=10, seed=None,
                          boundary_fraction=0.0):
    """Weak-form residuals of ``u`` against smooth compactly supported test
    functions: for each test function ``phi`` (space bump x time bump
    vanishing at both ends) the functional

        R(phi) = int [ y^sigma d_s u phi + y^{1+sigma} grad u . grad phi
                       - y^sigma f phi ]

    is evaluated with the grid quadrature and normalized by the size of its
    three contributions.  Returns the list of relative residuals.

    ``boundary_fraction`` is the probability that a bump is centred on the
    degeneracy plane ``y_n = 0``; such test functions are admissible (no
    vanishing at the boundary is required) because the ``y^{1+sigma}`` weight
    already kills the boundary flux.
    """
    from .geometry import CutoffSpec, build_cutoff

    sig = _sigma_value(sigma)
    grid = u.grid
    rng = np.random.default_rng(DEFAULT_SEED if seed is None else seed)
    pts = grid.spatial_points()
    w_sig = grid.vertical_weights(sig)
    w_one = grid.vertical_weights(1.0 + sig)
    tang = grid.tangential_weight() ** (grid.n - 1)
    t_wts = grid.time_weights()

    du_ds = u.derivative(k=1)
    grads_u = u.gradient()
    f_vals = None if f is None else f.values

    def volume(kern, wts):
        spatial = np.sum(kern * wts, axis=-1)
        while spatial.ndim > 1:
            spatial = spatial.sum(axis=-1)
        return float(np.sum(spatial * t_wts) * tang)

    time_shape = (-1,) + (1,) * grid.n
    residuals = []
    for _ in range(count):
        center = np.zeros(grid.n)
        on_boundary = boundary_fraction > 0 \
            and rng.uniform() < boundary_fraction
        if on_boundary:
            center[-1] = 0.0
        else:
            center[-1] = rng.uniform(0.3, 0.7) * grid.y_max
        if grid.n > 1:
            # keep the bump support away from the periodic seam
            center[:-1] = rng.uniform(0.3, 0.7, grid.n - 1) \
                * grid.tangential_extent
        scale = rng.uniform(0.15, 0.3) * math.sqrt(grid.y_max)
        bump = build_cutoff(CutoffSpec(center, scale))
        phi_space = bump(pts)
        x = grid.times / grid.s_max
        phi_time = np.sin(math.pi * x) ** 2

        phi = phi_time.reshape(time_shape) * phi_space
        # spatial gradient of phi (the bump is time-independent)
        phi_field = SampledField(grid, np.broadcast_to(
            phi_space, grid.shape).copy())
        grads_phi = phi_field.gradient()

        term_time = volume(du_ds * phi, w_sig)
        term_grad = sum(
            volume(gu * gp * phi_time.reshape(time_shape), w_one)
            for gu, gp in zip(grads_u, grads_phi))
        term_src = 0.0 if f_vals is None else volume(f_vals * phi, w_sig)
        scale_terms = abs(term_time) + abs(term_grad) + abs(term_src)
        resid = abs(term_time + term_grad - term_src)
        residuals.append(resid / max(scale_terms, 1e-30))
    return residuals


# ---------------------------------------------------------------------------
# exact kernel derivatives (term algebra)
# ---------------------------------------------------------------------------


def _derive_terms(terms, var):
    """One derivative of a term list; terms are (coef, a, b, c, m) encoding
    ``coef * t^a y^b z^c E g_m`` with ``E = exp(-(y+z)/t)`` and
    ``g_m(x) = sum_k x^k / (k! Gamma(k + sigma + m + 1))`` at ``x = yz/t^2``.
    """
    out = []
    for (coef, a, b, c, m) in terms:
        if var == "y":
            if b:
                out.append((coef * b, a, b - 1, c, m))
            out.append((-coef, a - 1, b, c, m))
            out.append((coef, a - 2, b, c + 1, m + 1))
        elif var == "z":
            if c:
                out.append((coef * c, a, b, c - 1, m))
            out.append((-coef, a - 1, b, c, m))
            out.append((coef, a - 2, b + 1, c, m + 1))
        elif var == "t":
            if a:
                out.append((coef * a, a - 1, b, c, m))
            out.append((coef, a - 2, b + 1, c, m))
            out.append((coef, a - 2, b, c + 1, m))
            out.append((-2.0 * coef, a - 3, b + 1, c + 1, m + 1))
        else:
            raise ValueError(var)
    merged = {}
    for (coef, a, b, c, m) in out:
        key = (a, b, c, m)
        merged[key] = merged.get(key, 0.0) + coef
    return [(coef, a, b, c, m) for (a, b, c, m), coef in merged.items()
            if coef != 0.0]


def _e_gm(t, y, z, nu):
    """Stable product ``exp(-(y+z)/t) * g(yz/t^2)`` with ``g`` of order nu."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    t, y, z = np.broadcast_arrays(t, y, z)
    x = y * z / t**2
    out = np.empty_like(x)
    small = x <= _X_SERIES_MAX
    if np.any(small):
        out[small] = (np.exp(-(y[small] + z[small]) / t[small])
                      * _g_series(x[small], nu))
    large = ~small
    if np.any(large):
        xl = x[large]
        out[large] = (xl ** (-0.5 * nu) * special.ive(nu, 2.0 * np.sqrt(xl))
                      * np.exp(-(np.sqrt(y[large]) - np.sqrt(z[large])) ** 2
                               / t[large]))
    return out


def kernel_derivative(k, alpha, j, beta, sigma):
    """Exact derivative ``d_tau^j d_z^beta ( z^{-sigma} d_s^k d_y^alpha G )``
    of the vertical kernel as a callable ``(t, y, z) -> value`` with
    ``t = s - tau``; ``alpha``/``beta`` are vertical derivative orders.

    Built symbolically from the core ``z^{-sigma} G = t^{-1-sigma} E g``;
    each time derivative in ``tau`` contributes a sign flip.
    """
    sig = _sigma_value(sigma)
    for name, order in (("k", k), ("alpha", alpha), ("j", j), ("beta", beta)):
        if order < 0 or order != int(order):
            raise ValueError("derivative order %s must be a nonneg integer"
                             % name)
    terms = [(1.0, -1.0 - sig, 0.0, 0.0, 0)]
    for _ in range(int(k) + int(j)):
        terms = _derive_terms(terms, "t")
    for _ in range(int(alpha)):
        terms = _derive_terms(terms, "y")
    for _ in range(int(beta)):
        terms = _derive_terms(terms, "z")
    sign = (-1.0) ** int(j)

    def evaluate(t, y, z):
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        t, y, z = np.broadcast_arrays(t, y, z)
        total = np.zeros_like(t)
        for (coef, a, b, c, m) in terms:
            piece = coef * t**a * _e_gm(t, y, z, sig + m)
            if b:
                piece = piece * y**b
            if c:
                piece = piece * z**c
            total += piece
        out = sign * total
        return out if out.ndim else float(out)

    evaluate.terms = tuple(terms)
    return evaluate


# ---------------------------------------------------------------------------
# Gaussian-estimate verifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianOrderFit:
    """Per-(regime, order) row of the Gaussian-bound verification."""

    regime: str
    k: int
    j: int
    abs_alpha: int
    abs_beta: int
    c_fit: float
    C_fit: float
    samples: int
    violations: int


@dataclass(frozen=True)
class GaussianFit:
    """Outcome of :func:`gaussian_verify`.

    ``c_fit`` is the largest measured prefactor over all samples and orders,
    ``C_fit`` the decay constant fitted from the log-linear regression of
    the normalized kernel size against ``dist^2/(s-tau)`` (the paper bound
    holds with room iff ``C_fit <= C_paper``); ``boundary_r2`` is the
    regression quality restricted to the near-boundary regime, where the
    decay must scale with the intrinsic (not Euclidean) distance.
    """

    sigma: float
    c_fit: float
    C_fit: float
    paper_constant: float
    sample_count: int
    excluded: int
    violations: int
    boundary_r2: float
    boundary_slope: float
    rows: tuple
    prefactor_spread: tuple

    @property
    def bound_holds(self):
        return (self.violations == 0 and np.isfinite(self.c_fit)
                and 0.0 < self.C_fit <= self.paper_constant)


def _regression(x, y):
    """Least-squares line fit returning (slope, intercept, r_squared)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def _sample_regime(rng, regime, count):
    """Stratified (t, y, z) tuples; a quarter of each regime sits exactly on
    the diagonal y = z to exercise the on-diagonal reduction."""
    t = np.exp(rng.uniform(math.log(1e-3), 0.0, count))
    if regime == "boundary":
        y = t * rng.uniform(0.0, 4.0, count)
        z = t * rng.uniform(0.0, 4.0, count)
    elif regime == "interior":
        zeta_y = rng.uniform(1.0, 3.5, count)
        zeta_z = zeta_y + rng.uniform(-3.0, 3.0, count) * np.sqrt(t)
        y = np.maximum(zeta_y, 2.0 * np.sqrt(t)) ** 2
        z = np.maximum(zeta_z, 2.0 * np.sqrt(t)) ** 2
    elif regime == "mixed":
        y = t * rng.uniform(0.0, 2.0, count)
        z = rng.uniform(0.8, 3.0, count) ** 2
    else:
        raise ValueError(regime)
    diag = rng.uniform(0.0, 1.0, count) < 0.25
    z = np.where(diag, y, z)
    return t, y, z


def gaussian_verify(sigma, deriv_orders=None, samples_per_regime=200,
                    seed=None):
    """Sampled verification of the Gaussian kernel bound (vertical kernel).

    For each derivative order ``(k, alpha, j, beta)`` and each sample the
    normalized prefactor

        Q = |LHS| * r^{2k+2j+a+b} * (r + sqrt y)^{a+b} * |B_r(z)|_sigma
            * exp(+dist(y,z)^2 / (C_paper * r^2)),   r = sqrt(s-tau),

    is evaluated with exact kernel derivatives; the bound holds at the
    sample iff ``Q`` stays below the frozen cap.  ``C_fit`` comes from
    regressing ``log(|LHS| * powers * |B|)`` against ``dist^2/(s-tau)``
    over the decaying samples.  Kernel values below the floating-point
    floor are excluded and counted.
    """
    sig = _sigma_value(sigma)
    if deriv_orders is None:
        deriv_orders = [(0, 0, 0, 0), (1, 0, 0, 0), (0, 1, 0, 0),
                        (0, 0, 1, 0), (0, 0, 0, 1), (0, 1, 0, 1)]
    for (k, a, j, b) in deriv_orders:
        if k + a + j + b > 2:
            raise ValueError("derivative orders beyond total order 2 are "
                             "not exercised at desk scale")
    if samples_per_regime < 1:
        raise ValueError("samples_per_regime must be positive")
    rng = np.random.default_rng(DEFAULT_SEED if seed is None else seed)

    derivs = {(k, a, j, b): kernel_derivative(k, a, j, b, sig)
              for (k, a, j, b) in deriv_orders}

    rows = []
    all_L = []
    all_X = []
    excluded = 0
    total = 0
    violations_total = 0
    c_fit_global = 0.0
    spread_alt = np.zeros(3)

    for regime in ("boundary", "interior", "mixed"):
        t_s, y_s, z_s = _sample_regime(rng, regime, samples_per_regime)
        r = np.sqrt(t_s)
        dist = ref_dist(y_s[:, None], z_s[:, None])
        X = dist**2 / t_s
        balls_z = np.array([ball_measure(IntrinsicBall([zz], rr), sig)
                            for zz, rr in zip(z_s, r)])
        balls_y = np.array([ball_measure(IntrinsicBall([yy], rr), sig)
                            for yy, rr in zip(y_s, r)])
        for (k, a, j, b), fn in derivs.items():
            lhs = np.abs(fn(t_s, y_s, z_s))
            keep = lhs > 1e-280
            excluded += int(np.count_nonzero(~keep))
            total += int(np.count_nonzero(keep))
            pw = (r ** (2 * k + 2 * j + a + b)
                  * (r + np.sqrt(y_s)) ** (a + b))
            base = lhs[keep] * pw[keep] * balls_z[keep]
            Q = base * np.exp(X[keep] / C_GAUSSIAN)
            c_fit = float(np.max(Q, initial=0.0))
            c_fit_global = max(c_fit_global, c_fit)
            nviol = int(np.count_nonzero(Q > GAUSSIAN_PREFACTOR_CAP))
            violations_total += nviol

            # alternative prefactor combinations (point swaps)
            pw_z = (r ** (2 * k + 2 * j + a + b)
                    * (r + np.sqrt(z_s)) ** (a + b))
            for idx, alt in enumerate((
                    lhs[keep] * pw_z[keep] * balls_z[keep],
                    lhs[keep] * pw[keep] * balls_y[keep],
                    lhs[keep] * pw_z[keep] * balls_y[keep])):
                qa = alt * np.exp(X[keep] / C_GAUSSIAN)
                spread_alt[idx] = max(spread_alt[idx],
                                      float(np.max(qa, initial=0.0)))

            decaying = keep & (X > 0.25)
            logs = np.log(np.maximum(lhs * pw * balls_z, 1e-300))
            if np.count_nonzero(decaying) >= 8:
                slope, _, _ = _regression(X[decaying], logs[decaying])
                C_fit_row = -1.0 / slope if slope < 0 else math.inf
            else:
                C_fit_row = math.nan
            rows.append(GaussianOrderFit(regime, k, j, a, b, c_fit,
                                         C_fit_row,
                                         int(np.count_nonzero(keep)), nviol))
            if (k, a, j, b) == (0, 0, 0, 0):
                all_L.extend(logs[keep])
                all_X.extend(X[keep])

    all_X = np.asarray(all_X)
    all_L = np.asarray(all_L)
    tail = all_X > 0.25
    if np.count_nonzero(tail) >= 8:
        slope, _, _ = _regression(all_X[tail], all_L[tail])
        C_fit = -1.0 / slope if slope < 0 else math.inf
    else:
        C_fit = math.nan

    # Boundary-regime decay law: pin one point on the boundary and sweep
    # the other along the vertical ray z = O(t).  In this regime the
    # squared intrinsic distance grows like the *Euclidean* separation
    # (dist(0, z)^2 = z/4), so a clean linear law of log(kernel * ball)
    # against dist^2/(s-tau) is exactly the intrinsic-scaling signature;
    # Euclidean-squared scaling would bend the plot into a square root.
    n_ray = max(64, samples_per_regime // 2)
    t_ray = np.exp(rng.uniform(math.log(1e-3), 0.0, n_ray))
    x_tgt = rng.uniform(0.5, 60.0, n_ray)
    z_ray = 4.0 * x_tgt * t_ray
    y_ray = np.zeros(n_ray)
    core0 = derivs.get((0, 0, 0, 0))
    if core0 is None:
        core0 = kernel_derivative(0, 0, 0, 0, sig)
    lhs_ray = np.abs(core0(t_ray, y_ray, z_ray))
    balls_ray = np.array([ball_measure(IntrinsicBall([zz], rr), sig)
                          for zz, rr in zip(z_ray, np.sqrt(t_ray))])
    X_ray = ref_dist(y_ray[:, None], z_ray[:, None])**2 / t_ray
    ray_keep = lhs_ray > 1e-280
    if np.count_nonzero(ray_keep) >= 8:
        b_slope, _, b_r2 = _regression(
            X_ray[ray_keep],
            np.log(lhs_ray[ray_keep] * balls_ray[ray_keep]))
    else:
        b_slope, b_r2 = math.nan, math.nan

    spread = tuple(float(s / c_fit_global) for s in spread_alt)
    return GaussianFit(sigma=sig, c_fit=c_fit_global, C_fit=float(C_fit),
                       paper_constant=float(C_GAUSSIAN),
                       sample_count=total, excluded=excluded,
                       violations=violations_total,
                       boundary_r2=b_r2, boundary_slope=b_slope,
                       rows=tuple(rows), prefactor_spread=spread)


def gaussian_fit_to_csv(fit):
    """Serialize the per-(regime, order) rows of a :class:`GaussianFit`."""
    lines = ["regime,k,j,abs_alpha,abs_beta,c_fit,C_fit,samples,violations"]
    for row in fit.rows:
        lines.append("%s,%d,%d,%d,%d,%.12g,%.12g,%d,%d" % (
            row.regime, row.k, row.j, row.abs_alpha, row.abs_beta,
            row.c_fit, row.C_fit, row.samples, row.violations))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# singular-integral exponent predicate and L2 boundedness scan
# ---------------------------------------------------------------------------


def czo_weight_admissible(l, k, alpha_total):
    """Exponent predicate for the weighted-derivative kernels
    ``z^{-sigma} y^l d_s^k d_y^alpha G``: cancellation (and hence L^2 to L^p
    boundedness of f -> y^l d_s^k d_y^alpha u) holds iff
    ``l - k - |alpha| == -1`` and ``2l - |alpha| <= 0``."""
    return (l - k - alpha_total == -1) and (2 * l - alpha_total <= 0)


def czo_boundedness_scan(sigma, grid=None, seed=None):
    """Measured L^2(L x mu_sigma) operator ratios for the admissible
    weighted-derivative maps ``f -> y^l d_s^k d_y^alpha u`` on random
    smooth sources, for every candidate exponent triple.

    Returns (admissible_triples, ratios) where ratios maps each admissible
    ``(l, k, |alpha|)`` to ``norm(y^l d^k d^alpha u) / norm(f)``.
    """
    sig = _sigma_value(sigma)
    candidates = [(l, k, a) for l in (0.0, 0.5, 1.0) for k in (0, 1)
                  for a in (0, 1, 2)]
    admissible = [c for c in candidates if czo_weight_admissible(*c)]

    if grid is None:
        grid = HalfSpaceGrid(n=1, s_max=1.0, n_time=40, zeta_max=4.0,
                             n_vertical=96)
    rng = np.random.default_rng(DEFAULT_SEED if seed is None else seed)
    S, Y = np.meshgrid(grid.times, grid.y_nodes, indexing="ij")
    f_vals = np.zeros(grid.shape)
    for _ in range(3):
        c0 = rng.uniform(0.5, 4.0)
        w0 = rng.uniform(0.3, 1.0)
        amp = rng.uniform(-1.0, 1.0)
        f_vals += amp * np.exp(-((Y - c0) / w0) ** 2) * np.sin(
            math.pi * rng.uniform(0.5, 2.0) * S / grid.s_max)
    f_field = SampledField(grid, f_vals)
    zero = SampledField(grid, np.zeros(grid.shape))
    u = duhamel_solve(zero, f_field, sig)

    spec = WeightedNormSpec(exponent=2, weight=sig, region="spacetime")
    denom = weighted_norm(f_field, spec)
    ratios = {}
    for (l, k, a) in admissible:
        vals = u.derivative(k=k, alpha=(a,))
        weighted = grid.y_nodes**l * vals
        num = weighted_norm(SampledField(grid, weighted), spec)
        ratios[(l, k, a)] = float(num / denom)
    return admissible, ratios


# ---------------------------------------------------------------------------
# L^q window and off-diagonal checks (unit-interval configuration)
# ---------------------------------------------------------------------------


def _lq_time_slice(sigma, l, alpha, q, t, y, deriv_fn):
    """Inner spatial integral ``int |y^l d^alpha G(t, y, 0, z)|^q dz``
    written with the z-weight ``z^{sigma q}`` pulled out for the boundary
    quadrature panel."""
    sig = _sigma_value(sigma)
    v_lo, v_hi = _kernel_window(t, y, sig)

    def smooth(z):
        core = deriv_fn(t, y, z)  # z^{-sigma} d^alpha G
        return np.abs(y**l * core) ** q

    return _integrate_vertical(smooth, sig * q, v_hi, v_lo=v_lo, n_panels=20)


def lq_refinement_trend(sigma, l, alpha, q, levels=5, interval=(0.0, 1.0)):
    """Space-time L^q norm of ``y^l d_y^alpha G(1, y, tau, z)`` in
    ``(tau, z)`` at a ladder of probe heights ``y = 4^{-level}`` descending
    toward the boundary.

    At any fixed height the integral is finite; the admissible exponent
    window governs whether the values stay bounded as the probe approaches
    the boundary (which a refining mesh resolves ever more closely).
    Inside the window the ladder settles, outside it grows geometrically.
    Returns the list of values (one per level, boundary-most last) and the
    verdict string "finite" or "divergent".
    """
    sig = _sigma_value(sigma)
    if tuple(interval) != (0.0, 1.0):
        raise ValueError("L^q checks are calibrated on the unit interval")
    if q < 1:
        raise ValueError("q must be at least 1")
    if sig * q <= -1.0:
        raise ValueError("sigma*q must exceed -1 for the spatial integral")
    if levels < 2:
        raise ValueError("the refinement trend needs at least 2 levels")
    deriv_fn = kernel_derivative(0, alpha, 0, 0, sig)

    values = []
    for level in range(1, levels + 1):
        probe = 4.0 ** (-level)
        # Integrate the time slices over s - tau in (t_min, 1] by
        # per-octave Gauss-Legendre; below t_min = probe/256 the slice is
        # deep in the interior-regime tail and contributes negligibly.
        t_min = probe / 256.0
        total = 0.0
        hi = 1.0
        while hi > t_min:
            lo = max(0.5 * hi, t_min)
            nodes = 0.5 * (hi - lo) * _GL_NODES + 0.5 * (hi + lo)
            wts = 0.5 * (hi - lo) * _GL_WEIGHTS
            for t_val, w_val in zip(nodes, wts):
                total += w_val * _lq_time_slice(
                    sig, l, alpha, q, t_val, probe, deriv_fn)
            hi = lo
        values.append(total ** (1.0 / q))

    ratio = values[-1] / values[-2]
    verdict = "finite" if ratio <= 1.05 else "divergent"
    return values, verdict


def _parabolic_ball_volume(s, y, radius_sq, sigma):
    """Volume ``(L x mu_sigma)(B^D_R(s, y))`` of a parabolic ball: the time
    slices are intrinsic balls of radius ``sqrt(R^2 - |s - tau|)``."""
    nodes = 0.5 * (_GL_NODES + 1.0)  # (0,1)
    wts = 0.5 * _GL_WEIGHTS
    total = 0.0
    for x, w in zip(nodes, wts):
        u = radius_sq * x
        total += w * ball_measure(IntrinsicBall([y], math.sqrt(u)), sigma)
    return 2.0 * radius_sq * total


@dataclass(frozen=True)
class OffdiagReport:
    """Outcome of :func:`offdiag_and_lq_checks`."""

    sigma: float
    lq_mass_value: float
    lq_inside_values: tuple
    lq_inside_verdict: str
    lq_outside_values: tuple
    lq_outside_verdict: str
    lq_dual_ratios: tuple
    offdiag_max: float
    offdiag_samples: int
    czo_max: float
    czo_samples: int
    q_dual: float | None
    q_dual_admissible: bool | None

    @property
    def passed(self):
        return (self.lq_inside_verdict == "finite"
                and self.lq_outside_verdict == "divergent"
                and self.offdiag_max <= OFFDIAG_CAP
                and self.czo_max <= CZO_KERNEL_CAP)


def offdiag_and_lq_checks(sigma, p=None, interval=(0.0, 1.0), seed=None,
                          samples=100):
    """Unit-interval kernel-bound battery.

    * L^q window: the space-time L^1 norm of the kernel equals the time
      factor exactly (mass conservation); for the admissible pair
      ``(l, |alpha|) = (1/2, 1)`` the L^q integral converges for q inside
      the window ``q < (n+1)/(n+|alpha|-l)`` and diverges at 110% of the
      window edge.
    * Dual-side L^q bound with the extra ``z^sigma`` factor for negative
      sigma near the boundary: the measured-to-model ratios are reported.
    * Long-range off-diagonal pointwise bound with decay ``exp(-dist/C)``.
    * Singular-kernel bound ``|z^{-sigma} d_y G| <= c / V`` with ``V`` the
      parabolic-ball volume at separation ``D((s,y),(tau,z))``.
    """
    sig = _sigma_value(sigma)
    if tuple(interval) != (0.0, 1.0):
        raise ValueError("off-diagonal checks are calibrated on the unit "
                         "interval")
    rng = np.random.default_rng(DEFAULT_SEED if seed is None else seed)

    # --- L^q: mass case (l, alpha, q) = (0, 0, 1) --------------------------
    nodes = 0.5 * (_GL_NODES + 1.0)
    wts = 0.5 * _GL_WEIGHTS
    mass_val = 0.0
    for x, w in zip(nodes, wts):
        tau = x  # tau in (0,1), s = 1
        mass_val += w * vertical_moment(1.0, 1.0, tau, sig, moment=0)

    # --- L^q window for (1/2, 1) -------------------------------------------
    n = 1
    q_edge = (n + 1.0) / (n + 1.0 - 0.5)
    inside_vals, inside_verdict = lq_refinement_trend(
        sig, 0.5, 1, 0.9 * q_edge)
    outside_vals, outside_verdict = lq_refinement_trend(
        sig, 0.5, 1, 1.1 * q_edge)

    # --- dual-side bound with the z^sigma boundary factor -------------------
    q_dual_probe = 1.1
    dual_ratios = []
    deriv_plain = kernel_derivative(0, 0, 0, 0, sig)
    for z_probe in (0.04, 1.0, 4.0):
        # || G(., y, 0, z) ||_{L^q((0,1) x H)} in the y variable
        def slice_val(t):
            v_lo, v_hi = _kernel_window(t, z_probe, sig)

            def smooth(yv):
                # |G|^q = |y^sigma (y^{-sigma} G)|^q; the symmetry core is
                # symmetric, so reuse it with swapped arguments
                core = deriv_plain(t, z_probe, yv)
                return np.abs(core) ** q_dual_probe

            return _integrate_vertical(smooth, sig * q_dual_probe, v_hi,
                                       v_lo=v_lo, n_panels=20)

        total = 0.0
        for x, w in zip(nodes, wts):
            r_val = x
            if r_val <= 1e-6:
                continue
            t = r_val * r_val
            total += w * 2.0 * r_val * slice_val(t)
        lhs = total ** (1.0 / q_dual_probe)
        model = ball_measure(IntrinsicBall([z_probe], 1.0), sig) ** (
            1.0 / q_dual_probe - 1.0)
        if sig < 0 and z_probe < 1.0:
            model *= z_probe**sig
        dual_ratios.append(lhs / model)

    # --- long-range off-diagonal pointwise bound ----------------------------
    delta = 0.25
    count = 0
    off_max = 0.0
    while count < samples:
        s = rng.uniform(2 * delta, 1.0)
        y = rng.uniform(0.0, 2.5) ** 2
        if rng.uniform() < 0.5:
            tau = rng.uniform(0.0, delta)
            z = rng.uniform(0.0, 2.5) ** 2
        else:
            tau = rng.uniform(0.0, s - 1e-3)
            z = (math.sqrt(y) + rng.uniform(1.2, 3.0)) ** 2
            if ref_dist([y], [z]) <= 1.0:
                continue
        lhs = abs(green_vertical(s, y, tau, z, sig))
        ball1 = ball_measure(IntrinsicBall([z], 1.0), sig)
        model = ball1 ** (-1.0)
        if sig < 0 and z < 1.0:
            model *= z**sig
        model *= math.exp(-ref_dist([y], [z]) / C_GAUSSIAN)
        off_max = max(off_max, lhs / model)
        count += 1

    # --- V^{-1} singular-kernel bound for (l, k, |alpha|) = (0, 0, 1) -------
    deriv_dy = kernel_derivative(0, 1, 0, 0, sig)
    czo_max = 0.0
    for _ in range(samples):
        s = rng.uniform(0.1, 1.0)
        tau = rng.uniform(0.0, s - 1e-4)
        y = rng.uniform(0.0, 2.0) ** 2
        z = rng.uniform(0.0, 2.0) ** 2
        K = abs(deriv_dy(s - tau, y, z))
        if K < 1e-280:
            continue
        R_sq = (s - tau) + ref_dist([y], [z]) ** 2
        V = (_parabolic_ball_volume(s, y, R_sq, sig)
             + _parabolic_ball_volume(tau, z, R_sq, sig))
        czo_max = max(czo_max, K * V)

    q_dual = None
    q_dual_ok = None
    if p is not None:
        if p <= 1:
            raise ValueError("exponent p must exceed 1")
        q_dual = p / (p - 1.0)
        q_dual_ok = (q_dual < (n + 1.0) / n) and (sig * q_dual > -1.0)

    return OffdiagReport(
        sigma=sig, lq_mass_value=mass_val,
        lq_inside_values=tuple(inside_vals), lq_inside_verdict=inside_verdict,
        lq_outside_values=tuple(outside_vals),
        lq_outside_verdict=outside_verdict,
        lq_dual_ratios=tuple(dual_ratios),
        offdiag_max=off_max, offdiag_samples=samples,
        czo_max=czo_max, czo_samples=samples,
        q_dual=q_dual, q_dual_admissible=q_dual_ok)


# ---------------------------------------------------------------------------
# exponential-weight decay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpDecayReport:
    """Outcome of :func:`exp_weight_decay_check`."""

    zeta: float
    eps: float
    rate_term: float
    pointwise_log_constant: float
    pointwise_samples: int
    lyapunov_values: tuple
    monotone: bool
    weighted_initial_norm: float

    @property
    def pointwise_constant(self):
        return math.exp(self.pointwise_log_constant)


def exp_weight_decay_check(u0, w, sigma):
    """Exponentially weighted decay of homogeneous solutions.

    Solves ``du/ds = Lu`` from the slice-0 data of ``u0`` and checks

    * the pointwise bound (order ``k = |alpha| = 0``)
      ``|u(s, y)| <= c |B_{r(s)}(y)|^{-1/2}
        exp(2 c_L^2 zeta^2 r(s)^2 - Psi(y)) * ||exp(Psi) u0||_sigma``
      in log space at every grid sample with ``s > 0`` (the measured
      log-constant is reported), and
    * the monotone decrease of the Lyapunov functional
      ``F(s) = exp(-2 c_L^2 zeta^2 s) ||exp(Psi) u(s)||_sigma^2
        + 2 int_0^s exp(-2 c_L^2 zeta^2 v) ||grad(exp(Psi) u(v))||_{1+sigma}^2 dv``
      from the weighted energy identity.

    ``w`` is a :class:`PsiWeight`; ``zeta = 0`` reduces both statements to
    the plain weighted-energy decrease.
    """
    sig = _sigma_value(sigma)
    grid = u0.grid
    if not isinstance(w, PsiWeight):
        raise TypeError("w must be a PsiWeight")
    rate_term = 2.0 * C_L**2 * w.zeta**2

    pts = grid.spatial_points()
    psi = psi_eval(pts, w)
    if float(np.max(np.abs(psi))) > 300.0 or rate_term * grid.s_max > 500.0:
        raise ValueError("weight overflow: |zeta| too large for the grid "
                         "extent (exponential factors exceed double range)")

    solved = duhamel_solve(u0, None, sig)
    e_psi = np.exp(psi)

    # weighted initial norm ||e^Psi u0||_sigma
    spec_sig = WeightedNormSpec(exponent=2, weight=sig, region="space")
    weighted0 = SampledField(grid, solved.values * e_psi)
    init_norm = weighted_norm(weighted0, spec_sig, time_index=0)

    # pointwise bound in log space, skipping the initial slice
    log_const = -math.inf
    count = 0
    log_init = math.log(max(init_norm, 1e-300))
    for jdx in range(1, grid.n_time + 1):
        r_sq = grid.times[jdx]
        vals = solved.values[jdx]
        balls = np.array([
            ball_measure(IntrinsicBall(p, math.sqrt(r_sq)), sig)
            for p in pts.reshape(-1, grid.n)]).reshape(pts.shape[:-1])
        with np.errstate(divide="ignore"):
            lhs_log = np.log(np.abs(vals))
        rhs_log = (-0.5 * np.log(balls) + rate_term * r_sq - psi + log_init)
        gap = lhs_log - rhs_log
        finite = np.isfinite(gap)
        if np.any(finite):
            log_const = max(log_const, float(np.max(gap[finite])))
        count += int(np.count_nonzero(finite))

    # Lyapunov functional
    spec_grad = WeightedNormSpec(exponent=2, weight=1.0 + sig, region="space")
    weighted_field = SampledField(grid, solved.values * e_psi)
    grad_fields = [SampledField(grid, comp)
                   for comp in weighted_field.gradient()]
    norms_sq = np.empty(grid.n_time + 1)
    grad_sq = np.empty(grid.n_time + 1)
    for jdx in range(grid.n_time + 1):
        norms_sq[jdx] = weighted_norm(weighted_field, spec_sig,
                                      time_index=jdx) ** 2
        grad_sq[jdx] = sum(
            weighted_norm(fld, spec_grad, time_index=jdx) ** 2
            for fld in grad_fields)
    damper = np.exp(-rate_term * grid.times)
    from scipy.integrate import cumulative_trapezoid

    integrand = damper * grad_sq
    running = cumulative_trapezoid(integrand, grid.times, initial=0.0)
    F = damper * norms_sq + 2.0 * running

    # The damped weighted norm alone must decrease strictly (per-level
    # quantity, free of time quadrature); the combined functional must
    # decrease up to the trapezoid error of the dissipation integral,
    # bounded a posteriori by the integrand's local second difference.
    norm_part = damper * norms_sq
    strict = bool(np.all(np.diff(norm_part) <= 1e-9 * norm_part[0] + 1e-300))
    curv = np.abs(np.diff(integrand, n=2))
    near_curv = np.concatenate([curv[:1], curv, curv[-1:]])
    quad_tol = grid.ds * np.maximum(near_curv[:-1], near_curv[1:])
    monotone = strict and bool(
        np.all(np.diff(F) <= quad_tol + 1e-9 * F[0]))

    return ExpDecayReport(zeta=w.zeta, eps=w.eps, rate_term=rate_term,
                          pointwise_log_constant=log_const,
                          pointwise_samples=count,
                          lyapunov_values=tuple(F), monotone=monotone,
                          weighted_initial_norm=float(init_norm))
