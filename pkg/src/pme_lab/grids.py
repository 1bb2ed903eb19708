"""Grids and sampled fields on the parabolic slab ``(0,S) x H``.

The vertical mesh is graded as ``y = zeta^2`` with uniform ``zeta`` so that the
boundary degeneracy is resolved; tangential directions (n >= 2) live on a
periodic box and are differentiated spectrally; vertical derivatives use
Fornberg finite-difference stencils of formal order 4 on the graded nodes;
time derivatives use order-4 stencils on the uniform time nodes.

Fields carry an optional tangential ``tilt`` vector ``a``: the represented
function is ``tilt . y' + (periodic part)``, which is how non-periodic affine
data (tilted waves) live on the periodic box.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HalfSpaceGrid",
    "SampledField",
    "AnalyticField",
    "fornberg_weights",
    "weighted_cell_moments",
    "save_field",
    "load_field",
]


def fornberg_weights(x0, x, max_order):
    """Finite-difference weights at ``x0`` from nodes ``x`` for derivative
    orders ``0..max_order`` (Fornberg's recurrence).  Returns an array of
    shape ``(len(x), max_order+1)``."""
    x = np.asarray(x, dtype=float)
    npts = len(x)
    c = np.zeros((npts, max_order + 1))
    c1 = 1.0
    c4 = x[0] - x0
    c[0, 0] = 1.0
    for i in range(1, npts):
        mn = min(i, max_order)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


def weighted_cell_moments(nodes, weight_exponent):
    """Quadrature weights on ``nodes`` (ascending, starting at 0 allowed) that
    integrate piecewise-linear functions against ``y^w dy`` exactly; requires
    ``w > -1``."""
    w = float(weight_exponent)
    if not w > -1.0:
        raise ValueError("weight exponent must exceed -1")
    y = np.asarray(nodes, dtype=float)
    p1, p2 = w + 1.0, w + 2.0
    m0 = (y[1:] ** p1 - y[:-1] ** p1) / p1    # cell mass
    m1 = (y[1:] ** p2 - y[:-1] ** p2) / p2    # cell first moment
    dy = np.diff(y)
    rising = (m1 - y[:-1] * m0) / dy          # goes to the right node
    falling = (y[1:] * m0 - m1) / dy          # goes to the left node
    out = np.zeros_like(y)
    out[1:] += rising
    out[:-1] += falling
    return out


def _diff_matrix(nodes, order, stencil):
    """Dense differentiation matrix on arbitrary nodes (banded stencils)."""
    nodes = np.asarray(nodes, dtype=float)
    m = len(nodes)
    stencil = min(stencil, m)
    D = np.zeros((m, m))
    half = stencil // 2
    for i in range(m):
        lo = min(max(i - half, 0), m - stencil)
        sl = slice(lo, lo + stencil)
        D[i, sl] = fornberg_weights(nodes[i], nodes[sl], order)[:, order]
    return D


class HalfSpaceGrid:
    """Tensor grid: uniform times, periodic tangential box, graded vertical."""

    def __init__(self, n=1, s_max=1.0, n_time=32, zeta_max=4.0, n_vertical=128,
                 tangential_extent=16.0, n_tangential=16):
        if n not in (1, 2, 3):
            raise ValueError("dimension n must be 1, 2 or 3")
        if s_max <= 0 or zeta_max <= 0 or tangential_extent <= 0:
            raise ValueError("grid extents must be positive")
        if n_time < 4 or n_vertical < 8 or (n > 1 and n_tangential < 4):
            raise ValueError("grid too coarse")
        self.n = n
        self.s_max = float(s_max)
        self.n_time = int(n_time)
        self.zeta_max = float(zeta_max)
        self.n_vertical = int(n_vertical)
        self.tangential_extent = float(tangential_extent)
        self.n_tangential = int(n_tangential)
        self.times = np.linspace(0.0, s_max, n_time + 1)
        self.zeta_nodes = np.linspace(0.0, zeta_max, n_vertical + 1)
        self.y_nodes = self.zeta_nodes**2
        self.tangential_nodes = (np.arange(n_tangential) * tangential_extent
                                 / n_tangential)
        self._cache = {}

    # -- shapes -------------------------------------------------------------

    @property
    def ds(self):
        return self.s_max / self.n_time

    @property
    def y_max(self):
        return float(self.y_nodes[-1])

    @property
    def shape(self):
        tang = (self.n_tangential,) * (self.n - 1)
        return (self.n_time + 1,) + tang + (self.n_vertical + 1,)

    @property
    def spatial_shape(self):
        return self.shape[1:]

    def meshgrid(self):
        """Broadcastable coordinate arrays ``(S, Y_1, ..., Y_n)``."""
        axes = [self.times] + [self.tangential_nodes] * (self.n - 1) + [self.y_nodes]
        return np.meshgrid(*axes, indexing="ij", sparse=True)

    def spatial_points(self):
        """All spatial nodes as an array of half-space points, shape
        ``spatial_shape + (n,)``."""
        axes = [self.tangential_nodes] * (self.n - 1) + [self.y_nodes]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def refine(self, factor=2):
        return HalfSpaceGrid(
            n=self.n, s_max=self.s_max, n_time=self.n_time * factor,
            zeta_max=self.zeta_max, n_vertical=self.n_vertical * factor,
            tangential_extent=self.tangential_extent,
            n_tangential=self.n_tangential * factor if self.n > 1 else self.n_tangential,
        )

    def fingerprint(self):
        text = "grid|%d|%.12g|%d|%.12g|%d|%.12g|%d" % (
            self.n, self.s_max, self.n_time, self.zeta_max, self.n_vertical,
            self.tangential_extent, self.n_tangential)
        return hashlib.md5(text.encode()).hexdigest()[:12]

    # -- quadrature ---------------------------------------------------------

    def vertical_weights(self, weight_exponent):
        """Node weights exact for piecewise-linear integrands against
        ``y^w dy`` (closed-form cell moments); requires ``w > -1``."""
        key = ("vw", float(weight_exponent))
        if key not in self._cache:
            self._cache[key] = weighted_cell_moments(self.y_nodes,
                                                     weight_exponent)
        return self._cache[key]

    def tangential_weight(self):
        return self.tangential_extent / self.n_tangential

    def time_weights(self):
        w = np.full(self.n_time + 1, self.ds)
        w[0] = w[-1] = 0.5 * self.ds
        return w

    # -- differentiation ----------------------------------------------------

    def vertical_diff_matrix(self, order):
        key = ("vd", order)
        if key not in self._cache:
            self._cache[key] = _diff_matrix(self.y_nodes, order, order + 4)
        return self._cache[key]

    def time_diff_matrix(self, order=1):
        key = ("td", order)
        if key not in self._cache:
            self._cache[key] = _diff_matrix(self.times, order, order + 4)
        return self._cache[key]

    def tangential_wavenumbers(self):
        return 2.0 * np.pi * np.fft.fftfreq(self.n_tangential,
                                            d=self.tangential_extent
                                            / self.n_tangential)


def _apply_matrix_last(values, mat):
    return np.einsum("ij,...j->...i", mat, values)


def _apply_matrix_axis0(values, mat):
    return np.tensordot(mat, values, axes=(1, 0))


@dataclass
class SampledField:
    """Field sampled on a :class:`HalfSpaceGrid` (plus optional tangential tilt)."""

    grid: HalfSpaceGrid
    values: np.ndarray
    tilt: np.ndarray | None = None
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError("field shape %s does not match grid shape %s"
                             % (self.values.shape, self.grid.shape))
        if self.tilt is not None:
            self.tilt = np.asarray(self.tilt, dtype=float)
            if self.tilt.shape != (self.grid.n - 1,):
                raise ValueError("tilt must have length n-1")
            if self.grid.n == 1:
                self.tilt = None

    # -- algebra (periodic parts only; tilts combine linearly) --------------

    def copy_with(self, values=None, tilt="keep", name=None):
        return SampledField(self.grid,
                            self.values.copy() if values is None else values,
                            self.tilt if tilt == "keep" else tilt,
                            self.name if name is None else name)

    def __add__(self, other):
        t = None
        if self.tilt is not None or getattr(other, "tilt", None) is not None:
            a = self.tilt if self.tilt is not None else 0.0
            b = other.tilt if other.tilt is not None else 0.0
            t = np.asarray(a + b)
        return SampledField(self.grid, self.values + other.values, t)

    def __sub__(self, other):
        t = None
        if self.tilt is not None or getattr(other, "tilt", None) is not None:
            a = self.tilt if self.tilt is not None else 0.0
            b = other.tilt if other.tilt is not None else 0.0
            t = np.asarray(a - b)
        return SampledField(self.grid, self.values - other.values, t)

    def __mul__(self, c):
        t = None if self.tilt is None else c * self.tilt
        return SampledField(self.grid, c * self.values, t)

    __rmul__ = __mul__

    # -- differentiation -----------------------------------------------------

    def derivative(self, k=0, alpha=None):
        """Grid values of ``d_s^k d_y^alpha u``; ``alpha`` is a multi-index of
        length n (tangential orders first, vertical last)."""
        g = self.grid
        alpha = tuple(int(a) for a in (alpha or (0,) * g.n))
        if len(alpha) != g.n:
            raise ValueError("alpha must have length n")
        key = (k,) + alpha
        if key in self._cache:
            return self._cache[key]

        out = self.values
        # tangential spectral derivatives
        for j, a in enumerate(alpha[:-1]):
            if a == 0:
                continue
            axis = 1 + j
            ik = 1j * g.tangential_wavenumbers()
            shape = [1] * out.ndim
            shape[axis] = g.n_tangential
            spec = np.fft.fft(out, axis=axis) * (ik**a).reshape(shape)
            out = np.real(np.fft.ifft(spec, axis=axis))
        # vertical
        if alpha[-1] > 0:
            out = _apply_matrix_last(out, g.vertical_diff_matrix(alpha[-1]))
        # time
        for _ in range(k):
            out = _apply_matrix_axis0(out, g.time_diff_matrix(1))

        # the affine tilt only survives one pure tangential derivative
        if self.tilt is not None and k == 0 and alpha[-1] == 0:
            if sum(alpha[:-1]) == 1:
                j = alpha.index(1)
                out = out + self.tilt[j]
        self._cache[key] = out
        return out

    def gradient(self):
        g = self.grid
        grads = []
        for j in range(g.n):
            a = [0] * g.n
            a[j] = 1
            grads.append(self.derivative(0, tuple(a)))
        return grads

    def multi_indices(self, total):
        """All spatial multi-indices of the given total order."""
        g = self.grid
        out = []

        def rec(prefix, rem, slots):
            if slots == 1:
                out.append(tuple(prefix + [rem]))
                return
            for a in range(rem + 1):
                rec(prefix + [a], rem - a, slots - 1)

        rec([], total, g.n)
        return out


class AnalyticField(SampledField):
    """Field defined by a closed-form expression; derivatives are exact.

    Construct via :meth:`from_sympy` (symbols ``s`` and ``y1..yn``, vertical
    coordinate last) or by passing a ``partials(k, alpha) -> callable`` factory.
    """

    def __init__(self, grid, partials, tilt=None, name=""):
        self._partials = partials
        vals = self._eval(grid, partials(0, (0,) * grid.n))
        super().__init__(grid, vals, tilt, name)

    @staticmethod
    def _eval(grid, func):
        mesh = grid.meshgrid()
        return np.broadcast_to(func(*mesh), grid.shape).astype(float).copy()

    @classmethod
    def from_sympy(cls, grid, expr, tilt=None, name=""):
        import sympy as sp

        syms = sp.symbols("s " + " ".join("y%d" % (j + 1) for j in range(grid.n)))
        expr = sp.sympify(expr)

        def partials(k, alpha):
            e = sp.diff(expr, syms[0], k)
            for j, a in enumerate(alpha):
                e = sp.diff(e, syms[1 + j], a)
            fn = sp.lambdify(syms, e, "numpy")
            return lambda *coords: np.asarray(fn(*coords), dtype=float)

        return cls(grid, partials, tilt=tilt, name=name)

    def derivative(self, k=0, alpha=None):
        g = self.grid
        alpha = tuple(int(a) for a in (alpha or (0,) * g.n))
        key = (k,) + alpha
        if key not in self._cache:
            out = self._eval(g, self._partials(k, alpha))
            if self.tilt is not None and k == 0 and alpha[-1] == 0 \
                    and sum(alpha[:-1]) == 1:
                out = out + self.tilt[alpha.index(1)]
            self._cache[key] = out
        return self._cache[key]


# ---------------------------------------------------------------------------
# snapshot serialization: text header + raw little-endian float64 payload
# ---------------------------------------------------------------------------


def save_field(path, fld):
    g = fld.grid
    tilt = fld.tilt if fld.tilt is not None else np.zeros(g.n - 1)
    header = io.StringIO()
    header.write("pme-lab-field 1\n")
    header.write("n %d\n" % g.n)
    header.write("s_max %.17g\nn_time %d\n" % (g.s_max, g.n_time))
    header.write("zeta_max %.17g\nn_vertical %d\n" % (g.zeta_max, g.n_vertical))
    header.write("tangential_extent %.17g\nn_tangential %d\n"
                 % (g.tangential_extent, g.n_tangential))
    header.write("tilt %s\n" % " ".join("%.17g" % t for t in tilt))
    header.write("endian little\ndtype float64\n---\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        fh.write(fld.values.astype("<f8").tobytes(order="C"))


def load_field(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head, _, payload = blob.partition(b"---\n")
    meta = {}
    lines = head.decode("ascii").strip().splitlines()
    if lines[0] != "pme-lab-field 1":
        raise ValueError("not a pme-lab field snapshot")
    for line in lines[1:]:
        key, _, val = line.partition(" ")
        meta[key] = val
    if meta.get("endian") != "little" or meta.get("dtype") != "float64":
        raise ValueError("unsupported snapshot encoding")
    grid = HalfSpaceGrid(
        n=int(meta["n"]), s_max=float(meta["s_max"]), n_time=int(meta["n_time"]),
        zeta_max=float(meta["zeta_max"]), n_vertical=int(meta["n_vertical"]),
        tangential_extent=float(meta["tangential_extent"]),
        n_tangential=int(meta["n_tangential"]),
    )
    vals = np.frombuffer(payload, dtype="<f8").reshape(grid.shape).copy()
    tilt = np.array([float(x) for x in meta["tilt"].split()]) if meta["tilt"].strip() else None
    if tilt is not None and (grid.n == 1 or not np.any(tilt)):
        tilt = None
    return SampledField(grid, vals, tilt)
