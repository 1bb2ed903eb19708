"""Tests for the sampled solution/inhomogeneity norms and the linear-solve
estimate checker."""

import math

import numpy as np
import pytest

from pme_lab.function_norms import (
    CylinderSampler,
    LinearEstimateReport,
    NormReport,
    linear_estimate_check,
    norm_report,
    report_csv,
    x1_norm,
    x2_norm,
    x_norm,
    y_norm,
)
from pme_lab.grids import AnalyticField, HalfSpaceGrid, SampledField

P = 8.0


@pytest.fixture(scope="module")
def grid():
    return HalfSpaceGrid(n=1, s_max=1.0, n_time=32, zeta_max=3.0,
                         n_vertical=96)


@pytest.fixture(scope="module")
def sampler(grid):
    return CylinderSampler.build(grid, seed=11)


class TestCylinderSampler:
    def test_scales_are_dyadic_and_resolvable(self, grid, sampler):
        root = math.sqrt(grid.s_max)
        for r in sampler.scales:
            k = round(math.log2(root / r))
            assert math.isclose(r, root * 2.0**-k, rel_tol=1e-12)
            lo, hi = 0.5 * r * r, r * r
            assert np.any((grid.times > lo) & (grid.times <= hi))

    def test_top_scale_always_present(self, grid, sampler):
        assert math.isclose(max(sampler.scales), math.sqrt(grid.s_max),
                            rel_tol=1e-12)

    def test_unresolvable_scales_recorded(self, grid, sampler):
        reasons = {w for _r, w in sampler.dropped}
        assert reasons <= {"time-unresolved", "boundary", "interior"}
        kept_plus_dropped = len(sampler.scales) + sum(
            1 for _r, w in sampler.dropped if w == "time-unresolved")
        assert kept_plus_dropped >= 3

    def test_strata_quotas(self, sampler):
        for counts in sampler.stratum_counts:
            for _name, m in counts:
                assert m == 32

    def test_strata_split_by_height(self, sampler):
        for r, block in zip(sampler.scales, sampler.centers):
            heights = np.sqrt(block[:, -1])
            assert np.sum(heights < r) >= 32
            assert np.sum(heights >= r) >= 32

    def test_every_cylinder_fits(self, grid, sampler):
        assert sampler.validate(grid) == len(sampler)

    def test_deterministic_given_seed(self, grid, sampler):
        again = CylinderSampler.build(grid, seed=11)
        assert again.fingerprint() == sampler.fingerprint()
        other = CylinderSampler.build(grid, seed=12)
        assert other.fingerprint() != sampler.fingerprint()

    def test_grid_mismatch_rejected(self, sampler):
        other = HalfSpaceGrid(n=1, s_max=0.5, n_time=16, zeta_max=3.0,
                              n_vertical=64)
        with pytest.raises(ValueError, match="different grid"):
            sampler.validate(other)

    def test_bad_build_arguments(self, grid):
        with pytest.raises(ValueError, match="centers_per_stratum"):
            CylinderSampler.build(grid, centers_per_stratum=0)
        with pytest.raises(ValueError, match="max_level"):
            CylinderSampler.build(grid, max_level=-1)


class TestSolutionNorms:
    def test_affine_field_exact(self, grid, sampler):
        u = AnalyticField.from_sympy(grid, "0.7*y1")
        assert x1_norm(u, P, sampler) == pytest.approx(0.7, abs=1e-12)
        assert x2_norm(u, P, sampler) == 0.0

    def test_constant_field_zero(self, grid, sampler):
        u = AnalyticField.from_sympy(grid, "4")
        assert x1_norm(u, P, sampler) == 0.0
        assert x2_norm(u, P, sampler) == 0.0

    def test_quadratic_vertical_profile(self, grid, sampler):
        u = AnalyticField.from_sympy(grid, "y1**2")
        best = max(2.0 * r * (r + math.sqrt(z[-1]))
                   for r, z, _c in sampler.cylinders())
        expect = 2.0 * grid.y_max + best
        assert x1_norm(u, P, sampler) == pytest.approx(expect, rel=1e-12)
        # pointwise degenerate bound sup 2 sqrt(s) sqrt(y); time term vanishes
        expect2 = 2.0 * math.sqrt(grid.s_max) * math.sqrt(grid.y_max)
        assert x2_norm(u, P, sampler) == pytest.approx(expect2, rel=1e-12)

    def test_drift_solution(self, grid, sampler):
        u = AnalyticField.from_sympy(grid, "y1 + 1.5*s")
        assert x1_norm(u, P, sampler) == pytest.approx(1.0, abs=1e-12)
        assert x2_norm(u, P, sampler) == 0.0

    def test_x_norm_is_sum(self, grid, sampler):
        u = AnalyticField.from_sympy(grid, "y1**2 + 0.3*s*y1")
        total = x_norm(u, P, sampler)
        assert total == pytest.approx(
            x1_norm(u, P, sampler) + x2_norm(u, P, sampler), rel=1e-12)

    def test_absolute_homogeneity(self, grid, sampler):
        # scaling returns a plain sampled field, so compare within the
        # finite-difference scheme rather than against exact derivatives
        exact = AnalyticField.from_sympy(grid, "y1**2 + 0.1*s*y1")
        u = SampledField(grid, exact.values)
        for norm in (x1_norm, x2_norm):
            base = norm(u, P, sampler)
            assert norm(-3.0 * u, P, sampler) == pytest.approx(3.0 * base,
                                                               rel=1e-9)

    def test_tilt_enters_gradient(self, grid, sampler):
        flat = SampledField(grid, np.zeros(grid.shape))
        assert x1_norm(flat, P, sampler) == 0.0
        # n=1 grids silently drop tilts; check a 2-d grid
        g2 = HalfSpaceGrid(n=2, s_max=0.5, n_time=8, zeta_max=2.0,
                           n_vertical=32, tangential_extent=2 * math.pi,
                           n_tangential=8)
        s2 = CylinderSampler.build(g2, centers_per_stratum=4, seed=3)
        tilted = SampledField(g2, np.zeros(g2.shape), tilt=np.array([0.25]))
        assert x1_norm(tilted, P, s2) == pytest.approx(0.25, abs=1e-12)
        assert x2_norm(tilted, P, s2) == 0.0


class TestInhomogeneityNorms:
    def test_zero_field(self, grid, sampler):
        f = AnalyticField.from_sympy(grid, "0")
        assert y_norm(f, P, sampler) == (0.0, 0.0)

    def test_constant_off_diagonal_only(self, grid, sampler):
        f = AnalyticField.from_sympy(grid, "3")
        on, off = y_norm(f, P, sampler)
        assert on == 0.0
        expect = 3.0 * max(r / (r + math.sqrt(z[-1]))
                           for r, z, _c in sampler.cylinders())
        assert off == pytest.approx(expect, rel=1e-12)
        assert off <= 3.0

    def test_linear_vertical_on_diagonal(self, grid, sampler):
        f = AnalyticField.from_sympy(grid, "y1")
        on, off = y_norm(f, P, sampler)
        # |grad f| = 1, so the on-part is sup r^2 = horizon (top scale)
        assert on == pytest.approx(grid.s_max, rel=1e-12)
        assert off > 0.0

    def test_homogeneity(self, grid, sampler):
        exact = AnalyticField.from_sympy(grid, "y1*exp(-y1)")
        f = SampledField(grid, exact.values)
        on, off = y_norm(f, P, sampler)
        on2, off2 = y_norm(2.0 * f, P, sampler)
        assert (on2, off2) == pytest.approx((2 * on, 2 * off), rel=1e-9)

    def test_custom_exponents(self, grid, sampler):
        f = AnalyticField.from_sympy(grid, "3")
        on, off = y_norm(f, P, sampler, theta=1.0, eps1=2.0, eps2=0.0)
        assert on == 0.0
        assert off == pytest.approx(3.0, rel=1e-12)  # r^0 (r+sqrt)^0 |c|

    def test_tilted_source_rejected(self, grid, sampler):
        g2 = HalfSpaceGrid(n=2, s_max=0.5, n_time=8, zeta_max=2.0,
                           n_vertical=32, tangential_extent=2 * math.pi,
                           n_tangential=8)
        s2 = CylinderSampler.build(g2, centers_per_stratum=4, seed=3)
        f = SampledField(g2, np.ones(g2.shape), tilt=np.array([1.0]))
        with pytest.raises(ValueError, match="tilt"):
            y_norm(f, P, s2)


LAM = 4.0


@pytest.fixture(scope="module")
def pair(grid, sampler):
    ghat = HalfSpaceGrid(n=1, s_max=grid.s_max / LAM,
                         n_time=grid.n_time,
                         zeta_max=grid.zeta_max / math.sqrt(LAM),
                         n_vertical=grid.n_vertical)
    shat = sampler.rescaled(LAM, ghat)
    return ghat, shat


class TestScalingCovariance:
    """Parabolic rescaling (s,y) -> (lam s, lam y) with value scale 1/lam
    preserves every norm when the sampler is rescaled alongside."""

    LAM = LAM

    def test_rescaled_nodes_correspond(self, grid, pair):
        ghat, _ = pair
        assert np.allclose(ghat.y_nodes, grid.y_nodes / self.LAM,
                           rtol=0, atol=1e-15)
        assert np.allclose(ghat.times, grid.times / self.LAM,
                           rtol=0, atol=1e-15)

    @staticmethod
    def _rescale_expr(expr, lam):
        import sympy as sp

        s, y1 = sp.symbols("s y1")
        return sp.sympify(expr).subs({s: lam * s, y1: lam * y1},
                                     simultaneous=True)

    def test_solution_norm_invariant(self, grid, sampler, pair):
        ghat, shat = pair
        lam = self.LAM
        expr = "y1**2 + 0.4*y1 + 0.2*s*y1"
        u = AnalyticField.from_sympy(grid, expr)
        uhat = AnalyticField.from_sympy(
            ghat, self._rescale_expr(expr, lam) / lam)
        assert x1_norm(uhat, P, shat) == pytest.approx(
            x1_norm(u, P, sampler), rel=1e-10)
        assert x2_norm(uhat, P, shat) == pytest.approx(
            x2_norm(u, P, sampler), rel=1e-10)

    def test_inhomogeneity_norm_covariant(self, grid, sampler, pair):
        """Composing with the scaling map and rescaling the sampler leaves
        both inhomogeneity norms unchanged: the on-part weight r^2 absorbs
        the factor lam from the chain rule, the off-part weight is
        dimensionless."""
        ghat, shat = pair
        f = AnalyticField.from_sympy(grid, "exp(-y1)")
        fhat = AnalyticField.from_sympy(
            ghat, self._rescale_expr("exp(-y1)", self.LAM))
        on, off = y_norm(f, P, sampler)
        on_h, off_h = y_norm(fhat, P, shat)
        assert on_h == pytest.approx(on, rel=1e-10)
        assert off_h == pytest.approx(off, rel=1e-10)

    def test_rescale_rejects_bad_factor(self, sampler, grid):
        with pytest.raises(ValueError, match="positive"):
            sampler.rescaled(0.0, grid)


class TestErrors:
    def test_empty_sampler(self, grid):
        empty = CylinderSampler(horizon=grid.s_max,
                                grid_fingerprint=grid.fingerprint(),
                                scales=(), centers=())
        u = AnalyticField.from_sympy(grid, "y1")
        with pytest.raises(ValueError, match="sampler is empty"):
            x1_norm(u, P, empty)

    def test_sampler_grid_mismatch(self, grid, sampler):
        other = HalfSpaceGrid(n=1, s_max=0.5, n_time=16, zeta_max=3.0,
                              n_vertical=64)
        u = AnalyticField.from_sympy(other, "y1")
        with pytest.raises(ValueError, match="different grid"):
            x1_norm(u, P, sampler)

    def test_bad_exponent(self, grid, sampler):
        u = AnalyticField.from_sympy(grid, "y1")
        with pytest.raises(ValueError, match="exponent"):
            x1_norm(u, 0.5, sampler)


class TestNormReport:
    def test_values_and_invariants(self, grid, sampler):
        u = AnalyticField.from_sympy(grid, "y1**2")
        f = AnalyticField.from_sympy(grid, "2")
        rep = norm_report(P, sampler, u=u, f=f)
        assert rep.x_value == pytest.approx(rep.x1 + rep.x2, rel=1e-15)
        assert rep.y_value == max(rep.y_on, rep.y_off)
        assert rep.sampler_fingerprint == sampler.fingerprint()
        assert rep.tangential_derivative == "spectral"
        assert rep.vertical_derivative_order == 4

    def test_absent_inputs_report_zero(self, grid, sampler):
        u = AnalyticField.from_sympy(grid, "y1")
        rep = norm_report(P, sampler, u=u)
        assert (rep.y_on, rep.y_off) == (0.0, 0.0)
        with pytest.raises(ValueError, match="at least one"):
            norm_report(P, sampler)

    def test_negative_entries_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            NormReport(x1=-1.0, x2=0.0, y_on=0.0, y_off=0.0, p=8.0,
                       sampler_fingerprint="abc")

    def test_csv_layout(self, grid, sampler):
        f = AnalyticField.from_sympy(grid, "y1")
        rep = norm_report(P, sampler, f=f)
        text = report_csv(rep)
        lines = text.strip().split("\n")
        assert lines[0] == "norm_name,p,value,sampler_fingerprint"
        assert len(lines) == 7
        names = [ln.split(",")[0] for ln in lines[1:]]
        assert names == ["x1", "x2", "x", "y_on", "y_off", "y"]
        for ln in lines[1:]:
            assert ln.count(",") == 3
            assert ln.endswith(sampler.fingerprint())


class TestLinearEstimate:
    def test_drift_ratio_near_one(self, grid, sampler):
        u0 = AnalyticField.from_sympy(grid, "y1")
        rep = linear_estimate_check(u0, None, 5.0, 0.0, sampler=sampler)
        assert isinstance(rep, LinearEstimateReport)
        assert rep.grad_initial_sup == pytest.approx(1.0, rel=1e-12)
        assert rep.ratio == pytest.approx(1.0, rel=5e-3)
        assert not rep.trivial

    def test_trivial_data(self, grid, sampler):
        u0 = AnalyticField.from_sympy(grid, "0")
        rep = linear_estimate_check(u0, None, 5.0, 0.0, sampler=sampler)
        assert rep.trivial and rep.ratio == 0.0

    def test_exponent_window_gate(self, grid, sampler):
        u0 = AnalyticField.from_sympy(grid, "y1")
        with pytest.raises(ValueError, match="admissible window"):
            linear_estimate_check(u0, None, 4.0, 0.0, sampler=sampler)
        # strongly degenerate weights push the window above 2(n+1)
        with pytest.raises(ValueError, match="admissible window"):
            linear_estimate_check(u0, None, 8.0, -0.9, sampler=sampler)

    def test_source_enters_rhs(self, grid, sampler):
        u0 = AnalyticField.from_sympy(grid, "0")
        f = AnalyticField.from_sympy(grid, "1")
        rep = linear_estimate_check(u0, f, 5.0, 0.0, sampler=sampler)
        assert rep.y_off > 0.0
        assert rep.rhs == rep.grad_initial_sup + max(rep.y_on, rep.y_off)
        assert rep.ratio == pytest.approx(rep.x_value / rep.rhs, rel=1e-12)
        assert rep.ratio < 10.0

    def test_refinement_stability(self, grid):
        """The measured ratio moves < 20% under a 2x refinement."""
        coarse = HalfSpaceGrid(n=1, s_max=1.0, n_time=16, zeta_max=3.0,
                               n_vertical=48)
        fine = coarse.refine(2)
        expr = "tanh(2*(y1 - 1))*exp(-y1/4)"
        ratios = []
        for g in (coarse, fine):
            u0 = AnalyticField.from_sympy(g, expr)
            samp = CylinderSampler.build(g, centers_per_stratum=16, seed=2)
            rep = linear_estimate_check(u0, None, 5.0, 0.0, sampler=samp)
            ratios.append(rep.ratio)
        assert ratios[1] == pytest.approx(ratios[0], rel=0.20)
