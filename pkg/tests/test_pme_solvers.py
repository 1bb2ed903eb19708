"""Tests for the nonlinear perturbation-equation laboratory."""

import math

import numpy as np
import pytest
import sympy as sp

from pme_lab.function_norms import (
    CylinderSampler,
    nonlinearity_bound_check,
    y_norm,
)
from pme_lab.green_semigroup import duhamel_solve
from pme_lab.grids import AnalyticField, HalfSpaceGrid, SampledField
from pme_lab.params import SigmaParam
from pme_lab.pme_solvers import (
    CartesianSlab,
    ContractionError,
    FixedPointConfig,
    WaveFamily,
    analyticity_factorial_check,
    decay_check,
    energy_identity_check,
    flux_system_gap,
    interface_extract,
    iterated_solution_battery,
    nonlinearity_divergence_gap,
    nonlinearity_eval,
    parameter_family_equivariance,
    pe_fixed_point,
    pe_residual,
    pe_residual_sup,
    pressure_to_density_and_residuals,
    scaling_equivariance,
    sigma_solution_battery,
    tpe_residual_sup,
    travelling_wave,
    von_mises,
    von_mises_round_trip,
)


# ---------------------------------------------------------------------------
# shared grids and solves (expensive pieces computed once)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def grid1():
    return HalfSpaceGrid(n=1, s_max=1.0, n_time=32, zeta_max=3.0,
                         n_vertical=96)


@pytest.fixture(scope="module")
def grid2():
    return HalfSpaceGrid(n=2, s_max=1.0, n_time=24, zeta_max=3.0,
                         n_vertical=64, tangential_extent=8.0,
                         n_tangential=16)


def _profile_expr():
    """Smooth vertical profile with O(1) slope, flat at both ends."""
    y1 = sp.Symbol("y1")
    return sp.tanh(2 * (y1 - 1)) * sp.exp(-y1 / 4)


def _profile_slope_sup():
    y1 = sp.Symbol("y1")
    fn = sp.lambdify(y1, sp.diff(_profile_expr(), y1), "numpy")
    return float(np.max(np.abs(fn(np.linspace(0.0, 9.0, 2001)))))


def _scaled_initial(grid, eps):
    return AnalyticField.from_sympy(
        grid, float(eps / _profile_slope_sup()) * _profile_expr())


@pytest.fixture(scope="module")
def picard_run(grid1):
    """Fixed point at slope size 1e-2 on the standard grid."""
    u0 = _scaled_initial(grid1, 1e-2)
    cfg = FixedPointConfig(lipschitz_bound=1e-2 * 1.0001, ball_radius=0.5)
    u_star, trace = pe_fixed_point(u0, cfg, 0.0)
    return u0, u_star, trace


@pytest.fixture(scope="module")
def picard_run_tilted(grid2):
    """Fixed point started on an exact tilted travelling wave (n = 2)."""
    tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0), tilt=(1e-2,)))
    cfg = FixedPointConfig(lipschitz_bound=2e-2, ball_radius=0.5)
    u_star, trace = pe_fixed_point(tw.pe_initial(grid2), cfg, 0.0)
    return tw, u_star, trace


@pytest.fixture(scope="module")
def solved_graph(grid1, picard_run):
    """Graph field w = (flat wave) + (solved perturbation)."""
    _, u_star, _ = picard_run
    wave = AnalyticField.from_sympy(grid1, "y1 - s")
    return SampledField(grid1, wave.values + u_star.values)


@pytest.fixture(scope="module")
def solved_slab(solved_graph):
    return von_mises(solved_graph, 0.0)


# ---------------------------------------------------------------------------
# quadratic nonlinearity
# ---------------------------------------------------------------------------


class TestNonlinearity:
    @pytest.mark.parametrize("sigma", [-0.5, 0.0, 1.0])
    def test_vertical_slope_closed_form(self, grid1, sigma):
        # u = b y_n gives g = b^2/(1+b) constant, so f = -(1+sigma) b^2/(1+b)
        b = 0.2
        u = AnalyticField.from_sympy(grid1, "%.17g*y1" % b)
        f = nonlinearity_eval(u, sigma)
        expect = -(1.0 + sigma) * b**2 / (1.0 + b)
        assert np.max(np.abs(f.values - expect)) < 1e-12

    def test_tangential_tilt_closed_form(self, grid2):
        # u = a . y' gives g = |a|^2 constant, so f = -(1+sigma) |a|^2
        a = 0.1
        u = AnalyticField.from_sympy(grid2, "0*y2", tilt=(a,))
        f = nonlinearity_eval(u, 1.0)
        assert np.max(np.abs(f.values - (-2.0 * a**2))) < 1e-12

    def test_denominator_margin(self, grid1):
        u = AnalyticField.from_sympy(grid1, "-y1")
        with pytest.raises(ValueError, match="denominator"):
            nonlinearity_eval(u, 0.0)

    def test_divergence_form_gap(self, grid1):
        u = AnalyticField.from_sympy(grid1, "0.01*tanh(y1)*exp(-y1/2)")
        assert nonlinearity_divergence_gap(u, 0.0) < 3e-3
        # fractional weight is harder near the degeneracy plane
        assert nonlinearity_divergence_gap(u, -0.5) < 5e-2

    def test_flux_system_gap(self, picard_run):
        _, u_star, _ = picard_run
        assert flux_system_gap(u_star, 0.0) < 2e-2

    def test_quadratic_size_scaling(self, grid1):
        # ||f[eps u]||_Y should scale like eps^2
        sampler = CylinderSampler.build(grid1)
        sizes = []
        for eps in (1e-3, 1e-2, 1e-1):
            u = _scaled_initial(grid1, eps)
            sizes.append(max(y_norm(nonlinearity_eval(u, 0.0), 2, sampler)))
        slope = np.polyfit(np.log([1e-3, 1e-2, 1e-1]), np.log(sizes), 1)[0]
        assert abs(slope - 2.0) < 0.05


class TestNonlinearityBound:
    def test_trivial_field(self, grid1):
        z = SampledField(grid1, np.zeros(grid1.shape))
        rep = nonlinearity_bound_check(z, 0.5, 2, 0.0)
        assert rep.trivial
        assert rep.c_measured == 0.0

    def test_measured_constant_finite(self, grid1):
        u = _scaled_initial(grid1, 1e-2)
        rep = nonlinearity_bound_check(u, 0.5, 2, 0.0)
        assert not rep.trivial
        assert 0.0 < rep.c_measured < 1e3
        assert rep.x1 <= 0.5

    def test_pair_difference(self, grid1):
        u1 = _scaled_initial(grid1, 1e-2)
        u2 = _scaled_initial(grid1, 2e-2)
        rep = nonlinearity_bound_check(u1, 0.5, 2, 0.0, pair=(u1, u2))
        assert math.isfinite(rep.pair_c_measured)
        assert rep.pair_c_measured > 0.0
        assert rep.pair_difference_x1 > 0.0

    def test_radius_gate(self, grid1):
        u = _scaled_initial(grid1, 1e-2)
        with pytest.raises(ValueError, match="strictly below 1"):
            nonlinearity_bound_check(u, 1.0, 2, 0.0)

    def test_outside_ball_gate(self, grid1):
        u = _scaled_initial(grid1, 1e-1)
        with pytest.raises(ValueError, match="outside the admissible ball"):
            nonlinearity_bound_check(u, 1e-6, 2, 0.0)


# ---------------------------------------------------------------------------
# strong residuals
# ---------------------------------------------------------------------------


class TestResiduals:
    @pytest.mark.parametrize("sigma", [-0.5, 0.0, 1.0])
    def test_wave_pe_residual(self, grid1, sigma):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(sigma), stretch=0.2))
        assert pe_residual_sup(tw.pe_solution(grid1), sigma) < 1e-12

    def test_tilted_wave_pe_residual(self, grid2):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0), tilt=(0.05,),
                                        stretch=0.1))
        assert pe_residual_sup(tw.pe_solution(grid2), 0.0) < 1e-12

    def test_drift_solves_linear_equation(self, grid1):
        for sigma in (-0.5, 0.0, 1.0):
            drift = AnalyticField.from_sympy(
                grid1, "y1 + %.17g*s" % (1.0 + sigma))
            res = pe_residual(drift, sigma, source=None)
            assert np.max(np.abs(res.values)) < 1e-12

    @pytest.mark.parametrize("sigma", [-0.5, 0.0, 1.0])
    def test_wave_tpe_residual(self, grid1, sigma):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(sigma), stretch=0.2))
        assert tpe_residual_sup(tw.w_field(grid1), sigma) < 1e-12

    def test_tpe_monotonicity_gate(self, grid1):
        w = AnalyticField.from_sympy(grid1, "-y1")
        with pytest.raises(ValueError, match="monotonicity violated"):
            tpe_residual_sup(w, 0.0)


# ---------------------------------------------------------------------------
# fixed point
# ---------------------------------------------------------------------------


class TestFixedPoint:
    def test_zero_initial_data(self, grid1):
        z = SampledField(grid1, np.zeros(grid1.shape))
        u, trace = pe_fixed_point(z, FixedPointConfig(), 0.0)
        assert trace.converged
        assert trace.iterations == 1
        assert trace.x_norm_final == 0.0
        assert np.max(np.abs(u.values)) == 0.0

    def test_tilted_wave_is_fixed_point(self, grid2, picard_run_tilted):
        tw, u_star, trace = picard_run_tilted
        exact = tw.pe_solution(grid2)
        assert trace.converged
        assert np.max(np.abs(u_star.values - exact.values)) < 1e-8
        assert u_star.tilt == pytest.approx(tuple(tw.family.tilt))

    def test_converged_run_trace(self, picard_run):
        _, u_star, trace = picard_run
        assert trace.converged
        assert trace.contraction_factor < 0.2
        assert trace.grad0 == pytest.approx(1e-2, rel=1e-3)
        assert trace.x_norm_final > 0.0
        assert trace.c1_measured > 0.0
        assert trace.sampler_fingerprint
        # successive Picard differences shrink geometrically
        assert all(r < 1.0 for r in trace.ratios[:-1])

    def test_solution_solves_equation(self, picard_run):
        _, u_star, _ = picard_run
        assert pe_residual_sup(u_star, 0.0) < 5e-2

    def test_contraction_factor_grows_with_size(self, grid1):
        factors = {}
        for eps in (1e-3, 1e-2, 1e-1):
            u0 = _scaled_initial(grid1, eps)
            cfg = FixedPointConfig(lipschitz_bound=eps * 1.0001,
                                   ball_radius=0.5)
            _, trace = pe_fixed_point(u0, cfg, 0.0)
            factors[eps] = trace.contraction_factor
        assert factors[1e-3] < factors[1e-2] < factors[1e-1] < 0.2
        # roughly linear in the slope size
        assert factors[1e-1] / factors[1e-3] > 20.0

    def test_large_slope_breaks_small_factor(self, grid1):
        # at slope 0.5 the iteration is no longer an eps-size contraction:
        # it may still converge, but the measured factor is far above the
        # small-slope regime (or the iteration fails outright)
        u0 = _scaled_initial(grid1, 0.5)
        cfg = FixedPointConfig(lipschitz_bound=0.5001, ball_radius=0.6)
        try:
            _, trace = pe_fixed_point(u0, cfg, 0.0)
            assert trace.contraction_factor > 0.4
        except ContractionError:
            pass

    def test_lipschitz_gate(self, grid1):
        u0 = AnalyticField.from_sympy(grid1, "0.5*y1")
        with pytest.raises(ValueError, match="Lipschitz bound"):
            pe_fixed_point(u0, FixedPointConfig(lipschitz_bound=1e-2), 0.0)

    def test_ball_radius_gate(self):
        with pytest.raises(ValueError, match="ball radius"):
            FixedPointConfig(ball_radius=1.2)


# ---------------------------------------------------------------------------
# decay and analyticity surveys
# ---------------------------------------------------------------------------


class TestDecaySurveys:
    def test_wave_decay_constants(self, grid2, picard_run_tilted):
        tw, u_star, _ = picard_run_tilted
        rep = decay_check(u_star, tw.pe_initial(grid2))
        # the wave perturbation has constant gradient: c(0,0) = 1 exactly
        assert rep.constant(0, (0, 0)) == pytest.approx(1.0, rel=1e-9)
        higher = max(c for k, a, c in rep.entries if k + sum(a) > 0)
        assert higher < 1e-7

    def test_solved_decay_constants(self, grid1, picard_run):
        u0, u_star, _ = picard_run
        rep = decay_check(u_star, u0)
        assert len(rep.entries) == 6        # all k + |alpha| <= 2 on n = 1
        for _, _, c in rep.entries:
            assert 0.0 < c < 10.0

    def test_decay_refinement_stability(self, picard_run):
        u0, u_star, _ = picard_run
        rep = decay_check(u_star, u0)
        fine = HalfSpaceGrid(n=1, s_max=1.0, n_time=48, zeta_max=3.0,
                             n_vertical=144)
        u0f = _scaled_initial(fine, 1e-2)
        cfg = FixedPointConfig(lipschitz_bound=1e-2 * 1.0001, ball_radius=0.5)
        u_star_f, _ = pe_fixed_point(u0f, cfg, 0.0)
        rep_f = decay_check(u_star_f, u0f)
        assert rep.compare(rep_f) < 0.25

    def test_order_gate(self):
        g = HalfSpaceGrid(n=1, s_max=1.0, n_time=4, zeta_max=2.0,
                          n_vertical=32)
        u = AnalyticField.from_sympy(g, "0.01*y1*s")
        u0 = AnalyticField.from_sympy(g, "0*y1")
        with pytest.raises(ValueError, match="derivative order unavailable"):
            decay_check(u, u0, orders=((2, (0,)),))

    def test_wave_analyticity_trivial(self, grid2):
        # exact wave: the gradient is constant, every higher term vanishes
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0), tilt=(1e-2,)))
        rep = analyticity_factorial_check(tw.pe_solution(grid2), max_order=3,
                                          u0=tw.pe_initial(grid2))
        assert rep.trivial
        assert not rep.skipped

    def test_solved_factorial_envelope(self, grid1, picard_run):
        u0, u_star, _ = picard_run
        rep = analyticity_factorial_check(u_star, max_order=3, u0=u0)
        assert not rep.skipped
        assert rep.fitted
        assert rep.lambda_fit > 0.0
        assert len(rep.envelope) == 4
        assert all(v >= 0.0 for v in rep.envelope)

    def test_analyticity_skip_on_short_grid(self):
        g = HalfSpaceGrid(n=1, s_max=1.0, n_time=5, zeta_max=2.0,
                          n_vertical=32)
        rep = analyticity_factorial_check(
            AnalyticField.from_sympy(g, "0.01*y1"), max_order=3)
        assert rep.skipped
        assert "time resolution" in rep.reason


# ---------------------------------------------------------------------------
# parameter family and scaling
# ---------------------------------------------------------------------------


class TestEquivariance:
    def test_identity_transform(self, picard_run):
        _, u_star, _ = picard_run
        rep = parameter_family_equivariance(u_star, 0.0, tau=1.0)
        assert rep.residual_ratio == pytest.approx(1.0, abs=1e-9)
        assert rep.tau_derivative_gap < 1e-3
        assert all(g < 1e-3 for g in rep.xi_derivative_gaps)

    def test_slowed_run_stays_solution(self, picard_run):
        _, u_star, _ = picard_run
        rep = parameter_family_equivariance(u_star, 0.0, tau=0.9)
        assert rep.residual_ratio < 10.0

    def test_wave_family_closed(self, grid2):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0), tilt=(1e-2,)))
        rep = parameter_family_equivariance(tw.pe_solution(grid2), 0.0,
                                            tau=1.05, xi_prime=[2e-3])
        assert rep.residual_sup < 1e-10
        assert rep.tau_derivative_gap < 1e-3
        assert all(g < 1e-3 for g in rep.xi_derivative_gaps)

    def test_tilted_run_derivatives(self, picard_run_tilted):
        _, u_star, _ = picard_run_tilted
        rep = parameter_family_equivariance(u_star, 0.0, tau=0.95,
                                            xi_prime=[1e-3])
        assert rep.residual_ratio < 10.0
        assert rep.tau_derivative_gap < 1e-3
        assert all(g < 1e-3 for g in rep.xi_derivative_gaps)

    def test_sampled_speedup_leaves_grid(self, grid1, picard_run):
        _, u_star, _ = picard_run
        plain = SampledField(grid1, u_star.values.copy())
        with pytest.raises(ValueError, match="leaves the grid"):
            parameter_family_equivariance(plain, 0.0, tau=1.05)


class TestScaling:
    def test_identity_factor(self, picard_run):
        _, u_star, _ = picard_run
        u_hat, rep = scaling_equivariance(u_star, 0.0, 1.0)
        assert rep.residual_ratio == pytest.approx(1.0, abs=1e-9)
        assert np.max(np.abs(u_hat.values - u_star.values)) == 0.0

    def test_drift_closed_form(self, grid1):
        drift = AnalyticField.from_sympy(grid1, "y1 + s")
        u_hat, rep = scaling_equivariance(drift, 0.0, 4.0, source=None)
        exact = AnalyticField.from_sympy(u_hat.grid, "y1 + s")
        assert np.max(np.abs(u_hat.values - exact.values)) < 1e-12
        assert rep.scaled_residual_sup < 1e-10

    def test_solved_run(self, picard_run):
        _, u_star, _ = picard_run
        u_hat, rep = scaling_equivariance(u_star, 0.0, 2.0, source="auto")
        assert rep.residual_ratio == pytest.approx(1.0, abs=1e-6)
        assert u_hat.grid.s_max == pytest.approx(0.5)
        assert u_hat.grid.y_max == pytest.approx(u_star.grid.y_max / 2.0)

    def test_factor_gate(self, grid1):
        u = AnalyticField.from_sympy(grid1, "0.01*y1")
        with pytest.raises(ValueError, match="positive"):
            scaling_equivariance(u, 0.0, -2.0)


# ---------------------------------------------------------------------------
# travelling waves
# ---------------------------------------------------------------------------


class TestTravellingWave:
    def test_flat_wave_values(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0)))
        assert tw.w(1.0, np.array([3.0])) == pytest.approx(2.0)
        assert tw.pressure(0.5, np.array([1.0])) == pytest.approx(1.5)
        assert tw.density(0.5, np.array([1.0])) == pytest.approx(0.75)
        assert tw.pressure(0.5, np.array([-2.0])) == pytest.approx(-1.5)
        assert tw.density(0.5, np.array([-2.0])) == 0.0
        assert tw.speed_coefficient == 0.0
        assert tw.slope == 1.0

    def test_stretched_wave_speed(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(1.0), stretch=0.25))
        assert tw.slope == pytest.approx(1.25)
        assert tw.speed_coefficient == pytest.approx(2.0 * 0.25 / 1.25)

    def test_unpacks_to_callable_triple(self):
        w, pressure, density = travelling_wave(
            WaveFamily(sigma=SigmaParam(1.0), stretch=0.25))
        assert callable(w) and callable(pressure) and callable(density)

    def test_tilted_wave_grid_fields(self, grid2):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0), tilt=(0.05,)))
        u = tw.pe_solution(grid2)
        assert u.tilt == pytest.approx((0.05,))
        w = tw.w_field(grid2)
        assert tpe_residual_sup(w, 0.0) < 1e-12

    def test_stretch_gate(self):
        with pytest.raises(ValueError, match="stretch"):
            WaveFamily(sigma=SigmaParam(0.0), stretch=-1.5)

    def test_tilted_slab_gate(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0), tilt=(0.1,)))
        with pytest.raises(ValueError, match="tilted"):
            tw.pressure_slab(1.0, -2.0, 2.0)


# ---------------------------------------------------------------------------
# graph inversion (von Mises chain)
# ---------------------------------------------------------------------------


class TestGraphInversion:
    def test_flat_wave_exact(self, grid1):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0)))
        slab, rep = von_mises(tw.w_field(grid1), 0.0)
        tt, xx = np.meshgrid(slab.t_nodes, slab.x_nodes, indexing="ij")
        exact = tw.pressure(tt, xx[..., None])
        assert np.max(np.abs(slab.values - exact)) < 1e-10
        assert rep.lower == pytest.approx(1.0, abs=1e-10)
        assert rep.upper == pytest.approx(1.0, abs=1e-10)
        assert rep.slope_deviation < 1e-12
        assert rep.admissible

    def test_stretched_wave_slope(self, grid1):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(1.0), stretch=0.25))
        slab, _ = von_mises(tw.w_field(grid1), 1.0)
        dvdx = slab.gradient()[-1]
        assert np.max(np.abs(dvdx - 1.0 / 1.25)) < 1e-9
        # time is rescaled: t = (1 + sigma) s
        assert slab.t_nodes[-1] == pytest.approx(2.0 * grid1.s_max)

    @pytest.mark.parametrize("sigma,stretch", [(0.0, 0.0), (1.0, 0.25),
                                               (-0.5, 0.1)])
    def test_wave_round_trip_exact(self, grid1, sigma, stretch):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(sigma),
                                        stretch=stretch))
        assert von_mises_round_trip(tw.w_field(grid1), sigma) < 1e-8

    def test_solved_graph_quasi_isometry(self, solved_slab):
        _, rep = solved_slab
        assert rep.admissible
        assert 0.97 < rep.lower <= 1.0 + 1e-9
        assert 1.0 - 1e-9 <= rep.upper < 1.03
        assert rep.slope_deviation < 2e-2

    def test_solved_graph_round_trip(self, solved_graph):
        # non-affine columns carry the interpolant's representation error
        assert von_mises_round_trip(solved_graph, 0.0) < 2e-6

    def test_tilt_rejected(self, grid2):
        w = SampledField(
            grid2, np.broadcast_to(grid2.meshgrid()[-1], grid2.shape).copy(),
            tilt=(0.1,))
        with pytest.raises(ValueError, match="untilted"):
            von_mises(w, 0.0)

    def test_monotonicity_gate(self, grid1):
        w = AnalyticField.from_sympy(grid1, "-y1")
        with pytest.raises(ValueError, match="monotonicity violated"):
            von_mises(w, 0.0)


# ---------------------------------------------------------------------------
# pressure-to-density chain and weak residuals
# ---------------------------------------------------------------------------


class TestDensityChain:
    def test_closed_form_slab(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(1.0), stretch=0.25))
        v = tw.pressure_slab(1.0, -2.0, 2.5, n_time=40, n_x=160)
        rho, pmpe, weak = pressure_to_density_and_residuals(v)
        exact = tw.density_slab(1.0, -2.0, 2.5, n_time=40, n_x=160)
        assert np.max(np.abs(rho.values - exact.values)) < 1e-12
        assert pmpe < 1e-9
        assert weak[0] == 0.0          # bump in the empty region
        assert max(weak) < 2e-2

    def test_weak_residuals_refine(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(1.0), stretch=0.25))
        sups = []
        for nt, nx in ((40, 160), (80, 320)):
            v = tw.pressure_slab(1.0, -2.0, 2.5, n_time=nt, n_x=nx)
            _, _, weak = pressure_to_density_and_residuals(v)
            sups.append(max(weak))
        assert sups[1] < sups[0] / 3.0

    def test_solved_slab(self, solved_slab):
        slab, _ = solved_slab
        _, pmpe, weak = pressure_to_density_and_residuals(slab)
        assert pmpe < 1e-3
        assert max(weak) < 5e-2

    def test_sigma_mismatch_gate(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0)))
        v = tw.pressure_slab(1.0, -2.0, 2.5, n_time=20, n_x=80)
        with pytest.raises(ValueError, match="disagrees with the slab"):
            pressure_to_density_and_residuals(v, sigma=1.0)

    def test_claimed_positivity_gate(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0)))
        v = tw.pressure_slab(1.0, -2.0, 2.5, n_time=20, n_x=80)
        claimed = np.ones_like(v.values, dtype=bool)
        with pytest.raises(ValueError, match="claimed positivity"):
            pressure_to_density_and_residuals(v, claimed_positive=claimed)


class TestInterface:
    def test_flat_wave_interface(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0)))
        rho = tw.density_slab(1.0, -2.0, 2.5, n_time=40, n_x=160)
        iface = interface_extract(rho, 0.0)
        slope, intercept, dev = iface.line_fit()
        assert slope == pytest.approx(-1.0, abs=1e-9)
        assert abs(intercept) < 1e-9
        assert dev < 1e-9
        assert iface.lipschitz_constant() == pytest.approx(1.0, abs=1e-9)

    def test_flat_wave_level_set(self):
        # rho = (x + t)_+ / 2 = 1/2 exactly on the line x = 1 - t
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0)))
        rho = tw.density_slab(1.0, -2.0, 2.5, n_time=40, n_x=160)
        iface = interface_extract(rho, 0.5)
        slope, intercept, dev = iface.line_fit()
        assert slope == pytest.approx(-1.0, abs=1e-7)
        assert intercept == pytest.approx(1.0, abs=1e-7)
        assert dev < 1e-6

    def test_stretched_wave_interface(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(1.0), stretch=0.25))
        rho = tw.density_slab(1.0, -2.0, 2.5, n_time=40, n_x=160)
        slope, intercept, dev = interface_extract(rho, 0.0).line_fit()
        assert slope == pytest.approx(-1.0 / 1.25, abs=1e-9)
        assert abs(intercept) < 1e-9

    def test_level_gates(self):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0)))
        rho = tw.density_slab(1.0, -2.0, 2.5, n_time=20, n_x=80)
        with pytest.raises(ValueError, match="nonnegative"):
            interface_extract(rho, -0.1)
        with pytest.raises(ValueError, match="above the field maximum"):
            interface_extract(rho, 99.0)


# ---------------------------------------------------------------------------
# energy identity and weak-form batteries
# ---------------------------------------------------------------------------


class TestEnergyIdentity:
    def test_zero_field(self, grid1):
        z = SampledField(grid1, np.zeros(grid1.shape))
        rep = energy_identity_check(z, None, 0.0)
        assert rep.identity_gap == 0.0

    @pytest.mark.parametrize("sigma", [-0.5, 0.0, 1.0])
    def test_drift_closed_form(self, grid1, sigma):
        drift = AnalyticField.from_sympy(
            grid1, "y1 + %.17g*s" % (1.0 + sigma))
        rep = energy_identity_check(drift, None, sigma)
        assert rep.identity_gap < 1e-6
        assert rep.grad_term > 0.0

    def test_refinement_order(self):
        y1, s = sp.symbols("y1 s")
        expr = sp.Rational(1, 20) * sp.sin(2 * y1) * sp.exp(-y1) \
            * sp.sin(sp.pi * s)
        gaps = []
        for nt, nv in ((16, 48), (32, 96)):
            g = HalfSpaceGrid(n=1, s_max=1.0, n_time=nt, zeta_max=3.0,
                              n_vertical=nv)
            f = AnalyticField.from_sympy(g, expr)
            u = duhamel_solve(SampledField(g, np.zeros(g.shape)), f, 0.0)
            rep = energy_identity_check(u, SampledField(g, f.values), 0.0)
            gaps.append(rep.identity_gap)
            assert rep.higher_applicable
            assert 0.0 < rep.higher_c < 10.0
        # first-order time quadrature at worst: halving steps halves the gap
        assert gaps[0] / gaps[1] > 2.0

    def test_tangential_auxiliary_estimate(self, grid2, picard_run_tilted):
        _, u_star, _ = picard_run_tilted
        f = nonlinearity_eval(u_star, 0.0)
        rep = energy_identity_check(u_star, f, 0.0)
        assert math.isfinite(rep.aux_c)
        assert rep.aux_c >= 0.0

    def test_auxiliary_estimate_needs_tangential_axis(self, grid1,
                                                      picard_run):
        _, u_star, _ = picard_run
        f = nonlinearity_eval(u_star, 0.0)
        rep = energy_identity_check(u_star, f, 0.0)
        assert math.isnan(rep.aux_c)

    def test_grid_mismatch_gate(self, grid1, picard_run):
        _, u_star, _ = picard_run
        other = HalfSpaceGrid(n=1, s_max=1.0, n_time=16, zeta_max=3.0,
                              n_vertical=48)
        f = SampledField(other, np.zeros(other.shape))
        with pytest.raises(ValueError, match="different grids"):
            energy_identity_check(u_star, f, 0.0)


class TestSolutionBatteries:
    def test_solved_run_battery(self, picard_run):
        _, u_star, _ = picard_run
        f = nonlinearity_eval(u_star, 0.0)
        res = sigma_solution_battery(u_star, f, 0.0, count=12)
        assert len(res) == 12
        assert max(res) < 3e-2

    def test_interior_battery_tighter(self, picard_run):
        _, u_star, _ = picard_run
        f = nonlinearity_eval(u_star, 0.0)
        res = sigma_solution_battery(u_star, f, 0.0, count=12,
                                     boundary_fraction=0.0)
        assert max(res) < 2e-2

    def test_wave_battery(self, grid1):
        tw = travelling_wave(WaveFamily(sigma=SigmaParam(0.0), stretch=0.2))
        u = tw.pe_solution(grid1)
        f = nonlinearity_eval(u, 0.0)
        res = sigma_solution_battery(u, f, 0.0, count=12)
        assert max(res) < 1e-2

    def test_iterated_battery(self, picard_run):
        _, u_star, _ = picard_run
        f = nonlinearity_eval(u_star, 0.0)
        res = iterated_solution_battery(u_star, f, 0.0, count=12)
        assert max(res) < 2e-2

    def test_batteries_are_seeded(self, picard_run):
        _, u_star, _ = picard_run
        f = nonlinearity_eval(u_star, 0.0)
        a = sigma_solution_battery(u_star, f, 0.0, count=6, seed=7)
        b = sigma_solution_battery(u_star, f, 0.0, count=6, seed=7)
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# slab container
# ---------------------------------------------------------------------------


class TestCartesianSlab:
    def test_uniformity_gates(self):
        t_bad = np.array([0.0, 0.1, 0.5])
        x = np.linspace(0.0, 1.0, 5)
        with pytest.raises(ValueError, match="uniform"):
            CartesianSlab(0.0, t_bad, x, np.zeros((3, 5)))
        t = np.linspace(0.0, 1.0, 3)
        x_bad = np.array([0.0, 0.2, 0.3, 0.9, 1.0])
        with pytest.raises(ValueError, match="uniform"):
            CartesianSlab(0.0, t, x_bad, np.zeros((3, 5)))

    def test_derivatives_match_closed_form(self):
        t = np.linspace(0.0, 1.0, 33)
        x = np.linspace(-1.0, 1.0, 65)
        tt, xx = np.meshgrid(t, x, indexing="ij")
        slab = CartesianSlab(0.0, t, x, np.sin(tt) * np.cos(xx))
        dv_dt = slab.derivative(k=1)
        dv_dx = slab.derivative(0, (1,))
        assert np.max(np.abs(dv_dt - np.cos(tt) * np.cos(xx))) < 1e-6
        assert np.max(np.abs(dv_dx + np.sin(tt) * np.sin(xx))) < 1e-6
        assert slab.n == 1
        assert slab.dt == pytest.approx(t[1] - t[0])
        assert slab.dx == pytest.approx(x[1] - x[0])
