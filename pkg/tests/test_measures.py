from fractions import Fraction

import numpy as np
import pytest

from branchenv import kernels as kn
from branchenv import measures as ms
from branchenv import particles as pt


@pytest.fixture(scope="module")
def rho_box():
    return kn.build_rho(kn.box_kernel(dim=1))


@pytest.fixture(scope="module")
def rho_zero():
    return kn.build_rho(kn.zero_kernel(dim=1))


class TestTestFunctions:
    @pytest.mark.parametrize("phi", [
        ms.constant_function(2.5, dim=1),
        ms.coordinate_function(0, dim=2),
        ms.gaussian_bump(0.3, 0.8, dim=1),
        ms.gaussian_bump((0.0, 1.0), 1.2, dim=2),
    ])
    def test_derivatives_match_finite_differences(self, phi):
        rng = np.random.default_rng(13)
        pts = rng.uniform(-2, 2, size=(100, phi.dim))
        g_err, h_err = ms.derivative_mismatch(phi, pts)
        assert g_err < 1e-4
        assert h_err < 1e-4


class TestPair:
    def test_constant_returns_total_mass(self):
        mu = pt.EmpiricalMeasure(8, np.random.default_rng(0).normal(size=(5, 1)))
        assert ms.pair(mu, ms.constant_function(1.0)) == mu.total_mass

    def test_two_atom_average(self):
        mu = pt.EmpiricalMeasure(2, np.array([[0.0], [1.0]]))
        phi = ms.coordinate_function(0, dim=1)
        assert ms.pair(mu, phi) == pytest.approx(0.5, abs=1e-15)

    def test_matches_extended_precision_summation(self):
        rng = np.random.default_rng(42)
        atoms = rng.normal(size=(100, 1))
        mu = pt.EmpiricalMeasure(100, atoms)
        phi = ms.gaussian_bump(0.0, 1.0)
        import math
        oracle = math.fsum(float(v) for v in phi.eval(atoms)) / 100.0
        assert ms.pair(mu, phi) == pytest.approx(oracle, rel=1e-12)

    def test_linear_and_monotone(self):
        rng = np.random.default_rng(3)
        mu = pt.EmpiricalMeasure(10, rng.normal(size=(10, 1)))
        f = ms.gaussian_bump(0.0, 1.0)
        g = ms.constant_function(0.5)
        combo = ms.TestFunction(1, lambda x: 2 * f.eval(x) + 3 * g.eval(x),
                                lambda x: 2 * f.gradient(x),
                                lambda x: 2 * f.hessian(x))
        assert ms.pair(mu, combo) == pytest.approx(
            2 * ms.pair(mu, f) + 3 * ms.pair(mu, g), rel=1e-12)
        assert ms.pair(mu, f) >= 0.0


class TestKde:
    def test_single_atom_at_center(self):
        mu = pt.EmpiricalMeasure(1, np.zeros((1, 1)))
        grid = ms.Grid(origin=(0.0,), spacing=1.0, shape=(1,))
        out = ms.kde(mu, 1.0, grid)
        assert out.values[0] == pytest.approx((2 * np.pi) ** -0.5, abs=1e-12)
        assert out.values[0] == pytest.approx(0.3989422804014327, abs=1e-9)

    def test_grid_integral_recovers_mass(self):
        rng = np.random.default_rng(7)
        mu = pt.EmpiricalMeasure(50, rng.normal(0, 0.4, size=(40, 1)))
        grid = ms.symmetric_grid(6.0, 481, dim=1)
        out = ms.kde(mu, 0.05, grid)
        integral = out.values.sum() * grid.spacing
        assert integral == pytest.approx(mu.total_mass, rel=0.01)

    def test_nonnegative_and_translation_equivariant(self):
        rng = np.random.default_rng(9)
        atoms = rng.normal(size=(20, 1))
        mu = pt.EmpiricalMeasure(20, atoms)
        grid = ms.symmetric_grid(3.0, 61, dim=1)
        out = ms.kde(mu, 0.1, grid)
        assert np.all(out.values >= 0)
        shift = 1.375
        mu2 = pt.EmpiricalMeasure(20, atoms + shift)
        grid2 = ms.Grid(origin=(grid.origin[0] + shift,), spacing=grid.spacing,
                        shape=grid.shape)
        out2 = ms.kde(mu2, 0.1, grid2)
        assert np.max(np.abs(out.values - out2.values)) < 1e-13

    def test_bandwidth_ladder_distances_decrease(self, rho_box):
        # Cauchy-in-L2 trend of heat-kernel regularizations on a fixed snapshot
        rng = np.random.default_rng(11)
        reps = 30
        grid = ms.symmetric_grid(4.0, 257, dim=1)
        ladder = [0.2, 0.1, 0.05]
        dists = np.zeros((reps, len(ladder)))
        for r in range(reps):
            sub = np.random.default_rng(5000 + r)
            init = pt.sample_initial(100, 1, sub, width=0.5)
            res = pt.simulate(100, Fraction(1, 10), 2, init, rho_box,
                              kn.gauss_correlation(), sub)
            snap = res.snapshots[-1][1]
            for c, eps in enumerate(ladder):
                a = ms.kde(snap, eps, grid).values
                b = ms.kde(snap, eps / 2, grid).values
                dists[r, c] = np.sqrt(np.sum((a - b) ** 2) * grid.spacing)
        mean = dists.mean(axis=0)
        assert mean[0] > mean[1] > mean[2]

    def test_rejects_nonpositive_bandwidth(self):
        mu = pt.EmpiricalMeasure(1, np.zeros((1, 1)))
        with pytest.raises(ms.MeasureError):
            ms.kde(mu, 0.0, ms.symmetric_grid(1.0, 11))


class TestHolderExponent:
    def test_exact_power_law(self):
        lags = [0.5 ** k for k in range(1, 7)]
        samples = [(l, (l ** 0.5) ** 2) for l in lags]
        exp, se = ms.holder_exponent(samples, moment_order=2)
        assert exp == pytest.approx(0.5, abs=1e-12)
        assert se == pytest.approx(0.0, abs=1e-10)

    def test_exact_power_law_09(self):
        lags = [0.5 ** k for k in range(1, 7)]
        samples = [(l, (l ** 0.9) ** 2) for l in lags]
        exp, _ = ms.holder_exponent(samples, moment_order=2)
        assert exp == pytest.approx(0.9, abs=1e-12)

    def test_brownian_increments(self):
        rng = np.random.default_rng(21)
        n = 2 ** 16
        path = np.cumsum(rng.standard_normal(n)) / np.sqrt(n)
        samples = []
        for k in range(4):
            lag = 2 ** k
            inc = path[lag:] - path[:-lag]
            samples.append((lag / n, np.mean(inc ** 2)))
        exp, _ = ms.holder_exponent(samples, moment_order=2)
        assert 0.45 <= exp <= 0.55

    def test_scale_invariance(self):
        lags = [0.5 ** k for k in range(1, 6)]
        samples = [(l, l ** 1.3) for l in lags]
        exp1, _ = ms.holder_exponent(samples)
        scaled = [(l, 7.5 * m) for l, m in samples]
        exp2, _ = ms.holder_exponent(scaled)
        assert exp1 == pytest.approx(exp2, abs=1e-12)

    def test_rejects_bad_input(self):
        with pytest.raises(ms.MeasureError):
            ms.holder_exponent([(0.1, 1.0), (0.2, 1.1), (0.4, 1.2)])
        with pytest.raises(ms.MeasureError):
            ms.holder_exponent([(0.1, 1.0), (0.2, 1.1), (0.4, 1.2), (0.8, 0.0)])
        with pytest.raises(ms.MeasureError):
            ms.holder_exponent([(-0.1, 1.0), (0.2, 1.1), (0.4, 1.2), (0.8, 1.0)])


def run_replicas(reps, n, T, substeps, rho, kappa, seed0, width=1.0):
    out = []
    for r in range(reps):
        rng = np.random.default_rng(seed0 + r)
        init = pt.sample_initial(n, 1, rng, width=width)
        res = pt.simulate(n, T, substeps, init, rho, kappa, rng)
        out.append(res.snapshots)
    return out


class TestMartingaleDiagnostics:
    def test_deterministic_system_constant_phi(self, rho_zero):
        # no environment, no branching noise, constant phi: M is identically 0
        replicas = run_replicas(100, 5, Fraction(1, 5), 1, rho_zero,
                                kn.const_correlation(0.0), 900)
        report = ms.martingale_diagnostics(replicas, ms.constant_function(1.0),
                                           rho_zero, kn.const_correlation(0.0))
        rows = {r["statistic"]: r for r in report["statistics"]}
        assert rows["martingale_mean"]["value"] == pytest.approx(0.0, abs=1e-14)
        assert rows["martingale_variance"]["value"] == pytest.approx(0.0, abs=1e-14)

    def test_total_mass_martingale_and_qv(self, rho_box):
        # phi = 1: variance of M_t(1) should track E int X^2(kappa) ds; with
        # kappa = c this is c * int E X_s(1)^2 ds (closed form via duality)
        kappa = kn.const_correlation(1.0)
        replicas = run_replicas(300, 100, Fraction(1, 4), 1, rho_box, kappa, 3000)
        report = ms.martingale_diagnostics(replicas, ms.constant_function(1.0),
                                           rho_box, kappa)
        rows = {r["statistic"]: r for r in report["statistics"]}
        assert rows["martingale_mean"]["pass"]
        # closed form: int_0^t e^s ds = e^t - 1
        closed = np.exp(0.25) - 1.0
        assert rows["qv_integral_mean"]["value"] == pytest.approx(closed, rel=0.15)
        assert rows["qv_relative_deviation"]["value"] < 0.35
        assert report["test_mode"] is True

    def test_center_of_mass_martingale(self, rho_box):
        # phi(x) = x has A phi = 0, so E X_t(phi) stays at X_0(phi)
        kappa = kn.gauss_correlation()
        replicas = run_replicas(150, 50, Fraction(1, 5), 2, rho_box, kappa, 7000)
        phi = ms.coordinate_function(0, dim=1)
        report = ms.martingale_diagnostics(replicas, phi, rho_box, kappa)
        rows = {r["statistic"]: r for r in report["statistics"]}
        assert rows["martingale_mean"]["pass"]

    def test_mean_shrinks_with_more_replicas(self, rho_box):
        kappa = kn.gauss_correlation()
        replicas = run_replicas(400, 25, Fraction(1, 5), 1, rho_box, kappa, 11000)
        phi = ms.gaussian_bump(0.0, 1.0)
        small = ms.martingale_diagnostics(replicas[:100], phi, rho_box, kappa)
        large = ms.martingale_diagnostics(replicas, phi, rho_box, kappa)
        t_small = abs(small["statistics"][0]["value"]) / small["statistics"][0]["stderr"]
        t_large = abs(large["statistics"][0]["value"]) / large["statistics"][0]["stderr"]
        # the standardized mean must not blow up as replicas quadruple
        assert t_large < t_small + 3.0

    def test_mismatched_grids_rejected(self, rho_zero):
        kappa = kn.const_correlation(0.0)
        replicas = run_replicas(100, 4, Fraction(1, 4), 1, rho_zero, kappa, 50)
        bad = [list(rep) for rep in replicas]
        bad[3] = bad[3][:-1]
        with pytest.raises(ms.MeasureError):
            ms.martingale_diagnostics(bad, ms.constant_function(1.0), rho_zero, kappa)
