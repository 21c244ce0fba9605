import math

import numpy as np
import pytest

from loschmidt.analysis import (
    IntegrationScheme,
    choose_grid,
    default_energy_grid,
    filter_coefficients,
    integrate_gradient,
    ldos,
    subtract_mean_energy,
)
from loschmidt.series import EchoEntry, EchoSeries


def make_series(times, g_values, dr=0.0, dphi=0.0):
    phis = np.unwrap(np.angle(g_values))
    entries = [
        EchoEntry(label=k, t=float(t), r=float(abs(g)), phi=float(p), dr=dr, dphi=dphi)
        for k, (t, g, p) in enumerate(zip(times, g_values, phis))
    ]
    return EchoSeries(entries)


class TestIntegrateGradient:
    @pytest.mark.parametrize("method", ["trapezoid", "simpson"])
    def test_constant_gradient_exact(self, method):
        ts = np.linspace(0.0, 3.0, 13)
        phi, dphi = integrate_gradient(ts, -1.7 * np.ones(13), np.zeros(13), IntegrationScheme(method))
        assert np.max(np.abs(phi + 1.7 * ts)) < 1e-12
        assert np.all(dphi == 0)

    def test_simpson_error_ratio_near_sixteen(self):
        errs = []
        for n in (16, 32):
            ts = np.linspace(0.0, np.pi, n + 1)
            phi, _ = integrate_gradient(ts, np.cos(ts), np.zeros(n + 1), IntegrationScheme("simpson"))
            errs.append(np.max(np.abs(phi - np.sin(ts))))
        ratio = errs[0] / errs[1]
        assert 10.0 < ratio < 24.0

    @pytest.mark.parametrize(
        "method,expected,tol", [("trapezoid", 2.0, 0.2), ("simpson", 4.0, 0.3)]
    )
    def test_convergence_slope(self, method, expected, tol):
        errs, sizes = [], [8, 16, 32, 64]
        for n in sizes:
            ts = np.linspace(0.0, 2.0, n + 1)
            grad = np.exp(-ts) * np.cos(3 * ts)
            exact = (np.exp(-ts) * (3 * np.sin(3 * ts) - np.cos(3 * ts)) + 1) / 10.0
            phi, _ = integrate_gradient(ts, grad, np.zeros(n + 1), IntegrationScheme(method))
            errs.append(abs(phi[-1] - exact[-1]))
        slope = -np.polyfit(np.log(sizes), np.log(errs), 1)[0]
        assert abs(slope - expected) < tol

    def test_uncertainty_root_sum_square(self):
        ts = np.linspace(0.0, 1.0, 5)
        eta = 0.3
        _, dphi = integrate_gradient(ts, np.zeros(5), eta * np.ones(5), IntegrationScheme("trapezoid"))
        h = 0.25
        expected_final = eta * h * math.sqrt(0.25 + 3 * 1.0 + 0.25)
        assert dphi[-1] == pytest.approx(expected_final)

    def test_rejects_unequal_spacing(self):
        ts = np.array([0.0, 0.1, 0.3])
        with pytest.raises(ValueError, match="equally spaced"):
            integrate_gradient(ts, np.zeros(3), np.zeros(3), IntegrationScheme("trapezoid"))

    def test_rejects_odd_interval_count_for_simpson(self):
        ts = np.linspace(0.0, 1.0, 4)
        with pytest.raises(ValueError, match="even"):
            integrate_gradient(ts, np.zeros(4), np.zeros(4), IntegrationScheme("simpson"))

    def test_rejects_grid_not_starting_at_zero(self):
        ts = np.array([0.5, 1.0, 1.5])
        with pytest.raises(ValueError, match="t=0"):
            integrate_gradient(ts, np.zeros(3), np.zeros(3), IntegrationScheme("trapezoid"))


class TestChooseGrid:
    def test_degenerate_clamp(self):
        n_times, _ = choose_grid(2, 0.05, 10.0, IntegrationScheme("simpson"))
        assert n_times == 2

    def test_monotonic_in_epsilon(self):
        scheme = IntegrationScheme("simpson")
        raw = lambda eps: (4 * 3.0 / eps) ** (1 / 4) * 3.0
        assert raw(2e-3) / raw(1e-3) == pytest.approx(2 ** (-1 / 4))
        n1, _ = choose_grid(4, 3.0, 1e-3, scheme)
        n2, _ = choose_grid(4, 3.0, 2e-3, scheme)
        assert n2 <= n1

    def test_eta_scaling(self):
        n_times, eta = choose_grid(4, 3.0, 1e-2, IntegrationScheme("simpson"))
        assert eta == pytest.approx(1e-2 / math.sqrt(n_times))
        assert n_times % 2 == 0

    def test_rejects_nonpositive_epsilon(self):
        with pytest.raises(ValueError):
            choose_grid(4, 3.0, 0.0, IntegrationScheme("simpson"))


class TestFilterCoefficients:
    def test_zero_time_closed_form(self):
        delta, t_max, r = 0.25, 6.0, 24
        coeffs = dict(filter_coefficients(delta, t_max, r))
        dt = t_max / r
        assert coeffs[0.0] == pytest.approx(dt * delta / math.sqrt(2 * math.pi))

    def test_even_symmetry(self):
        coeffs = filter_coefficients(0.25, 6.0, 24)
        lookup = {round(t, 12): c for t, c in coeffs}
        for t, c in coeffs:
            assert c == pytest.approx(lookup[round(-t, 12)])

    def test_count_and_spacing(self):
        coeffs = filter_coefficients(0.4, 5.0, 10)
        assert len(coeffs) == 21
        ts = sorted(t for t, _ in coeffs)
        assert np.allclose(np.diff(ts), 0.5)


class TestLdos:
    def test_single_line_spectrum(self):
        # eigenstate echo exp(-i E0 t): peak at E0 with Gaussian profile
        e0, delta, t_max, r = 1.3, 0.25, 40.0, 400
        coeffs = filter_coefficients(delta, t_max, r)
        ts = [t for t, _ in coeffs if t >= -1e-12]
        series = make_series(ts, np.exp(-1j * e0 * np.array(ts)))
        grid = np.linspace(e0 - 2, e0 + 2, 801)
        spec = ldos(series, coeffs, grid)
        assert abs(spec.peak_energy() - e0) < 0.01
        target = np.exp(-((grid - e0) ** 2) / (2 * delta**2))
        assert np.max(np.abs(spec.density - target)) < 0.01

    def test_trivial_hamiltonian_gaussian_at_zero(self):
        delta, t_max, r = 0.25, 40.0, 400
        coeffs = filter_coefficients(delta, t_max, r)
        ts = [t for t, _ in coeffs if t >= -1e-12]
        series = make_series(ts, np.ones(len(ts), dtype=complex))
        grid = np.linspace(-2, 2, 801)
        spec = ldos(series, coeffs, grid)
        assert abs(spec.peak_energy()) < 0.01

    def test_realness_for_conjugate_symmetric_input(self):
        coeffs = filter_coefficients(0.25, 30.0, 300)
        ts = [t for t, _ in coeffs if t >= -1e-12]
        rng = np.random.default_rng(4)
        es = rng.normal(size=6)
        ws = np.abs(rng.normal(size=6))
        ws /= ws.sum()
        gs = np.array([np.sum(ws * np.exp(-1j * es * t)) for t in ts])
        spec = ldos(make_series(ts, gs), coeffs, np.linspace(-3, 3, 101))
        assert spec.imag_residual <= 1e-9 * np.max(spec.density)

    def test_linearity_in_the_echo(self):
        coeffs = filter_coefficients(0.3, 10.0, 50)
        ts = [t for t, _ in coeffs if t >= -1e-12]
        g1 = np.exp(-1j * 0.7 * np.array(ts))
        g2 = np.exp(-1j * (-0.9) * np.array(ts))
        lam = 0.3
        grid = np.linspace(-2, 2, 101)
        mix_entries = []
        g_mix = lam * g1 + (1 - lam) * g2
        # build the mixed series from magnitude/phase of the combined echo
        series_mix = make_series(ts, g_mix)
        d_mix = ldos(series_mix, coeffs, grid).density
        d1 = ldos(make_series(ts, g1), coeffs, grid).density
        d2 = ldos(make_series(ts, g2), coeffs, grid).density
        assert np.max(np.abs(d_mix - (lam * d1 + (1 - lam) * d2))) < 1e-12

    def test_truncated_series_reports_missing_range(self):
        coeffs = filter_coefficients(0.25, 6.0, 24)
        ts = [t for t, _ in coeffs if -1e-12 <= t <= 3.0]
        series = make_series(ts, np.ones(len(ts), dtype=complex))
        with pytest.raises(ValueError, match="missing times"):
            ldos(series, coeffs, np.linspace(-1, 1, 11))

    def test_uncertainty_propagation_scales(self):
        coeffs = filter_coefficients(0.25, 20.0, 80)
        ts = [t for t, _ in coeffs if t >= -1e-12]
        series_a = make_series(ts, np.exp(-1j * 0.5 * np.array(ts)), dr=0.01, dphi=0.0)
        series_b = make_series(ts, np.exp(-1j * 0.5 * np.array(ts)), dr=0.02, dphi=0.0)
        grid = np.linspace(-1, 2, 31)
        ua = ldos(series_a, coeffs, grid).uncertainty
        ub = ldos(series_b, coeffs, grid).uncertainty
        assert np.allclose(ub, 2 * ua)


def test_default_energy_grid_span():
    grid = default_energy_grid(-3.0, 5.0, 0.25, 101)
    assert grid[0] == pytest.approx(-4.0)
    assert grid[-1] == pytest.approx(6.0)
    assert grid.size == 101


def test_subtract_mean_energy_is_display_only():
    ts = np.linspace(0, 2, 9)
    series = make_series(ts, np.exp(-1j * 2.0 * ts))
    shifted = subtract_mean_energy(series, 2.0)
    assert np.max(np.abs([e.phi for e in shifted.entries])) < 1e-12
    assert [e.phi for e in series.entries][-1] != 0.0


@pytest.mark.slow
def test_ldos_uncertainty_propagation_sanity():
    # empirical scatter of the peak density over shot-noise seeds lies within
    # [0.5x, 2x] of the propagated uncertainty
    from loschmidt.model import case_study_hamiltonian, optimize_ansatz, prepare_ansatz, time_series_sequence
    from loschmidt.noise import BasisOutcomes, exact_outcome_probabilities
    from loschmidt.protocols import _sht_circuits, sht_reconstruct
    from loschmidt.reference import exact_circuit_echo, exact_ldos, spectral_decomposition
    from loschmidt.statevector import Circuit, basis_rotation

    n, delta, t_max, r_points, shots = 4, 0.4, 10.0, 40, 2000
    h = case_study_hamiltonian(n, 0.5)
    spec, _ = optimize_ansatz(h, "product", restarts=4, seed=14)
    prep = prepare_ansatz(spec, n)
    entries = time_series_sequence(h, t_max, 0.25)
    amps_exact = [1.0] + [abs(exact_circuit_echo(e.full_circuit(), prep)) for e in entries]

    dists = []
    for e in entries:
        core = _sht_circuits(prep, e.prefix, e.gate, e.suffix)
        per = []
        for basis in ("x", "y"):
            c = Circuit(core.n_qubits, list(core.gates))
            c.append(basis_rotation(n, basis))
            c.extend(prep.inverse().gates)
            per.append(exact_outcome_probabilities(c, BasisOutcomes((0, 1))))
        dists.append(per)
    surv = [None] + [
        exact_outcome_probabilities(
            prep.compose(e.full_circuit()).compose(prep.inverse()), BasisOutcomes((0,))
        )[0]
        for e in entries
    ]

    coeffs = filter_coefficients(delta, t_max, r_points)
    dec = spectral_decomposition(h)
    peak_grid = np.array([float(dec.eigenvalues[0])])
    times = [0.0] + [e.t_effective for e in entries]
    labels = list(range(len(entries) + 1))

    peak_values, propagated = [], []
    master = np.random.SeedSequence(777)
    for sub in master.spawn(200):
        rng = np.random.default_rng(sub)
        steps, amps, dr = [], [1.0], [0.0]
        for idx in range(len(entries)):
            per = []
            for probs in dists[idx]:
                counts = rng.multinomial(shots, probs / probs.sum())
                per.append((counts[0] - counts[1]) / shots)
            steps.append(tuple(per))
            k = rng.binomial(shots, surv[idx + 1])
            p_hat = k / shots
            r_hat = np.sqrt(max(p_hat, 1e-12))
            amps.append(r_hat)
            dr.append(0.5 * np.sqrt(p_hat * (1 - p_hat) / shots) / max(r_hat, 1e-6))
        series = sht_reconstruct(steps, amps, shots=[shots] * len(entries), labels=labels, times=times, dr=dr)
        spec_out = ldos(series, coeffs, peak_grid)
        peak_values.append(spec_out.density[0])
        propagated.append(spec_out.uncertainty[0])

    empirical = float(np.std(peak_values, ddof=1))
    mean_prop = float(np.mean(propagated))
    assert 0.5 * mean_prop <= empirical <= 2.0 * mean_prop
