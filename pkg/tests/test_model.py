import math

import numpy as np
import pytest
from scipy.linalg import expm

from conftest import dense_matrix
from loschmidt.model import (
    AnsatzSpec,
    PauliSumHamiltonian,
    build_ising,
    case_study_hamiltonian,
    entangling_layer_circuit,
    interpolate,
    max_step_phase_advance,
    optimize_ansatz,
    prepare_ansatz,
    time_series_sequence,
    trotter2_circuit,
)
from loschmidt.statevector import Circuit, PauliString, StateVector, apply_circuit


def circuit_unitary(circ):
    dim = 2**circ.n_qubits
    cols = []
    for k in range(dim):
        cols.append(apply_circuit(StateVector.basis_state(circ.n_qubits, k), circ).amplitudes)
    return np.array(cols).T


def term_set(h):
    return sorted((round(c, 12), s.factors) for c, s in h.terms)


class TestBuildIsing:
    def test_pure_coupling_term_count(self):
        h = build_ising(3, 1.0, 0.0, 0.0)
        assert term_set(h) == [
            (1.0, ((0, "Z"), (1, "Z"))),
            (1.0, ((1, "Z"), (2, "Z"))),
        ]

    def test_case_study_point(self):
        h = build_ising(19, 0.75, 1.0, 0.5)
        assert len(h) == 18 + 19 + 19
        assert h.one_norm() == pytest.approx(0.75 * 18 + 19 + 0.5 * 19)

    def test_interpolation_endpoint_family(self):
        h1 = build_ising(4, 1.5, 1.0, 1.0)
        assert len(h1) == 3 + 4 + 4

    def test_too_small_chain_rejected(self):
        with pytest.raises(ValueError):
            build_ising(1, 1.0, 0.0, 0.0)


class TestInterpolate:
    def test_endpoints_exact(self):
        h0 = build_ising(4, 0.0, 1.0, 0.0)
        h1 = build_ising(4, 1.5, 1.0, 1.0)
        assert term_set(interpolate(h0, h1, 0.0)) == term_set(h0)
        assert term_set(interpolate(h0, h1, 1.0)) == term_set(h1)

    def test_midpoint_matches_fig_caption(self):
        got = case_study_hamiltonian(5, 0.5)
        want = build_ising(5, 0.75, 1.0, 0.5)
        assert term_set(got) == term_set(want)

    def test_dense_linearity(self):
        h0 = build_ising(3, 0.3, 0.7, -0.2)
        h1 = build_ising(3, -1.0, 0.1, 0.5)
        lam = 0.37
        lhs = dense_matrix(interpolate(h0, h1, lam))
        rhs = (1 - lam) * dense_matrix(h0) + lam * dense_matrix(h1)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError):
            interpolate(build_ising(3, 1, 0, 0), build_ising(4, 1, 0, 0), 0.5)


class TestHermiticity:
    @pytest.mark.parametrize("n", [2, 4, 6, 8])
    def test_dense_matrix_hermitian(self, n):
        m = dense_matrix(case_study_hamiltonian(n, 0.5))
        assert np.max(np.abs(m - m.conj().T)) < 1e-12


class TestTrotter:
    def test_single_step_layer_pattern(self, case_study_h4):
        circ = trotter2_circuit(case_study_h4, 0.25, 0.25)
        # [A/2][B][A/2]: bonds (0,1),(2,3) then (1,2) then (0,1),(2,3)
        supports = [g.targets for g in circ.gates]
        assert supports == [(0, 1), (2, 3), (1, 2), (0, 1), (2, 3)]

    def test_operator_error_slope_is_two(self, case_study_h4):
        exact = expm(-1j * dense_matrix(case_study_h4) * 2.0)
        errs = []
        dts = [0.5, 0.25, 0.125]
        for dt in dts:
            u = circuit_unitary(trotter2_circuit(case_study_h4, 2.0, dt))
            errs.append(np.linalg.norm(u - exact, 2))
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert abs(slope - 2.0) < 0.2

    def test_merged_equals_unmerged_on_random_input(self, case_study_h6):
        rng = np.random.default_rng(3)
        v = rng.normal(size=64) + 1j * rng.normal(size=64)
        state = StateVector(v / np.linalg.norm(v))
        merged = apply_circuit(state, trotter2_circuit(case_study_h6, 1.5, 0.25, merge=True))
        plain = apply_circuit(state, trotter2_circuit(case_study_h6, 1.5, 0.25, merge=False))
        assert np.max(np.abs(merged.amplitudes - plain.amplitudes)) < 1e-10

    def test_gate_count_scale_matches_reported_sequence_length(self):
        # 19 sites to t=10 at dt=0.25: reported sequence length scale is 720
        h = build_ising(19, 0.75, 1.0, 0.5)
        entries = time_series_sequence(h, 10.0, 0.25)
        assert abs(len(entries) - 720) / 720 < 0.05

    def test_invalid_horizon_rejected(self, case_study_h4):
        with pytest.raises(ValueError):
            trotter2_circuit(case_study_h4, 1.1, 0.25)


class TestTimeSeriesSequence:
    def test_single_step_covers_single_circuit(self, case_study_h6):
        entries = time_series_sequence(case_study_h6, 0.25, 0.25)
        assert len(entries) == len(trotter2_circuit(case_study_h6, 0.25, 0.25))
        assert all(e.time_label == 0.25 for e in entries)

    def test_time_labels_cover_every_step(self, case_study_h6):
        entries = time_series_sequence(case_study_h6, 1.0, 0.25)
        assert sorted(set(e.time_label for e in entries)) == [0.25, 0.5, 0.75, 1.0]

    def test_merging_beats_naive_per_gate_count(self, case_study_h6):
        entries = time_series_sequence(case_study_h6, 1.0, 0.25)
        naive = len(trotter2_circuit(case_study_h6, 1.0, 0.25, merge=False))
        assert len(entries) < naive

    def test_boundary_circuits_equal_compiled_circuits(self, case_study_h6):
        rng = np.random.default_rng(5)
        v = rng.normal(size=64) + 1j * rng.normal(size=64)
        state = StateVector(v / np.linalg.norm(v))
        for e in time_series_sequence(case_study_h6, 1.0, 0.25):
            if not e.closes_step:
                continue
            a = apply_circuit(state, e.full_circuit()).amplitudes
            b = apply_circuit(state, trotter2_circuit(case_study_h6, e.time_label, 0.25)).amplitudes
            assert np.max(np.abs(a - b)) < 1e-10

    def test_each_step_inserts_exactly_one_gate(self, case_study_h6):
        # prefix_L + suffix_L must reproduce the previous step's full circuit
        rng = np.random.default_rng(8)
        v = rng.normal(size=64) + 1j * rng.normal(size=64)
        state = StateVector(v / np.linalg.norm(v))
        previous = Circuit(6, [])
        for e in time_series_sequence(case_study_h6, 0.75, 0.25):
            skipped = apply_circuit(state, e.prefix.compose(e.suffix)).amplitudes
            ref = apply_circuit(state, previous).amplitudes
            assert np.max(np.abs(skipped - ref)) < 1e-12
            previous = e.full_circuit()

    def test_phase_advance_guard_value(self, case_study_h6):
        assert max_step_phase_advance(case_study_h6, 0.25) < math.pi / 2
        assert max_step_phase_advance(case_study_h6, 2.0) > math.pi / 2


class TestAnsatz:
    def test_zero_product_is_identity(self):
        circ = prepare_ansatz(AnsatzSpec("product", (0.0, 0.0)), 4)
        assert len(circ) == 0

    def test_pi_rotation_flips_odd_sites(self):
        circ = prepare_ansatz(AnsatzSpec("product", (math.pi, 0.0)), 3)
        out = apply_circuit(StateVector.zero_state(3), circ)
        assert np.argmax(np.abs(out.amplitudes)) == 0b101
        assert abs(abs(out.amplitudes[0b101]) - 1.0) < 1e-12

    def test_entangling_layer_matches_diagonal_exponential(self):
        n, beta = 4, 0.61
        h_cl = build_ising(n, 1.5, 0.0, 1.0)
        u = circuit_unitary(entangling_layer_circuit(n, beta))
        exact = expm(-1j * dense_matrix(h_cl) * beta)
        assert np.linalg.norm(u - exact, 2) < 1e-12

    def test_parameter_count_enforced(self):
        with pytest.raises(ValueError):
            AnsatzSpec("product", (0.1,))
        with pytest.raises(ValueError):
            AnsatzSpec("depth2", (0.1,) * 7)

    def test_ansatz_output_normalized(self):
        spec = AnsatzSpec("depth2", (0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.9))
        out = apply_circuit(StateVector.zero_state(5), prepare_ansatz(spec, 5))
        assert abs(np.vdot(out.amplitudes, out.amplitudes).real - 1.0) < 1e-10


class TestOptimizer:
    def test_classical_field_minimum(self):
        h = build_ising(4, 0.0, 0.0, -1.0)
        spec, energy = optimize_ansatz(h, "product", restarts=4, seed=3)
        assert energy == pytest.approx(-4.0, abs=1e-6)

    def test_transverse_field_minimum(self):
        h = build_ising(4, 0.0, 1.0, 0.0)
        spec, energy = optimize_ansatz(h, "product", restarts=4, seed=3)
        assert energy == pytest.approx(-4.0, abs=1e-6)
        # optimum sits at theta = +-pi/2 (mod 2 pi)
        for theta in spec.params:
            assert min(abs(abs(math.remainder(theta, 2 * math.pi)) - math.pi / 2), 0.1) < 1e-3

    def test_deterministic_given_seed(self, case_study_h4):
        a = optimize_ansatz(case_study_h4, "product", restarts=3, seed=9)
        b = optimize_ansatz(case_study_h4, "product", restarts=3, seed=9)
        assert a[0].params == b[0].params and a[1] == b[1]

    @pytest.mark.slow
    def test_depth2_never_worse_than_product(self):
        h = case_study_hamiltonian(10, 0.5)
        _, e_prod = optimize_ansatz(h, "product", restarts=4, seed=7)
        _, e_deep = optimize_ansatz(h, "depth2", restarts=4, seed=7)
        assert e_deep <= e_prod + 1e-9
