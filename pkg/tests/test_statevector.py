import numpy as np
import pytest
from scipy.linalg import expm

from loschmidt.statevector import (
    Circuit,
    Gate,
    PAULI_MATRICES,
    PauliString,
    StateVector,
    apply_circuit,
    apply_gate,
    apply_pauli,
    ensure_rng,
    hadamard_gate,
    inner_product,
    projection_probability,
    sample_ancilla_xy,
    sample_projection,
    split_streams,
)


def random_state(n, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
    return StateVector(v / np.linalg.norm(v))


def test_identity_gate_is_noop():
    state = random_state(3, 5)
    out = apply_gate(state, Gate((1,), np.eye(2)))
    assert np.allclose(out.amplitudes, state.amplitudes)


def test_x_on_qubit0_flips_most_significant_bit():
    out = apply_gate(StateVector.zero_state(2), Gate((0,), PAULI_MATRICES["X"]))
    assert np.argmax(np.abs(out.amplitudes)) == 2  # |10> with qubit 0 leftmost


def test_controlled_x_builds_bell_state():
    state = apply_gate(StateVector.zero_state(2), hadamard_gate(0))
    bell = apply_gate(state, Gate((1,), PAULI_MATRICES["X"], control=0))
    expected = np.zeros(4, dtype=complex)
    expected[0] = expected[3] = 1 / np.sqrt(2)
    assert np.allclose(bell.amplitudes, expected)


def test_controlled_gate_with_control_zero_is_identity():
    state = apply_gate(StateVector.zero_state(3), hadamard_gate(1))
    gate = Gate((2,), PAULI_MATRICES["Y"], control=0)  # control qubit 0 stays |0>
    out = apply_gate(state, gate)
    assert np.max(np.abs(out.amplitudes - state.amplitudes)) < 1e-12


def test_gate_rejects_non_unitary_matrix():
    with pytest.raises(ValueError, match="unitary"):
        Gate((0,), np.array([[1.0, 0.0], [0.0, 2.0]]))


def test_gate_rejects_out_of_range_target():
    state = StateVector.zero_state(2)
    with pytest.raises(IndexError):
        apply_gate(state, Gate((5,), PAULI_MATRICES["X"]))


def test_apply_pauli_identity_and_basics():
    plus = StateVector(np.array([1, 1]) / np.sqrt(2))
    out = apply_pauli(plus, PauliString(1))
    assert np.allclose(out.amplitudes, plus.amplitudes)
    out = apply_pauli(plus, PauliString(1, ((0, "Z"),)))
    assert np.allclose(out.amplitudes, np.array([1, -1]) / np.sqrt(2))
    out = apply_pauli(StateVector.basis_state(2, 0b01), PauliString(2, ((0, "X"), (1, "X"))))
    assert np.argmax(np.abs(out.amplitudes)) == 0b10


def test_pauli_involution():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        support = sorted(rng.choice(n, size=rng.integers(1, n + 1), replace=False))
        factors = tuple((int(q), "XYZ"[rng.integers(3)]) for q in support)
        p = PauliString(n, factors)
        state = random_state(n, int(rng.integers(1 << 30)))
        twice = apply_pauli(apply_pauli(state, p), p)
        assert np.max(np.abs(twice.amplitudes - state.amplitudes)) < 1e-12


def test_inner_product_basics_and_rotation_oracle():
    psi = random_state(2, 3)
    assert abs(inner_product(psi, psi) - 1.0) < 1e-12
    assert inner_product(StateVector.zero_state(1), StateVector.basis_state(1, 1)) == 0
    # <0| exp(-i Z t) |0> should equal exp(-i t); oracle via dense expm
    t = 0.7
    gate = Gate((0,), expm(-1j * t * PAULI_MATRICES["Z"]))
    zero = StateVector.zero_state(1)
    val = inner_product(zero, apply_gate(zero, gate))
    assert abs(val - np.exp(-1j * t)) < 1e-12


def test_random_circuit_preserves_norm():
    rng = np.random.default_rng(7)
    n = 4
    state = random_state(n, 11)
    gates = []
    for _ in range(30):
        k = int(rng.integers(1, 3))
        targets = tuple(int(q) for q in rng.choice(n, size=k, replace=False))
        m = rng.normal(size=(2**k, 2**k)) + 1j * rng.normal(size=(2**k, 2**k))
        q, _ = np.linalg.qr(m)
        gates.append(Gate(targets, q))
    out = apply_circuit(state, Circuit(n, gates))
    assert abs(np.vdot(out.amplitudes, out.amplitudes).real - 1.0) < 1e-10


def test_circuit_inverse_restores_state():
    rng = np.random.default_rng(9)
    n = 3
    gates = []
    for _ in range(12):
        m = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        q, _ = np.linalg.qr(m)
        targets = tuple(int(x) for x in rng.choice(n, size=2, replace=False))
        gates.append(Gate(targets, q))
    circ = Circuit(n, gates)
    state = random_state(n, 13)
    back = apply_circuit(apply_circuit(state, circ), circ.inverse())
    assert np.max(np.abs(back.amplitudes - state.amplitudes)) < 1e-10


class TestSampleProjection:
    def test_full_overlap_gives_all_successes(self):
        prep = Circuit(2, [hadamard_gate(0)])
        state = apply_circuit(StateVector.zero_state(2), prep)
        assert sample_projection(state, prep, 500, 1) == 500

    def test_orthogonal_gives_zero(self):
        state = StateVector.basis_state(2, 3)
        assert sample_projection(state, Circuit(2, []), 500, 1) == 0

    def test_zero_shots_rejected(self):
        with pytest.raises(ValueError):
            sample_projection(StateVector.zero_state(1), Circuit(1, []), 0, 1)

    def test_half_probability_concentrates(self):
        plus = StateVector(np.array([1, 1]) / np.sqrt(2))
        shots = 10**6
        successes = sample_projection(plus, Circuit(1, []), shots, 123)
        assert abs(successes / shots - 0.5) < 0.002
        # distribution cross-check against a direct Bernoulli oracle
        rng = ensure_rng(123)
        oracle = int(np.sum(rng.random(shots) < 0.5))
        assert abs(oracle / shots - 0.5) < 0.002

    def test_fixed_seed_reproducible(self):
        plus = StateVector(np.array([1, 1]) / np.sqrt(2))
        a = sample_projection(plus, Circuit(1, []), 1000, 77)
        b = sample_projection(plus, Circuit(1, []), 1000, 77)
        assert a == b

    def test_coverage_over_seeds(self):
        # success frequency within 4 sigma of p in at least 99% of 200 seeds
        plus = StateVector(np.array([1, 1]) / np.sqrt(2))
        p, shots = 0.5, 2000
        bound = 4 * np.sqrt(p * (1 - p) / shots)
        hits = 0
        for seed in range(200):
            f = sample_projection(plus, Circuit(1, []), shots, seed) / shots
            hits += abs(f - p) <= bound
        assert hits >= 198


class TestSampleAncillaXY:
    def test_plus_ancilla_aligned_system(self):
        # ancilla |+>, system equals the prepared target -> x=1, y=0
        prep = Circuit(1, [hadamard_gate(0)])
        sys_state = apply_circuit(StateVector.zero_state(1), prep)
        state = apply_gate(sys_state.with_ancilla(), hadamard_gate(1))
        x, y = sample_ancilla_xy(state, prep, 4000, 4000, 3)
        assert abs(x - 1.0) < 1e-12
        assert abs(y) < 0.05

    def test_orthogonal_system_gives_exact_zero(self):
        state = StateVector.basis_state(2, 0b10)  # system qubit |1>, ancilla |0>
        x, y = sample_ancilla_xy(state, Circuit(1, []), 1000, 1000, 5)
        assert x == 0.0 and y == 0.0

    def test_known_two_qubit_construction_matches_exact_im(self):
        # |psi_anc> = (|0>_anc u0 + |1>_anc u1)|0> with u1 = exp(-iZ 0.4):
        # y expectation equals Im(<u0 0|0><0|u1 0>) = -sin(0.4)
        zero = StateVector.zero_state(1)
        anc = apply_gate(zero.with_ancilla(), hadamard_gate(1))
        gate = Gate((0,), expm(-1j * 0.4 * PAULI_MATRICES["Z"]), control=1)
        state = apply_gate(anc, gate)
        shots = 40000
        x, y = sample_ancilla_xy(state, Circuit(1, []), shots, shots, 17)
        sigma = 1 / np.sqrt(shots)
        assert abs(y - (-np.sin(0.4))) < 3 * sigma
        assert abs(x - np.cos(0.4)) < 3 * sigma

    def test_zero_shots_rejected(self):
        state = StateVector.zero_state(2)
        with pytest.raises(ValueError):
            sample_ancilla_xy(state, Circuit(1, []), 0, 10, 1)


def test_split_streams_are_independent_and_deterministic():
    a = [g.random() for g in split_streams(5, 3)]
    b = [g.random() for g in split_streams(5, 3)]
    assert a == b
    assert len(set(a)) == 3


def test_norm_squared_tracks_sum_of_squares():
    state = random_state(4, 21)
    assert abs(state.norm_squared - np.sum(np.abs(state.amplitudes) ** 2)) < 1e-10
