"""Dense statevector engine: gates, Pauli strings, inner products, sampling.

Conventions fixed here and relied on everywhere else:

* qubit 0 is the most significant bit of the amplitude index, so for two
  qubits ``|10>`` lives at flat index 2;
* an auxiliary qubit, when present, is always the last qubit of the
  register (least significant bit);
* all operations are pure: they return new ``StateVector`` instances and
  never mutate their inputs, so callers may fan out work over split RNG
  streams without locking.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Global numeric tolerances.  Unitarity of compiled gates and algebraic
# identities are checked at 1e-12; norm preservation across circuits at 1e-10.
ALGEBRA_ATOL = 1e-12
NORM_ATOL = 1e-10

PAULI_MATRICES = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    "Y": np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    "Z": np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
}

def ensure_rng(seed) -> np.random.Generator:
    """Return a Generator for an int seed, SeedSequence, or existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(int(seed))


def split_streams(seed, count: int) -> list[np.random.Generator]:
    """Spawn `count` independent generators from a master seed.

    Child streams are derived with SeedSequence.spawn, so results are
    reproducible no matter how callers schedule the streams.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(child) for child in ss.spawn(count)]


class StateVector:
    """2^n complex amplitudes with a tracked squared norm.

    ``norm_squared`` is cached at construction; unitary operations pass it
    through unchanged, while postselected (imaginary-time) outputs may carry
    norm_squared < 1.
    """

    __slots__ = ("n_qubits", "amplitudes", "norm_squared")

    def __init__(self, amplitudes, norm_squared: float | None = None):
        amps = np.asarray(amplitudes, dtype=complex).reshape(-1)
        n = amps.size.bit_length() - 1
        if amps.size != 2**n or amps.size == 0:
            raise ValueError(f"amplitude count {amps.size} is not a power of two")
        self.n_qubits = n
        self.amplitudes = amps
        if norm_squared is None:
            norm_squared = float(np.vdot(amps, amps).real)
        self.norm_squared = float(norm_squared)

    @classmethod
    def zero_state(cls, n_qubits: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=complex)
        amps[0] = 1.0
        return cls(amps, norm_squared=1.0)

    @classmethod
    def basis_state(cls, n_qubits: int, index: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=complex)
        amps[index] = 1.0
        return cls(amps, norm_squared=1.0)

    def copy(self) -> "StateVector":
        return StateVector(self.amplitudes.copy(), self.norm_squared)

    def with_ancilla(self) -> "StateVector":
        """Append one qubit in |0> as the new last qubit."""
        amps = np.zeros(2 * self.amplitudes.size, dtype=complex)
        amps[0::2] = self.amplitudes
        return StateVector(amps, self.norm_squared)

    def normalized(self) -> "StateVector":
        norm = np.sqrt(self.norm_squared)
        if norm <= 0:
            raise ValueError("cannot normalize a zero state")
        return StateVector(self.amplitudes / norm, 1.0)

    def __repr__(self):  # pragma: no cover
        return f"StateVector(n_qubits={self.n_qubits}, norm_squared={self.norm_squared:.6g})"


@dataclass(frozen=True)
class PauliString:
    """Sparse tensor product of single-qubit Paulis (no coefficient).

    ``factors`` is a tuple of (qubit, axis) pairs with strictly increasing
    qubit indices; the empty tuple is the identity.
    """

    n_qubits: int
    factors: tuple = ()

    def __post_init__(self):
        prev = -1
        for qubit, axis in self.factors:
            if axis not in ("X", "Y", "Z"):
                raise ValueError(f"unknown Pauli axis {axis!r}")
            if qubit <= prev:
                raise ValueError("qubit indices must be strictly increasing")
            if not 0 <= qubit < self.n_qubits:
                raise ValueError(f"qubit {qubit} outside register of {self.n_qubits}")
            prev = qubit
        object.__setattr__(self, "factors", tuple((int(q), a) for q, a in self.factors))

    @property
    def is_identity(self) -> bool:
        return not self.factors

    @property
    def support(self) -> tuple:
        return tuple(q for q, _ in self.factors)

    def dense(self) -> np.ndarray:
        """Dense 2^n x 2^n matrix; intended for small n only."""
        mat = np.array([[1.0 + 0j]])
        lookup = dict(self.factors)
        for q in range(self.n_qubits):
            mat = np.kron(mat, PAULI_MATRICES[lookup.get(q, "I")])
        return mat

    def __str__(self):
        if self.is_identity:
            return "I"
        return "*".join(f"{a}{q}" for q, a in self.factors)


@dataclass(frozen=True)
class Gate:
    """Unitary on up to three target qubits with an optional control wire."""

    targets: tuple
    matrix: np.ndarray = field(repr=False)
    control: int | None = None

    def __post_init__(self):
        targets = tuple(int(t) for t in self.targets)
        object.__setattr__(self, "targets", targets)
        if not 1 <= len(targets) <= 3:
            raise ValueError("gates act on one to three target qubits")
        if len(set(targets)) != len(targets):
            raise ValueError("duplicate target qubits")
        mat = np.asarray(self.matrix, dtype=complex)
        dim = 2 ** len(targets)
        if mat.shape != (dim, dim):
            raise ValueError(f"matrix shape {mat.shape} does not match {len(targets)} targets")
        if not np.allclose(mat.conj().T @ mat, np.eye(dim), atol=ALGEBRA_ATOL):
            raise ValueError("gate matrix is not unitary")
        object.__setattr__(self, "matrix", mat)
        if self.control is not None:
            control = int(self.control)
            if control in targets:
                raise ValueError("control qubit cannot also be a target")
            object.__setattr__(self, "control", control)

    @property
    def qubits(self) -> tuple:
        """All wires touched by the gate, control first."""
        if self.control is None:
            return self.targets
        return (self.control,) + self.targets

    @property
    def arity(self) -> int:
        return len(self.qubits)

    def inverse(self) -> "Gate":
        return Gate(self.targets, self.matrix.conj().T, self.control)

    def controlled(self, control: int) -> "Gate":
        if self.control is not None:
            raise ValueError("gate already has a control wire")
        return Gate(self.targets, self.matrix, control)

    def expanded(self) -> tuple:
        """(matrix, qubits) with any control folded into a block-diagonal matrix.

        The control is the most significant local axis: the unitary acts only
        on the subspace where the control qubit is |1>.
        """
        if self.control is None:
            return self.matrix, self.targets
        dim = self.matrix.shape[0]
        full = np.eye(2 * dim, dtype=complex)
        full[dim:, dim:] = self.matrix
        return full, (self.control,) + self.targets


@dataclass
class Circuit:
    """Ordered list of gates; gates[0] is applied first."""

    n_qubits: int
    gates: list = field(default_factory=list)

    def __post_init__(self):
        for g in self.gates:
            for q in g.qubits:
                if not 0 <= q < self.n_qubits:
                    raise ValueError(f"gate wire {q} outside register of {self.n_qubits}")

    def __len__(self):
        return len(self.gates)

    def append(self, gate: Gate) -> None:
        for q in gate.qubits:
            if not 0 <= q < self.n_qubits:
                raise ValueError(f"gate wire {q} outside register of {self.n_qubits}")
        self.gates.append(gate)

    def extend(self, gates) -> None:
        for g in gates:
            self.append(g)

    def inverse(self) -> "Circuit":
        return Circuit(self.n_qubits, [g.inverse() for g in reversed(self.gates)])

    def compose(self, other: "Circuit") -> "Circuit":
        if other.n_qubits != self.n_qubits:
            raise ValueError("register size mismatch")
        return Circuit(self.n_qubits, list(self.gates) + list(other.gates))


# ---------------------------------------------------------------------------
# Raw array kernels.  These operate on flat complex arrays and are reused by
# the noise trajectory engine, which avoids wrapper overhead in hot loops.

def apply_matrix_flat(amps: np.ndarray, n: int, matrix: np.ndarray, qubits) -> np.ndarray:
    """Apply a 2^k x 2^k matrix on the given qubit axes of a flat state."""
    k = len(qubits)
    psi = amps.reshape((2,) * n)
    rest = [ax for ax in range(n) if ax not in qubits]
    perm = list(qubits) + rest
    psi = psi.transpose(perm).reshape(2**k, -1)
    out = matrix @ psi
    inv = np.argsort(perm)
    return out.reshape((2,) * n).transpose(inv).reshape(-1)


def apply_gate_flat(amps: np.ndarray, n: int, gate: Gate) -> np.ndarray:
    matrix, qubits = gate.expanded()
    return apply_matrix_flat(amps, n, matrix, qubits)


def apply_pauli_flat(amps: np.ndarray, n: int, factors) -> np.ndarray:
    """Apply a Pauli string (iterable of (qubit, axis)) to a flat state."""
    arr = amps.reshape((2,) * n).copy()
    for qubit, axis in factors:
        if axis in ("X", "Y"):
            arr = np.flip(arr, axis=qubit)
        if axis == "Z":
            sl = [slice(None)] * n
            sl[qubit] = 1
            arr[tuple(sl)] *= -1.0
        elif axis == "Y":
            sl0 = [slice(None)] * n
            sl0[qubit] = 0
            sl1 = [slice(None)] * n
            sl1[qubit] = 1
            arr[tuple(sl0)] *= -1.0j
            arr[tuple(sl1)] *= 1.0j
    return np.ascontiguousarray(arr).reshape(-1)


# ---------------------------------------------------------------------------
# Public operations on StateVector.

def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    """Apply a (possibly controlled) gate; norm is preserved."""
    for q in gate.qubits:
        if not 0 <= q < state.n_qubits:
            raise IndexError(f"gate wire {q} outside register of {state.n_qubits}")
    out = apply_gate_flat(state.amplitudes, state.n_qubits, gate)
    return StateVector(out, state.norm_squared)


def apply_circuit(state: StateVector, circuit: Circuit) -> StateVector:
    if circuit.n_qubits > state.n_qubits:
        raise ValueError("circuit register larger than state register")
    amps = state.amplitudes
    for gate in circuit.gates:
        amps = apply_gate_flat(amps, state.n_qubits, gate)
    return StateVector(amps, state.norm_squared)


def apply_pauli(state: StateVector, pauli: PauliString) -> StateVector:
    if pauli.n_qubits > state.n_qubits:
        raise ValueError("Pauli string register larger than state register")
    out = apply_pauli_flat(state.amplitudes, state.n_qubits, pauli.factors)
    return StateVector(out, state.norm_squared)


def inner_product(a: StateVector, b: StateVector) -> complex:
    """<a|b> with the first argument conjugated."""
    if a.n_qubits != b.n_qubits:
        raise ValueError("register size mismatch")
    return complex(np.vdot(a.amplitudes, b.amplitudes))


def hadamard_gate(qubit: int) -> Gate:
    h = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex) / np.sqrt(2.0)
    return Gate((qubit,), h)


def _y_basis_rotation(qubit: int) -> Gate:
    # H * S^dagger maps the sigma^y eigenbasis onto the computational basis.
    sdg = np.array([[1.0, 0.0], [0.0, -1.0j]], dtype=complex)
    h = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex) / np.sqrt(2.0)
    return Gate((qubit,), h @ sdg)


def basis_rotation(qubit: int, basis: str) -> Gate:
    """Gate rotating the ancilla so a computational measurement reads sigma^x/y."""
    if basis == "x":
        return hadamard_gate(qubit)
    if basis == "y":
        return _y_basis_rotation(qubit)
    raise ValueError(f"unknown measurement basis {basis!r}")


# ---------------------------------------------------------------------------
# Projective sampling.  Noiseless runs use exact outcome probabilities
# followed by binomial / multinomial draws, which reproduces per-shot
# statistics at a fraction of the cost.

def projection_probability(state: StateVector, target_prep: Circuit) -> float:
    """Exact survival probability |<target|state>|^2 via inverse preparation.

    The inverse of ``target_prep`` is applied, after which the probability of
    reading the all-zeros computational state on the prepared register is
    returned.  Extra qubits beyond the preparation register (e.g. an idle
    ancilla) are traced out.
    """
    undone = apply_circuit(state, target_prep.inverse())
    n_sys = target_prep.n_qubits
    extra = state.n_qubits - n_sys
    amps = undone.amplitudes.reshape(2**n_sys, 2**extra) if extra else undone.amplitudes.reshape(-1, 1)
    return float(np.sum(np.abs(amps[0, :]) ** 2))


def sample_projection(state: StateVector, target_prep: Circuit, shots: int, seed) -> int:
    """Count successful projections onto the prepared target over `shots` draws."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    p = min(1.0, max(0.0, projection_probability(state, target_prep)))
    rng = ensure_rng(seed)
    return int(rng.binomial(shots, p))


def ancilla_xy_probabilities(state: StateVector, target_prep: Circuit, basis: str) -> np.ndarray:
    """Joint outcome probabilities for one ancilla basis.

    Returns [p(ancilla=0, system=target), p(ancilla=1, system=target), p(fail)]
    where "fail" collects all outcomes with an unsuccessful system projection.
    The ancilla must be the last qubit.
    """
    n_sys = target_prep.n_qubits
    if state.n_qubits != n_sys + 1:
        raise ValueError("state must hold the system register plus one trailing ancilla")
    rotated = apply_gate(state, basis_rotation(n_sys, basis))
    undone = apply_circuit(rotated, target_prep.inverse())
    amps = undone.amplitudes
    p0 = float(abs(amps[0]) ** 2)
    p1 = float(abs(amps[1]) ** 2)
    return np.array([p0, p1, max(0.0, 1.0 - p0 - p1)])


def expectation_ancilla_xy(state: StateVector, target_prep: Circuit) -> tuple:
    """Exact (x, y) expectations of sigma^alpha (x) |target><target|."""
    px = ancilla_xy_probabilities(state, target_prep, "x")
    py = ancilla_xy_probabilities(state, target_prep, "y")
    return float(px[0] - px[1]), float(py[0] - py[1])


def sample_ancilla_xy(
    state: StateVector,
    target_prep: Circuit,
    shots_x: int,
    shots_y: int,
    seed,
) -> tuple:
    """Empirical estimators of <sigma^x/y (x) |target><target|>.

    For each basis the ancilla is rotated, the inverse preparation applied,
    and `shots` multinomial samples drawn over the joint (ancilla bit,
    projection success) outcomes.  Signed ancilla outcomes count only when
    the system projection succeeds.
    """
    if shots_x < 1 or shots_y < 1:
        raise ValueError("shot counts must be >= 1")
    rng = ensure_rng(seed)
    estimates = []
    for basis, shots in (("x", shots_x), ("y", shots_y)):
        probs = ancilla_xy_probabilities(state, target_prep, basis)
        counts = rng.multinomial(shots, probs / probs.sum())
        estimates.append((counts[0] - counts[1]) / shots)
    return float(estimates[0]), float(estimates[1])
