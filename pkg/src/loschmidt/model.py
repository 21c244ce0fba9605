"""Ising-family Hamiltonians, Trotter compilation, and ansatz circuits.

The time-evolution circuits produced here follow a symmetric second-order
splitting of a chain Hamiltonian into two layers of commuting bond terms.
Single-site fields are absorbed into the bond gates: each interior site
contributes half of its field to each adjacent bond, boundary sites put the
full field into their single bond.  That keeps every layer a set of disjoint
two-qubit gates and makes adjacent-step merging possible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .statevector import (
    Circuit,
    Gate,
    PAULI_MATRICES,
    PauliString,
    StateVector,
    apply_circuit,
    apply_pauli,
    ensure_rng,
)


@dataclass(frozen=True)
class PauliSumHamiltonian:
    """H = sum_j coeff_j * P_j with real coefficients and 2-local strings."""

    n_qubits: int
    terms: tuple = ()

    def __post_init__(self):
        cleaned = []
        for coeff, string in self.terms:
            coeff = float(coeff)
            if not math.isfinite(coeff):
                raise ValueError("coefficients must be finite reals")
            if not isinstance(string, PauliString):
                raise TypeError("terms must pair a coefficient with a PauliString")
            if string.n_qubits != self.n_qubits:
                raise ValueError("term register size mismatch")
            if len(string.factors) > 2:
                raise ValueError("terms must act on at most two qubits")
            cleaned.append((coeff, string))
        object.__setattr__(self, "terms", tuple(cleaned))

    @property
    def coefficients(self):
        return tuple(c for c, _ in self.terms)

    def one_norm(self) -> float:
        return float(sum(abs(c) for c, _ in self.terms))

    def __len__(self):
        return len(self.terms)


def build_ising(n: int, J: float, Bx: float, Bz: float, open_boundary: bool = True) -> PauliSumHamiltonian:
    """Nearest-neighbour ZZ chain with transverse and longitudinal fields.

    Zero-coefficient terms are dropped.  Only open boundaries are supported.
    """
    if n < 2:
        raise ValueError("need at least two sites")
    if not open_boundary:
        raise ValueError("periodic boundaries are not supported")
    terms = []
    if J != 0.0:
        for i in range(n - 1):
            terms.append((J, PauliString(n, ((i, "Z"), (i + 1, "Z")))))
    if Bx != 0.0:
        for i in range(n):
            terms.append((Bx, PauliString(n, ((i, "X"),))))
    if Bz != 0.0:
        for i in range(n):
            terms.append((Bz, PauliString(n, ((i, "Z"),))))
    return PauliSumHamiltonian(n, tuple(terms))


def interpolate(h0: PauliSumHamiltonian, h1: PauliSumHamiltonian, lam: float) -> PauliSumHamiltonian:
    """Termwise (1-lam)*h0 + lam*h1 with duplicate strings merged."""
    if h0.n_qubits != h1.n_qubits:
        raise ValueError("register size mismatch")
    acc: dict = {}
    for weight, h in ((1.0 - lam, h0), (lam, h1)):
        for coeff, string in h.terms:
            acc[string.factors] = acc.get(string.factors, 0.0) + weight * coeff
    terms = tuple(
        (coeff, PauliString(h0.n_qubits, factors))
        for factors, coeff in acc.items()
        if coeff != 0.0
    )
    return PauliSumHamiltonian(h0.n_qubits, terms)


def case_study_hamiltonian(n: int, lam: float) -> PauliSumHamiltonian:
    """The interpolation family between a pure transverse field and a tilted Ising chain."""
    h0 = build_ising(n, 0.0, 1.0, 0.0)
    h1 = build_ising(n, 1.5, 1.0, 1.0)
    return interpolate(h0, h1, lam)


def ordered_terms(h: PauliSumHamiltonian):
    """Canonical term order: ascending (qubit indices, axes).

    Shared by the trajectory protocol and the exact reference so that
    first-order product formulas match term for term.
    """
    return sorted(h.terms, key=lambda item: item[1].factors)


# ---------------------------------------------------------------------------
# Chain layer decomposition.

@dataclass(frozen=True)
class _BondLayers:
    """Per-bond 4x4 Hamiltonians split into two commuting layers.

    Layer A holds bonds (0,1), (2,3), ...; layer B holds (1,2), (3,4), ...
    Each bond matrix already contains its share of the single-site fields.
    """

    n_qubits: int
    layer_a: tuple  # tuple of (i, matrix) with the gate acting on (i, i+1)
    layer_b: tuple

    def bond_one_norms(self):
        out = []
        for i, mat in self.layer_a + self.layer_b:
            out.append(float(np.linalg.norm(mat, 2)))
        return out


def chain_layers(h: PauliSumHamiltonian) -> _BondLayers:
    n = h.n_qubits
    bonds = [np.zeros((4, 4), dtype=complex) for _ in range(n - 1)]

    def bond_term(i, local_a, local_b):
        return np.kron(PAULI_MATRICES[local_a], PAULI_MATRICES[local_b])

    for coeff, string in h.terms:
        if len(string.factors) == 2:
            (qa, axa), (qb, axb) = string.factors
            if qb != qa + 1:
                raise ValueError("two-qubit terms must act on nearest neighbours")
            bonds[qa] += coeff * bond_term(qa, axa, axb)
        elif len(string.factors) == 1:
            (q, ax), = string.factors
            local = PAULI_MATRICES[ax]
            attached = [b for b in (q - 1, q) if 0 <= b < n - 1]
            share = 1.0 / len(attached)
            for b in attached:
                if b == q - 1:
                    bonds[b] += coeff * share * bond_term(b, "I", ax)
                else:
                    bonds[b] += coeff * share * bond_term(b, ax, "I")
        else:
            raise ValueError("identity terms cannot be compiled into gates")
    layer_a = tuple((i, bonds[i]) for i in range(0, n - 1, 2))
    layer_b = tuple((i, bonds[i]) for i in range(1, n - 1, 2))
    return _BondLayers(n, layer_a, layer_b)


def _expm_hermitian(h_mat: np.ndarray, scale: float) -> np.ndarray:
    """exp(-1j * scale * H) for Hermitian H via eigendecomposition (exactly unitary)."""
    w, v = np.linalg.eigh(h_mat)
    return (v * np.exp(-1j * scale * w)) @ v.conj().T


def _layer_gates(layer, dt: float):
    return [Gate((i, i + 1), _expm_hermitian(mat, dt)) for i, mat in layer]


def trotter2_circuit(h: PauliSumHamiltonian, t_final: float, dt: float, merge: bool = True) -> Circuit:
    """Second-order split circuit for exp(-iHt) with step dt.

    With merging (default) interior half layers of layer A are combined into
    full-step gates: [A/2][B]([A][B])^(m-1)[A/2].  Without merging each step
    keeps the literal [A/2][B][A/2] pattern.
    """
    m = _step_count(t_final, dt)
    layers = chain_layers(h)
    half_a = _layer_gates(layers.layer_a, dt / 2.0)
    full_a = _layer_gates(layers.layer_a, dt)
    full_b = _layer_gates(layers.layer_b, dt)
    gates = []
    if merge:
        gates.extend(half_a)
        gates.extend(full_b)
        for _ in range(m - 1):
            gates.extend(full_a)
            gates.extend(full_b)
        gates.extend(half_a)
    else:
        for _ in range(m):
            gates.extend(half_a)
            gates.extend(full_b)
            gates.extend(half_a)
    return Circuit(h.n_qubits, gates)


def _step_count(t_final: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = round(t_final / dt)
    if m < 1 or abs(m * dt - t_final) > 1e-9 * max(1.0, abs(t_final)):
        raise ValueError(f"t_final={t_final} is not a positive multiple of dt={dt}")
    return m


@dataclass(frozen=True)
class SequenceEntry:
    """One step of the gate-by-gate time series.

    ``prefix`` and ``suffix`` are applied unconditionally around the newly
    controlled ``gate``; the full circuit at this step is prefix + gate +
    suffix.  ``time_label`` is the evolution time whose circuit this step
    works toward, ``closes_step`` marks the entry whose full circuit equals
    the compiled circuit for exactly that time, and ``t_effective`` tracks
    fractional progress through the current step for decay bookkeeping.
    """

    index: int
    gate: Gate
    prefix: Circuit
    suffix: Circuit
    time_label: float
    closes_step: bool
    t_effective: float

    def full_circuit(self) -> Circuit:
        gates = list(self.prefix.gates) + [self.gate] + list(self.suffix.gates)
        return Circuit(self.prefix.n_qubits, gates)


def time_series_sequence(h: PauliSumHamiltonian, t_max: float, dt: float) -> list:
    """Gate ordering whose intermediate circuits hit every multiple of dt.

    New gates extend the circuit just before the trailing half layer, so the
    circuit after each batch is the merged second-order circuit for
    t = dt, 2*dt, ..., t_max while reusing full-step gates instead of pairs
    of half-step gates.
    """
    m = _step_count(t_max, dt)
    layers = chain_layers(h)
    half_a = _layer_gates(layers.layer_a, dt / 2.0)
    full_a = _layer_gates(layers.layer_a, dt)
    full_b = _layer_gates(layers.layer_b, dt)
    n = h.n_qubits

    entries = []
    body: list = []
    tail: list = []

    def emit(gate, prefix_gates, suffix_gates, label, closes, t_eff):
        entries.append(
            SequenceEntry(
                index=len(entries) + 1,
                gate=gate,
                prefix=Circuit(n, list(prefix_gates)),
                suffix=Circuit(n, list(suffix_gates)),
                time_label=label,
                closes_step=closes,
                t_effective=t_eff,
            )
        )

    # First step builds [A/2][B][A/2] by appending at the end; the final half
    # layer becomes the fixed suffix of every later insertion.
    first_batch = len(half_a) + len(full_b) + len(half_a)
    placed = 0
    for g in half_a + full_b:
        placed += 1
        emit(g, body, [], dt, False, dt * placed / first_batch)
        body.append(g)
    for g in half_a:
        placed += 1
        closes = placed == first_batch
        emit(g, body + tail, [], dt, closes, dt * placed / first_batch)
        tail.append(g)

    # Later steps insert a full [A][B] block in front of the trailing half layer.
    batch = len(full_a) + len(full_b)
    for step in range(2, m + 1):
        label = step * dt
        for j, g in enumerate(full_a + full_b):
            closes = j == batch - 1
            t_eff = (step - 1) * dt + dt * (j + 1) / batch
            emit(g, body, tail, label, closes, t_eff)
            body.append(g)
    return entries


def max_step_phase_advance(h: PauliSumHamiltonian, dt: float) -> float:
    """Worst-case phase advance of a single sequence gate, from bond norms."""
    layers = chain_layers(h)
    norms = layers.bond_one_norms()
    return max(norms, default=0.0) * dt


# ---------------------------------------------------------------------------
# Ansatz preparation circuits.

@dataclass(frozen=True)
class AnsatzSpec:
    """Either a two-parameter product of y-rotations or the eight-parameter
    depth-2 form (three single-qubit layers interleaved with two diagonal
    entangling layers)."""

    kind: str
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        expected = {"product": 2, "depth2": 8}.get(self.kind)
        if expected is None:
            raise ValueError(f"unknown ansatz kind {self.kind!r}")
        if len(self.params) != expected:
            raise ValueError(f"{self.kind} ansatz takes {expected} parameters")


def _ry(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[c, -s], [s, c]], dtype=complex)


def _rotation_layer(n: int, theta_odd: float, theta_even: float):
    """Alternating y-rotations; the first site takes theta_odd.  Zero angles
    are skipped so a zero-parameter layer is the identity circuit."""
    gates = []
    for q in range(n):
        theta = theta_odd if q % 2 == 0 else theta_even
        if theta != 0.0:
            gates.append(Gate((q,), _ry(theta)))
    return gates


def entangling_layer_circuit(n: int, beta: float) -> Circuit:
    """exp(-i * H_cl * beta) for the classical (diagonal) chain H_Ising(1.5, 0, 1).

    All bond terms commute, so one gate per bond at the full duration is
    exact for any real beta (including negative durations reached during
    optimization).
    """
    if beta == 0.0:
        return Circuit(n, [])
    h_cl = build_ising(n, 1.5, 0.0, 1.0)
    layers = chain_layers(h_cl)
    gates = _layer_gates(layers.layer_a, beta) + _layer_gates(layers.layer_b, beta)
    return Circuit(n, gates)


def prepare_ansatz(spec: AnsatzSpec, n: int) -> Circuit:
    if spec.kind == "product":
        theta_odd, theta_even = spec.params
        return Circuit(n, _rotation_layer(n, theta_odd, theta_even))
    # depth2: U1(p0,p1) U2(p2) U1(p3,p4) U2(p5) U1(p6,p7)
    p = spec.params
    gates = []
    gates.extend(_rotation_layer(n, p[0], p[1]))
    gates.extend(entangling_layer_circuit(n, p[2]).gates)
    gates.extend(_rotation_layer(n, p[3], p[4]))
    gates.extend(entangling_layer_circuit(n, p[5]).gates)
    gates.extend(_rotation_layer(n, p[6], p[7]))
    return Circuit(n, gates)


def energy_expectation(h: PauliSumHamiltonian, state: StateVector) -> float:
    total = 0.0
    for coeff, string in h.terms:
        total += coeff * np.vdot(state.amplitudes, apply_pauli(state, string).amplitudes).real
    return float(total)


def _ansatz_energy(h, kind, params):
    circ = prepare_ansatz(AnsatzSpec(kind, params), h.n_qubits)
    psi = apply_circuit(StateVector.zero_state(h.n_qubits), circ)
    return energy_expectation(h, psi)


def optimize_ansatz(h: PauliSumHamiltonian, kind: str, restarts: int = 16, seed=0):
    """Minimize the ansatz energy with a Nelder-Mead search over random restarts.

    The depth-2 search always includes a warm start at the optimized product
    parameters with zero entangling durations, so its best energy can never
    exceed the product result.  Returns (AnsatzSpec, energy), deterministic
    for a given seed.
    """
    if kind not in ("product", "depth2"):
        raise ValueError(f"unknown ansatz kind {kind!r}")
    rng = ensure_rng(seed)
    n_params = 2 if kind == "product" else 8

    starts = [rng.uniform(-np.pi, np.pi, size=n_params) for _ in range(max(1, restarts))]
    if kind == "depth2":
        product_spec, _ = optimize_ansatz(h, "product", restarts=max(4, restarts // 2), seed=rng)
        warm = np.zeros(8)
        warm[0], warm[1] = product_spec.params
        starts[0] = warm

    best_params, best_energy = None, np.inf
    for x0 in starts:
        res = minimize(
            lambda x: _ansatz_energy(h, kind, x),
            x0,
            method="Nelder-Mead",
            options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 2000},
        )
        if res.fun < best_energy:
            best_energy = float(res.fun)
            best_params = tuple(float(v) for v in res.x)
    return AnsatzSpec(kind, best_params), best_energy
