"""The three local-control phase measurement protocols.

* Sequential Hadamard test: one controlled gate per circuit, phase
  reconstructed by accumulating per-step phase differences.
* Direct phase gradient: controlled local Hamiltonian terms after
  unconditional evolution, gradient integrated numerically.
* Imaginary-time (ITE) phase gradient: postselected local block encodings
  realize short imaginary-time evolution; the gradient follows from a
  finite difference of log-amplitudes.

All estimators support an exact-expectation mode (shots=None), modelling the
infinite-shot limit, and seeded finite-shot sampling with optional
depolarizing noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import IntegrationScheme, choose_grid, integrate_gradient
from .model import (
    AnsatzSpec,
    PauliSumHamiltonian,
    SequenceEntry,
    chain_layers,
    max_step_phase_advance,
    ordered_terms,
    prepare_ansatz,
    time_series_sequence,
    trotter2_circuit,
)
from .noise import BasisOutcomes, NoiseModel, measure_counts
from .series import EchoEntry, EchoSeries
from .statevector import (
    Circuit,
    Gate,
    PauliString,
    StateVector,
    apply_circuit,
    apply_pauli,
    basis_rotation,
    ensure_rng,
    hadamard_gate,
    inner_product,
)


class AmplitudeLostError(RuntimeError):
    """A survival probability is statistically consistent with zero."""


MAX_STEP_PHASE = math.pi / 2.0


@dataclass(frozen=True)
class ShotPlan:
    """Per-step measurement counts for a target phase error."""

    per_step: tuple
    epsilon_target: float

    def __post_init__(self):
        for m in self.per_step:
            if int(m) < 1:
                raise ValueError("all shot counts must be >= 1")
        object.__setattr__(self, "per_step", tuple(int(m) for m in self.per_step))

    def total(self) -> int:
        return int(sum(self.per_step))


# ---------------------------------------------------------------------------
# Sequential Hadamard test.

def _pauli_gate(pauli: PauliString, control: int | None = None) -> Gate:
    if pauli.is_identity:
        raise ValueError("cannot build a gate from the identity string")
    mat = np.array([[1.0 + 0j]])
    for _, axis in pauli.factors:
        from .statevector import PAULI_MATRICES

        mat = np.kron(mat, PAULI_MATRICES[axis])
    return Gate(pauli.support, mat, control)


def _sht_circuits(prep: Circuit, prefix: Circuit, new_gate: Gate, suffix: Circuit | None):
    """Ancilla-extended circuit up to (not including) the basis rotation."""
    n = prep.n_qubits
    reg = Circuit(n + 1, [])
    reg.append(hadamard_gate(n))
    reg.extend(prep.gates)
    reg.extend(prefix.gates)
    reg.append(new_gate.controlled(n))
    if suffix is not None:
        reg.extend(suffix.gates)
    return reg


def _ancilla_xy_outcomes(n_sys: int) -> BasisOutcomes:
    # flat indices 0 and 1: system in |0...0> with ancilla (last qubit) 0 / 1
    return BasisOutcomes((0, 1))


def _measure_xy(
    prep: Circuit,
    core: Circuit,
    shots: int | None,
    noise: NoiseModel | None,
    rng,
):
    """(x_hat, y_hat, fx, fy): signed estimators and projection-success fractions.

    ``core`` is the ancilla-extended circuit before the measurement basis
    rotation; the inverse preparation on the system register is appended
    here so its gates see the same noise as the rest of the circuit.
    """
    n_sys = prep.n_qubits
    outcomes = _ancilla_xy_outcomes(n_sys)
    results = []
    for basis in ("x", "y"):
        circuit = Circuit(core.n_qubits, list(core.gates))
        circuit.append(basis_rotation(n_sys, basis))
        for g in prep.inverse().gates:
            circuit.append(g)
        if shots is None:
            from .noise import exact_outcome_probabilities

            p = exact_outcome_probabilities(circuit, outcomes)
            results.append((float(p[0] - p[1]), float(p[0] + p[1])))
        else:
            counts = measure_counts(circuit, outcomes, shots, noise, rng)
            results.append(
                (float((counts[0] - counts[1]) / shots), float((counts[0] + counts[1]) / shots))
            )
    (x_hat, fx), (y_hat, fy) = results
    return x_hat, y_hat, fx, fy


def sht_step(
    prep: Circuit,
    prefix: Circuit,
    new_gate: Gate,
    shots: int | None,
    noise: NoiseModel | None,
    seed,
    suffix: Circuit | None = None,
):
    """One iteration of the sequential Hadamard test.

    The ancilla starts in |+>, the preparation and prefix run
    unconditionally, the new gate is controlled on the ancilla, the optional
    suffix runs unconditionally, and the ancilla is read in the x and y
    bases jointly with a projection onto the prepared state.  Returns
    estimates of Re and Im of g_L * conj(g_{L-1}).  shots=None gives exact
    expectations.
    """
    if shots is not None and shots < 1:
        raise ValueError("shots must be >= 1")
    rng = ensure_rng(seed)
    core = _sht_circuits(prep, prefix, new_gate, suffix)
    x_hat, y_hat, _, _ = _measure_xy(prep, core, shots, noise, rng)
    return x_hat, y_hat


def _survival_measurement(
    prep: Circuit,
    body: Circuit,
    shots: int | None,
    noise: NoiseModel | None,
    rng,
) -> tuple:
    """(p_hat, variance) of the survival probability of prep + body + prep^dag."""
    circuit = prep.compose(body).compose(prep.inverse())
    outcomes = BasisOutcomes((0,))
    if shots is None:
        from .noise import exact_outcome_probabilities

        p = float(exact_outcome_probabilities(circuit, outcomes)[0])
        return p, 0.0
    counts = measure_counts(circuit, outcomes, shots, noise, rng)
    p_hat = counts[0] / shots
    return float(p_hat), float(p_hat * (1.0 - p_hat) / shots)


def reconstruct_echo_product(steps) -> complex:
    """Recursive echo from the measured products m_l = g_l * conj(g_{l-1}).

    Factors alternate between the measured value and the inverse of its
    conjugate, telescoping to g_L for either parity of L.
    """
    g = 1.0 + 0.0j
    for offset, (x, y) in enumerate(reversed(list(steps))):
        m = complex(x, y)
        if offset % 2 == 0:
            g *= m
        else:
            g /= m.conjugate()
    return g


def sht_reconstruct(
    steps,
    amplitudes,
    shots=None,
    labels=None,
    times=None,
    dr=None,
    metadata=None,
) -> EchoSeries:
    """Assemble the echo series from per-step (x, y) estimates.

    The phase difference of step l is atan2(y_l, x_l) and the phase
    accumulates as phi_L = sum of the per-step differences (the telescoping
    product contributes each measured factor's argument with a plus sign).
    Amplitudes come from the independent survival measurements.  Per-step
    variance uses the bound (1/2M)(1/r_{l-1}^2 + 1/r_l^2); step variances
    add.  A step whose measured magnitude is consistent with zero (below
    three standard errors of the shot noise) truncates the series at the
    previous step, flagged in the metadata.
    """
    steps = list(steps)
    amplitudes = [float(r) for r in amplitudes]
    if len(amplitudes) != len(steps) + 1:
        raise ValueError("need one amplitude per step plus the initial point")
    n_steps = len(steps)
    if labels is None:
        labels = list(range(n_steps + 1))
    if times is None:
        times = [float(l) for l in labels]
    if dr is None:
        dr = [0.0] * (n_steps + 1)
    shot_list = list(shots) if shots is not None else [None] * n_steps

    entries = [EchoEntry(label=labels[0], t=times[0], r=amplitudes[0], phi=0.0, dr=dr[0], dphi=0.0)]
    phi = 0.0
    var = 0.0
    truncated_at = None
    for l, (x, y) in enumerate(steps, start=1):
        m_sq = x * x + y * y
        m_shots = shot_list[l - 1]
        if m_shots is not None:
            v = (amplitudes[l - 1] ** 2 + amplitudes[l] ** 2) / 2.0
            null_scale = math.sqrt(max(v, 1e-300) * 2.0 / m_shots)
            if math.sqrt(m_sq) < 3.0 * null_scale:
                truncated_at = l
                break
        elif m_sq == 0.0:
            truncated_at = l
            break
        phi += math.atan2(y, x)
        if m_shots is not None:
            r_prev = max(amplitudes[l - 1], 1e-12)
            r_cur = max(amplitudes[l], 1e-12)
            var += (1.0 / (2.0 * m_shots)) * (1.0 / r_prev**2 + 1.0 / r_cur**2)
        entries.append(
            EchoEntry(
                label=labels[l],
                t=times[l],
                r=amplitudes[l],
                phi=phi,
                dr=dr[l],
                dphi=math.sqrt(var),
            )
        )
    meta = dict(metadata or {})
    if truncated_at is not None:
        meta["truncated_at_step"] = truncated_at
        meta["truncation_reason"] = "unresolvable phase"
        last = entries[-1]
        entries[-1] = EchoEntry(last.label, last.t, last.r, last.phi, last.dr, last.dphi, True)
    return EchoSeries(entries, meta)


def allocate_shots_sht(r_estimates, l_max: int, epsilon: float) -> ShotPlan:
    """Per-step counts M_l = ceil(L (1/r_{l-1}^2 + 1/r_l^2) / (2 eps^2)).

    Each step then contributes at most eps^2/L to the phase variance, and
    the total never exceeds (L / (eps * r_min))^2.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    r = [float(x) for x in r_estimates]
    if len(r) == l_max:
        r = [1.0] + r
    if len(r) != l_max + 1:
        raise ValueError("need r estimates for steps 0..L")
    if any(x <= 0 for x in r):
        raise ValueError("amplitude estimates must be positive")
    counts = []
    for l in range(1, l_max + 1):
        m = l_max * (1.0 / r[l - 1] ** 2 + 1.0 / r[l] ** 2) / (2.0 * epsilon**2)
        counts.append(max(1, math.ceil(m - 1e-9)))
    return ShotPlan(tuple(counts), epsilon)


# ---------------------------------------------------------------------------
# Evolution helpers shared by the gradient protocols.

@dataclass(frozen=True)
class EvolutionSpec:
    """How unconditional exp(-iHt) is realized: compiled circuit or dense."""

    mode: str = "trotter"
    dt: float = 0.25

    def __post_init__(self):
        if self.mode not in ("trotter", "exact"):
            raise ValueError(f"unknown evolution mode {self.mode!r}")

    def circuit(self, h: PauliSumHamiltonian, t: float) -> Circuit | None:
        """Compiled circuit for time t, or None in exact mode."""
        if self.mode == "exact":
            return None
        if t == 0.0:
            return Circuit(h.n_qubits, [])
        steps = max(1, round(t / self.dt + 1e-9))
        if abs(steps * self.dt - t) > 1e-9:
            steps = max(1, math.ceil(t / self.dt - 1e-9))
        return trotter2_circuit(h, t, t / steps)

    def evolve(self, h: PauliSumHamiltonian, state: StateVector, t: float) -> StateVector:
        if self.mode == "exact":
            from .reference import evolve_exact

            return evolve_exact(h, state, t)
        return apply_circuit(state, self.circuit(h, t))


# ---------------------------------------------------------------------------
# Direct phase gradient.

def dpg_term(
    prep: Circuit,
    h: PauliSumHamiltonian,
    t: float,
    term_index: int,
    shots: int | None,
    noise: NoiseModel | None,
    seed,
    evolution: EvolutionSpec | None = None,
):
    """Estimate a_j(t), the x-basis Hadamard-test reading of one local term.

    The ancilla starts in |+>, the system evolves unconditionally to time t,
    the Pauli term is applied controlled on the ancilla, and sigma^x is read
    jointly with the projection onto the prepared state.  Returns
    (a_hat, variance, success_fraction).
    """
    if shots is not None and shots < 1:
        raise ValueError("shots must be >= 1")
    evolution = evolution or EvolutionSpec("exact")
    rng = ensure_rng(seed)
    coeff, pauli = h.terms[term_index]
    n = h.n_qubits
    outcomes = BasisOutcomes((0, 1))

    evo_circuit = evolution.circuit(h, t)
    if evo_circuit is not None:
        circuit = Circuit(n + 1, [hadamard_gate(n)])
        circuit.extend(prep.gates)
        circuit.extend(evo_circuit.gates)
        circuit.append(_pauli_gate(pauli, control=n))
        circuit.append(basis_rotation(n, "x"))
        circuit.extend(prep.inverse().gates)
        if shots is None:
            from .noise import exact_outcome_probabilities

            p = exact_outcome_probabilities(circuit, outcomes)
            return float(p[0] - p[1]), 0.0, float(p[0] + p[1])
        counts = measure_counts(circuit, outcomes, shots, noise, rng)
        a_hat = (counts[0] - counts[1]) / shots
        f_hat = (counts[0] + counts[1]) / shots
        return float(a_hat), float(max(f_hat - a_hat**2, 0.0) / shots), float(f_hat)

    # Dense evolution: build the two-branch expectations directly.
    if noise is not None and not noise.is_trivial:
        raise ValueError("noisy runs require circuit evolution")
    psi0 = apply_circuit(StateVector.zero_state(n), prep)
    psi_t = evolution.evolve(h, psi0, t)
    branch = apply_pauli(psi_t, pauli)
    g_proj = inner_product(psi_t, psi0)  # <psi(t)|psi>
    cross = inner_product(psi0, branch)  # <psi|P|psi(t)>
    a_exact = float((g_proj * cross).real)
    f_exact = float((abs(g_proj) ** 2 + abs(cross) ** 2) / 2.0)
    if shots is None:
        return a_exact, 0.0, f_exact
    p0 = (f_exact + a_exact) / 2.0
    p1 = (f_exact - a_exact) / 2.0
    probs = np.array([max(p0, 0.0), max(p1, 0.0)])
    probs = np.append(probs, max(0.0, 1.0 - probs.sum()))
    counts = rng.multinomial(shots, probs / probs.sum())
    a_hat = (counts[0] - counts[1]) / shots
    f_hat = (counts[0] + counts[1]) / shots
    return float(a_hat), float(max(f_hat - a_hat**2, 0.0) / shots), float(f_hat)


def dpg_gradient(a_hats, lambdas, p_hat: float, a_variances, p_variance: float):
    """Phase gradient -sum_j lambda_j a_j / p with first-order error propagation.

    Raises AmplitudeLostError when the survival probability is nonpositive
    or within three standard errors of zero.
    """
    p_sigma = math.sqrt(max(p_variance, 0.0))
    if p_hat <= 0.0 or (p_variance > 0.0 and p_hat < 3.0 * p_sigma):
        raise AmplitudeLostError(f"survival probability {p_hat:.3e} consistent with zero")
    a_hats = np.asarray(a_hats, dtype=float)
    lambdas = np.asarray(lambdas, dtype=float)
    a_variances = np.asarray(a_variances, dtype=float)
    grad = float(-np.sum(lambdas * a_hats) / p_hat)
    var = float(np.sum(lambdas**2 * a_variances) / p_hat**2 + grad**2 * p_variance / p_hat**2)
    return grad, math.sqrt(var)


# ---------------------------------------------------------------------------
# ITE phase gradient via local block encodings.

@dataclass(frozen=True)
class ItePlan:
    """Per-term block-encoding angles for one sign of exp(sign * H * tau).

    cos^2(theta_j/2) = exp(-|l_j| tau) cosh(l_j tau); the postselected block
    is cos^2(theta/2) I + sgn(sign * l_j) sin^2(theta/2) P_j, and classical
    postprocessing rescales probabilities by exp(2 tau sum |l_j|).
    """

    tau: float
    sign: int
    lambdas: tuple
    paulis: tuple
    angles: tuple
    rescale_factor: float

    @property
    def block_coefficients(self):
        out = []
        for lam, theta in zip(self.lambdas, self.angles):
            c = math.cos(theta / 2.0) ** 2
            s = math.sin(theta / 2.0) ** 2
            signed = math.copysign(1.0, lam) * self.sign if lam != 0.0 else 0.0
            out.append((c, signed * s))
        return tuple(out)


def ite_plan(h: PauliSumHamiltonian, tau: float, sign: int) -> ItePlan:
    """Angles and rescale factor for the ordered product of term exponentials."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    lambdas, paulis, angles = [], [], []
    for coeff, string in ordered_terms(h):
        x = abs(coeff) * tau
        cos_sq = math.exp(-x) * math.cosh(x)
        cos_sq = min(1.0, max(0.0, cos_sq))
        theta = 2.0 * math.acos(math.sqrt(cos_sq))
        lambdas.append(coeff)
        paulis.append(string)
        angles.append(theta)
    rescale = math.exp(tau * sum(abs(l) for l in lambdas))
    return ItePlan(tau, sign, tuple(lambdas), tuple(paulis), tuple(angles), rescale)


def default_ite_tau(h: PauliSumHamiltonian) -> float:
    """tau = min(0.05, 0.5 / sum|lambda|), inside the O(1/n) stability window."""
    one_norm = h.one_norm()
    return min(0.05, 0.5 / one_norm) if one_norm > 0 else 0.05


def _apply_block(state: StateVector, pauli: PauliString, c: float, s: float) -> StateVector:
    if pauli.is_identity:
        amps = (c + s) * state.amplitudes
    else:
        amps = c * state.amplitudes + s * apply_pauli(state, pauli).amplitudes
    return StateVector(amps, float(np.vdot(amps, amps).real))


def apply_ite_trajectory(state: StateVector, plan: ItePlan, seed):
    """One postselected trajectory of the ordered block encodings.

    For each term the block map is applied, the herald success probability
    is the squared norm ratio, and a Bernoulli draw decides survival.  Any
    failure aborts immediately (the protocol restarts); on full success the
    returned state carries the accumulated norm, proportional to
    prod_j exp(-|l_j| tau) exp(sign l_j tau P_j) |state>.
    """
    rng = ensure_rng(seed)
    current = state.normalized()
    norm_acc = 1.0
    for (c, s), pauli in zip(plan.block_coefficients, plan.paulis):
        nxt = _apply_block(current, pauli, c, s)
        p_success = nxt.norm_squared
        if rng.random() >= p_success:
            return state, False
        norm_acc *= p_success
        current = nxt.normalized()
    return StateVector(current.amplitudes * math.sqrt(norm_acc), norm_acc), True


def ite_success_probability(state: StateVector, plan: ItePlan) -> float:
    """Exact probability that every herald succeeds, ||prod_j B_j psi||^2."""
    current = state.normalized()
    total = 1.0
    for (c, s), pauli in zip(plan.block_coefficients, plan.paulis):
        nxt = _apply_block(current, pauli, c, s)
        total *= nxt.norm_squared
        current = nxt.normalized()
    return float(total)


@dataclass(frozen=True)
class IteGradientResult:
    phi_prime: float
    dphi_prime: float
    p_plus: float
    p_minus: float
    trials_plus: int
    trials_minus: int
    shots_plus: int
    shots_minus: int


def _ite_survival(
    prep: Circuit,
    h: PauliSumHamiltonian,
    plan: ItePlan,
    t: float,
    shots: int | None,
    noise: NoiseModel | None,
    rng,
    evolution: EvolutionSpec,
):
    """(q_hat, q_variance, trials) for one sign of the imaginary-time step.

    q is the joint probability that all heralds succeed and the final
    projection onto the prepared state succeeds.  Sampling runs trajectories
    until `shots` survivors completed, counting restarts.
    """
    n = h.n_qubits
    psi0 = apply_circuit(StateVector.zero_state(n), prep)

    if noise is not None and not noise.is_trivial:
        return _ite_survival_noisy(prep, h, plan, t, shots, noise, rng, evolution)

    herald_p = ite_success_probability(psi0, plan)
    survivor = psi0
    for (c, s), pauli in zip(plan.block_coefficients, plan.paulis):
        survivor = _apply_block(survivor, pauli, c, s)
    survivor = survivor.normalized()
    evolved = evolution.evolve(h, survivor, t)
    undone = apply_circuit(evolved, prep.inverse())
    proj_p = float(abs(undone.amplitudes[0]) ** 2)
    q_exact = herald_p * proj_p

    if shots is None:
        return q_exact, 0.0, None
    if herald_p <= 0.0:
        raise AmplitudeLostError("herald probability vanished")
    trials = shots + int(rng.negative_binomial(shots, herald_p)) if herald_p < 1.0 else shots
    successes = int(rng.binomial(shots, proj_p))
    q_hat = successes / trials
    return float(q_hat), float(q_hat * (1.0 - q_hat) / trials), trials


def _ite_survival_noisy(prep, h, plan, t, shots, noise, rng, evolution):
    if shots is None:
        raise ValueError("exact expectations are not defined for noisy runs")
    if evolution.mode == "exact":
        raise ValueError("noisy runs require circuit evolution")
    n = h.n_qubits
    evo_circuit = evolution.circuit(h, t)
    inv_prep = prep.inverse()
    survivors = 0
    successes = 0
    trials = 0
    while survivors < shots:
        trials += 1
        state = _noisy_circuit_state(Circuit(n, list(prep.gates)), noise, rng)
        ok = True
        for (c, s), pauli, theta in zip(plan.block_coefficients, plan.paulis, plan.angles):
            state, ok = _noisy_block_trajectory(state, pauli, theta, c, s, noise, rng)
            if not ok:
                break
        if not ok:
            continue
        survivors += 1
        amps = state.amplitudes
        for gate in list(evo_circuit.gates) + list(inv_prep.gates):
            amps = _noisy_gate(amps, n, gate, noise, rng)
        if rng.random() < float(abs(amps[0]) ** 2):
            successes += 1
    q_hat = successes / trials
    return float(q_hat), float(q_hat * (1.0 - q_hat) / trials), trials


def _noisy_gate(amps, n, gate, noise, rng):
    from .statevector import apply_gate_flat, apply_pauli_flat
    from .noise import sample_fault

    amps = apply_gate_flat(amps, n, gate)
    if gate.arity >= noise.arity_threshold:
        if noise.independent_single_qubit:
            for q in gate.qubits:
                if rng.random() < noise.gamma:
                    amps = apply_pauli_flat(amps, n, sample_fault((q,), rng))
        elif rng.random() < noise.gamma:
            amps = apply_pauli_flat(amps, n, sample_fault(gate.qubits, rng))
    return amps


def _noisy_circuit_state(circuit: Circuit, noise, rng) -> StateVector:
    amps = StateVector.zero_state(circuit.n_qubits).amplitudes
    for gate in circuit.gates:
        amps = _noisy_gate(amps, circuit.n_qubits, gate, noise, rng)
    return StateVector(amps, 1.0)


def _noisy_block_trajectory(state, pauli, theta, c, s, noise, rng):
    """Explicit circuit realization of one block encoding on a fresh ancilla."""
    from .statevector import apply_gate_flat

    n = state.n_qubits
    ext = state.with_ancilla()
    amps = ext.amplitudes
    ry = Gate((n,), _ry_matrix(theta))
    amps = apply_gate_flat(amps, n + 1, ry)
    if not pauli.is_identity:
        controlled = _pauli_gate(pauli, control=n)
        amps = _noisy_gate(amps, n + 1, controlled, noise, rng)
    sign_theta = -theta if s >= 0 else theta
    amps = apply_gate_flat(amps, n + 1, Gate((n,), _ry_matrix(sign_theta)))
    even = amps[0::2]
    p0 = float(np.vdot(even, even).real)
    if rng.random() >= p0:
        return state, False
    return StateVector(even / math.sqrt(p0), 1.0), True


def _ry_matrix(theta):
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[c, -s], [s, c]], dtype=complex)


def ite_gradient(
    prep: Circuit,
    h: PauliSumHamiltonian,
    t: float,
    tau: float,
    shots_plus: int | None,
    shots_minus: int | None,
    noise: NoiseModel | None,
    seed,
    evolution: EvolutionSpec | None = None,
) -> IteGradientResult:
    """Finite-difference phase gradient from imaginary-time survivals.

    For each sign the block-encoded imaginary-time step runs until the
    requested number of survivors, each survivor is evolved to time t and
    projected onto the prepared state, and the rescaled survival
    probabilities p_pm give phi' = log(p_minus / p_plus) / (4 tau) with the
    propagated binomial variance.
    """
    evolution = evolution or EvolutionSpec("exact")
    rng = ensure_rng(seed)
    results = {}
    for sign, shots in ((+1, shots_plus), (-1, shots_minus)):
        plan = ite_plan(h, tau, sign)
        q_hat, q_var, trials = _ite_survival(prep, h, plan, t, shots, noise, rng, evolution)
        p_hat = plan.rescale_factor**2 * q_hat
        p_var = plan.rescale_factor**4 * q_var
        p_sigma = math.sqrt(p_var)
        if p_hat <= 0.0 or (p_var > 0.0 and p_hat < 3.0 * p_sigma):
            raise AmplitudeLostError(f"imaginary-time survival for sign {sign:+d} consistent with zero")
        results[sign] = (p_hat, p_var, trials, shots)
    p_plus, var_plus, trials_plus, sp = results[+1]
    p_minus, var_minus, trials_minus, sm = results[-1]
    phi_prime = math.log(p_minus / p_plus) / (4.0 * tau)
    dphi = math.sqrt(var_plus / p_plus**2 + var_minus / p_minus**2) / (4.0 * tau)
    return IteGradientResult(
        phi_prime=float(phi_prime),
        dphi_prime=float(dphi),
        p_plus=float(p_plus),
        p_minus=float(p_minus),
        trials_plus=trials_plus or 0,
        trials_minus=trials_minus or 0,
        shots_plus=sp or 0,
        shots_minus=sm or 0,
    )


# ---------------------------------------------------------------------------
# Config-driven protocol runs.

@dataclass
class ProtocolResult:
    series: EchoSeries
    info: dict = field(default_factory=dict)
    raw_series: EchoSeries | None = None


def resolve_ansatz(config) -> tuple:
    """(AnsatzSpec, preparation circuit, info) from an ExperimentConfig.

    Optimization, when requested, draws its restarts from a dedicated
    substream of the master seed so the rest of the run is unaffected.
    """
    from .model import optimize_ansatz

    h = config.model.build()
    info = {}
    if config.ansatz.params is not None:
        spec = AnsatzSpec(config.ansatz.kind, config.ansatz.params)
    else:
        ss = np.random.SeedSequence(config.seed).spawn(1)[0]
        spec, energy = optimize_ansatz(h, config.ansatz.kind, config.ansatz.restarts, ss)
        info["ansatz_energy"] = energy
    info["ansatz_params"] = list(spec.params)
    return spec, prepare_ansatz(spec, h.n_qubits), info


class ShotLedger:
    """Counts every drawn shot, including restarted trajectories."""

    def __init__(self):
        self.by_kind: dict = {}

    def add(self, kind: str, count: int):
        if count:
            self.by_kind[kind] = self.by_kind.get(kind, 0) + int(count)

    def total(self) -> int:
        return int(sum(self.by_kind.values()))

    def summary(self) -> dict:
        out = dict(sorted(self.by_kind.items()))
        out["total"] = self.total()
        return out


def run_protocol(config) -> ProtocolResult:
    """Execute the configured protocol over its full time/gate grid.

    Produces the echo series (with independent amplitude measurements),
    delegating phase assembly for the gradient protocols to the numerical
    integrator.  An amplitude statistically consistent with zero truncates
    the series with a recorded label.
    """
    h = config.model.build()
    spec, prep, info = resolve_ansatz(config)
    info["protocol"] = config.protocol
    info["seed"] = config.seed
    ledger = ShotLedger()

    if config.protocol == "oracle":
        result = _run_oracle(config, h, prep, info)
    elif config.protocol == "sht":
        result = _run_sht(config, h, prep, info, ledger)
    elif config.protocol == "dpg":
        result = _run_gradient(config, h, prep, info, ledger, kind="dpg")
    elif config.protocol == "ite":
        result = _run_gradient(config, h, prep, info, ledger, kind="ite")
    else:  # pragma: no cover - guarded by config validation
        raise ValueError(config.protocol)
    result.info.setdefault("shot_totals", ledger.summary())
    return result


def _run_oracle(config, h, prep, info) -> ProtocolResult:
    from .reference import exact_circuit_echo, exact_echo, unwrapped_phase

    m = round(config.t_max / config.dt)
    times = [k * config.dt for k in range(m + 1)]
    entries = []
    if config.oracle_reference == "hamiltonian":
        phis = unwrapped_phase(h, prep, times)
        for k, t in enumerate(times):
            g = exact_echo(h, prep, t)
            entries.append(EchoEntry(label=k, t=t, r=abs(g), phi=float(phis[k])))
    else:
        sequence = time_series_sequence(h, config.t_max, config.dt)
        phi = 0.0
        entries.append(EchoEntry(label=0, t=0.0, r=1.0, phi=0.0))
        prev = 1.0 + 0.0j
        k = 0
        for e in sequence:
            g = exact_circuit_echo(e.full_circuit(), prep)
            step = g * prev.conjugate()
            phi += math.atan2(step.imag, step.real)
            prev = g
            if e.closes_step:
                k += 1
                entries.append(EchoEntry(label=k, t=e.time_label, r=abs(g), phi=phi))
        info["sequence_length"] = len(sequence)
    series = EchoSeries(entries, dict(info))
    return ProtocolResult(series, dict(info))


def _sht_shot_schedule(config, h, prep, entries, rng_streams, ledger, info):
    """Per-step basis shot counts plus the amplitude estimates they rely on.

    Fixed mode measures amplitudes with the same count as the bases.
    Allocated mode first measures every amplitude with the pilot budget,
    then sizes the basis measurements from the variance-balancing rule.
    """
    n_steps = len(entries)
    if config.shots.mode == "exact":
        return [None] * n_steps, None, None
    if config.shots.mode == "fixed":
        return [config.shots.count] * n_steps, None, [config.shots.count] * (n_steps + 1)
    pilot = config.shots.pilot
    r_pilot = []
    p0, _ = _survival_measurement(prep, Circuit(h.n_qubits, []), pilot, config.noise, rng_streams["pilot"])
    ledger.add("sht_pilot", pilot)
    r_pilot.append(math.sqrt(max(p0, 0.0)))
    usable = n_steps
    for idx, e in enumerate(entries):
        p_hat, _ = _survival_measurement(prep, e.full_circuit(), pilot, config.noise, rng_streams["pilot"])
        ledger.add("sht_pilot", pilot)
        if p_hat < 9.0 / pilot:
            usable = idx
            break
        r_pilot.append(math.sqrt(p_hat))
    plan = allocate_shots_sht(r_pilot, usable, config.shots.epsilon)
    info["shot_plan_total"] = plan.total()
    info["shot_plan_r_min"] = min(r_pilot)
    return list(plan.per_step), r_pilot, None


def _run_sht(config, h, prep, info, ledger) -> ProtocolResult:
    advance = max_step_phase_advance(h, config.dt)
    if advance >= MAX_STEP_PHASE:
        raise ValueError(
            f"per-gate phase advance bound {advance:.3f} exceeds pi/2; reduce dt"
        )
    entries = time_series_sequence(h, config.t_max, config.dt)
    info["sequence_length"] = len(entries)
    master = np.random.SeedSequence(config.seed)
    children = master.spawn(3)
    streams = {
        "pilot": np.random.default_rng(children[0]),
        "steps": children[1],
        "amplitude": np.random.default_rng(children[2]),
    }
    basis_shots, r_pilot, amp_shots = _sht_shot_schedule(config, h, prep, entries, streams, ledger, info)
    n_steps = min(len(basis_shots), len(entries))
    step_rngs = (
        [np.random.default_rng(s) for s in streams["steps"].spawn(n_steps)] if n_steps else []
    )

    steps = []
    amplitudes = []
    dr = []
    if r_pilot is not None:
        amplitudes = [max(r, 1e-12) for r in r_pilot[: n_steps + 1]]
        pilot = config.shots.pilot
        dr = [0.5 * math.sqrt(max(1.0 - r * r, 0.0) / pilot) / max(r, 1e-6) for r in amplitudes]
    else:
        if config.shots.mode == "exact":
            p0, _ = _survival_measurement(prep, Circuit(h.n_qubits, []), None, None, streams["amplitude"])
            amplitudes.append(math.sqrt(max(p0, 0.0)))
            dr.append(0.0)
        else:
            shots0 = amp_shots[0]
            p0, var0 = _survival_measurement(
                prep, Circuit(h.n_qubits, []), shots0, config.noise, streams["amplitude"]
            )
            ledger.add("sht_amplitude", shots0)
            r0 = math.sqrt(max(p0, 0.0))
            amplitudes.append(r0)
            dr.append(0.5 * math.sqrt(var0) / max(r0, 1e-6))

    for idx in range(n_steps):
        e = entries[idx]
        shots = basis_shots[idx]
        rng = step_rngs[idx] if step_rngs else ensure_rng(0)
        core = _sht_circuits(prep, e.prefix, e.gate, e.suffix)
        x_hat, y_hat, _, _ = _measure_xy(prep, core, shots, config.noise, rng)
        steps.append((x_hat, y_hat))
        if shots is not None:
            ledger.add("sht_basis", 2 * shots)
        if r_pilot is None:
            if config.shots.mode == "exact":
                p_hat, _ = _survival_measurement(prep, e.full_circuit(), None, None, streams["amplitude"])
                amplitudes.append(math.sqrt(max(p_hat, 0.0)))
                dr.append(0.0)
            else:
                shots_r = amp_shots[idx + 1]
                p_hat, var = _survival_measurement(
                    prep, e.full_circuit(), shots_r, config.noise, streams["amplitude"]
                )
                ledger.add("sht_amplitude", shots_r)
                r_hat = math.sqrt(max(p_hat, 0.0))
                amplitudes.append(r_hat)
                dr.append(0.5 * math.sqrt(var) / max(r_hat, 1e-6))

    labels = list(range(n_steps + 1))
    times = [0.0] + [entries[i].t_effective for i in range(n_steps)]
    series = sht_reconstruct(
        steps,
        amplitudes,
        shots=basis_shots if config.shots.mode != "exact" else None,
        labels=labels,
        times=times,
        dr=dr,
        metadata={**info, "boundary_times": [e.time_label for e in entries if e.closes_step]},
    )
    result = ProtocolResult(series, dict(info))
    if config.mitigation and config.noise is not None and not config.noise.is_trivial:
        result = _apply_mitigation(config, h, prep, result, ledger)
    return result


def _apply_mitigation(config, h, prep, result, ledger) -> ProtocolResult:
    from .noise import echo_calibration, gate_time_density, mitigate_series

    shots = config.shots.count or config.shots.pilot or 2000
    m = round(config.t_max / config.dt)
    stride = max(1, m // 12)
    # t=0 anchors the preparation-loss intercept with a direct measurement
    t_grid = [0.0] + [k * config.dt for k in range(stride, m + 1, stride)]
    calib_seed = np.random.SeedSequence(config.seed).spawn(4)[3]
    fit = echo_calibration(
        prep, h, t_grid, config.dt, config.noise.gamma, shots, calib_seed, noise=config.noise
    )
    ledger.add("calibration", shots * len(t_grid))
    # gate-equivalent evolved time of each measurement circuit: noise accrues
    # per gate, and the sequential series' gate count is exactly its label
    density = gate_time_density(h, config.dt)
    if config.protocol == "sht":
        gate_times = [e.label / density for e in result.series.entries]
    else:
        evolution = EvolutionSpec(config.evolution, config.dt)
        gate_times = [
            len(evolution.circuit(h, e.t)) / density if e.t > 0 else 0.0
            for e in result.series.entries
        ]
    mitigated = mitigate_series(result.series, fit, times=gate_times)
    info = dict(result.info)
    info["decay_fit"] = {
        "rate": fit.rate,
        "amplitude": fit.amplitude,
        "r_squared": fit.r_squared,
        "times": list(fit.times),
        "survivals": list(fit.survivals),
    }
    return ProtocolResult(mitigated, info, raw_series=result.series)


def _gradient_grid(config, h, scheme):
    if config.n_times is not None:
        n_times = config.n_times
    elif config.shots.mode == "allocated":
        n_times, _ = choose_grid(h.n_qubits, config.t_max, config.shots.epsilon, scheme)
    else:
        n_times = round(config.t_max / config.dt)
    if scheme.method == "simpson" and n_times % 2 == 1:
        n_times += 1
    return np.linspace(0.0, config.t_max, n_times + 1)


def _run_gradient(config, h, prep, info, ledger, kind: str) -> ProtocolResult:
    scheme = IntegrationScheme(config.integration_method)
    times = _gradient_grid(config, h, scheme)
    evolution = EvolutionSpec(config.evolution, config.dt)
    master = np.random.SeedSequence(config.seed)
    children = master.spawn(2)
    point_streams = [np.random.default_rng(s) for s in children[0].spawn(len(times))]
    pilot_stream = np.random.default_rng(children[1])

    eta = None
    if config.shots.mode == "allocated":
        _, eta = choose_grid(h.n_qubits, config.t_max, config.shots.epsilon, scheme)
        info["eta"] = eta

    lambdas = [c for c, _ in h.terms]
    tau = config.tau if config.tau is not None else default_ite_tau(h)
    if kind == "ite":
        info["tau"] = tau

    grads, dgrads, r_vals, dr_vals = [], [], [], []
    truncated = None
    for idx, t in enumerate(times):
        rng = point_streams[idx]
        try:
            if kind == "dpg":
                g, dg, r, drr = _dpg_point(
                    config, h, prep, float(t), rng, pilot_stream, ledger, evolution, eta, lambdas
                )
            else:
                g, dg, r, drr = _ite_point(
                    config, h, prep, float(t), tau, rng, pilot_stream, ledger, evolution, eta
                )
        except AmplitudeLostError as exc:
            truncated = (idx, str(exc))
            break
        grads.append(g)
        dgrads.append(dg)
        r_vals.append(r)
        dr_vals.append(drr)

    n_ok = len(grads)
    if truncated is not None:
        # keep an even interval count for the composite rule
        if scheme.method == "simpson" and (n_ok - 1) % 2 == 1:
            n_ok -= 1
        info["truncated_at"] = truncated[0]
        info["truncation_reason"] = truncated[1]
    if n_ok < 2:
        raise AmplitudeLostError("amplitude lost before the first usable grid point")
    phi, dphi = integrate_gradient(times[:n_ok], grads[:n_ok], dgrads[:n_ok], scheme)
    entries = []
    for k in range(n_ok):
        entries.append(
            EchoEntry(
                label=k,
                t=float(times[k]),
                r=r_vals[k],
                phi=float(phi[k]),
                dr=dr_vals[k],
                dphi=float(dphi[k]),
                truncated=bool(truncated is not None and k == n_ok - 1),
            )
        )
    series = EchoSeries(entries, {**info, "gradients": [float(g) for g in grads[:n_ok]]})
    result = ProtocolResult(series, dict(info))
    if config.mitigation and config.noise is not None and not config.noise.is_trivial:
        result = _apply_mitigation(config, h, prep, result, ledger)
    return result


def _dpg_point(config, h, prep, t, rng, pilot_stream, ledger, evolution, eta, lambdas):
    n = h.n_qubits
    mode = config.shots.mode
    if mode == "exact":
        shots_a = shots_r = None
    elif mode == "fixed":
        shots_a = shots_r = config.shots.count
    else:
        pilot = config.shots.pilot
        p_pilot, _ = _survival_measurement(
            prep, evolution.circuit(h, t) or Circuit(n, []), pilot, config.noise, pilot_stream
        ) if evolution.mode == "trotter" else _dpg_exact_survival(h, prep, t, evolution, pilot, pilot_stream)
        ledger.add("dpg_pilot", pilot)
        p_pilot = max(p_pilot, 9.0 / pilot)
        lam_sq = sum(l * l for l in lambdas)
        shots_a = max(1, math.ceil(2.0 * lam_sq / (eta**2 * p_pilot**2) / max(len(lambdas), 1)))
        phi_bound = sum(abs(l) for l in lambdas) / math.sqrt(p_pilot)
        shots_r = max(1, math.ceil(2.0 * phi_bound**2 * (1.0 - p_pilot) / (eta**2 * p_pilot)))

    if evolution.mode == "trotter":
        body = evolution.circuit(h, t)
        p_hat, p_var = _survival_measurement(prep, body, shots_r, config.noise, rng)
    else:
        p_hat, p_var = _dpg_exact_survival(h, prep, t, evolution, shots_r, rng)
    if shots_r is not None:
        ledger.add("dpg_amplitude", shots_r)

    a_hats, a_vars = [], []
    for j in range(len(h.terms)):
        a_hat, a_var, _ = dpg_term(prep, h, t, j, shots_a, config.noise, rng, evolution)
        a_hats.append(a_hat)
        a_vars.append(a_var)
        if shots_a is not None:
            ledger.add("dpg_terms", shots_a)
    grad, dgrad = dpg_gradient(a_hats, lambdas, p_hat, a_vars, p_var)
    r_hat = math.sqrt(max(p_hat, 0.0))
    dr = 0.5 * math.sqrt(p_var) / max(r_hat, 1e-6) if shots_r is not None else 0.0
    return grad, dgrad, r_hat, dr


def _dpg_exact_survival(h, prep, t, evolution, shots, rng):
    psi0 = apply_circuit(StateVector.zero_state(h.n_qubits), prep)
    p = float(abs(inner_product(psi0, evolution.evolve(h, psi0, t))) ** 2)
    if shots is None:
        return p, 0.0
    k = int(ensure_rng(rng).binomial(shots, min(1.0, max(0.0, p))))
    p_hat = k / shots
    return p_hat, p_hat * (1.0 - p_hat) / shots


def _ite_point(config, h, prep, t, tau, rng, pilot_stream, ledger, evolution, eta):
    mode = config.shots.mode
    if mode == "exact":
        shots_pm = None
    elif mode == "fixed":
        shots_pm = config.shots.count
    else:
        pilot = max(50, config.shots.pilot // 10)
        probe = ite_gradient(prep, h, t, tau, pilot, pilot, config.noise, pilot_stream, evolution)
        ledger.add("ite_pilot", probe.trials_plus + probe.trials_minus)
        q_min = min(probe.p_plus, probe.p_minus) / ite_plan(h, tau, +1).rescale_factor ** 2
        herald = max(
            probe.shots_plus / max(probe.trials_plus, 1),
            probe.shots_minus / max(probe.trials_minus, 1),
        )
        trials_needed = math.ceil(1.0 / (8.0 * tau**2 * eta**2 * max(q_min, 1e-9)))
        shots_pm = max(1, math.ceil(trials_needed * min(1.0, herald)))
    res = ite_gradient(prep, h, t, tau, shots_pm, shots_pm, config.noise, rng, evolution)
    if shots_pm is not None:
        ledger.add("ite_trials", res.trials_plus + res.trials_minus)
    # real-time amplitude measured independently of the imaginary-time step
    if mode == "exact":
        shots_r = None
    else:
        shots_r = shots_pm
    if evolution.mode == "trotter":
        p_hat, p_var = _survival_measurement(prep, evolution.circuit(h, t), shots_r, config.noise, rng)
    else:
        p_hat, p_var = _dpg_exact_survival(h, prep, t, evolution, shots_r, rng)
    if shots_r is not None:
        ledger.add("ite_amplitude", shots_r)
    r_hat = math.sqrt(max(p_hat, 0.0))
    dr = 0.5 * math.sqrt(p_var) / max(r_hat, 1e-6) if shots_r is not None else 0.0
    return res.phi_prime, res.dphi_prime, r_hat, dr
