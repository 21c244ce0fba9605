"""Depolarizing trajectory noise on multi-qubit gates, plus echo-based mitigation.

The sampling engine unravels the k-qubit depolarizing channel per shot: with
probability gamma after each gate of arity >= 2, one of the 4^k - 1
non-identity Pauli strings on the gate's wires is applied uniformly at
random.  Because every measurement here reduces to the probabilities of a
few computational-basis amplitudes, a faulty shot's outcome distribution is
obtained from cached forward states and backward-propagated outcome vectors;
only trajectories with two or more faults need any gate replay.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .series import EchoEntry, EchoSeries
from .statevector import (
    Circuit,
    Gate,
    PauliString,
    StateVector,
    apply_gate_flat,
    apply_pauli,
    apply_pauli_flat,
    ensure_rng,
)

_AXES = ("I", "X", "Y", "Z")


@dataclass(frozen=True)
class NoiseModel:
    """Uniform depolarizing noise after every gate of arity >= threshold.

    With ``independent_single_qubit`` set, each wire of a noisy gate is
    depolarized independently instead of applying the joint k-qubit channel.
    """

    gamma: float
    arity_threshold: int = 2
    independent_single_qubit: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    @property
    def is_trivial(self) -> bool:
        return self.gamma == 0.0


def _decode_fault(code: int, qubits) -> tuple:
    """Map an integer in [1, 4^k) to a non-identity Pauli on the given wires."""
    factors = []
    for q in qubits:
        axis = _AXES[code & 3]
        code >>= 2
        if axis != "I":
            factors.append((q, axis))
    return tuple(sorted(factors))


def sample_fault(qubits, rng) -> tuple:
    code = int(rng.integers(1, 4 ** len(qubits)))
    return _decode_fault(code, qubits)


def depolarize_after_gate(state: StateVector, gate_qubits, gamma: float, seed) -> StateVector:
    """One trajectory draw of the k-qubit depolarizing channel.

    With probability 1 - gamma the state passes unchanged; otherwise a
    uniformly chosen non-identity Pauli string on the gate's wires is applied.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    rng = ensure_rng(seed)
    if rng.random() >= gamma:
        return state.copy()
    factors = sample_fault(tuple(gate_qubits), rng)
    return apply_pauli(state, PauliString(state.n_qubits, factors))


# ---------------------------------------------------------------------------
# Measurement outcome families.  Each measurement tracks the probabilities of
# a handful of computational-basis amplitudes; the final outcome bin collects
# everything else ("fail").

@dataclass(frozen=True)
class BasisOutcomes:
    """Outcome bins given by flat basis indices, plus an implicit complement."""

    indices: tuple

    @property
    def n_outcomes(self) -> int:
        return len(self.indices) + 1

    def probabilities(self, amps: np.ndarray) -> np.ndarray:
        probs = [float(abs(amps[i]) ** 2) for i in self.indices]
        probs.append(max(0.0, 1.0 - sum(probs)))
        return np.array(probs)


def _fault_sites(circuit: Circuit, noise: NoiseModel):
    """(gate_index, wires) pairs where a fault may strike, in circuit order."""
    sites = []
    for idx, gate in enumerate(circuit.gates):
        if gate.arity < noise.arity_threshold:
            continue
        if noise.independent_single_qubit:
            for q in gate.qubits:
                sites.append((idx, (q,)))
        else:
            sites.append((idx, gate.qubits))
    return sites


def exact_outcome_probabilities(circuit: Circuit, outcomes: BasisOutcomes) -> np.ndarray:
    amps = StateVector.zero_state(circuit.n_qubits).amplitudes
    for gate in circuit.gates:
        amps = apply_gate_flat(amps, circuit.n_qubits, gate)
    return outcomes.probabilities(amps)


def measure_counts(
    circuit: Circuit,
    outcomes: BasisOutcomes,
    shots: int,
    noise: NoiseModel | None,
    rng,
) -> np.ndarray:
    """Outcome counts for `shots` executions of the circuit from |0...0>.

    Noiseless shots are drawn from the exact outcome distribution in one
    multinomial; shots carrying at least one fault are propagated as
    individual trajectories and contribute a single draw each.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = ensure_rng(rng)
    if noise is None or noise.is_trivial:
        probs = exact_outcome_probabilities(circuit, outcomes)
        return rng.multinomial(shots, probs / probs.sum())

    n = circuit.n_qubits
    gates = circuit.gates
    sites = _fault_sites(circuit, noise)
    n_sites = len(sites)
    if n_sites == 0:
        probs = exact_outcome_probabilities(circuit, outcomes)
        return rng.multinomial(shots, probs / probs.sum())

    site_gate_set = {g for g, _ in sites}

    # Forward pass: noiseless states after every gate that hosts a fault site.
    after_gate: dict = {}
    amps = StateVector.zero_state(n).amplitudes
    for idx, gate in enumerate(gates):
        amps = apply_gate_flat(amps, n, gate)
        if idx in site_gate_set:
            after_gate[idx] = amps
    clean_probs = outcomes.probabilities(amps)

    # Backward pass: outcome vectors pulled back through the tail of the
    # circuit, stored at the same cut positions.
    chi: dict = {i: [] for i in site_gate_set}
    for basis_index in outcomes.indices:
        vec = np.zeros(2**n, dtype=complex)
        vec[basis_index] = 1.0
        for idx in range(len(gates) - 1, -1, -1):
            if idx in site_gate_set:
                chi[idx].append(vec)
            vec = apply_gate_flat(vec, n, gates[idx].inverse())
    chi = {idx: np.array(vecs) for idx, vecs in chi.items()}

    mask = rng.random((shots, n_sites)) < noise.gamma
    noisy_rows = np.nonzero(mask.any(axis=1))[0]
    counts = rng.multinomial(shots - noisy_rows.size, clean_probs / clean_probs.sum())

    for row in noisy_rows:
        hit_sites = np.nonzero(mask[row])[0]
        psi = None
        last_gate = -1
        for sid in hit_sites:
            gate_idx, wires = sites[sid]
            if psi is None:
                psi = after_gate[gate_idx]
            elif gate_idx > last_gate:
                for idx in range(last_gate + 1, gate_idx + 1):
                    psi = apply_gate_flat(psi, n, gates[idx])
            psi = apply_pauli_flat(psi, n, sample_fault(wires, rng))
            last_gate = gate_idx
        amps_out = chi[last_gate].conj() @ psi
        probs = np.abs(amps_out) ** 2
        probs = np.append(probs, max(0.0, 1.0 - probs.sum()))
        u = rng.random()
        counts[int(np.searchsorted(np.cumsum(probs), u * probs.sum()))] += 1
    return counts


def expected_outcome_probabilities(
    circuit: Circuit, outcomes: BasisOutcomes, noise: NoiseModel | None
) -> np.ndarray:
    """Channel-averaged outcome probabilities (exact, no sampling).

    Used only for small registers and tests: evolves the density matrix
    through the exact depolarizing channel after every noisy gate.
    """
    n = circuit.n_qubits
    dim = 2**n
    rho = np.zeros((dim, dim), dtype=complex)
    rho[0, 0] = 1.0
    for gate in circuit.gates:
        mat, qubits = gate.expanded()
        rho = _conjugate(rho, n, mat, qubits)
        if noise is not None and not noise.is_trivial and gate.arity >= noise.arity_threshold:
            groups = [(q,) for q in gate.qubits] if noise.independent_single_qubit else [gate.qubits]
            for wires in groups:
                rho = _depolarize_density(rho, n, wires, noise.gamma)
    probs = [float(rho[i, i].real) for i in outcomes.indices]
    probs.append(max(0.0, 1.0 - sum(probs)))
    return np.array(probs)


def _matrix_left(rho, n, mat, qubits):
    from .statevector import apply_matrix_flat

    cols = [
        apply_matrix_flat(np.ascontiguousarray(rho[:, c]), n, mat, qubits)
        for c in range(rho.shape[1])
    ]
    return np.stack(cols, axis=1)


def _conjugate(rho, n, mat, qubits):
    """U rho U^dagger via column application (small registers only)."""
    left = _matrix_left(rho, n, mat, qubits)
    return _matrix_left(left.conj().T, n, mat, qubits).conj().T


def _pauli_left(rho, n, factors):
    cols = [
        apply_pauli_flat(np.ascontiguousarray(rho[:, c]), n, factors)
        for c in range(rho.shape[1])
    ]
    return np.stack(cols, axis=1)


def _depolarize_density(rho, n, wires, gamma):
    """Exact k-qubit depolarizing channel on a density matrix."""
    k = len(wires)
    acc = np.zeros_like(rho)
    for code in range(1, 4**k):
        factors = _decode_fault(code, wires)
        left = _pauli_left(rho, n, factors)
        acc += _pauli_left(left.conj().T, n, factors).conj().T
    return (1.0 - gamma) * rho + gamma / (4**k - 1) * acc


# ---------------------------------------------------------------------------
# Echo calibration and mitigation.

@dataclass(frozen=True)
class DecayFit:
    """Amplitude-level exponential fit r(t) = amplitude * exp(-rate * t).

    The parameter covariance (intercept c = 2 log A and rate) lets callers
    propagate the calibration's own statistical error into mitigated values.
    """

    rate: float
    amplitude: float
    times: tuple
    survivals: tuple
    residual: float
    r_squared: float
    var_intercept: float = 0.0
    var_rate: float = 0.0
    cov_intercept_rate: float = 0.0

    def log_amplitude_scale_variance(self, t: float) -> float:
        """Var[log(exp(rate*t)/amplitude)] from the fit's parameter covariance."""
        return (
            self.var_intercept / 4.0
            + t**2 * self.var_rate
            - t * self.cov_intercept_rate
        )


def fit_exponential_decay(times, survivals, shots) -> DecayFit:
    """Weighted least squares of log p against t with p(t) = A^2 exp(-2 rate t).

    Points with p < 5/shots are excluded; weights are inverse variances of
    log p under binomial noise.  Needs at least two usable points.
    """
    times = np.asarray(times, dtype=float)
    survivals = np.asarray(survivals, dtype=float)
    keep = survivals > 5.0 / shots
    times, survivals = times[keep], survivals[keep]
    if times.size < 2:
        raise ValueError("fewer than two usable calibration points")
    logp = np.log(survivals)
    variances = np.clip(1.0 - survivals, 1e-12, None) / (shots * survivals)
    design = np.vstack([np.ones_like(times), -2.0 * times]).T
    w_sqrt = 1.0 / np.sqrt(variances)
    sol, *_ = np.linalg.lstsq(design * w_sqrt[:, None], logp * w_sqrt, rcond=None)
    intercept, rate = sol
    amplitude = float(np.exp(intercept / 2.0))
    fitted = intercept - 2.0 * rate * times
    resid = float(np.sqrt(np.mean((logp - fitted) ** 2)))
    ss_res = float(np.sum((logp - fitted) ** 2))
    ss_tot = float(np.sum((logp - np.mean(logp)) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    xtwx = design.T @ (design / variances[:, None])
    cov = np.linalg.inv(xtwx)
    return DecayFit(
        rate=float(rate),
        amplitude=amplitude,
        times=tuple(times),
        survivals=tuple(survivals),
        residual=resid,
        r_squared=r_squared,
        var_intercept=float(cov[0, 0]),
        var_rate=float(cov[1, 1]),
        cov_intercept_rate=float(cov[0, 1]),
    )


def echo_calibration(
    prep: Circuit,
    h,
    t_grid,
    dt: float,
    gamma: float,
    shots: int,
    seed,
    noise: NoiseModel | None = None,
) -> DecayFit:
    """Fit the noise-induced decay from forward-then-backward evolutions.

    For each grid time the circuit prep + U(t) + U(t)^dag + prep^dag is run
    with depolarizing noise and the all-zeros survival recorded; noiselessly
    it returns the initial state exactly, so any decay is hardware error.

    Noise accrues per gate, so each survival enters the fit at the
    gate-equivalent evolution time of its circuit: the number of evolution
    gates (forward plus backward; preparation excluded, it lands in the
    intercept) divided by the gate density of one merged step.  The fitted
    rate is then the amplitude decay per unit of gate-equivalent evolved
    time, matching echo-measurement circuits whose own gate counts are
    converted the same way; the fitted amplitude is the pure preparation
    loss, anchored exactly by a t=0 point when the grid contains one.
    """
    from .model import trotter2_circuit

    t_grid = sorted(float(t) for t in t_grid)
    if not t_grid:
        raise ValueError("calibration grid is empty")
    if noise is None:
        noise = NoiseModel(gamma)
    rng = ensure_rng(seed)
    outcomes = BasisOutcomes((0,))
    survivals = []
    gate_times = []
    density = gate_time_density(h, dt)
    for t in t_grid:
        forward = trotter2_circuit(h, t, dt) if t > 0 else Circuit(h.n_qubits, [])
        circuit = prep.compose(forward).compose(forward.inverse()).compose(prep.inverse())
        counts = measure_counts(circuit, outcomes, shots, noise, rng)
        survivals.append(counts[0] / shots)
        gate_times.append(2.0 * len(forward) / density)
    fit = fit_exponential_decay(gate_times, survivals, shots)
    return DecayFit(
        rate=fit.rate,
        amplitude=fit.amplitude,
        times=tuple(t_grid),
        survivals=fit.survivals,
        residual=fit.residual,
        r_squared=fit.r_squared,
        var_intercept=fit.var_intercept,
        var_rate=fit.var_rate,
        cov_intercept_rate=fit.cov_intercept_rate,
    )


def gate_time_density(h, dt: float) -> float:
    """Evolution gates per unit time of one merged second-order step."""
    n_bonds = h.n_qubits - 1
    return n_bonds / dt if n_bonds > 0 else 1.0 / dt


def mitigate_series(series: EchoSeries, fit: DecayFit, times=None) -> EchoSeries:
    """Rescale amplitudes by exp(rate * t) / amplitude; phases untouched.

    ``times`` optionally overrides the exponent's time per entry with the
    gate-equivalent evolved time of the measurement circuit (protocol runners
    know the per-entry gate counts); by default the entry's own t is used.
    Amplitude uncertainties are scaled by the same factor and widened by the
    calibration fit's parameter covariance (the rescaled value is a function
    of the fitted rate and amplitude).  Any rescaled amplitude above 1.5
    marks over-mitigation: it is clamped to 1 for downstream spectral use and
    the series metadata records the flag.
    """
    if not math.isfinite(fit.rate):
        raise ValueError("decay rate must be finite")
    if times is not None and len(times) != len(series.entries):
        raise ValueError("times override must match the series length")
    entries = []
    over = False
    for idx, e in enumerate(series.entries):
        t_noise = float(times[idx]) if times is not None else e.t
        scale = math.exp(fit.rate * t_noise) / fit.amplitude
        r = e.r * scale
        dr = e.dr * scale
        cal_var = max(fit.log_amplitude_scale_variance(t_noise), 0.0)
        if cal_var > 0.0:
            dr = math.sqrt(dr**2 + (r * math.sqrt(cal_var)) ** 2)
        if r > 1.5:
            over = True
            r = 1.0
        entries.append(EchoEntry(e.label, e.t, r, e.phi, dr, e.dphi, e.truncated))
    return series.with_entries(
        entries,
        mitigated=True,
        decay_rate=fit.rate,
        prep_amplitude=fit.amplitude,
        over_mitigation=over,
    )
