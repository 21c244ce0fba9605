"""Exact dense references for every estimated quantity on small systems.

Everything here goes through one cached eigendecomposition per Hamiltonian,
so repeated echo/gradient/spectrum evaluations are two matrix-vector products
each.  The register cap keeps the dense 2^n x 2^n work at desk scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .model import PauliSumHamiltonian, ordered_terms
from .statevector import (
    Circuit,
    PAULI_MATRICES,
    StateVector,
    apply_circuit,
    apply_pauli,
    inner_product,
)

MAX_DENSE_QUBITS = 14

_SPARSE_PAULI = {k: sp.csr_matrix(v) for k, v in PAULI_MATRICES.items()}


def _check_size(h: PauliSumHamiltonian):
    if h.n_qubits > MAX_DENSE_QUBITS:
        raise ValueError(
            f"dense reference capped at {MAX_DENSE_QUBITS} qubits, got {h.n_qubits}"
        )


def dense_hamiltonian(h: PauliSumHamiltonian) -> np.ndarray:
    """Dense matrix of the Pauli sum (sparse assembly, one densification)."""
    _check_size(h)
    n = h.n_qubits
    total = sp.csr_matrix((2**n, 2**n), dtype=complex)
    for coeff, string in h.terms:
        lookup = dict(string.factors)
        mat = sp.identity(1, dtype=complex, format="csr")
        for q in range(n):
            mat = sp.kron(mat, _SPARSE_PAULI[lookup.get(q, "I")], format="csr")
        total = total + coeff * mat
    return np.asarray(total.todense())


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def overlaps(self, state: StateVector) -> np.ndarray:
        return self.eigenvectors.conj().T @ state.amplitudes


@lru_cache(maxsize=16)
def spectral_decomposition(h: PauliSumHamiltonian) -> SpectralDecomposition:
    mat = dense_hamiltonian(h)
    if np.max(np.abs(mat.imag)) < 1e-300:
        # Y-free Hamiltonians are real symmetric; eigh is several times faster
        w, v = np.linalg.eigh(mat.real)
        v = v.astype(complex)
    else:
        w, v = np.linalg.eigh(mat)
    return SpectralDecomposition(w, v)


def prepared_state(prep: Circuit) -> StateVector:
    return apply_circuit(StateVector.zero_state(prep.n_qubits), prep)


def evolve_exact(h: PauliSumHamiltonian, state: StateVector, t: float) -> StateVector:
    """exp(-iHt)|state> through the spectral decomposition."""
    dec = spectral_decomposition(h)
    coeffs = dec.overlaps(state)
    return StateVector(dec.eigenvectors @ (np.exp(-1j * dec.eigenvalues * t) * coeffs), state.norm_squared)


def exact_echo(h: PauliSumHamiltonian, prep: Circuit, t: float) -> complex:
    """g(t) = <psi| exp(-iHt) |psi> with |psi> = prep|0...0>."""
    dec = spectral_decomposition(h)
    weights = np.abs(dec.overlaps(prepared_state(prep))) ** 2
    return complex(np.sum(weights * np.exp(-1j * dec.eigenvalues * t)))


def exact_circuit_echo(prefix: Circuit, prep: Circuit) -> complex:
    """g_L = <psi| U_L |psi> for an explicit gate circuit U_L."""
    psi = prepared_state(prep)
    return inner_product(psi, apply_circuit(psi, prefix))


def unwrapped_phase(h: PauliSumHamiltonian, prep: Circuit, times, substeps: int | None = None):
    """Continuous phase of the exact echo at the requested times.

    The echo is evaluated on an internal grid fine enough that consecutive
    phase jumps stay well below pi, unwrapped there, then subsampled.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return times
    t_max = float(times.max())
    if substeps is None:
        scale = max(1.0, h.one_norm())
        substeps = int(np.ceil(scale * t_max / 1.0)) + times.size
    grid = np.union1d(np.linspace(0.0, t_max, substeps + 1), np.round(times, 12))
    dec = spectral_decomposition(h)
    weights = np.abs(dec.overlaps(prepared_state(prep))) ** 2
    g = np.array([np.sum(weights * np.exp(-1j * dec.eigenvalues * t)) for t in grid])
    phi = np.unwrap(np.angle(g))
    phi -= phi[0]
    idx = np.searchsorted(grid, np.round(times, 12))
    return phi[idx]


def exact_gradient(h: PauliSumHamiltonian, prep: Circuit, t: float) -> float:
    """d(phi)/dt at time t from the anticommutator expectation.

    Equals -Re[h(t)/g(t)] with h(t) = <psi| H exp(-iHt) |psi>; fails when the
    echo is too small for the phase to be defined.
    """
    dec = spectral_decomposition(h)
    weights = np.abs(dec.overlaps(prepared_state(prep))) ** 2
    phases = np.exp(-1j * dec.eigenvalues * t)
    g = np.sum(weights * phases)
    if abs(g) <= 1e-8:
        raise ValueError("echo amplitude vanishes; gradient undefined")
    hval = np.sum(weights * dec.eigenvalues * phases)
    return float(-np.real(hval / g))


def exact_ite_state(
    h: PauliSumHamiltonian, prep: Circuit, tau: float, sign: int, term_order=None
):
    """Ordered product prod_j exp(sign * coeff_j * tau * P_j) applied to |psi>.

    Term order defaults to the canonical ascending order shared with the
    block-encoding protocol.  Returns (state, norm) with the state carrying
    its diminished squared norm.
    """
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    terms = list(term_order) if term_order is not None else ordered_terms(h)
    state = prepared_state(prep)
    amps = state.amplitudes
    for coeff, string in terms:
        a = sign * coeff * tau
        if string.is_identity:
            amps = amps * np.exp(a)
            continue
        flipped = apply_pauli(StateVector(amps, 1.0), string).amplitudes
        amps = np.cosh(a) * amps + np.sinh(a) * flipped
    norm = float(np.linalg.norm(amps))
    return StateVector(amps, norm**2), norm


def imaginary_time_state(h: PauliSumHamiltonian, prep: Circuit, tau: float, sign: int):
    """Un-Trotterized exp(sign * H * tau)|psi> via the spectral decomposition."""
    dec = spectral_decomposition(h)
    coeffs = dec.overlaps(prepared_state(prep))
    amps = dec.eigenvectors @ (np.exp(sign * dec.eigenvalues * tau) * coeffs)
    norm = float(np.linalg.norm(amps))
    return StateVector(amps, norm**2), norm


def exact_ldos(h: PauliSumHamiltonian, prep: Circuit, delta: float, e_grid):
    """Gaussian-broadened overlap spectrum sum_k w_k exp(-(E_k-E)^2 / 2 delta^2).

    Uses the same (unnormalized) filter convention as the discrete
    time-series reconstruction, so the two are directly comparable; the
    integral over energy equals delta * sqrt(2*pi) for a normalized state.
    """
    from .analysis import LdosSpectrum  # local import to avoid a cycle

    e_grid = np.asarray(e_grid, dtype=float)
    dec = spectral_decomposition(h)
    weights = np.abs(dec.overlaps(prepared_state(prep))) ** 2
    density = np.array(
        [np.sum(weights * np.exp(-((dec.eigenvalues - e) ** 2) / (2.0 * delta**2))) for e in e_grid]
    )
    return LdosSpectrum(
        energies=e_grid,
        density=density,
        uncertainty=np.zeros_like(density),
        delta=delta,
        t_max=np.inf,
        r_points=0,
    )
