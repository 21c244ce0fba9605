import numpy as np
import pytest

from loschmidt.model import AnsatzSpec, case_study_hamiltonian, optimize_ansatz, prepare_ansatz


@pytest.fixture(scope="session")
def case_study_h4():
    return case_study_hamiltonian(4, 0.5)


@pytest.fixture(scope="session")
def case_study_h6():
    return case_study_hamiltonian(6, 0.5)


@pytest.fixture(scope="session")
def product_ansatz_h4(case_study_h4):
    spec, energy = optimize_ansatz(case_study_h4, "product", restarts=6, seed=41)
    return spec, prepare_ansatz(spec, 4), energy


@pytest.fixture(scope="session")
def product_ansatz_h6(case_study_h6):
    spec, energy = optimize_ansatz(case_study_h6, "product", restarts=6, seed=61)
    return spec, prepare_ansatz(spec, 6), energy


def dense_matrix(h):
    out = np.zeros((2**h.n_qubits,) * 2, dtype=complex)
    for coeff, string in h.terms:
        out += coeff * string.dense()
    return out
