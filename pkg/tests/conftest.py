import numpy as np
import pytest

from qsflow._numeric import sandwich
from qsflow.germ_analyzer import KLCoefficients, StructuralGerm, generator_from_KL

SM = np.array([[0, 1], [0, 0]], dtype=complex)  # lowering: excited e1 -> ground e0
SP = SM.conj().T
EXCITED = SP @ SM
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
I2 = np.eye(2, dtype=complex)

ACCEPTANCE_LINES: list[str] = []


def decay_model(eps: float = 0.0, hamiltonian: np.ndarray | None = None) -> KLCoefficients:
    """Qubit decay K = L*L/2 + eps + iH, L = sigma_minus, no E modes."""
    K = 0.5 * EXCITED + eps * I2
    if hamiltonian is not None:
        K = K + 1j * hamiltonian
    return KLCoefficients(K=K, L_l=(SM,))


def decay_dilation(eps: float = 0.0) -> KLCoefficients:
    """Same decay with one E mode: creation sigma_minus, annihilation sigma_plus, trivial scattering."""
    return KLCoefficients(K=0.5 * EXCITED + eps * I2, K_m=(SP,), L_l=(SM,), L_lm=((I2,),))


def random_matrix(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    return scale * (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)))


def random_kl(rng: np.random.Generator, d: int = 2, d_E: int = 1, n_channels: int = 2) -> KLCoefficients:
    return KLCoefficients(
        K=random_matrix(rng, d),
        K_m=tuple(random_matrix(rng, d) for _ in range(d_E)),
        L_l=tuple(random_matrix(rng, d) for _ in range(n_channels)),
        L_lm=tuple(tuple(random_matrix(rng, d, 0.5) for _ in range(d_E)) for _ in range(n_channels)),
    )


# vec(B^T) = TRANSPOSE @ vec(B) for 2x2 column-stacked matrices
TRANSPOSE = np.eye(4)[[0, 2, 1, 3]].astype(complex)


def contaminated(germ: StructuralGerm, scale: float = 1.0) -> StructuralGerm:
    g = np.array(germ.gamma)
    g[0, 0] = g[0, 0] + scale * TRANSPOSE
    return StructuralGerm(germ.d_H, germ.d_E, g)


def hermiticity_preserving_perturbation(rng, d: int, size: float) -> np.ndarray:
    """B -> sum_k c_k A_k B A_k^dagger with real c_k of mixed sign."""
    out = np.zeros((d * d, d * d), dtype=complex)
    for c in rng.normal(size=3):
        A = random_matrix(rng, d)
        out += size * c * sandwich(A.conj().T, A)
    return out


def seeded_case(seed: int) -> StructuralGerm:
    rng = np.random.default_rng(seed)
    germ = generator_from_KL(random_kl(rng, d=2, d_E=1, n_channels=2))
    if seed % 2:
        g = np.array(germ.gamma)
        g[0, 0] += hermiticity_preserving_perturbation(rng, 2, 1.0)
        germ = StructuralGerm(2, 1, g)
    return germ


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
