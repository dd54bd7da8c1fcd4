"""Independent reference computations used by the tests.

Each one re-derives a quantity by a different route than the library: explicit
loops instead of superoperator reshapes, SVD instead of scipy null spaces,
closed-form Euler means instead of Monte Carlo.
"""
import numpy as np


def matrix_unit(d: int, i: int, j: int) -> np.ndarray:
    E = np.zeros((d, d), dtype=complex)
    E[i, j] = 1.0
    return E


def brute_force_ccp_min(germ) -> float:
    """min of sum <zeta_b,mu | gamma[mu,nu](E_b^* E_c) zeta_c,nu> over unit zeta with sum_b E_b zeta_b,top = 0."""
    d, n = germ.d_H, 1 + germ.d_E
    units = [matrix_unit(d, i, j) for i in range(d) for j in range(d)]
    size = len(units) * n * d
    Q = np.zeros((size, size), dtype=complex)

    def index(b, mu, i):
        return (b * n + mu) * d + i

    for b, Eb in enumerate(units):
        for c, Ec in enumerate(units):
            prod = Eb.conj().T @ Ec
            for mu in range(n):
                for nu in range(n):
                    block = germ.apply(mu, nu, prod)
                    for i in range(d):
                        for j in range(d):
                            Q[index(b, mu, i), index(c, nu, j)] = block[i, j]
    C = np.zeros((d, size), dtype=complex)
    for b, Eb in enumerate(units):
        for i in range(d):
            C[:, index(b, 0, i)] = Eb[:, i]
    _, s, vh = np.linalg.svd(C)
    rank = int(np.sum(s > 1e-12))
    N = vh[rank:].conj().T
    R = N.conj().T @ Q @ N
    return float(np.linalg.eigvalsh(0.5 * (R + R.conj().T))[0])


def euler_mean_map(K: np.ndarray, L: np.ndarray, dt: float, n_steps: int, B: np.ndarray) -> np.ndarray:
    """Exact mean of V^* B V for n Euler steps V <- (I - K dt + L dQ) V with E dQ = 0, E dQ^2 = dt."""
    A = np.eye(K.shape[0]) - K * dt
    Y = np.array(B, dtype=complex)
    for _ in range(n_steps):
        Y = A.conj().T @ Y @ A + dt * L.conj().T @ Y @ L
    return Y


def choi_min_eigenvalue(superop: np.ndarray, d: int) -> float:
    """Choi matrix sum_ij E_ij (x) Phi(E_ij) of a column-stacked superoperator."""
    J = np.zeros((d * d, d * d), dtype=complex)
    for i in range(d):
        for j in range(d):
            E = matrix_unit(d, i, j)
            out = (superop @ E.reshape(-1, order="F")).reshape(d, d, order="F")
            J += np.kron(E, out)
    return float(np.linalg.eigvalsh(0.5 * (J + J.conj().T))[0])
