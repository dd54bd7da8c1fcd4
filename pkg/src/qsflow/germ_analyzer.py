"""Structural germs of quantum stochastic CP flows.

A germ over a system of dimension d with d_E noise modes is a
(1 + d_E) x (1 + d_E) table of superoperators ``gamma[mu, nu]``.  Row index 0
stands for the annihilation side ("-"), column index 0 for the creation side
("+"); indices 1..d_E are the noise modes.  ``gamma`` differs from the
generator table ``lambda`` by the identity map on the diagonal mode blocks.

Superoperators are d**2 x d**2 matrices in the column-stacking convention of
``qsflow._numeric``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from qsflow._numeric import (
    apply_superop,
    decode_matrix,
    encode_matrix,
    hermitian_part,
    identity_superop,
    min_eigenvalue,
    psd_sqrt,
    sandwich,
    fix_phase,
)
from qsflow.ito_algebra import ItoQuadruple


@dataclass(frozen=True, eq=False)
class StructuralGerm:
    """Germ table gamma of shape (1 + d_E, 1 + d_E, d**2, d**2)."""

    d_H: int
    d_E: int
    gamma: np.ndarray

    def __post_init__(self) -> None:
        g = np.array(self.gamma, dtype=complex)
        n = 1 + self.d_E
        sq = self.d_H**2
        if g.shape != (n, n, sq, sq):
            raise ValueError(f"germ table must have shape {(n, n, sq, sq)}, got {g.shape}")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    def apply(self, mu: int, nu: int, B: np.ndarray) -> np.ndarray:
        return apply_superop(self.gamma[mu, nu], B)

    def apply_all(self, B: np.ndarray) -> np.ndarray:
        """Block matrix on H^(1 + d_E) with block (mu, nu) = gamma[mu, nu](B)."""
        n, d = 1 + self.d_E, self.d_H
        out = np.zeros((n * d, n * d), dtype=complex)
        for mu in range(n):
            for nu in range(n):
                out[mu * d:(mu + 1) * d, nu * d:(nu + 1) * d] = self.apply(mu, nu, B)
        return out

    def star_residual(self, samples: int = 0) -> float:
        """max over matrix units of |gamma[mu,nu](B*) - gamma[nu,mu](B)*|."""
        d = self.d_H
        worst = 0.0
        n = 1 + self.d_E
        for p in range(d):
            for q in range(d):
                B = np.zeros((d, d), dtype=complex)
                B[p, q] = 1.0
                for mu in range(n):
                    for nu in range(n):
                        lhs = self.apply(mu, nu, B.conj().T)
                        rhs = self.apply(nu, mu, B).conj().T
                        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        return worst

    def distance(self, other: "StructuralGerm") -> float:
        """Largest spectral norm over blocks of the difference of the two tables."""
        if (self.d_H, self.d_E) != (other.d_H, other.d_E):
            raise ValueError("germ shapes differ")
        diff = self.gamma - other.gamma
        return max(float(np.linalg.norm(diff[mu, nu], 2)) for mu in range(1 + self.d_E) for nu in range(1 + self.d_E))

    def to_dict(self) -> dict:
        return {
            "d_H": self.d_H,
            "d_E": self.d_E,
            "gamma": [[encode_matrix(self.gamma[mu, nu]) for nu in range(1 + self.d_E)] for mu in range(1 + self.d_E)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StructuralGerm":
        d_H, d_E = int(data["d_H"]), int(data["d_E"])
        blocks = [[decode_matrix(b) for b in row] for row in data["gamma"]]
        return cls(d_H, d_E, np.array(blocks))


@dataclass(frozen=True, eq=False)
class KLCoefficients:
    """Drift K, drives K_m, channel operators L_l and L_lm, and the channel mask.

    ``L_lm[l][m]`` pairs channel l with noise mode m.  ``J_mask`` lists the
    channels that enter the top-left generator block; ``None`` means all.
    """

    K: np.ndarray
    K_m: tuple[np.ndarray, ...] = ()
    L_l: tuple[np.ndarray, ...] = ()
    L_lm: tuple[tuple[np.ndarray, ...], ...] = ()
    J_mask: frozenset[int] | None = None

    def __post_init__(self) -> None:
        K = np.array(self.K, dtype=complex)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("K must be square")
        d = K.shape[0]
        K_m = tuple(np.array(x, dtype=complex) for x in self.K_m)
        L_l = tuple(np.array(x, dtype=complex) for x in self.L_l)
        d_E = len(K_m)
        if self.L_lm:
            L_lm = tuple(tuple(np.array(x, dtype=complex) for x in row) for row in self.L_lm)
        else:
            L_lm = tuple(tuple(np.zeros((d, d), dtype=complex) for _ in range(d_E)) for _ in L_l)
        if len(L_lm) != len(L_l) or any(len(row) != d_E for row in L_lm):
            raise ValueError(f"L_lm must be {len(L_l)} x {d_E} blocks")
        for arr in (*K_m, *L_l, *(x for row in L_lm for x in row)):
            if arr.shape != (d, d):
                raise ValueError(f"all coefficient blocks must be {d} x {d}, got {arr.shape}")
        mask = None if self.J_mask is None else frozenset(int(i) for i in self.J_mask)
        if mask is not None and not mask <= set(range(len(L_l))):
            raise ValueError("J_mask must be a subset of the channel indices")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "K_m", K_m)
        object.__setattr__(self, "L_l", L_l)
        object.__setattr__(self, "L_lm", L_lm)
        object.__setattr__(self, "J_mask", mask)

    @property
    def d_H(self) -> int:
        return self.K.shape[0]

    @property
    def d_E(self) -> int:
        return len(self.K_m)

    @property
    def n_channels(self) -> int:
        return len(self.L_l)

    @property
    def masked_channels(self) -> list[int]:
        return list(range(self.n_channels)) if self.J_mask is None else sorted(self.J_mask)

    def channel_block(self, l: int) -> np.ndarray:
        """Row [L_l, L_l1, ..., L_ld_E] as a d x (1 + d_E) d matrix."""
        return np.hstack([self.L_l[l], *self.L_lm[l]])

    def to_dict(self) -> dict:
        return {
            "K": encode_matrix(self.K),
            "K_m": [encode_matrix(x) for x in self.K_m],
            "L": [encode_matrix(x) for x in self.L_l],
            "L_lm": [[encode_matrix(x) for x in row] for row in self.L_lm],
            "J_mask": None if self.J_mask is None else sorted(self.J_mask),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KLCoefficients":
        return cls(
            K=decode_matrix(data["K"]),
            K_m=tuple(decode_matrix(x) for x in data.get("K_m", [])),
            L_l=tuple(decode_matrix(x) for x in data.get("L", [])),
            L_lm=tuple(tuple(decode_matrix(x) for x in row) for row in data.get("L_lm", [])),
            J_mask=None if data.get("J_mask") is None else frozenset(data["J_mask"]),
        )


def germ_matrix(lam: StructuralGerm) -> StructuralGerm:
    """gamma = lambda + identity on the diagonal mode blocks."""
    g = np.array(lam.gamma)
    ident = identity_superop(lam.d_H)
    for m in range(1, 1 + lam.d_E):
        g[m, m] += ident
    return StructuralGerm(lam.d_H, lam.d_E, g)


def lambda_from_germ(germ: StructuralGerm) -> StructuralGerm:
    """Inverse of ``germ_matrix``."""
    g = np.array(germ.gamma)
    ident = identity_superop(germ.d_H)
    for m in range(1, 1 + germ.d_E):
        g[m, m] -= ident
    return StructuralGerm(germ.d_H, germ.d_E, g)


def cp_part_table(coeffs: KLCoefficients) -> np.ndarray:
    """phi[mu, nu](B) = sum_l L[l, mu]^dagger B L[l, nu]; the top-left block uses masked channels only."""
    d, n = coeffs.d_H, 1 + coeffs.d_E
    phi = np.zeros((n, n, d * d, d * d), dtype=complex)
    masked = set(coeffs.masked_channels)
    for l in range(coeffs.n_channels):
        ops = [coeffs.L_l[l], *coeffs.L_lm[l]]
        for mu in range(n):
            for nu in range(n):
                if mu == 0 and nu == 0 and l not in masked:
                    continue
                phi[mu, nu] += sandwich(ops[mu].conj().T, ops[nu])
    return phi


def drift_table(K: np.ndarray, K_m: Sequence[np.ndarray]) -> np.ndarray:
    """The table of B -> K^* B + B K, B K_n, K_m^* B (the maps added by iota K + K^* iota)."""
    d = K.shape[0]
    n = 1 + len(K_m)
    eye = np.eye(d)
    out = np.zeros((n, n, d * d, d * d), dtype=complex)
    out[0, 0] = sandwich(K.conj().T, eye) + sandwich(eye, K)
    for m, Km in enumerate(K_m, start=1):
        out[0, m] = sandwich(eye, Km)
        out[m, 0] = sandwich(Km.conj().T, eye)
    return out


def generator_from_KL(coeffs: KLCoefficients) -> StructuralGerm:
    """Germ gamma = lambda + iota of the generalized Lindblad form.

    lambda(B)       = sum_{l in J} L_l^* B L_l - K^* B - B K
    lambda^m(B)     = sum_l L_lm^* B L_l - K_m^* B
    lambda_n(B)     = sum_l L_l^* B L_ln - B K_n
    lambda_n^m(B)   = sum_l L_lm^* B L_ln - delta_nm B
    """
    phi = cp_part_table(coeffs)
    lam = phi - drift_table(coeffs.K, coeffs.K_m)
    ident = identity_superop(coeffs.d_H)
    for m in range(1, 1 + coeffs.d_E):
        lam[m, m] -= ident
    return germ_matrix(StructuralGerm(coeffs.d_H, coeffs.d_E, lam))


def shift_germ(germ: StructuralGerm, K: np.ndarray, K_m: Sequence[np.ndarray]) -> StructuralGerm:
    """gamma + iota K + K^* iota; check_ccp is invariant under this map."""
    if len(K_m) != germ.d_E:
        raise ValueError("need one drive matrix per noise mode")
    return StructuralGerm(germ.d_H, germ.d_E, germ.gamma + drift_table(np.asarray(K, complex), [np.asarray(k, complex) for k in K_m]))


@dataclass(frozen=True, eq=False)
class CCPResult:
    passed: bool
    min_eigenvalue: float
    witness: np.ndarray | None
    star_residual: float
    reason: str = ""


def ccp_gram(germ: StructuralGerm) -> np.ndarray:
    """G[(b, mu, i), (c, nu, j)] = gamma[mu, nu](E_b^* E_c)[i, j] over matrix units E_b."""
    d, n = germ.d_H, 1 + germ.d_E
    nb = d * d
    # E_(p,q)^* E_(r,s) = delta_pr E_(q,s); column index of E_(q,s) in vec form is q + s d
    G = np.zeros((nb, n, d, nb, n, d), dtype=complex)
    for p in range(d):
        for q in range(d):
            b = p * d + q
            for s in range(d):
                c = p * d + s
                col = q + s * d
                for mu in range(n):
                    for nu in range(n):
                        G[b, mu, :, c, nu, :] = germ.gamma[mu, nu][:, col].reshape((d, d), order="F")
    size = nb * n * d
    return G.reshape(size, size)


def ccp_constraint(d_H: int, d_E: int) -> np.ndarray:
    """Linear map zeta -> sum_b E_b zeta_(b, top) whose kernel is the CCP test space."""
    d, n = d_H, 1 + d_E
    nb = d * d
    A = np.zeros((d, nb, n, d), dtype=complex)
    for p in range(d):
        for q in range(d):
            A[p, p * d + q, 0, q] = 1.0
    return A.reshape(d, nb * n * d)


def check_ccp(germ: StructuralGerm, tol: float = 1e-10, star_tol: float = 1e-12) -> CCPResult:
    """Conditional complete positivity test on the full matrix-unit family."""
    star_res = germ.star_residual()
    if star_res > star_tol:
        return CCPResult(False, float("nan"), None, star_res, "star property violated")
    G = ccp_gram(germ)
    Q = scipy.linalg.null_space(ccp_constraint(germ.d_H, germ.d_E))
    projected = hermitian_part(Q.conj().T @ G @ Q)
    vals, vecs = np.linalg.eigh(projected)
    low = float(vals[0])
    if low >= -tol:
        return CCPResult(True, low, None, star_res)
    return CCPResult(False, low, Q @ vecs[:, 0], star_res, "negative constrained eigenvalue")


def hp_commutant_check(germ: StructuralGerm, a: ItoQuadruple, B: np.ndarray, tol: float = 1e-10) -> tuple[bool, float]:
    """Compare sum_k a[mu, k] b[k, nu] with sum_k b[mu, k] a[k, nu] over mode indices k, b = lambda(B)."""
    if a.dim != germ.d_E:
        raise ValueError(f"quadruple dim {a.dim} does not match {germ.d_E} noise modes")
    B = np.asarray(B, dtype=complex)
    if B.shape != (germ.d_H, germ.d_H):
        raise ValueError("B has the wrong shape")
    lam = lambda_from_germ(germ)
    d, n = germ.d_H, 1 + germ.d_E
    b = lam.apply_all(B)
    amp = np.kron(a.as_matrix(), np.eye(d))
    modes = slice(d, n * d)
    lhs = amp[:, modes] @ b[modes, :]
    rhs = b[:, modes] @ amp[modes, :]
    residual = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    return residual <= tol, residual


class ExtractionError(ValueError):
    def __init__(self, message: str, witness: np.ndarray | None = None, eigenvalue: float | None = None):
        super().__init__(message)
        self.witness = witness
        self.eigenvalue = eigenvalue


def cp_table_choi(phi: np.ndarray, d_H: int) -> np.ndarray:
    """Choi matrix J[(a, i), (b, j)] = Phi(E_ij)[a, b] of the block map B -> [phi[mu, nu](B)]."""
    n = phi.shape[0]
    d = d_H
    big = n * d
    J = np.zeros((big, d, big, d), dtype=complex)
    for i in range(d):
        for j in range(d):
            col = i + j * d
            for mu in range(n):
                for nu in range(n):
                    J[mu * d:(mu + 1) * d, i, nu * d:(nu + 1) * d, j] = phi[mu, nu][:, col].reshape((d, d), order="F")
    return J.reshape(big * d, big * d)


def extract_stinespring(
    germ: StructuralGerm,
    eta0: np.ndarray | None = None,
    tol: float = 1e-10,
    check: bool = True,
) -> KLCoefficients:
    """Recover (K, K_m, L_l, L_lm) with gauge <eta0 | L_l eta0> = 0 from a CCP germ."""
    d, n = germ.d_H, 1 + germ.d_E
    if check:
        res = check_ccp(germ, tol=tol)
        if not res.passed:
            raise ExtractionError(f"germ is not CCP: {res.reason}", res.witness, res.min_eigenvalue)
    eta = np.zeros(d, dtype=complex)
    if eta0 is None:
        eta[0] = 1.0
    else:
        eta = np.asarray(eta0, dtype=complex).reshape(-1)
        if eta.shape != (d,):
            raise ValueError("eta0 has the wrong dimension")
        if abs(np.linalg.norm(eta) - 1.0) > 1e-12:
            raise ValueError("eta0 must be a unit vector")
    # A eta' = (gamma[mu, +](|eta'><eta0|) eta0)_mu
    A = np.zeros((n * d, d), dtype=complex)
    for k in range(d):
        B = np.outer(np.eye(d)[k], eta.conj())
        for mu in range(n):
            A[mu * d:(mu + 1) * d, k] = germ.apply(mu, 0, B) @ eta
    c = float(np.real(np.vdot(eta, germ.apply(0, 0, np.outer(eta, eta.conj())) @ eta)))
    K = 0.5 * c * np.eye(d) - A[:d].conj().T
    K_m = [-A[m * d:(m + 1) * d].conj().T for m in range(1, n)]
    phi = germ.gamma + drift_table(K, K_m)
    choi = cp_table_choi(phi, d)
    vals, vecs = np.linalg.eigh(hermitian_part(choi))
    scale = max(float(np.max(np.abs(vals))), 1.0) if vals.size else 1.0
    if vals[0] < -tol * scale:
        raise ExtractionError("CP part has a negative Choi eigenvalue", vecs[:, 0], float(vals[0]))
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    top = vals[0] if vals.size else 0.0
    keep = vals > tol * top if top > 0 else np.zeros(vals.shape, dtype=bool)
    L_l, L_lm = [], []
    for w, v in zip(vals[keep], vecs[:, keep].T):
        Y = np.sqrt(w) * v.reshape(n * d, d)
        X = fix_phase(Y.conj().T)
        L_l.append(X[:, :d])
        L_lm.append(tuple(X[:, m * d:(m + 1) * d] for m in range(1, n)))
    return KLCoefficients(K=K, K_m=tuple(K_m), L_l=tuple(L_l), L_lm=tuple(L_lm))


def gauge_residual(coeffs: KLCoefficients, eta0: np.ndarray | None = None) -> float:
    """max_l |<eta0 | L_l eta0>|."""
    d = coeffs.d_H
    eta = np.eye(d)[0].astype(complex) if eta0 is None else np.asarray(eta0, dtype=complex)
    return max((abs(np.vdot(eta, L @ eta)) for L in coeffs.L_l), default=0.0)


def canonical_stacking(coeffs: KLCoefficients, tol: float = 1e-10) -> KLCoefficients:
    """Append a channel sqrt(D), D = K + K^dagger - sum_J L_l^* L_l, left out of J_mask.

    Afterwards sum over all channels of L_l^* L_l equals K + K^dagger.  The
    positive square root is one choice of factorization.
    """
    D = dissipation(coeffs)
    if min_eigenvalue(D) < -tol:
        raise ValueError("K + K^dagger - L^* L is not positive; cannot stack a dissipation channel")
    root = psd_sqrt(D)
    d, dE = coeffs.d_H, coeffs.d_E
    mask = set(coeffs.masked_channels)
    return KLCoefficients(
        K=coeffs.K,
        K_m=coeffs.K_m,
        L_l=(*coeffs.L_l, root),
        L_lm=(*coeffs.L_lm, tuple(np.zeros((d, d), dtype=complex) for _ in range(dE))),
        J_mask=frozenset(mask),
    )


def dissipation(coeffs: KLCoefficients) -> np.ndarray:
    """D = K + K^dagger - sum_{l in J} L_l^* L_l = -lambda(I)."""
    D = coeffs.K + coeffs.K.conj().T
    for l in coeffs.masked_channels:
        D = D - coeffs.L_l[l].conj().T @ coeffs.L_l[l]
    return hermitian_part(D)


@dataclass(frozen=True, eq=False)
class ConservativityReport:
    D: np.ndarray
    D_block: np.ndarray
    filtering: bool
    subfiltering: bool
    contractive: bool

    @property
    def klass(self) -> str:
        if self.filtering:
            return "filtering"
        if self.subfiltering:
            return "subfiltering"
        if self.contractive:
            return "contractive"
        return "none"


def conservativity_report(source: StructuralGerm | KLCoefficients, tol: float = 1e-10) -> ConservativityReport:
    """D = -lambda(I) and the block form -lambda_table(I), classified."""
    germ = generator_from_KL(source) if isinstance(source, KLCoefficients) else source
    lam = lambda_from_germ(germ)
    minus = -lam.apply_all(np.eye(germ.d_H, dtype=complex))
    d = germ.d_H
    D = minus[:d, :d]
    herm_err = float(np.max(np.abs(minus - minus.conj().T))) if minus.size else 0.0
    if herm_err > 1e-12:
        raise ValueError(f"-lambda(I) is not Hermitian (residual {herm_err:.2e})")
    D = hermitian_part(D)
    D_block = hermitian_part(minus)
    filtering = float(np.max(np.abs(D))) <= tol
    subfiltering = min_eigenvalue(D) >= -tol
    contractive = min_eigenvalue(D_block) >= -tol
    return ConservativityReport(D, D_block, filtering, subfiltering, contractive)


def lindblad_superop(coeffs: KLCoefficients) -> np.ndarray:
    """The top-left generator block as a superoperator (acts on B in the Heisenberg picture)."""
    return generator_from_KL(coeffs).gamma[0, 0]


def semigroup_exp(superop: np.ndarray, t: float) -> np.ndarray:
    """exp(t * superop) by scaling and squaring."""
    return scipy.linalg.expm(t * superop)
