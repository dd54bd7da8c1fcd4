"""Finite-dimensional Ito *-algebra arithmetic.

An element is stored as four blocks over a multiplicity space E of dimension
``dim``: the exchange matrix (dim x dim), the creation column (dim,), the
annihilation row (dim,) and a complex scalar.  The product of two elements
keeps only the terms that survive the quantum Ito table, so the scalar block
plays the role of the time differential and the death element (scalar 1,
everything else 0) squares to zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from qsflow._numeric import decode_complex, decode_matrix, encode_complex, encode_matrix

KINDS = ("newton", "wiener", "poisson")


@dataclass(frozen=True, eq=False)
class ItoQuadruple:
    """One element of an Ito algebra in its four-block form."""

    exchange: np.ndarray
    creation: np.ndarray
    annihilation: np.ndarray
    scalar: complex

    def __post_init__(self) -> None:
        ex = np.array(self.exchange, dtype=complex)
        if ex.ndim != 2 or ex.shape[0] != ex.shape[1]:
            raise ValueError(f"exchange block must be square, got shape {ex.shape}")
        dim = ex.shape[0]
        cr = np.array(self.creation, dtype=complex).reshape(-1)
        an = np.array(self.annihilation, dtype=complex).reshape(-1)
        if cr.shape != (dim,) or an.shape != (dim,):
            raise ValueError(
                f"creation/annihilation blocks must have length {dim}, got {cr.shape} and {an.shape}"
            )
        for arr in (ex, cr, an):
            arr.setflags(write=False)
        object.__setattr__(self, "exchange", ex)
        object.__setattr__(self, "creation", cr)
        object.__setattr__(self, "annihilation", an)
        object.__setattr__(self, "scalar", complex(self.scalar))

    @property
    def dim(self) -> int:
        return self.exchange.shape[0]

    def __add__(self, other: "ItoQuadruple") -> "ItoQuadruple":
        _check_dims(self, other)
        return ItoQuadruple(
            self.exchange + other.exchange,
            self.creation + other.creation,
            self.annihilation + other.annihilation,
            self.scalar + other.scalar,
        )

    def __sub__(self, other: "ItoQuadruple") -> "ItoQuadruple":
        return self + other.scale(-1.0)

    def __neg__(self) -> "ItoQuadruple":
        return self.scale(-1.0)

    def scale(self, factor: complex) -> "ItoQuadruple":
        return ItoQuadruple(
            factor * self.exchange, factor * self.creation, factor * self.annihilation, factor * self.scalar
        )

    def flatten(self) -> np.ndarray:
        """Concatenate all blocks into one complex vector."""
        return np.concatenate(
            [self.exchange.reshape(-1), self.creation, self.annihilation, [self.scalar]]
        )

    def as_matrix(self) -> np.ndarray:
        """The (1 + dim) square table [[scalar, annihilation], [creation, exchange]]."""
        out = np.zeros((self.dim + 1, self.dim + 1), dtype=complex)
        out[0, 0] = self.scalar
        out[0, 1:] = self.annihilation
        out[1:, 0] = self.creation
        out[1:, 1:] = self.exchange
        return out

    def max_abs_diff(self, other: "ItoQuadruple") -> float:
        _check_dims(self, other)
        diff = self.flatten() - other.flatten()
        return float(np.max(np.abs(diff))) if diff.size else 0.0

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "exchange": encode_matrix(self.exchange.reshape(self.dim, self.dim)),
            "creation": encode_matrix(self.creation),
            "annihilation": encode_matrix(self.annihilation),
            "scalar": encode_complex(self.scalar),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ItoQuadruple":
        dim = int(data["dim"])
        if dim < 0:
            raise ValueError("dim must be nonnegative")
        if dim == 0:
            ex = np.zeros((0, 0), dtype=complex)
            cr = an = np.zeros(0, dtype=complex)
        else:
            ex = decode_matrix(data["exchange"], ndim=2)
            cr = decode_matrix(data["creation"], ndim=1)
            an = decode_matrix(data["annihilation"], ndim=1)
        return cls(ex, cr, an, decode_complex(data["scalar"]))


def _check_dims(a: ItoQuadruple, b: ItoQuadruple) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def zero(dim: int) -> ItoQuadruple:
    return ItoQuadruple(np.zeros((dim, dim)), np.zeros(dim), np.zeros(dim), 0.0)


def death(dim: int) -> ItoQuadruple:
    """The self-adjoint annihilator d that represents dt."""
    return ItoQuadruple(np.zeros((dim, dim)), np.zeros(dim), np.zeros(dim), 1.0)


def hp_product(a: ItoQuadruple, b: ItoQuadruple) -> ItoQuadruple:
    """Hudson-Parthasarathy product of two quadruples."""
    _check_dims(a, b)
    return ItoQuadruple(
        a.exchange @ b.exchange,
        a.exchange @ b.creation,
        a.annihilation @ b.exchange,
        a.annihilation @ b.creation,
    )


def star(a: ItoQuadruple) -> ItoQuadruple:
    """Ito involution: adjoint exchange, creation and annihilation swap roles."""
    return ItoQuadruple(
        a.exchange.conj().T,
        a.annihilation.conj(),
        a.creation.conj(),
        np.conj(a.scalar),
    )


def star_product(a: ItoQuadruple, b: ItoQuadruple) -> ItoQuadruple:
    """Semigroup product a * b = b + star(a) b + star(a)."""
    sa = star(a)
    return b + hp_product(sa, b) + sa


def classical_embedding(kind: str, drift: complex = 0.0, amplitude: complex = 1.0) -> ItoQuadruple:
    """Quadruple for drift*dt plus a Newton, Wiener or compensated Poisson differential."""
    drift = complex(drift)
    amplitude = complex(amplitude)
    if kind == "newton":
        return death(0).scale(drift)
    if kind == "wiener":
        return ItoQuadruple([[0.0]], [amplitude], [np.conj(amplitude)], drift)
    if kind == "poisson":
        return ItoQuadruple([[amplitude]], [1j * amplitude], [-1j * np.conj(amplitude)], drift)
    raise ValueError(f"unknown embedding kind {kind!r}; expected one of {KINDS}")


def mean_value(a: ItoQuadruple) -> complex:
    """The mean-value functional l(a), read off the scalar block."""
    return a.scalar


@dataclass(frozen=True, eq=False)
class ItoAlgebra:
    """A finite spanning set of quadruples together with its mean-value functional."""

    dim: int
    basis: tuple[ItoQuadruple, ...]
    functional: Callable[[ItoQuadruple], complex] = field(default=mean_value)

    def __post_init__(self) -> None:
        basis = tuple(self.basis)
        for q in basis:
            if q.dim != self.dim:
                raise ValueError(f"basis element of dim {q.dim} in algebra of dim {self.dim}")
        object.__setattr__(self, "basis", basis)

    def gram(self) -> np.ndarray:
        """G[k, l] = l(star(a_k) a_l)."""
        n = len(self.basis)
        out = np.zeros((n, n), dtype=complex)
        for k, ak in enumerate(self.basis):
            sk = star(ak)
            for l, al in enumerate(self.basis):
                out[k, l] = self.functional(hp_product(sk, al))
        return out


def generated_algebra(generators: Iterable[ItoQuadruple], max_size: int = 64, tol: float = 1e-12) -> ItoAlgebra:
    """Smallest span containing the generators, d, and closed under product and star."""
    gens = list(generators)
    if not gens:
        raise ValueError("need at least one generator")
    dim = gens[0].dim
    basis: list[ItoQuadruple] = []
    vectors: list[np.ndarray] = []

    def try_add(q: ItoQuadruple) -> bool:
        v = q.flatten()
        if vectors:
            mat = np.array(vectors).T
            coef, *_ = np.linalg.lstsq(mat, v, rcond=None)
            if np.linalg.norm(mat @ coef - v) <= tol * max(1.0, np.linalg.norm(v)):
                return False
        elif np.linalg.norm(v) <= tol:
            return False
        basis.append(q)
        vectors.append(v)
        return True

    for q in [death(dim), *gens]:
        try_add(q)
    changed = True
    while changed:
        changed = False
        current = list(basis)
        for a in current:
            if try_add(star(a)):
                changed = True
            for b in current:
                if try_add(hp_product(a, b)):
                    changed = True
            if len(basis) > max_size:
                raise ValueError("generated algebra exceeds max_size")
    return ItoAlgebra(dim, tuple(basis))


def gns_quadruple(
    functional_values: Sequence[complex],
    products: np.ndarray,
    involution: np.ndarray,
    cutoff: float = 1e-10,
) -> ItoAlgebra:
    """Represent an abstract finite *-algebra by quadruples via the Kolmogorov decomposition.

    Parameters
    ----------
    functional_values : sequence of complex
        l(a_k) for each basis element a_k.
    products : ndarray, shape (n, n, n)
        Structure constants, a_k a_l = sum_j products[k, l, j] a_j.
    involution : ndarray, shape (n, n)
        star(a_k) = sum_j involution[k, j] a_j.
    cutoff : float
        Eigenvalues of the Gram matrix below ``cutoff`` times the largest are discarded.

    Returns
    -------
    ItoAlgebra
        Basis quadruples with k(a) as creation block, l(a) as scalar block and the
        left-multiplication action on E as exchange block.

    Raises
    ------
    ValueError
        If the Gram matrix l(star(a_k) a_l) has an eigenvalue below -1e-10.
    """
    lvals = np.asarray(functional_values, dtype=complex)
    c = np.asarray(products, dtype=complex)
    s = np.asarray(involution, dtype=complex)
    n = lvals.shape[0]
    if c.shape != (n, n, n) or s.shape != (n, n):
        raise ValueError("structure constants must have shape (n, n, n) and involution (n, n)")
    # l(star(a_k) a_l) = sum_i s[k, i] sum_j c[i, l, j] l[j]
    gram = np.einsum("ki,ilj,j->kl", s, c, lvals)
    gram = 0.5 * (gram + gram.conj().T)
    vals, vecs = np.linalg.eigh(gram)
    if vals.size and vals[0] < -1e-10:
        raise ValueError(f"functional is not positive: Gram eigenvalue {vals[0]:.3e}")
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    top = vals[0] if vals.size else 0.0
    keep = vals > cutoff * top if top > 0 else np.zeros_like(vals, dtype=bool)
    vals, vecs = vals[keep], vecs[:, keep]
    vecs = np.column_stack([_phase_column(vecs[:, i]) for i in range(vecs.shape[1])]) if vecs.size else vecs
    r = vals.size
    # k(a_l) = sqrt(w) * conj(U[l, :]), so columns of kmat are k(a_l)
    kmat = (np.sqrt(vals)[:, None] * vecs.conj().T) if r else np.zeros((0, n), dtype=complex)
    pinv = np.linalg.pinv(kmat) if r else np.zeros((n, 0), dtype=complex)
    basis = []
    for a in range(n):
        k_of_products = kmat @ c[a].T  # column l is k(a a_l)
        exchange = k_of_products @ pinv
        creation = kmat[:, a]
        star_a = s[a]  # coefficients of star(a_a)
        annihilation = (kmat @ star_a).conj()
        basis.append(ItoQuadruple(exchange, creation, annihilation, lvals[a]))
    return ItoAlgebra(r, tuple(basis))


def _phase_column(v: np.ndarray) -> np.ndarray:
    idx = int(np.argmax(np.abs(v)))
    return v * (abs(v[idx]) / v[idx])


@dataclass(frozen=True)
class AxiomCheck:
    name: str
    passed: bool
    residual: float


@dataclass(frozen=True)
class AxiomReport:
    checks: tuple[AxiomCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self, name: str) -> AxiomCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _span_residual(vectors: np.ndarray, target: np.ndarray) -> float:
    if vectors.shape[1] == 0:
        return float(np.linalg.norm(target))
    coef, *_ = np.linalg.lstsq(vectors, target, rcond=None)
    raw = float(np.linalg.norm(vectors @ coef - target))
    # structure constants are usually small integers; snapping removes lstsq rounding
    snapped = np.round(coef.real, 12) + 1j * np.round(coef.imag, 12)
    return min(raw, float(np.linalg.norm(vectors @ snapped - target)))


def verify_ito_axioms(alg: ItoAlgebra, tol: float = 1e-9) -> AxiomReport:
    """Check closure, death annihilation, normalization and positivity; never raises."""
    checks = []
    try:
        d = death(alg.dim)
        vectors = np.array([q.flatten() for q in alg.basis]).T if alg.basis else np.zeros((0, 0))
        if vectors.size == 0:
            vectors = np.zeros((d.flatten().size, 0), dtype=complex)
        closure = 0.0
        star_closure = 0.0
        death_res = 0.0
        for a in alg.basis:
            star_closure = max(star_closure, _span_residual(vectors, star(a).flatten()))
            death_res = max(
                death_res,
                float(np.max(np.abs(hp_product(a, d).flatten()))),
                float(np.max(np.abs(hp_product(d, a).flatten()))),
            )
            for b in alg.basis:
                closure = max(closure, _span_residual(vectors, hp_product(a, b).flatten()))
        checks.append(AxiomCheck("product_closure", closure <= tol, closure))
        checks.append(AxiomCheck("star_closure", star_closure <= tol, star_closure))
        checks.append(AxiomCheck("death_annihilation", death_res <= tol, death_res))
        norm_res = abs(complex(alg.functional(d)) - 1.0)
        checks.append(AxiomCheck("normalization", norm_res <= tol, norm_res))
        gram = alg.gram() if alg.basis else np.zeros((0, 0))
        herm = float(np.max(np.abs(gram - gram.conj().T))) if gram.size else 0.0
        low = float(np.linalg.eigvalsh(0.5 * (gram + gram.conj().T))[0]) if gram.size else 0.0
        pos_res = max(herm, max(0.0, -low))
        checks.append(AxiomCheck("positivity", pos_res <= tol, pos_res))
    except Exception as exc:  # reporting contract: failures become entries
        checks.append(AxiomCheck(f"error: {exc}", False, float("inf")))
    return AxiomReport(tuple(checks))


def wiener_algebra() -> ItoAlgebra:
    return generated_algebra([classical_embedding("wiener", 0.0, 1.0)])


def poisson_algebra() -> ItoAlgebra:
    return generated_algebra([classical_embedding("poisson", 0.0, 1.0)])


def newton_algebra() -> ItoAlgebra:
    return generated_algebra([death(0)])
