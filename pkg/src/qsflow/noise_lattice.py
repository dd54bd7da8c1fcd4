"""Discretized quantum noise on a truncated Fock lattice.

The time axis [0, t_end) is cut into ``n_slices`` slices.  Each slice carries
``n_noise`` bosonic modes truncated to ``trunc`` levels, and the lattice space
is system (x) slice_0 (x) ... (x) slice_{n-1}, with the system factor most
significant.  Increments are

    annihilation  sqrt(dt) a_m
    creation      sqrt(dt) a_m^dagger
    exchange      a_m^dagger a_n
    time          dt * I

At trunc = 2 these satisfy the quantum Ito table exactly in vacuum
expectation; the products that vanish in the continuum are O(dt) in norm.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from qsflow.ito_algebra import ItoQuadruple

MAX_STATE_DIM = 2**22
MAX_OPERATOR_DIM = 2**12


class LatticeTooLarge(MemoryError):
    """Raised when a full-tensor lattice object would exceed the memory bound."""


@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    n_slices: int

    def __post_init__(self) -> None:
        if self.n_slices < 1:
            raise ValueError("n_slices must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")

    @property
    def dt(self) -> float:
        return self.t_end / self.n_slices

    @property
    def times(self) -> np.ndarray:
        """Slice boundaries 0, dt, ..., t_end."""
        return np.linspace(0.0, self.t_end, self.n_slices + 1)


@dataclass(frozen=True)
class SliceSpace:
    n_noise: int = 1
    trunc: int = 2

    def __post_init__(self) -> None:
        if self.n_noise < 0:
            raise ValueError("n_noise must be nonnegative")
        if self.trunc < 2:
            raise ValueError("trunc must be at least 2")

    @property
    def local_dim(self) -> int:
        return self.trunc**self.n_noise


def annihilator(trunc: int) -> np.ndarray:
    """Truncated oscillator annihilator, a|n> = sqrt(n)|n-1>."""
    return np.diag(np.sqrt(np.arange(1, trunc, dtype=float)), k=1).astype(complex)


def mode_annihilator(mode: int, slice_space: SliceSpace) -> np.ndarray:
    """Annihilator of one mode, embedded in the slice space (mode 0 most significant)."""
    t = slice_space.trunc
    out = np.ones((1, 1), dtype=complex)
    for m in range(slice_space.n_noise):
        out = np.kron(out, annihilator(t) if m == mode else np.eye(t))
    return out


@dataclass(frozen=True, eq=False)
class LatticeIncrements:
    dt: float
    slice_space: SliceSpace
    d_time: np.ndarray
    d_annihilation: tuple[np.ndarray, ...]
    d_creation: tuple[np.ndarray, ...]
    d_exchange: tuple[tuple[np.ndarray, ...], ...]


def build_increments(grid: TimeGrid, slice_space: SliceSpace) -> LatticeIncrements:
    """Per-slice increment operators on one slice of the lattice."""
    dt = grid.dt
    n = slice_space.n_noise
    ann = [mode_annihilator(m, slice_space) for m in range(n)]
    d_ann = tuple(math.sqrt(dt) * a for a in ann)
    d_cre = tuple(a.conj().T for a in d_ann)
    d_exc = tuple(tuple(ann[m].conj().T @ ann[k] for k in range(n)) for m in range(n))
    return LatticeIncrements(
        dt=dt,
        slice_space=slice_space,
        d_time=dt * np.eye(slice_space.local_dim, dtype=complex),
        d_annihilation=d_ann,
        d_creation=d_cre,
        d_exchange=d_exc,
    )


@dataclass(frozen=True)
class RuleResidual:
    name: str
    vacuum_residual: float
    operator_deviation: float
    zero_rule: bool


@dataclass(frozen=True)
class TableReport:
    dt: float
    rules: tuple[RuleResidual, ...]

    @property
    def max_vacuum_residual(self) -> float:
        return max(r.vacuum_residual for r in self.rules)

    @property
    def max_zero_rule_deviation(self) -> float:
        return max((r.operator_deviation for r in self.rules if r.zero_rule), default=0.0)

    def rule(self, name: str) -> RuleResidual:
        for r in self.rules:
            if r.name == name:
                return r
        raise KeyError(name)


def ito_table_residual(inc: LatticeIncrements) -> TableReport:
    """Residuals of the nine products of annihilation, exchange and creation increments.

    Nonzero rules: exch*exch = exch, ann*exch = ann, exch*cre = cre, ann*cre = dt.
    Zero rules: exch*ann, cre*exch, cre*ann, ann*ann, cre*cre.
    Mode indices are contracted as in the Ito table and the worst case over all
    mode combinations is reported.
    """
    n = inc.slice_space.n_noise
    ld = inc.slice_space.local_dim
    eye = np.eye(ld, dtype=complex)
    A, C, N = inc.d_annihilation, inc.d_creation, inc.d_exchange
    zero = np.zeros((ld, ld), dtype=complex)
    modes = range(n)

    def delta(i: int, j: int) -> float:
        return 1.0 if i == j else 0.0

    rules: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {k: [] for k in (
        "exchange*exchange", "annihilation*exchange", "exchange*creation", "annihilation*creation",
        "exchange*annihilation", "creation*exchange", "creation*annihilation",
        "annihilation*annihilation", "creation*creation",
    )}
    for m, k, kk, j in itertools.product(modes, modes, modes, modes):
        # N[m][k] = a_m^dag a_k; table: N[m][k] N[kk][j] = delta(k, kk) N[m][j]
        rules["exchange*exchange"].append((N[m][k] @ N[kk][j], delta(k, kk) * N[m][j]))
    for m, k, j in itertools.product(modes, modes, modes):
        rules["annihilation*exchange"].append((A[m] @ N[k][j], delta(m, k) * A[j]))
        rules["exchange*creation"].append((N[m][k] @ C[j], delta(k, j) * C[m]))
        rules["exchange*annihilation"].append((N[m][k] @ A[j], zero))
        rules["creation*exchange"].append((C[m] @ N[k][j], zero))
    for m, j in itertools.product(modes, modes):
        rules["annihilation*creation"].append((A[m] @ C[j], delta(m, j) * inc.dt * eye))
        rules["creation*annihilation"].append((C[m] @ A[j], zero))
        rules["annihilation*annihilation"].append((A[m] @ A[j], zero))
        rules["creation*creation"].append((C[m] @ C[j], zero))
    zero_rules = {"exchange*annihilation", "creation*exchange", "creation*annihilation",
                  "annihilation*annihilation", "creation*creation"}
    out = []
    for name, pairs in rules.items():
        vac = 0.0
        dev = 0.0
        for lhs, rhs in pairs:
            diff = lhs - rhs
            vac = max(vac, abs(diff[0, 0]))
            dev = max(dev, float(np.linalg.norm(diff, 2)))
        out.append(RuleResidual(name, vac, dev, name in zero_rules))
    return TableReport(inc.dt, tuple(out))


@dataclass(frozen=True)
class Lattice:
    """Shape of the full tensor space system (x) slices."""

    system_dim: int
    slice_space: SliceSpace
    n_slices: int

    @property
    def local_dim(self) -> int:
        return self.slice_space.local_dim

    @property
    def noise_dim(self) -> int:
        return self.local_dim**self.n_slices

    @property
    def dim(self) -> int:
        return self.system_dim * self.noise_dim

    def require_state(self) -> None:
        if self.dim > MAX_STATE_DIM:
            raise LatticeTooLarge(f"lattice state dimension {self.dim} exceeds {MAX_STATE_DIM}")

    def require_operator(self) -> None:
        if self.dim > MAX_OPERATOR_DIM:
            raise LatticeTooLarge(f"lattice operator dimension {self.dim} exceeds {MAX_OPERATOR_DIM}")

    def vacuum(self, system_vector: np.ndarray) -> np.ndarray:
        self.require_state()
        out = np.zeros(self.dim, dtype=complex)
        out[:: self.noise_dim] = np.asarray(system_vector, dtype=complex)
        return out

    def apply_local(self, local_op: np.ndarray, slice_index: int, array: np.ndarray) -> np.ndarray:
        """Apply an operator on system (x) slice ``slice_index`` to the leading axis of ``array``."""
        d, s = self.system_dim, self.local_dim
        before = s**slice_index
        after = s ** (self.n_slices - slice_index - 1)
        rest = array.shape[1:]
        cols = int(np.prod(rest)) if rest else 1
        x = array.reshape(d, before, s, after, cols)
        op = np.asarray(local_op).reshape(d, s, d, s)
        y = np.einsum("ijkl,kalbc->iajbc", op, x, optimize=True)
        return y.reshape(array.shape)

    def apply_slice_only(self, slice_op: np.ndarray, slice_index: int, array: np.ndarray) -> np.ndarray:
        """Apply an operator acting on slice ``slice_index`` alone."""
        return self.apply_local(np.kron(np.eye(self.system_dim), slice_op), slice_index, array)


def vacuum_expectation(Y: np.ndarray, lattice: Lattice, slices: Sequence[int] | None = None) -> np.ndarray:
    """Contract an operator on the lattice against the vacuum of the given slices.

    With ``slices=None`` every slice is contracted and a system operator is
    returned; otherwise the result acts on system (x) remaining slices.
    """
    Y = np.asarray(Y)
    if Y.shape != (lattice.dim, lattice.dim):
        raise ValueError(f"operator shape {Y.shape} does not match lattice dimension {lattice.dim}")
    n = lattice.n_slices
    chosen = set(range(n)) if slices is None else set(slices)
    s = lattice.local_dim
    shape = (lattice.system_dim,) + (s,) * n
    T = Y.reshape(shape + shape)
    idx_row = [slice(None)] + [0 if r in chosen else slice(None) for r in range(n)]
    out = T[tuple(idx_row + idx_row)]
    keep = lattice.system_dim * s ** (n - len(chosen))
    return out.reshape(keep, keep)


def truncated_exp_vector(amplitude: np.ndarray, dt: float, slice_space: SliceSpace) -> np.ndarray:
    """Slice state exp(sqrt(dt) sum_m f_m a_m^dagger)|0>, the lattice exponential vector."""
    f = np.asarray(amplitude, dtype=complex).reshape(-1)
    gen = np.zeros((slice_space.local_dim,) * 2, dtype=complex)
    for m in range(slice_space.n_noise):
        gen += f[m] * mode_annihilator(m, slice_space).conj().T
    vac = np.zeros(slice_space.local_dim, dtype=complex)
    vac[0] = 1.0
    return expm(math.sqrt(dt) * gen) @ vac


@dataclass(frozen=True, eq=False)
class CoherentVector:
    """f^(x) (x) system_part with f piecewise constant, one row per slice."""

    amplitude: np.ndarray
    system_part: np.ndarray

    def __post_init__(self) -> None:
        amp = np.array(self.amplitude, dtype=complex)
        if amp.ndim == 1:
            amp = amp[:, None]
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "system_part", np.array(self.system_part, dtype=complex).reshape(-1))

    def squared_norm(self, dt: float) -> float:
        return float(np.exp(dt * np.sum(np.abs(self.amplitude) ** 2)) * np.vdot(self.system_part, self.system_part).real)

    def to_lattice(self, dt: float, slice_space: SliceSpace) -> np.ndarray:
        """Full tensor realization; norms agree with ``squared_norm`` as trunc grows."""
        lattice = Lattice(self.system_part.size, slice_space, self.amplitude.shape[0])
        lattice.require_state()
        out = self.system_part
        for row in self.amplitude:
            out = np.kron(out, truncated_exp_vector(row, dt, slice_space))
        return out


def second_quantization(T: np.ndarray, slice_space: SliceSpace) -> np.ndarray:
    """Gamma(T) on the truncated slice, Gamma(T) a_m^dagger|0> = sum_k T[k, m] a_k^dagger|0>."""
    T = np.asarray(T, dtype=complex)
    n, t = slice_space.n_noise, slice_space.trunc
    ld = slice_space.local_dim
    if n == 0:
        return np.eye(1, dtype=complex)
    if n == 1:
        return np.diag(T[0, 0] ** np.arange(t)).astype(complex)
    cre = [mode_annihilator(m, slice_space).conj().T for m in range(n)]
    out = np.zeros((ld, ld), dtype=complex)
    for col, occ in enumerate(itertools.product(range(t), repeat=n)):
        v = np.zeros(ld, dtype=complex)
        v[0] = 1.0
        for m, count in enumerate(occ):
            b = sum(T[k, m] * cre[k] for k in range(n))
            for _ in range(count):
                v = b @ v
            v = v / math.sqrt(math.factorial(count))
        out[:, col] = v
    return out


@dataclass(frozen=True, eq=False)
class WeylOperator:
    """Normal-ordered exponential W(t, g) for a step function g of quadruples.

    ``values[r]`` is the quadruple on slice r; slices at or after ``upto_slice``
    carry the identity.
    """

    values: tuple[ItoQuadruple, ...]
    dt: float
    upto_slice: int

    def apply(self, cv: CoherentVector) -> CoherentVector:
        """Action on a coherent vector: amplitudes map to (1 + a_ex) f + a_cr, scaled by the exponent."""
        amp = cv.amplitude.copy()
        exponent = 0.0 + 0.0j
        for r in range(min(self.upto_slice, amp.shape[0])):
            q = self.values[r]
            f = amp[r]
            exponent += self.dt * (q.annihilation @ f + q.scalar)
            amp[r] = f + q.exchange @ f + q.creation
        return CoherentVector(amp, np.exp(exponent) * cv.system_part)

    def slice_matrix(self, r: int, slice_space: SliceSpace) -> np.ndarray:
        """Truncated realization of the factor acting on slice r."""
        ld = slice_space.local_dim
        if r >= self.upto_slice:
            return np.eye(ld, dtype=complex)
        q = self.values[r]
        if q.dim != slice_space.n_noise:
            raise ValueError(f"quadruple dim {q.dim} does not match {slice_space.n_noise} noise modes")
        ann = [mode_annihilator(m, slice_space) for m in range(slice_space.n_noise)]
        sq = math.sqrt(self.dt)
        create = sum((q.creation[m] * ann[m].conj().T for m in range(q.dim)), np.zeros((ld, ld), complex))
        destroy = sum((q.annihilation[m] * ann[m] for m in range(q.dim)), np.zeros((ld, ld), complex))
        gamma = second_quantization(np.eye(q.dim) + q.exchange, slice_space)
        return np.exp(self.dt * q.scalar) * expm(sq * create) @ gamma @ expm(sq * destroy)

    def matrix(self, slice_space: SliceSpace, n_slices: int, system_dim: int = 1) -> np.ndarray:
        """Full operator on system (x) n_slices slices (identity on the system)."""
        lattice = Lattice(system_dim, slice_space, n_slices)
        lattice.require_operator()
        out = np.eye(system_dim, dtype=complex)
        for r in range(n_slices):
            out = np.kron(out, self.slice_matrix(r, slice_space))
        return out


def weyl_operator(a: ItoQuadruple | Sequence[ItoQuadruple], grid: TimeGrid, upto_slice: int) -> WeylOperator:
    """W(t, a) for t = upto_slice * dt; ``a`` is one quadruple or one per slice."""
    if not 0 <= upto_slice <= grid.n_slices:
        raise ValueError(f"upto_slice must lie in [0, {grid.n_slices}]")
    if isinstance(a, ItoQuadruple):
        values = (a,) * grid.n_slices
    else:
        values = tuple(a)
        if len(values) != grid.n_slices:
            raise ValueError(f"need {grid.n_slices} slice values, got {len(values)}")
        dims = {q.dim for q in values}
        if len(dims) > 1:
            raise ValueError("slice values have mixed dimensions")
    return WeylOperator(values, grid.dt, upto_slice)
