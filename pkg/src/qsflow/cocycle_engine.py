"""Quantum-noise-level dynamics on the truncated lattice.

The cocycle V_t solves dV = sum (L_nu^mu - delta) dLambda_mu^nu V on the noise
lattice of ``qsflow.noise_lattice``.  Slice modes are ordered channels first,
then the output (E) modes.  Since the update on slice r touches only the
system and slice r, every vacuum or coherent matrix element of V_t^* X V_t
reduces to a composition of per-slice superoperators ("transfer maps"); this
is exact for the lattice and never builds the full tensor.

Also here: the semigroup kernel S_t(f), the Picard construction of coherent
matrix elements of the minimal flow, the integral equation for the Markov
semigroup P_s, and the generating function of the output state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from qsflow._numeric import (
    apply_superop,
    hermitian_part,
    identity_superop,
    min_eigenvalue,
    sandwich,
    vec,
)
from qsflow.germ_analyzer import (
    KLCoefficients,
    StructuralGerm,
    conservativity_report,
    cp_part_table,
    drift_table,
    extract_stinespring,
    generator_from_KL,
)
from qsflow.ito_algebra import ItoQuadruple, star_product
from qsflow.noise_lattice import (
    Lattice,
    SliceSpace,
    TimeGrid,
    WeylOperator,
    build_increments,
    truncated_exp_vector,
)

MODES = ("exact_slice", "first_order")


@dataclass(frozen=True, eq=False)
class HPCoefficients:
    """Triangular coefficient table of an HP equation with ``n_modes`` noise modes.

    creation[m]      L_+^m, coefficient of the creation increment of mode m
    annihilation[n]  K_n, the annihilation coefficient is L_n^- = -K_n
    scattering[m][n] L_n^m, coefficient of the exchange increment a_m^dag a_n
    K                drift, L_+^- = -K

    The last ``n_e`` modes carry the output noise (the modes Weyl operators and
    coherent amplitudes act on).  With ``stacked_layout`` the remaining modes are
    auxiliary channels and the E modes couple to them only through scattering.
    ``decay_modes`` are channels whose quanta the survival projector removes.
    """

    K: np.ndarray
    creation: tuple[np.ndarray, ...]
    annihilation: tuple[np.ndarray, ...]
    scattering: tuple[tuple[np.ndarray, ...], ...]
    n_e: int = 0
    stacked_layout: bool = True
    decay_modes: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        K = np.array(self.K, dtype=complex)
        d = K.shape[0]
        cre = tuple(np.array(x, dtype=complex) for x in self.creation)
        ann = tuple(np.array(x, dtype=complex) for x in self.annihilation)
        n = len(cre)
        if len(ann) != n:
            raise ValueError("creation and annihilation need one block per mode")
        if self.scattering:
            sca = tuple(tuple(np.array(x, dtype=complex) for x in row) for row in self.scattering)
        else:
            sca = tuple(tuple(np.eye(d, dtype=complex) if i == j else np.zeros((d, d), complex) for j in range(n)) for i in range(n))
        if len(sca) != n or any(len(row) != n for row in sca):
            raise ValueError(f"scattering must be {n} x {n} blocks")
        for arr in (*cre, *ann, *(x for row in sca for x in row)):
            if arr.shape != (d, d):
                raise ValueError("all coefficient blocks must match K")
        if not 0 <= self.n_e <= n:
            raise ValueError("n_e must lie between 0 and the number of modes")
        if not set(self.decay_modes) <= set(range(n - self.n_e)):
            raise ValueError("decay modes must be channel modes")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "creation", cre)
        object.__setattr__(self, "annihilation", ann)
        object.__setattr__(self, "scattering", sca)
        object.__setattr__(self, "decay_modes", frozenset(self.decay_modes))

    @property
    def d_H(self) -> int:
        return self.K.shape[0]

    @property
    def n_modes(self) -> int:
        return len(self.creation)

    @property
    def n_channels(self) -> int:
        return self.n_modes - self.n_e

    def scattering_matrix(self) -> np.ndarray:
        return np.block([list(row) for row in self.scattering]) if self.n_modes else np.zeros((0, 0), complex)

    def triangular_table(self) -> np.ndarray:
        """Full table L_nu^mu over mu, nu in (-, modes, +) as one block matrix."""
        n, d = self.n_modes, self.d_H
        eye = np.eye(d, dtype=complex)
        T = np.zeros((n + 2, n + 2, d, d), dtype=complex)
        T[0, 0] = eye
        T[n + 1, n + 1] = eye
        T[0, n + 1] = -self.K
        for m in range(n):
            T[0, 1 + m] = -self.annihilation[m]
            T[1 + m, n + 1] = self.creation[m]
            for k in range(n):
                T[1 + m, 1 + k] = self.scattering[m][k]
        return T.transpose(0, 2, 1, 3).reshape((n + 2) * d, (n + 2) * d)

    def slice_space(self, trunc: int = 2) -> SliceSpace:
        return SliceSpace(self.n_modes, trunc)


def hp_from_kl(coeffs: KLCoefficients, layout: str = "auto") -> HPCoefficients:
    """Dilation coefficients for the generator built from ``coeffs``.

    ``identified``: one mode per noise mode, channel l driving mode l, scattering
    L_lm; needs as many channels as noise modes and no masked channels.
    ``stacked``: channel modes followed by the E modes, with E -> channel
    scattering L_lm, its adjoint back, and I - L_lm L_lm^dagger among channels;
    channels outside J_mask become decay modes.
    ``auto`` picks ``identified`` when it applies and E is nontrivial.
    """
    d, dE, nch = coeffs.d_H, coeffs.d_E, coeffs.n_channels
    full_mask = coeffs.J_mask is None or coeffs.J_mask == frozenset(range(nch))
    if layout == "auto":
        layout = "identified" if dE > 0 and nch == dE and full_mask else "stacked"
    zero = np.zeros((d, d), dtype=complex)
    eye = np.eye(d, dtype=complex)
    if layout == "identified":
        if nch != dE or not full_mask:
            raise ValueError("identified layout needs one unmasked channel per noise mode")
        return HPCoefficients(
            K=coeffs.K,
            creation=coeffs.L_l,
            annihilation=coeffs.K_m,
            scattering=coeffs.L_lm,
            n_e=dE,
            stacked_layout=False,
        )
    if layout != "stacked":
        raise ValueError(f"unknown layout {layout!r}")
    n = nch + dE
    S = [[zero.copy() for _ in range(n)] for _ in range(n)]
    for c in range(nch):
        for e in range(dE):
            S[c][nch + e] = coeffs.L_lm[c][e]
            S[nch + e][c] = coeffs.L_lm[c][e].conj().T
    for c in range(nch):
        for c2 in range(nch):
            block = eye.copy() if c == c2 else zero.copy()
            for e in range(dE):
                block = block - coeffs.L_lm[c][e] @ coeffs.L_lm[c2][e].conj().T
            S[c][c2] = block
    creation = list(coeffs.L_l) + [zero] * dE
    ann_channels = []
    for c in range(nch):
        acc = zero.copy()
        for c2 in range(nch):
            acc = acc + coeffs.L_l[c2].conj().T @ S[c2][c]
        ann_channels.append(acc)
    decay = frozenset(range(nch)) - frozenset(coeffs.masked_channels)
    return HPCoefficients(
        K=coeffs.K,
        creation=tuple(creation),
        annihilation=tuple(ann_channels) + tuple(coeffs.K_m),
        scattering=tuple(tuple(row) for row in S),
        n_e=dE,
        stacked_layout=True,
        decay_modes=decay,
    )


def slice_generator(hp: HPCoefficients, dt: float, slice_space: SliceSpace) -> np.ndarray:
    """X = sum (L_nu^mu - delta) (x) dLambda_mu^nu on system (x) one slice."""
    if slice_space.n_noise != hp.n_modes:
        raise ValueError(f"slice has {slice_space.n_noise} modes, coefficients have {hp.n_modes}")
    inc = build_increments(TimeGrid(dt, 1), slice_space)
    X =-np.kron(hp.K, inc.d_time)
    n = hp.n_modes
    for m in range(n):
        X += np.kron(hp.creation[m], inc.d_creation[m])
        X -= np.kron(hp.annihilation[m], inc.d_annihilation[m])
        for k in range(n):
            coef = hp.scattering[m][k] - (np.eye(hp.d_H) if m == k else 0.0)
            if np.any(coef):
                X += np.kron(coef, inc.d_exchange[m][k])
    return X


def slice_operator(hp: HPCoefficients, dt: float, slice_space: SliceSpace, mode: str = "exact_slice") -> np.ndarray:
    """Update on system (x) slice.

    ``first_order``: I + X.  ``exact_slice``: exp(X + dt/2 sum_m K_m L^m (x) I);
    the added drift cancels the second-order vacuum term of the exponential so
    the vacuum block is I - K dt + O(dt^2), and for coefficients satisfying the
    unitarity conditions the exponent is anti-Hermitian.  Exact mode requires
    trivial scattering.
    """
    X = slice_generator(hp, dt, slice_space)
    if mode == "first_order":
        return np.eye(X.shape[0], dtype=complex) + X
    if mode != "exact_slice":
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    S = hp.scattering_matrix()
    if S.size and np.max(np.abs(S - np.eye(S.shape[0]))) > 1e-14:
        raise ValueError("exact_slice mode needs trivial scattering; use first_order")
    comp = sum((hp.annihilation[m] @ hp.creation[m] for m in range(hp.n_modes)), np.zeros_like(hp.K))
    X = X + 0.5 * dt * np.kron(comp, np.eye(slice_space.local_dim))
    return scipy.linalg.expm(X)


@dataclass(frozen=True, eq=False)
class CocycleSolution:
    lattice: Lattice
    checkpoint_slices: tuple[int, ...]
    operators: tuple[np.ndarray, ...]
    mode: str

    @property
    def final(self) -> np.ndarray:
        return self.operators[-1]

    def vacuum_block(self, index: int = -1) -> np.ndarray:
        """<vacuum| V_t |vacuum> as a system operator."""
        V = self.operators[index]
        nd = self.lattice.noise_dim
        return V[::nd, ::nd]


def solve_hp_cocycle(
    hp: HPCoefficients,
    grid: TimeGrid,
    slice_space: SliceSpace,
    mode: str = "exact_slice",
    checkpoint_slices: Sequence[int] | None = None,
) -> CocycleSolution:
    """Full lattice operator V_t at the requested slice counts (default: final only)."""
    lattice = Lattice(hp.d_H, slice_space, grid.n_slices)
    lattice.require_operator()
    M = slice_operator(hp, grid.dt, slice_space, mode)
    wanted = sorted(set(checkpoint_slices or [grid.n_slices]))
    if wanted[0] < 0 or wanted[-1] > grid.n_slices:
        raise ValueError("checkpoint slices out of range")
    V = np.eye(lattice.dim, dtype=complex)
    out = []
    if 0 in wanted:
        out.append(V.copy())
    for r in range(grid.n_slices):
        V = lattice.apply_local(M, r, V)
        if r + 1 in wanted:
            out.append(V.copy())
    return CocycleSolution(lattice, tuple(wanted), tuple(out), mode)


CONDITION_NAMES = (
    "K + K^dagger = L^* L",
    "K_E = L^* J_EC",
    "J_CE J_EC = I",
    "K_C = L^* J_CC",
    "J_CC = I - J_EC J_CE",
)


@dataclass(frozen=True, eq=False)
class UnitarityReport:
    conditions: dict
    algebraic_tol: float
    lattice_residuals: tuple[float, ...]
    checkpoint_slices: tuple[int, ...]
    dt: float
    mode: str

    @property
    def algebraic_passed(self) -> bool:
        return all(v <= self.algebraic_tol for v in self.conditions.values())

    @property
    def violated(self) -> list[str]:
        return [k for k, v in self.conditions.items() if v > self.algebraic_tol]

    @property
    def final_residual(self) -> float:
        return self.lattice_residuals[-1]


def unitarity_conditions(hp: HPCoefficients) -> dict:
    """Residuals of the five differential unitarity conditions.

    Channels C are the first n_modes - n_e modes and E the last n_e modes when
    ``stacked_layout`` is set; otherwise every mode is treated as a channel.
    """
    d = hp.d_H
    n_e = hp.n_e if hp.stacked_layout else 0
    chans = list(range(hp.n_modes - n_e))
    es = list(range(hp.n_modes - n_e, hp.n_modes))
    S = hp.scattering
    eye = np.eye(d)

    def norm(x) -> float:
        return float(np.max(np.abs(x))) if np.size(x) else 0.0

    out = {}
    LL = sum((hp.creation[m].conj().T @ hp.creation[m] for m in range(hp.n_modes)), np.zeros((d, d), complex))
    out[CONDITION_NAMES[0]] = norm(hp.K + hp.K.conj().T - LL)
    r = 0.0
    for e in es:
        acc = sum((hp.creation[c].conj().T @ S[c][e] for c in chans), np.zeros((d, d), complex))
        r = max(r, norm(hp.annihilation[e] - acc))
    out[CONDITION_NAMES[1]] = r
    r = 0.0
    for e in es:
        for e2 in es:
            acc = sum((S[e][c] @ S[c][e2] for c in chans), np.zeros((d, d), complex))
            r = max(r, norm(acc - (eye if e == e2 else 0.0)))
    out[CONDITION_NAMES[2]] = r
    r = 0.0
    for c in chans:
        acc = sum((hp.creation[c2].conj().T @ S[c2][c] for c2 in chans), np.zeros((d, d), complex))
        r = max(r, norm(hp.annihilation[c] - acc))
    out[CONDITION_NAMES[3]] = r
    r = 0.0
    for c in chans:
        for c2 in chans:
            acc = sum((S[c][e] @ S[e][c2] for e in es), np.zeros((d, d), complex))
            r = max(r, norm(S[c][c2] - ((eye if c == c2 else 0.0) - acc)))
    out[CONDITION_NAMES[4]] = r
    return out


def unitarity_check(
    hp: HPCoefficients,
    grid: TimeGrid,
    slice_space: SliceSpace,
    mode: str = "exact_slice",
    checkpoint_slices: Sequence[int] | None = None,
    algebraic_tol: float = 1e-12,
) -> UnitarityReport:
    """Algebraic unitarity conditions plus ||U_t^dagger U_t - I|| on the lattice."""
    conditions = unitarity_conditions(hp)
    sol = solve_hp_cocycle(hp, grid, slice_space, mode, checkpoint_slices)
    residuals = []
    for U in sol.operators:
        G = U.conj().T @ U - np.eye(U.shape[0])
        residuals.append(float(np.max(np.abs(np.linalg.eigvalsh(hermitian_part(G))))))
    return UnitarityReport(conditions, algebraic_tol, tuple(residuals), sol.checkpoint_slices, grid.dt, mode)


def unitarity_convergence(
    hp: HPCoefficients,
    t_ends: Sequence[float],
    n_slices: int,
    trunc: int = 2,
    mode: str = "first_order",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Final residuals for a fixed number of slices and decreasing horizons.

    Returns (dts, residuals, ratios) where ratios[k] = residuals[k+1] / residuals[k].
    """
    ss = hp.slice_space(trunc)
    dts, res = [], []
    for t in t_ends:
        grid = TimeGrid(float(t), n_slices)
        rep = unitarity_check(hp, grid, ss, mode)
        dts.append(grid.dt)
        res.append(rep.final_residual)
    res_arr = np.array(res)
    return np.array(dts), res_arr, res_arr[1:] / res_arr[:-1]


# ---------------------------------------------------------------------------
# semigroup kernel


def _as_step(f: np.ndarray | None, n_slices: int, dim: int) -> np.ndarray:
    if f is None:
        return np.zeros((n_slices, dim), dtype=complex)
    arr = np.array(f, dtype=complex)
    if arr.ndim == 1 and dim == 1:
        arr = arr[:, None]
    if arr.shape != (n_slices, dim):
        raise ValueError(f"step function must have shape {(n_slices, dim)}, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class SemigroupKernel:
    times: np.ndarray
    f_amplitude: np.ndarray
    values: np.ndarray

    def propagator(self, i: int, j: int) -> np.ndarray:
        """S from grid time j to grid time i (i >= j)."""
        return self.values[i] @ np.linalg.inv(self.values[j])


def semigroup_kernel(K: np.ndarray, K_m: Sequence[np.ndarray], f: np.ndarray | None, grid: TimeGrid) -> SemigroupKernel:
    """Solve dS/dt + (sum_n K_n f_n(t) + K) S = 0 with per-slice matrix exponentials."""
    K = np.asarray(K, dtype=complex)
    d = K.shape[0]
    dE = len(K_m)
    amp = _as_step(f, grid.n_slices, dE)
    values = np.empty((grid.n_slices + 1, d, d), dtype=complex)
    values[0] = np.eye(d)
    for r in range(grid.n_slices):
        gen = K + sum((amp[r, n] * np.asarray(K_m[n]) for n in range(dE)), np.zeros((d, d), complex))
        values[r + 1] = scipy.linalg.expm(-gen * grid.dt) @ values[r]
    return SemigroupKernel(grid.times, amp, values)


def kernel_cocycle_residual(K, K_m, f, grid: TimeGrid, split: int) -> float:
    """max over later times of |S_r(f shifted by s) S_s(f) - S_(r+s)(f)|, s = split * dt."""
    full = semigroup_kernel(K, K_m, f, grid)
    amp = full.f_amplitude
    rest = grid.n_slices - split
    if rest < 1:
        raise ValueError("split must leave at least one slice")
    shifted = semigroup_kernel(K, K_m, amp[split:], TimeGrid(rest * grid.dt, rest))
    worst = 0.0
    for k in range(rest + 1):
        worst = max(worst, float(np.max(np.abs(shifted.values[k] @ full.values[split] - full.values[split + k]))))
    return worst


# ---------------------------------------------------------------------------
# transfer maps


def _slice_vectors(hp: HPCoefficients, slice_space: SliceSpace, dt: float, amplitude: np.ndarray | None) -> np.ndarray:
    """Exponential vector on one slice: channels in vacuum, E modes with ``amplitude``."""
    n_c = hp.n_modes - hp.n_e
    chan = np.zeros(slice_space.trunc**n_c, dtype=complex)
    chan[0] = 1.0
    e_space = SliceSpace(hp.n_e, slice_space.trunc)
    if amplitude is None or hp.n_e == 0:
        ev = np.zeros(e_space.local_dim, dtype=complex)
        ev[0] = 1.0
    else:
        ev = truncated_exp_vector(amplitude, dt, e_space)
    return np.kron(chan, ev)


def survival_projector(hp: HPCoefficients, slice_space: SliceSpace) -> np.ndarray:
    """Projector on one slice onto the vacuum of the decay modes."""
    t = slice_space.trunc
    P = np.ones((1, 1))
    vac = np.zeros((t, t))
    vac[0, 0] = 1.0
    for m in range(hp.n_modes):
        P = np.kron(P, vac if m in hp.decay_modes else np.eye(t))
    return P.astype(complex)


def decay_projectors(hp: HPCoefficients, slice_space: SliceSpace, n_slices: int) -> list[np.ndarray]:
    """Complements E_t of the survival projectors on the whole noise chain, built recursively.

    E_0 = 0 and E_(k+1) = E_k + (I - E_k) Q_k, where Q_k projects slice k onto
    states with at least one quantum in a decay mode.  I - E_k is the product of
    per-slice survival projectors on slices < k.
    """
    P = survival_projector(hp, slice_space)
    ld = slice_space.local_dim
    dim = ld**n_slices
    eye = np.eye(dim, dtype=complex)
    E = np.zeros((dim, dim), dtype=complex)
    out = [E]
    for k in range(n_slices):
        Q = np.kron(np.kron(np.eye(ld**k), np.eye(ld) - P), np.eye(ld ** (n_slices - k - 1)))
        E = E + (eye - E) @ Q
        out.append(E)
    return out


def transfer_map(M: np.ndarray, left: np.ndarray, right: np.ndarray, P: np.ndarray, d: int) -> np.ndarray:
    """Superoperator Y -> <left| M^dagger (Y (x) P) M |right> on the system."""
    eye = np.eye(d)
    Ml = M @ np.kron(eye, left[:, None])
    Mr = M @ np.kron(eye, right[:, None])
    T = np.empty((d * d, d * d), dtype=complex)
    for j in range(d):
        for i in range(d):
            E = np.zeros((d, d))
            E[i, j] = 1.0
            T[:, i + j * d] = vec(Ml.conj().T @ np.kron(E, P) @ Mr)
    return T


def _compose_path(maps: Sequence[np.ndarray], d: int) -> list[np.ndarray]:
    """Prefix compositions T_0 T_1 ... T_(k-1) for k = 0..n as superoperators."""
    acc = identity_superop(d)
    out = [acc]
    for T in maps:
        acc = acc @ T
        out.append(acc)
    return out


@dataclass(frozen=True, eq=False)
class FlowResult:
    times: np.ndarray
    values: np.ndarray
    superops: np.ndarray
    lattice_form: np.ndarray | None = None


def flow_via_cocycle(
    source: HPCoefficients | KLCoefficients,
    B: np.ndarray,
    grid: TimeGrid,
    slice_space: SliceSpace | None = None,
    mode: str = "exact_slice",
    full: bool = False,
) -> FlowResult:
    """Vacuum expectation of V_t^* (I_t (x) B) V_t at every slice boundary.

    ``values[k]`` is the system operator at t = k dt.  With ``full=True`` the
    lattice operator at t_end is also returned (small lattices only).
    """
    hp = hp_from_kl(source) if isinstance(source, KLCoefficients) else source
    ss = slice_space or hp.slice_space()
    d = hp.d_H
    M = slice_operator(hp, grid.dt, ss, mode)
    vac = _slice_vectors(hp, ss, grid.dt, None)
    P = survival_projector(hp, ss)
    T = transfer_map(M, vac, vac, P, d)
    path = _compose_path([T] * grid.n_slices, d)
    B = np.asarray(B, dtype=complex)
    values = np.array([apply_superop(S, B) for S in path])
    lattice_form = None
    if full:
        sol = solve_hp_cocycle(hp, grid, ss, mode)
        V = sol.final
        proj = np.eye(1)
        for _ in range(grid.n_slices):
            proj = np.kron(proj, P)
        lattice_form = V.conj().T @ np.kron(B, proj) @ V
    return FlowResult(grid.times, values, np.array(path), lattice_form)


def coherent_flow_element(
    source: HPCoefficients | KLCoefficients,
    B: np.ndarray,
    f: np.ndarray | None,
    h: np.ndarray | None,
    grid: TimeGrid,
    slice_space: SliceSpace | None = None,
    mode: str = "exact_slice",
    normalized: bool = False,
) -> FlowResult:
    """Coherent matrix element F_f^* V_t^* (I_t (x) B) V_t F_h for step amplitudes on the E modes.

    F_h maps eta to eta (x) h^(x), so the result carries the overlap
    exp(int conj(f) h); ``normalized=True`` divides it out.  Each slice is
    evaluated as a lattice ratio <l|...|r> / <l|r>, and the exact overlap
    exp(dt conj(f_r) h_r) is restored afterwards, so the truncated
    exponential vectors only enter through normalized slice factors.
    """
    hp = hp_from_kl(source) if isinstance(source, KLCoefficients) else source
    ss = slice_space or hp.slice_space()
    d = hp.d_H
    famp = _as_step(f, grid.n_slices, hp.n_e)
    hamp = _as_step(h, grid.n_slices, hp.n_e)
    M = slice_operator(hp, grid.dt, ss, mode)
    P = survival_projector(hp, ss)
    maps = []
    for r in range(grid.n_slices):
        lv = _slice_vectors(hp, ss, grid.dt, famp[r])
        rv = _slice_vectors(hp, ss, grid.dt, hamp[r])
        scale = 1.0 if normalized else np.exp(grid.dt * np.vdot(famp[r], hamp[r]))
        maps.append(transfer_map(M, lv, rv, P, d) * (scale / np.vdot(lv, rv)))
    path = _compose_path(maps, d)
    B = np.asarray(B, dtype=complex)
    return FlowResult(grid.times, np.array([apply_superop(S, B) for S in path]), np.array(path))


# ---------------------------------------------------------------------------
# Picard construction


def _kl_and_cp(source: StructuralGerm | KLCoefficients) -> tuple[np.ndarray, list[np.ndarray], np.ndarray, StructuralGerm]:
    if isinstance(source, KLCoefficients):
        germ = generator_from_KL(source)
        return source.K, list(source.K_m), cp_part_table(source), germ
    coeffs = extract_stinespring(source)
    return coeffs.K, list(coeffs.K_m), source.gamma + drift_table(coeffs.K, coeffs.K_m), source


@dataclass(frozen=True, eq=False)
class CoherentMatrixFlow:
    times: np.ndarray
    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]
    superops: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]
    iterations: int
    trace: tuple[float, ...]
    converged: bool
    monotone_min_eigenvalue: float
    last_two: tuple[np.ndarray, np.ndarray] | None = None


def _weighted_cp(cp: np.ndarray, fbar_row: np.ndarray, h_row: np.ndarray) -> np.ndarray:
    """Superoperator X -> phi(fbar, X, h) for constant amplitudes on one slice."""
    left = np.concatenate([[1.0], np.conj(fbar_row)])
    right = np.concatenate([[1.0], h_row])
    return np.einsum("m,n,mnij->ij", left, right, cp)


def picard_minimal_flow(
    source: StructuralGerm | KLCoefficients,
    B: np.ndarray,
    pairs: Sequence[tuple[np.ndarray | None, np.ndarray | None]],
    grid: TimeGrid,
    max_iter: int = 100,
    tol: float = 1e-13,
) -> CoherentMatrixFlow:
    """Iterate the coherent-form integral equation from zero with trapezoid quadrature.

    For each pair (f, h) the unknown is the superoperator Phi_t: B -> phi_t(f, B, h),
    Phi_t = S(t,0) + int_0^t Phi_r Psi_r S(t,r) dr, where S(t,r) sandwiches B
    between the kernels of f and h from r to t and Psi_r is the CP part weighted
    by the amplitudes at r.  Steps of f, h must sit on the grid.
    """
    K, K_m, cp, _ = _kl_and_cp(source)
    d, dE, n, dt = K.shape[0], len(K_m), grid.n_slices, grid.dt
    B = np.asarray(B, dtype=complex)
    eye = np.eye(d)
    results, vals, traces = [], [], []
    iterations, converged_all, mono, last_two = 0, True, np.inf, None
    norm_pairs = []
    for f, h in pairs:
        famp = _as_step(f, n, dE)
        hamp = _as_step(h, n, dE)
        norm_pairs.append((famp, hamp))
        Sf = semigroup_kernel(K, K_m, famp, grid).values
        Sh = semigroup_kernel(K, K_m, hamp, grid).values
        Sf_inv = np.linalg.inv(Sf)
        Sh_inv = np.linalg.inv(Sh)
        # sand[i, j] = superop of B -> U_f(t_i, r_j)^dagger B U_h(t_i, r_j), j <= i
        sand = np.zeros((n + 1, n + 1, d * d, d * d), dtype=complex)
        for i in range(n + 1):
            Uf = Sf[i] @ Sf_inv[: i + 1]
            Uh = Sh[i] @ Sh_inv[: i + 1]
            sand[i, : i + 1] = [sandwich(Uf[j].conj().T, Uh[j]) for j in range(i + 1)]
        psi = np.array([_weighted_cp(cp, famp[j], hamp[j]) for j in range(n)])
        phi = np.zeros((n + 1, d * d, d * d), dtype=complex)
        trace = []
        converged = False
        low = np.inf
        same = np.array_equal(famp, hamp)
        prev_I = apply_superop(phi[-1], eye)
        for it in range(1, max_iter + 1):
            left = np.einsum("jab,jbc->jac", phi[:-1], psi)
            right = np.einsum("jab,jbc->jac", phi[1:], psi)
            new = np.empty_like(phi)
            new[0] = sand[0, 0]
            for i in range(1, n + 1):
                acc = np.einsum("jab,jbc->ac", left[:i], sand[i, :i]) + np.einsum("jab,jbc->ac", right[:i], sand[i, 1 : i + 1])
                new[i] = sand[i, 0] + 0.5 * dt * acc
            diff = float(np.max(np.abs(new - phi)))
            trace.append(diff)
            if same:
                cur_I = apply_superop(new[-1], eye)
                low = min(low, min_eigenvalue(cur_I - prev_I))
                prev_I = cur_I
            if diff < tol:
                converged = True
                phi = new
                break
            if it == max_iter:
                last_two = (phi, new)
            phi = new
        iterations = max(iterations, len(trace))
        converged_all = converged_all and converged
        if same:
            mono = min(mono, low)
        results.append(phi)
        vals.append(np.array([apply_superop(x, B) for x in phi]))
        traces.extend(trace)
    return CoherentMatrixFlow(
        grid.times,
        tuple(norm_pairs),
        tuple(results),
        tuple(vals),
        iterations,
        tuple(traces),
        converged_all,
        float(mono),
        last_two,
    )


# ---------------------------------------------------------------------------
# Markov semigroup


@dataclass(frozen=True, eq=False)
class MarkovResult:
    times: np.ndarray
    P: np.ndarray
    reference: np.ndarray
    max_deviation: float
    monotone_min_eigenvalue: float
    klass: str
    converged: bool
    iterations: int


def _markov_picard(K: np.ndarray, cp_top: np.ndarray, grid: TimeGrid, tol: float, max_iter: int) -> tuple[np.ndarray, bool, int]:
    d = K.shape[0]
    n, dt = grid.n_slices, grid.dt
    E = np.array([scipy.linalg.expm(-K * (j * dt)) for j in range(n + 1)])
    Eh = np.conj(np.swapaxes(E, -1, -2))
    base = Eh @ E
    P = np.zeros((n + 1, d, d), dtype=complex)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Q = np.array([apply_superop(cp_top, x) for x in P])
        new = np.empty_like(P)
        new[0] = base[0]
        for i in range(1, n + 1):
            w = np.full(i + 1, dt)
            w[0] = w[-1] = 0.5 * dt
            terms = Eh[: i + 1] @ Q[i::-1] @ E[: i + 1]
            new[i] = base[i] + np.tensordot(w, terms, axes=1)
        diff = float(np.max(np.abs(new - P)))
        P = new
        if diff < tol:
            converged = True
            break
    return P, converged, it


def _pairwise_decrease(P: np.ndarray) -> float:
    """min eigenvalue of P[i] - P[j] over all i < j (0 for a single point)."""
    low = 0.0
    for i in range(len(P) - 1):
        diffs = hermitian_part_stack(P[i] - P[i + 1 :])
        low = min(low, float(np.min(np.linalg.eigvalsh(diffs))))
    return low


def hermitian_part_stack(arr: np.ndarray) -> np.ndarray:
    return 0.5 * (arr + np.conj(np.swapaxes(arr, -1, -2)))


def markov_semigroup(
    coeffs: KLCoefficients,
    grid: TimeGrid,
    tol: float = 1e-14,
    max_iter: int = 500,
    richardson: bool = True,
) -> MarkovResult:
    """Solve P_s = e^{-K^* s} e^{-K s} + int_0^s e^{-K^* r} phi(P_(s-r)) e^{-K r} dr by Picard iteration.

    The integral uses the trapezoid rule; with ``richardson`` the solution on the
    grid and on its halving are combined as (4 P_fine - P_coarse) / 3.  The
    result is compared with exp(s lambda)(I).
    """
    cp_top = cp_part_table(coeffs)[0, 0]
    P, ok, it = _markov_picard(coeffs.K, cp_top, grid, tol, max_iter)
    if richardson:
        fine, ok2, it2 = _markov_picard(coeffs.K, cp_top, TimeGrid(grid.t_end, 2 * grid.n_slices), tol, max_iter)
        P = (4.0 * fine[::2] - P) / 3.0
        ok = ok and ok2
        it = max(it, it2)
    lam = generator_from_KL(coeffs).gamma[0, 0]
    d = coeffs.d_H
    ref = np.array([apply_superop(scipy.linalg.expm(t * lam), np.eye(d, dtype=complex)) for t in grid.times])
    dev = float(np.max(np.abs(P - ref)))
    mono = _pairwise_decrease(P)
    klass = conservativity_report(coeffs).klass
    return MarkovResult(grid.times, P, ref, dev, mono, klass, ok, it)


# ---------------------------------------------------------------------------
# generating function


@dataclass(frozen=True, eq=False)
class StepFunctionG:
    """Quadruple-valued step function on the grid, zero from slice ``cutoff`` on."""

    values: tuple[ItoQuadruple, ...]
    cutoff: int

    def __post_init__(self) -> None:
        vals = tuple(self.values)
        for r in range(self.cutoff, len(vals)):
            if np.any(vals[r].flatten()):
                raise ValueError(f"step function must vanish from slice {self.cutoff} on")
        object.__setattr__(self, "values", vals)


def step_star(a: StepFunctionG, b: StepFunctionG) -> StepFunctionG:
    """Pointwise a * b = b + star(a) b + star(a)."""
    if len(a.values) != len(b.values):
        raise ValueError("step functions live on different grids")
    return StepFunctionG(tuple(star_product(x, y) for x, y in zip(a.values, b.values)), max(a.cutoff, b.cutoff))


@dataclass(frozen=True, eq=False)
class GeneratingFunctionResult:
    theta: np.ndarray
    gram: np.ndarray
    min_eigenvalue: float
    hermiticity_residual: float
    zero_path: np.ndarray
    zero_path_monotone_min_eigenvalue: float


def _theta(hp: HPCoefficients, M: np.ndarray, P: np.ndarray, g: StepFunctionG, grid: TimeGrid, ss: SliceSpace, upto: int) -> np.ndarray:
    d = hp.d_H
    n_c = hp.n_modes - hp.n_e
    e_space = SliceSpace(hp.n_e, ss.trunc)
    weyl = WeylOperator(g.values, grid.dt, upto)
    vac = _slice_vectors(hp, ss, grid.dt, None)
    acc = identity_superop(d)
    for r in range(upto):
        w = np.kron(np.eye(ss.trunc**n_c), weyl.slice_matrix(r, e_space))
        acc = acc @ transfer_map(M, vac, w @ vac, P, d)
    return apply_superop(acc, np.eye(d, dtype=complex))


def generating_function(
    source: HPCoefficients | KLCoefficients,
    g_list: Sequence[StepFunctionG],
    grid: TimeGrid,
    slice_space: SliceSpace | None = None,
    mode: str = "exact_slice",
    t_slice: int | None = None,
) -> GeneratingFunctionResult:
    """Table theta_t(g_k * g_l) = <vacuum| R_t W_t(g_k * g_l) |vacuum> and its Gram form.

    R_t = V_t^* I_t V_t.  ``t_slice`` sets t = t_slice * dt (default t_end);
    every g must vanish from t on.
    """
    hp = hp_from_kl(source) if isinstance(source, KLCoefficients) else source
    ss = slice_space or hp.slice_space()
    upto = grid.n_slices if t_slice is None else int(t_slice)
    for g in g_list:
        if len(g.values) != grid.n_slices:
            raise ValueError("step function length does not match the grid")
        if g.cutoff > upto:
            raise ValueError("step function is not supported in [0, t)")
    d = hp.d_H
    M = slice_operator(hp, grid.dt, ss, mode)
    P = survival_projector(hp, ss)
    k = len(g_list)
    theta = np.zeros((k, k, d, d), dtype=complex)
    for a in range(k):
        for b in range(k):
            theta[a, b] = _theta(hp, M, P, step_star(g_list[a], g_list[b]), grid, ss, upto)
    gram = theta.transpose(0, 2, 1, 3).reshape(k * d, k * d)
    herm = float(np.max(np.abs(gram - gram.conj().T))) if gram.size else 0.0
    low = min_eigenvalue(gram) if gram.size else 0.0
    vac = _slice_vectors(hp, ss, grid.dt, None)
    T0 = transfer_map(M, vac, vac, P, d)
    path = _compose_path([T0] * upto, d)
    zero_path = np.array([apply_superop(S, np.eye(d, dtype=complex)) for S in path])
    mono = min((min_eigenvalue(zero_path[i] - zero_path[i + 1]) for i in range(upto)), default=0.0)
    return GeneratingFunctionResult(theta, gram, low, herm, zero_path, mono)
