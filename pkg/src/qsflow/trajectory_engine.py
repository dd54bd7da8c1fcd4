"""Monte Carlo unravelings of the classical-noise filtering wave equations.

Diffusion:  d psi + K psi dt = L psi dQ,  Q a standard Wiener process.
Jumps:      between jumps psi' = -(K + L) psi with L = J - I; at the times of a
            unit-rate Poisson process psi -> J psi.

Each trajectory owns a counter-based random stream derived from
(seed, trajectory index), so a batch is reproducible bit for bit and can be
split into pieces and merged without changing any per-trajectory result.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from qsflow._numeric import apply_superop
from qsflow.germ_analyzer import StructuralGerm
from qsflow.noise_lattice import TimeGrid

OVERFLOW_NORM = 1e12
SCHEMES = ("euler", "exponential_midpoint")


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    K: np.ndarray
    L: np.ndarray

    def __post_init__(self) -> None:
        K = np.array(self.K, dtype=complex)
        L = np.array(self.L, dtype=complex)
        if K.shape != L.shape or K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("K and L must be square matrices of equal size")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "L", L)


@dataclass(frozen=True, eq=False)
class JumpModel:
    K: np.ndarray
    J: np.ndarray

    def __post_init__(self) -> None:
        K = np.array(self.K, dtype=complex)
        J = np.array(self.J, dtype=complex)
        if K.shape != J.shape or K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("K and J must be square matrices of equal size")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "J", J)

    @property
    def L(self) -> np.ndarray:
        return self.J - np.eye(self.J.shape[0])


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Checkpointed states of a block of trajectories.

    ``states`` has shape (n_checkpoints, n_traj, d); ``propagators``, when
    stored, has shape (n_checkpoints, n_traj, d, d) with psi_t = V_t psi_0.
    """

    kind: str
    scheme: str
    seed: int
    first_index: int
    grid: TimeGrid
    checkpoint_steps: np.ndarray
    states: np.ndarray
    weights: np.ndarray
    flagged: np.ndarray
    propagators: np.ndarray | None = None

    @property
    def n_traj(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.checkpoint_steps * self.grid.dt

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(self.flagged))

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "scheme": self.scheme,
            "seed": self.seed,
            "first_index": self.first_index,
            "n_traj": self.n_traj,
            "n_flagged": self.n_flagged,
            "t_end": self.grid.t_end,
            "n_slices": self.grid.n_slices,
        }


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for one trajectory."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def _checkpoint_steps(grid: TimeGrid, checkpoint_every: int | None) -> np.ndarray:
    every = checkpoint_every or max(1, grid.n_slices // 100)
    steps = list(range(0, grid.n_slices + 1, every))
    if steps[-1] != grid.n_slices:
        steps.append(grid.n_slices)
    return np.array(steps)


def _validate_psi0(psi0: np.ndarray, d: int) -> np.ndarray:
    psi = np.asarray(psi0, dtype=complex).reshape(-1)
    if psi.shape != (d,):
        raise ValueError(f"psi0 must have length {d}")
    if not np.any(psi):
        raise ValueError("psi0 must be nonzero")
    return psi


def _split(indices: np.ndarray, workers: int) -> list[np.ndarray]:
    workers = max(1, min(workers, indices.size))
    return [chunk for chunk in np.array_split(indices, workers) if chunk.size]


def _run_chunks(fn, indices: np.ndarray, workers: int) -> list:
    chunks = _split(indices, workers)
    if len(chunks) == 1:
        return [fn(chunks[0])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(fn, chunks))


def _assemble(kind, scheme, seed, first_index, grid, steps, psi0, parts, store) -> TrajectoryBatch:
    X = np.concatenate([p[0] for p in parts], axis=1)
    flagged = np.concatenate([p[1] for p in parts])
    if store:
        props = X
        states = X @ psi0
    else:
        props = None
        states = X
    with np.errstate(over="ignore", invalid="ignore"):
        weights = np.sum(np.abs(states) ** 2, axis=-1)
    bad = ~np.isfinite(weights) | (weights > OVERFLOW_NORM**2)
    flagged = flagged | np.any(bad, axis=0)
    return TrajectoryBatch(kind, scheme, int(seed), int(first_index), grid, steps, states, weights, flagged, props)


def simulate_diffusion(
    model: DiffusionModel,
    psi0: np.ndarray,
    grid: TimeGrid,
    n_traj: int,
    seed: int,
    scheme: str = "euler",
    *,
    first_index: int = 0,
    checkpoint_every: int | None = None,
    store_propagators: bool = False,
    workers: int = 1,
) -> TrajectoryBatch:
    """Integrate d psi = -K psi dt + L psi dQ for ``n_traj`` independent paths.

    ``euler`` is Euler-Maruyama.  ``exponential_midpoint`` applies
    exp(-(K + L^2/2) dt + L dQ) per step, the Stratonovich-corrected
    exponential, which is weak order one and exact when K and L commute.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    d = model.K.shape[0]
    psi0 = _validate_psi0(psi0, d)
    steps = _checkpoint_steps(grid, checkpoint_every)
    dt, n_steps = grid.dt, grid.n_slices
    K, L = model.K, model.L
    drift = -(K + 0.5 * L @ L) * dt
    ckpt = {int(s): i for i, s in enumerate(steps)}

    def run(indices: np.ndarray):
        n = indices.size
        noise = np.empty((n, n_steps))
        for row, idx in enumerate(indices):
            noise[row] = trajectory_rng(seed, int(idx)).standard_normal(n_steps)
        noise *= math.sqrt(dt)
        X = np.broadcast_to(np.eye(d, dtype=complex), (n, d, d)).copy() if store_propagators else np.tile(psi0, (n, 1))
        out = np.empty((steps.size,) + X.shape, dtype=complex)
        flagged = np.zeros(n, dtype=bool)
        out[0] = X
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(1, n_steps + 1):
                dq = noise[:, k - 1]
                if scheme == "euler":
                    if store_propagators:
                        X = X - dt * (K @ X) + dq[:, None, None] * (L @ X)
                    else:
                        X = X - dt * (X @ K.T) + dq[:, None] * (X @ L.T)
                else:
                    E = scipy.linalg.expm(drift[None] + dq[:, None, None] * L[None])
                    X = E @ X if store_propagators else np.einsum("nij,nj->ni", E, X)
                if k in ckpt:
                    out[ckpt[k]] = X
                    size = np.abs(X).reshape(n, -1).max(axis=1)
                    blown = ~np.isfinite(size) | (size > OVERFLOW_NORM)
                    if np.any(blown):
                        flagged |= blown
                        X = np.where(blown.reshape((n,) + (1,) * (X.ndim - 1)), 0.0, X)
        return out, flagged

    indices = np.arange(first_index, first_index + n_traj)
    parts = _run_chunks(run, indices, workers)
    return _assemble("diffusion", scheme, seed, first_index, grid, steps, psi0, parts, store_propagators)


def simulate_jump(
    model: JumpModel,
    psi0: np.ndarray,
    grid: TimeGrid,
    n_traj: int,
    seed: int,
    *,
    first_index: int = 0,
    checkpoint_every: int | None = None,
    store_propagators: bool = False,
    workers: int = 1,
) -> TrajectoryBatch:
    """Exact jump unraveling: matrix-exponential propagation between unit-rate Poisson jumps.

    The grid only fixes the checkpoint schedule; jump times are continuous.
    """
    d = model.K.shape[0]
    psi0 = _validate_psi0(psi0, d)
    steps = _checkpoint_steps(grid, checkpoint_every)
    dt, n_steps, t_end = grid.dt, grid.n_slices, grid.t_end
    G = model.K + model.L
    J = model.J
    step_prop = scipy.linalg.expm(-G * dt)
    bounds = np.arange(n_steps + 1) * dt
    bounds[-1] = t_end
    ckpt = {int(s): i for i, s in enumerate(steps)}

    def jump_times(idx: int) -> np.ndarray:
        rng = trajectory_rng(seed, idx)
        times = []
        t = rng.exponential()
        while t < t_end:
            times.append(t)
            t += rng.exponential()
        return np.array(times)

    def run(indices: np.ndarray):
        n = indices.size
        jumps = [jump_times(int(i)) for i in indices]
        X = np.broadcast_to(np.eye(d, dtype=complex), (n, d, d)).copy() if store_propagators else np.tile(psi0, (n, 1))
        out = np.empty((steps.size,) + X.shape, dtype=complex)
        out[0] = X
        flagged = np.zeros(n, dtype=bool)
        # bucket jump times by grid step, using the same boundaries as the sweep
        buckets: dict[int, list[int]] = {}
        for row, times in enumerate(jumps):
            ks = np.minimum(np.searchsorted(bounds, times, side="right") - 1, n_steps - 1)
            for k in np.unique(ks):
                buckets.setdefault(int(k), []).append(row)
        for k in range(n_steps):
            rows = buckets.get(k, [])
            smooth = np.ones(n, dtype=bool)
            smooth[rows] = False
            if store_propagators:
                X[smooth] = step_prop @ X[smooth]
            else:
                X[smooth] = X[smooth] @ step_prop.T
            t0, t1 = bounds[k], bounds[k + 1]
            for row in rows:
                times = jumps[row]
                inside = times[(times >= t0) & (times < t1)] if k + 1 < n_steps else times[times >= t0]
                state = X[row]
                last = t0
                for tau in inside:
                    prop = J @ scipy.linalg.expm(-G * (tau - last))
                    state = prop @ state
                    last = tau
                state = scipy.linalg.expm(-G * (t1 - last)) @ state
                X[row] = state
            if k + 1 in ckpt:
                out[ckpt[k + 1]] = X
        return out, flagged

    indices = np.arange(first_index, first_index + n_traj)
    parts = _run_chunks(run, indices, workers)
    return _assemble("jump", "exact", seed, first_index, grid, steps, psi0, parts, store_propagators)


def merge_batches(first: TrajectoryBatch, second: TrajectoryBatch) -> TrajectoryBatch:
    """Concatenate two batches that cover consecutive trajectory indices of one run."""
    same = (
        first.kind == second.kind
        and first.scheme == second.scheme
        and first.seed == second.seed
        and first.grid == second.grid
        and np.array_equal(first.checkpoint_steps, second.checkpoint_steps)
    )
    if not same:
        raise ValueError("batches come from different runs")
    if second.first_index != first.first_index + first.n_traj:
        raise ValueError("batches are not consecutive")
    props = None
    if first.propagators is not None and second.propagators is not None:
        props = np.concatenate([first.propagators, second.propagators], axis=1)
    return replace(
        first,
        states=np.concatenate([first.states, second.states], axis=1),
        weights=np.concatenate([first.weights, second.weights], axis=1),
        flagged=np.concatenate([first.flagged, second.flagged]),
        propagators=props,
    )


@dataclass(frozen=True, eq=False)
class HeisenbergResult:
    per_trajectory: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n_used: int


def _ensemble(values: np.ndarray, keep: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    used = values[:, keep]
    n = used.shape[1]
    mean = used.mean(axis=1)
    if n > 1:
        var = np.sum(np.abs(used - mean[:, None]) ** 2, axis=1) / (n - 1)
        stderr = np.sqrt(var / n)
    else:
        stderr = np.full(mean.shape, np.inf)
    return mean, stderr, n


def heisenberg_map(batch: TrajectoryBatch, B: np.ndarray) -> HeisenbergResult:
    """V_t^* B V_t for every trajectory and checkpoint, with the ensemble mean."""
    if batch.propagators is None:
        raise ValueError("heisenberg_map needs a batch simulated with store_propagators=True")
    V = batch.propagators
    B = np.asarray(B, dtype=complex)
    per = np.swapaxes(V.conj(), -1, -2) @ B @ V
    mean, stderr, n = _ensemble(per, ~batch.flagged)
    return HeisenbergResult(per, mean, stderr, n)


@dataclass(frozen=True, eq=False)
class SemigroupComparison:
    times: np.ndarray
    mc_mean: np.ndarray
    reference: np.ndarray
    deviation: np.ndarray
    band: np.ndarray
    passed: bool


def mc_semigroup_compare(
    batch: TrajectoryBatch,
    B: np.ndarray,
    generator: StructuralGerm,
    bias_constant: float = 10.0,
    n_sigma: float = 3.0,
    at: str = "final",
) -> SemigroupComparison:
    """Compare the ensemble mean of V_t^* B V_t with exp(t lambda)(B).

    Passes when every entry deviation is within n_sigma standard errors plus
    ``bias_constant * dt`` at the final checkpoint (``at="final"``) or at all
    checkpoints (``at="all"``).
    """
    res = heisenberg_map(batch, B)
    B = np.asarray(B, dtype=complex)
    lam = generator.gamma[0, 0]
    times = batch.times
    reference = np.array([apply_superop(scipy.linalg.expm(t * lam), B) for t in times])
    deviation = np.abs(res.mean - reference)
    band = n_sigma * res.stderr + bias_constant * batch.grid.dt
    ok = deviation <= band
    passed = bool(np.all(ok[-1])) if at == "final" else bool(np.all(ok))
    return SemigroupComparison(times, res.mean, reference, deviation, band, passed)


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    times: np.ndarray
    mean_weight: np.ndarray
    stderr: np.ndarray
    monotone: bool
    n_used: int
    n_flagged: int


def normalization_stats(batch: TrajectoryBatch) -> NormalizationStats:
    """Mean and standard error of ||psi_t||^2; monotone when the mean never rises by more than one error."""
    mean, stderr, n = _ensemble(batch.weights.astype(complex), ~batch.flagged)
    mean = mean.real
    rises = np.diff(mean)
    allowance = np.maximum(stderr[:-1], stderr[1:])
    monotone = bool(np.all(rises <= allowance + 1e-12))
    return NormalizationStats(batch.times, mean, stderr, monotone, n, batch.n_flagged)
