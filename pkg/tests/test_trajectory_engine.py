import math

import numpy as np
import pytest
import scipy.linalg

from conftest import EXCITED, I2, SM, SP, SX, SZ, decay_model
from oracles import euler_mean_map
from qsflow.germ_analyzer import KLCoefficients, generator_from_KL
from qsflow.noise_lattice import TimeGrid
from qsflow.trajectory_engine import (
    DiffusionModel,
    JumpModel,
    heisenberg_map,
    mc_semigroup_compare,
    merge_batches,
    normalization_stats,
    simulate_diffusion,
    simulate_jump,
)

PSI0 = np.array([1.0, 1.0]) / math.sqrt(2)
DECAY = DiffusionModel(0.5 * EXCITED, SM)


def batch_equal(a, b):
    return (
        np.array_equal(a.states, b.states)
        and np.array_equal(a.weights, b.weights)
        and np.array_equal(a.flagged, b.flagged)
        and (a.propagators is None or np.array_equal(a.propagators, b.propagators))
    )


class TestDiffusion:
    def test_hamiltonian_only(self):
        H = 0.7 * SX + 0.2 * SZ
        grid = TimeGrid(1.0, 200)
        for scheme in ("euler", "exponential_midpoint"):
            batch = simulate_diffusion(DiffusionModel(1j * H, np.zeros((2, 2))), PSI0, grid, 5, seed=1, scheme=scheme)
            # every path identical and norm preserved up to scheme error
            assert np.allclose(batch.states[-1], batch.states[-1][0], atol=0)
            assert np.max(np.abs(batch.weights - 1.0)) <= 10 * grid.dt
            expected = scipy.linalg.expm(-1j * H) @ PSI0
            assert np.max(np.abs(batch.states[-1][0] - expected)) <= 10 * grid.dt

    def test_filtering_mean_norm(self):
        batch = simulate_diffusion(DECAY, PSI0, TimeGrid(1.0, 200), 4000, seed=2)
        stats = normalization_stats(batch)
        assert np.all(np.abs(stats.mean_weight - 1.0) <= 3 * stats.stderr + 1e-15)

    def test_subfiltering_mean_norm(self):
        eps = 0.1
        model = DiffusionModel(0.5 * EXCITED + eps * I2, SM)
        batch = simulate_diffusion(model, PSI0, TimeGrid(1.0, 200), 4000, seed=3)
        stats = normalization_stats(batch)
        target = np.exp(-2 * eps * stats.times)
        # Euler contributes an O(dt) bias on top of the statistical band
        assert np.all(np.abs(stats.mean_weight - target) <= 3 * stats.stderr + batch.grid.dt)
        assert abs(stats.mean_weight[-1] - math.exp(-0.2)) <= 3 * stats.stderr[-1] + batch.grid.dt
        assert stats.monotone

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            simulate_diffusion(DECAY, PSI0, TimeGrid(1.0, 10), 2, seed=0, scheme="milstein")

    def test_bad_state(self):
        with pytest.raises(ValueError):
            simulate_diffusion(DECAY, np.ones(3), TimeGrid(1.0, 10), 2, seed=0)

    def test_model_shapes(self):
        with pytest.raises(ValueError):
            DiffusionModel(np.eye(2), np.eye(3))
        with pytest.raises(ValueError):
            JumpModel(np.eye(2), np.eye(3))


class TestJump:
    def test_identity_jumps(self):
        K = 0.3 * EXCITED + 0.1j * SX
        batch = simulate_jump(JumpModel(K, I2), PSI0, TimeGrid(1.0, 10), 20, seed=4)
        expected = scipy.linalg.expm(-K) @ PSI0
        assert np.max(np.abs(batch.states[-1] - expected)) <= 1e-12

    def test_isometric_norm(self):
        theta = 0.9
        J = scipy.linalg.expm(-1j * theta * SX)
        L = J - I2
        K = 0.5 * L.conj().T @ L + 1j * 0.4 * SZ
        batch = simulate_jump(JumpModel(K, J), PSI0, TimeGrid(1.0, 100), 200, seed=5)
        assert np.max(np.abs(np.sqrt(batch.weights) - 1.0)) <= 1e-9

    def test_annihilating_jumps(self):
        # J = 0: L = -I, K = I/2, so survivors grow as e^{t/2} in norm and the mean weight stays 1
        K = 0.5 * I2
        grid = TimeGrid(1.0, 50)
        batch = simulate_jump(JumpModel(K, np.zeros((2, 2))), PSI0, grid, 3000, seed=6)
        final = batch.weights[-1]
        dead = final == 0.0
        assert np.allclose(final[~dead], math.e, rtol=1e-12, atol=0)
        # the no-jump probability for unit-rate jumps is e^{-t}
        frac = np.mean(~dead)
        assert abs(frac - math.exp(-1.0)) <= 3 * math.sqrt(math.exp(-1) * (1 - math.exp(-1)) / 3000)
        # once zero, stays zero
        zero_at = np.argmax(batch.weights == 0.0, axis=0)
        for k in np.where(dead)[0][:50]:
            assert np.all(batch.weights[zero_at[k]:, k] == 0.0)

    def test_non_multiplicative(self):
        J = SX @ EXCITED
        L = J - I2
        K = 0.5 * L.conj().T @ L
        batch = simulate_jump(JumpModel(K, J), PSI0, TimeGrid(1.0, 10), 200, seed=7, store_propagators=True)
        phi_sq = heisenberg_map(batch, SM @ SP).per_trajectory[-1]
        phi_b = heisenberg_map(batch, SP).per_trajectory[-1]
        gaps = np.max(np.abs(phi_sq - np.swapaxes(phi_b.conj(), -1, -2) @ phi_b), axis=(-1, -2))
        assert np.max(gaps) >= 0.1


class TestHeisenberg:
    def test_needs_propagators(self):
        batch = simulate_diffusion(DECAY, PSI0, TimeGrid(1.0, 10), 2, seed=0)
        with pytest.raises(ValueError):
            heisenberg_map(batch, I2)

    def test_mean_identity_filtering(self):
        batch = simulate_diffusion(DECAY, PSI0, TimeGrid(1.0, 100), 3000, seed=8, store_propagators=True)
        res = heisenberg_map(batch, I2)
        assert np.all(np.abs(res.mean[-1] - I2) <= 3 * res.stderr[-1] + 1e-15)

    def test_hermitian_and_positive(self):
        batch = simulate_diffusion(DECAY, PSI0, TimeGrid(1.0, 100), 300, seed=9, store_propagators=True)
        per = heisenberg_map(batch, EXCITED).per_trajectory
        assert np.array_equal(per, np.swapaxes(per.conj(), -1, -2))
        R = heisenberg_map(batch, I2).per_trajectory
        assert np.min(np.linalg.eigvalsh(R)) >= -1e-12

    def test_propagators_reproduce_states(self):
        batch = simulate_diffusion(DECAY, PSI0, TimeGrid(1.0, 50), 10, seed=10, store_propagators=True)
        assert np.allclose(batch.propagators @ PSI0, batch.states, atol=1e-13)


class TestSemigroupCompare:
    def test_identity_filtering(self):
        batch = simulate_diffusion(DECAY, PSI0, TimeGrid(1.0, 100), 2000, seed=11, store_propagators=True)
        cmp = mc_semigroup_compare(batch, I2, generator_from_KL(decay_model()))
        assert cmp.passed
        assert np.allclose(cmp.reference[-1], I2, atol=1e-14)

    def test_pure_hamiltonian(self):
        H = 0.5 * SX
        batch = simulate_diffusion(
            DiffusionModel(1j * H, np.zeros((2, 2))), PSI0, TimeGrid(1.0, 100), 3, seed=12, store_propagators=True
        )
        germ = generator_from_KL(KLCoefficients(K=1j * H))
        cmp = mc_semigroup_compare(batch, SZ, germ, at="all")
        assert cmp.passed
        U = scipy.linalg.expm(-1j * H)
        assert np.allclose(cmp.reference[-1], U.conj().T @ SZ @ U, atol=1e-12)


class TestReproducibility:
    def test_bit_exact(self):
        grid = TimeGrid(1.0, 50)
        a = simulate_diffusion(DECAY, PSI0, grid, 64, seed=13, store_propagators=True)
        b = simulate_diffusion(DECAY, PSI0, grid, 64, seed=13, store_propagators=True)
        assert batch_equal(a, b)

    def test_workers_do_not_change_results(self):
        grid = TimeGrid(1.0, 50)
        a = simulate_diffusion(DECAY, PSI0, grid, 64, seed=14)
        b = simulate_diffusion(DECAY, PSI0, grid, 64, seed=14, workers=3)
        assert batch_equal(a, b)

    def test_partition_invariance(self):
        grid = TimeGrid(1.0, 50)
        whole = simulate_diffusion(DECAY, PSI0, grid, 200, seed=15, store_propagators=True)
        first = simulate_diffusion(DECAY, PSI0, grid, 100, seed=15, store_propagators=True)
        second = simulate_diffusion(DECAY, PSI0, grid, 100, seed=15, first_index=100, store_propagators=True)
        merged = merge_batches(first, second)
        assert batch_equal(whole, merged)
        diff = heisenberg_map(whole, EXCITED).mean - heisenberg_map(merged, EXCITED).mean
        assert np.max(np.abs(diff)) <= 1e-12

    def test_jump_partition(self):
        model = JumpModel(0.5 * I2, SX)
        grid = TimeGrid(1.0, 20)
        whole = simulate_jump(model, PSI0, grid, 40, seed=16)
        merged = merge_batches(
            simulate_jump(model, PSI0, grid, 25, seed=16), simulate_jump(model, PSI0, grid, 15, seed=16, first_index=25)
        )
        assert batch_equal(whole, merged)

    def test_merge_rejects_gaps(self):
        grid = TimeGrid(1.0, 10)
        a = simulate_diffusion(DECAY, PSI0, grid, 5, seed=17)
        with pytest.raises(ValueError):
            merge_batches(a, simulate_diffusion(DECAY, PSI0, grid, 5, seed=17, first_index=7))
        with pytest.raises(ValueError):
            merge_batches(a, simulate_diffusion(DECAY, PSI0, grid, 5, seed=18, first_index=5))


class TestOverflow:
    def test_flagged_not_dropped(self):
        # per-step growth 31 gives norm 31**10 > 1e12
        model = DiffusionModel(-300.0 * I2, np.zeros((2, 2)))
        batch = simulate_diffusion(model, PSI0, TimeGrid(1.0, 10), 4, seed=19)
        assert batch.n_flagged == 4
        assert batch.states.shape[1] == 4
        assert batch.metadata()["n_flagged"] == 4


class TestWeakOrder:
    # exact mean of the Euler recursion; the MC mean must track it, and its gap to exp(t lambda) halves with dt
    def test_euler_mean_oracle_halves(self):
        biases = [euler_mean_map(0.5 * EXCITED, SM, 1 / n, n, EXCITED)[1, 1].real - math.exp(-1) for n in (5, 10, 20, 40)]
        ratios = [b2 / b1 for b1, b2 in zip(biases, biases[1:])]
        assert all(0.45 <= r <= 0.55 for r in ratios)

    def test_mc_bias_halves(self):
        # the ground-population entry of V^* G V is random; N = 1e5 resolves the O(dt) bias
        n_traj = 100_000
        ground = SM @ SP
        biases, errs = [], []
        for n in (5, 10):
            batch = simulate_diffusion(DECAY, PSI0, TimeGrid(1.0, n), n_traj, seed=20 + n, store_propagators=True)
            res = heisenberg_map(batch, ground)
            mean, err = res.mean[-1][1, 1].real, res.stderr[-1][1, 1]
            oracle = euler_mean_map(0.5 * EXCITED, SM, 1 / n, n, ground)[1, 1].real
            assert abs(mean - oracle) <= 3 * err
            biases.append(mean - (1 - math.exp(-1)))
            errs.append(err)
        assert abs(biases[0]) > 10 * errs[0]
        ratio = biases[1] / biases[0]
        ratio_err = abs(ratio) * math.hypot(errs[0] / biases[0], errs[1] / biases[1])
        assert abs(ratio - 0.5) <= 3 * ratio_err + 0.05
