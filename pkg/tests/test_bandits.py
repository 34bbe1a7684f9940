import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import adaptivity.bandits as bandits
from adaptivity.bandits import (
    DesignConfig,
    RidgeState,
    batch_grid,
    confidence_width,
    coverage_alpha,
    dg_grid,
    eliminate,
    ridge_estimate,
    ridge_update,
    run_batch_elimination,
    run_batch_linucb_dg,
    run_sup_linucb,
    suplinucb_switch_bound,
)
from adaptivity.envgen import STREAM_LEARNER, FiniteMultiset, UniformSphere, make_rng, stochastic_env
from adaptivity.optimal_design import GOptimal, g_optimal_design


def sphere_env(d, K, T, seed, **kw):
    return stochastic_env(UniformSphere(), d, K, T, seed, seed, seed, **kw)


def test_ridge_fresh_update():
    s = ridge_update(RidgeState.fresh(3, 1.0), [1, 0, 0], 1.0)
    assert np.array_equal(s.Lam, np.diag([2.0, 1.0, 1.0]))
    assert np.array_equal(s.xi, [1.0, 0.0, 0.0])
    assert s.count == 1


def test_ridge_updates_commute(rng):
    x, y = rng.standard_normal(3), rng.standard_normal(3)
    s0 = RidgeState.fresh(3, 2.0)
    a = ridge_update(ridge_update(s0, x, 0.3), y, -1.0)
    b = ridge_update(ridge_update(s0, y, -1.0), x, 0.3)
    assert np.allclose(a.Lam, b.Lam) and np.allclose(a.xi, b.xi)


def test_ridge_matches_batch_oracle(rng):
    X = rng.standard_normal((50, 4))
    r = rng.standard_normal(50)
    s = RidgeState.fresh(4, 0.7)
    for x, v in zip(X, r):
        s = ridge_update(s, x, v)
    assert np.max(np.abs(s.Lam - (0.7 * np.eye(4) + X.T @ X))) <= 1e-10
    assert np.allclose(s.xi, X.T @ r)
    assert s.count == 50


def test_ridge_estimate_examples():
    assert np.array_equal(ridge_estimate(RidgeState.fresh(3, 1.0)), np.zeros(3))
    s = ridge_update(RidgeState.fresh(2, 1.0), [1, 0], 1.0)
    assert np.allclose(ridge_estimate(s), [0.5, 0.0])


def test_ridge_recovers_planted_theta(rng):
    theta = rng.standard_normal(5)
    s = RidgeState.fresh(5, 1e-10)
    for x in rng.standard_normal((40, 5)):
        s = ridge_update(s, x, float(x @ theta))
    assert np.max(np.abs(ridge_estimate(s) - theta)) <= 1e-6


def test_width_examples():
    s = RidgeState.fresh(3, 1.0)
    assert confidence_width(s, [1, 0, 0], 2.0) == pytest.approx(2.0)
    assert confidence_width(ridge_update(s, [1, 0, 0], 0.0), [1, 0, 0], 2.0) < 2.0


def coverage_violations(reps, gamma, lam_reg, n, d, seed):
    """Count replications where a fixed direction escapes the ridge interval."""
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(d)
    theta /= np.linalg.norm(theta)
    X = rng.standard_normal((n, d)) / math.sqrt(d)
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    s = RidgeState.fresh(d, lam_reg)
    for row in X:
        s = ridge_update(s, row, 0.0)
    alpha = gamma + math.sqrt(lam_reg)
    width = confidence_width(s, x, alpha)
    means = X @ theta
    noise = rng.standard_normal((reps, n))
    thetas = np.linalg.solve(s.Lam, X.T @ (means + noise).T).T
    return int(np.sum(np.abs((thetas - theta) @ x) > width))


def test_width_coverage():
    reps = 4000
    p = 2 * math.exp(-4.5)
    bad = coverage_violations(reps, 3.0, 1.0, 60, 4, 0)
    assert bad <= reps * p + 4 * math.sqrt(reps * p * (1 - p))


def test_coverage_alpha_matches_width_at_gamma_three():
    # a single arm-step at tail mass 2 exp(-4.5) needs gamma = 3, plus sqrt(lam_reg) = 2
    assert coverage_alpha(1, 1, 2 * math.exp(-4.5), 4.0) == pytest.approx(5.0, rel=1e-12)
    assert coverage_alpha(20, 40_000, 0.05, 1.0) > coverage_alpha(20, 10_000, 0.05, 1.0)


def test_eliminate_examples():
    assert eliminate([0, 1, 2], [1, 2, 3], [0, 0, 0]).tolist() == [2]
    assert eliminate([0, 1, 2], [1, 2, 3], [10, 10, 10]).tolist() == [0, 1, 2]
    # 0.9 + 0.06 = 0.96 falls below 1.0 - 0.01, so arm 0 goes too
    assert eliminate([0, 1, 2], [0.9, 1.0, 0.2], [0.06, 0.01, 0.01]).tolist() == [1]
    assert eliminate([0, 1, 2], [0.9, 1.0, 0.2], [0.1, 0.01, 0.01]).tolist() == [0, 1]


@settings(max_examples=60, deadline=None)
@given(
    rh=st.lists(st.floats(-5, 5), min_size=1, max_size=12),
    seed=st.integers(0, 2**32 - 1),
)
def test_eliminate_never_empty(rh, seed):
    om = np.random.default_rng(seed).uniform(0, 2, size=len(rh))
    kept = eliminate(np.arange(len(rh)), rh, om)
    assert kept.size >= 1
    assert int(np.argmax(np.array(rh) - om)) in kept


def test_grids():
    assert batch_grid(10**4) == (100, 1000, 3163, 10000)
    assert dg_grid(10**4) == (100, 200, 1000, 3163, 10000)
    for T in (4, 16, 100, 12345, 10**6):
        M = math.ceil(math.log2(math.log2(T)))
        assert len(batch_grid(T)) == max(M, 1)
        g = batch_grid(T)
        assert all(a < b for a, b in zip(g, g[1:])) and g[-1] == T


def spy_on_blocks(monkeypatch):
    calls = []
    real = bandits._play_block

    def spy(env, t0, t1, stack, alpha, pi, rng, noise_rng):
        blk = real(env, t0, t1, stack, alpha, pi, rng, noise_rng)
        calls.append((t0, t1, stack, pi, blk))
        return blk

    monkeypatch.setattr(bandits, "_play_block", spy)
    return calls


@pytest.mark.parametrize("mode", ["uniform", "goptimal"])
def test_batch_elimination_accounting(monkeypatch, mode):
    T = 3000
    calls = spy_on_blocks(monkeypatch)
    rec = run_batch_elimination(sphere_env(3, 6, T, 0), T, 0.1, mode, make_rng(0, STREAM_LEARNER))
    M = math.ceil(math.log2(math.log2(T)))
    assert rec.batches_used == M
    assert rec.switches_used == M
    assert np.all(np.diff(rec.switches) >= 0)
    assert np.all((rec.regret >= 0) & (rec.regret <= 2))
    # one fixed (estimates, sampler) pair per batch, spanning exactly the grid
    assert [(c[0], c[1]) for c in calls] == list(zip((1,) + tuple(g + 1 for g in rec.grid[:-1]), rec.grid))
    assert [c[2].n for c in calls] == list(range(M))
    for k, (t0, t1, *_rest) in enumerate(calls, start=1):
        assert np.all(rec.batch[t0 - 1 : t1] == k)


def test_noiseless_regret_plateaus():
    T = 10**4
    X = np.array([[1.0, 0.0], [0.0, 0.2], [0.0, -0.3]])
    env = stochastic_env(FiniteMultiset((X,), np.array([1.0])), 2, 3, T, 0, 0, 0,
                         theta=np.array([1.0, 0.0]), noise_scale=0.0)
    rec = run_batch_elimination(env, T, 0.1, "goptimal", make_rng(0, STREAM_LEARNER), alpha=1.0, lam_reg=1.0)
    assert rec.regret[-T // 10:].sum() == 0.0
    assert rec.regret[: rec.grid[1]].sum() > 0


def test_optimal_arm_retained_noiseless(monkeypatch):
    calls = spy_on_blocks(monkeypatch)
    T, lam_reg = 2000, 1.0
    env = sphere_env(4, 8, T, 3, noise_scale=0.0)
    meter = env.meter()
    # zero noise leaves only the ridge bias, which sqrt(lam_reg) widths cover
    run_batch_elimination(env, T, 0.1, "uniform", make_rng(3, STREAM_LEARNER),
                          alpha=math.sqrt(lam_reg), lam_reg=lam_reg)
    n = 0
    for *_, blk in calls:
        for X, A in zip(blk.sets, blk.survivors):
            assert int(np.argmax(meter.means(X))) in A
            n += 1
    assert n == T


def test_dg_accounting_and_first_policy(monkeypatch):
    calls = spy_on_blocks(monkeypatch)
    T = 400
    env = sphere_env(3, 5, T, 1)
    rec = run_batch_linucb_dg(env, T, 0.1, make_rng(1, STREAM_LEARNER), DesignConfig(block_multiplier=0.25))
    M = math.ceil(math.log2(math.log2(T))) + 1
    assert rec.batches_used == M and rec.switches_used == M
    assert rec.grid == dg_grid(T)
    assert [c[1] for c in calls] == list(rec.grid)
    assert isinstance(calls[0][3], GOptimal)
    assert all(not isinstance(c[3], GOptimal) for c in calls[1:])
    assert len({id(c[3]) for c in calls}) == M


def test_dg_first_batch_distribution():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, 0.6]])
    w = g_optimal_design(X)
    counts = np.zeros(4)
    for seed in range(60):
        env = stochastic_env(FiniteMultiset((X,), np.array([1.0])), 2, 4, 16, seed, seed, seed)
        rec = run_batch_linucb_dg(env, 16, 0.1, make_rng(seed, STREAM_LEARNER), DesignConfig(0.25))
        counts += np.bincount(rec.arms[rec.batch == 1], minlength=4)
    n = counts.sum()
    assert np.all(np.abs(counts - n * w) <= 4 * np.sqrt(n * w * (1 - w)) + 1e-9)


def test_suplinucb_switch_bound_and_layers():
    for d, C in ((3, 2.0), (5, 4.0)):
        T = 3000
        rec = run_sup_linucb(sphere_env(d, 6, T, 2), T, 0.1, C, make_rng(2, STREAM_LEARNER))
        assert rec.switches_used <= suplinucb_switch_bound(d, T, C)
        kappa0 = math.ceil(math.log2(d))
        assert rec.switches[0] >= kappa0 + 1
        assert np.all((rec.layer >= 0) & (rec.layer <= kappa0))
        assert np.all(np.diff(rec.switches) >= 0)
        assert np.all((rec.regret >= 0) & (rec.regret <= 2))


def test_suplinucb_huge_c_never_switches():
    d, T = 4, 300
    rec = run_sup_linucb(sphere_env(d, 5, T, 0), T, 0.1, 1e10, make_rng(0, STREAM_LEARNER))
    assert rec.switches_used == math.ceil(math.log2(d)) + 1


def test_suplinucb_layer_states_use_own_steps():
    d, T = 4, 800
    env = sphere_env(d, 5, T, 4)
    rec = run_sup_linucb(env, T, 0.1, 2.0, make_rng(4, STREAM_LEARNER))
    Lam = rec.extra["layer_matrices"]
    for kappa, L in enumerate(Lam):
        steps = np.flatnonzero(rec.layer == kappa) + 1
        expect = np.eye(d)
        for t, i in zip(steps, rec.arms[steps - 1]):
            x = env.context_set(int(t))[i]
            expect += np.outer(x, x)
        assert np.allclose(L, expect)


def reference_sup_linucb(env, T, C, alphas, varpi):
    """Step-by-step layered loop with explicit inverses."""
    d = env.d
    L = len(alphas)
    Lam = [np.eye(d) for _ in range(L)]
    xi = [np.zeros(d) for _ in range(L)]
    snap = [(np.eye(d), np.zeros(d))] * L
    switches = L
    rng = env.noise_rng()
    arms, sw = [], []
    for t in range(1, T + 1):
        X = env.context_set(t)
        rh, om = [], []
        for k in range(L):
            inv = np.linalg.inv(snap[k][0])
            rh.append(X @ (inv @ snap[k][1]))
            om.append(alphas[k] * np.sqrt(np.einsum("ki,ij,kj->k", X, inv, X)))
        A = np.flatnonzero(rh[0] + om[0] >= np.max(rh[0] - om[0]))
        for k in range(L):
            if k == L - 1:
                i, layer = A[0], k
                break
            if np.all(om[k][A] <= varpi[k]):
                A = A[rh[k][A] >= rh[k][A].max() - 2 * varpi[k]]
            else:
                i, layer = A[np.argmax(om[0][A])], k
                break
        r, _ = bandits.step(env, t, int(i), rng)
        Lam[layer] = Lam[layer] + np.outer(X[i], X[i])
        xi[layer] = xi[layer] + r * X[i]
        if np.linalg.det(Lam[layer]) >= C * np.linalg.det(snap[layer][0]) * (1 - 1e-12):
            snap[layer] = (Lam[layer].copy(), xi[layer].copy())
            switches += 1
        arms.append(int(i))
        sw.append(switches)
    return np.array(arms), np.array(sw)


def test_suplinucb_matches_stepwise_reference():
    for d, K, seed in ((3, 4, 0), (4, 6, 5)):
        T = 1500
        env = sphere_env(d, K, T, seed)
        rec = run_sup_linucb(env, T, 0.1, 2.0, None, alpha=1.0, alpha0=1.0)
        arms, sw = reference_sup_linucb(env, T, 2.0, rec.extra["alphas"], rec.extra["varpi"])
        assert np.array_equal(rec.arms, arms)
        assert np.array_equal(rec.switches, sw)


def test_suplinucb_rejects_small_c():
    with pytest.raises(ValueError):
        run_sup_linucb(sphere_env(2, 2, 10, 0), 10, 0.1, 1.5)


def test_suplinucb_not_far_worse_than_kw():
    d, K, T = 5, 2, 20_000
    sup, kw = [], []
    for seed in range(4):
        env = sphere_env(d, K, T, seed)
        sup.append(run_sup_linucb(env, T, 0.05, 2.0, make_rng(seed, STREAM_LEARNER)).total_regret)
        kw.append(run_batch_elimination(env, T, 0.05, "goptimal", make_rng(seed, STREAM_LEARNER)).total_regret)
    assert np.mean(sup) <= 3 * np.mean(kw)
