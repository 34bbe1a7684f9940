import math

import numpy as np
import pytest

from adaptivity.envgen import (
    CounterexampleD6,
    EnvironmentExhausted,
    FiniteMultiset,
    LowerBoundSpec,
    NormViolation,
    UniformSphere,
    block_quantities,
    flip,
    lower_bound_diagnostics,
    lower_bound_instance,
    lower_bound_parts,
    make_rng,
    random_signs,
    step,
    stochastic_env,
)

# clean-room 50-digit evaluation for d=2, T=1e6, M=40 (L=160)
UPSILON_T1E6_L160 = 0.95800209679553923578
Z1_T1E6_L160 = 0.0010895999653185971431
PSI1_PLUS_T1E6_L160 = 1.4580020967955392358


def test_rng_streams_are_disjoint():
    a = make_rng(5, 0).random(4)
    b = make_rng(5, 1).random(4)
    c = make_rng(5, 0).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_single_set_multiset_is_constant():
    X = np.array([[1.0, 0.0], [0.0, 0.5]])
    env = stochastic_env(FiniteMultiset((X,), np.array([1.0])), 2, 2, 50, 0, 0, 0)
    assert all(np.array_equal(env.context_set(t), X) for t in range(1, 51))


def test_multiset_rejects_bad_probs():
    with pytest.raises(ValueError):
        FiniteMultiset((np.eye(2),), np.array([0.5]))


def test_sphere_contexts_are_unit():
    env = stochastic_env(UniformSphere(), 4, 6, 300, 1, 1, 1)
    norms = np.concatenate([np.linalg.norm(env.context_set(t), axis=1) for t in range(1, 301)])
    assert np.max(np.abs(norms - 1.0)) <= 1e-12


def test_counterexample_planted_frequency():
    d, gamma, n = 4, 5.0, 100_000
    env = stochastic_env(CounterexampleD6(gamma), d, 2, n, 0, 3, 0)
    hits = sum(env.context_set(t).shape[0] == 1 for t in range(1, n + 1))
    p = 1 / (d * gamma)
    assert abs(hits - n * p) <= 4 * math.sqrt(n * p * (1 - p))


def test_streams_are_deterministic():
    a = stochastic_env(UniformSphere(), 3, 4, 2000, 7, 8, 9)
    b = stochastic_env(UniformSphere(), 3, 4, 2000, 7, 8, 9)
    for t in (1, 1024, 1025, 2000):
        assert np.array_equal(a.context_set(t), b.context_set(t))
    ra, rb = a.noise_rng(), b.noise_rng()
    assert [step(a, 5, 1, ra) for _ in range(3)] == [step(b, 5, 1, rb) for _ in range(3)]


def test_step_zero_noise():
    theta = np.array([0.6, 0.8])
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    env = stochastic_env(FiniteMultiset((X,), np.array([1.0])), 2, 2, 10, 0, 0, 0, theta=theta, noise_scale=0.0)
    rng = env.noise_rng()
    assert step(env, 1, 1, rng) == (0.8, 0.0)
    reward, regret = step(env, 1, 0, rng)
    assert reward == 0.6 and regret == pytest.approx(0.2)


def test_step_mean_clt():
    theta = np.array([0.6, 0.8])
    X = np.array([[0.5, 0.5]])
    env = stochastic_env(FiniteMultiset((X,), np.array([1.0])), 2, 1, 10, 0, 0, 4, theta=theta)
    rng = env.noise_rng()
    n = 100_000
    mean = np.mean([step(env, 3, 0, rng)[0] for _ in range(n)])
    assert abs(mean - 0.7) <= 4 / math.sqrt(n)


def test_step_bounds():
    env = stochastic_env(UniformSphere(), 2, 3, 5, 0, 0, 0)
    with pytest.raises(EnvironmentExhausted):
        env.context_set(6)
    with pytest.raises(EnvironmentExhausted):
        step(env, 1, 3, env.noise_rng())


def test_hidden_vector_norm_checked():
    with pytest.raises(NormViolation):
        stochastic_env(UniformSphere(), 2, 2, 5, 0, 0, 0, theta=np.array([1.0, 1.0]))


def test_psi0_is_half():
    for u in ((1, 1, -1), (-1, -1, -1)):
        assert block_quantities(1000, 3, u).psi[0] == 0.5


def test_block_quantities_oracle():
    u = (1,) + (-1,) * 159
    q = block_quantities(10**6, 160, u)
    assert q.upsilon == pytest.approx(UPSILON_T1E6_L160, rel=1e-13)
    assert q.upsilon == pytest.approx(10 ** (-3 / 161), rel=1e-13)
    assert q.z[1] == pytest.approx(Z1_T1E6_L160, rel=1e-12)
    assert q.psi[1] == pytest.approx(PSI1_PLUS_T1E6_L160, rel=1e-13)


def valid_spec(seed=0):
    # upsilon = 0.1 here, which keeps every norm at most 1
    return LowerBoundSpec(2, 10**10, 1, random_signs(2, 1, seed))


def test_valid_regime_invariants():
    for seed in range(3):
        spec = valid_spec(seed)
        env = lower_bound_instance(spec)
        diag = lower_bound_diagnostics(spec)
        assert diag["max_context_norm"] <= 1 + 1e-12 and diag["theta_norm"] <= 1
        assert diag["gap_ok_fraction"] == 1.0
        assert diag["flip_ok_fraction"] == 1.0
        assert diag["stages_per_block"] == [spec.L]
        assert "illustrative" in env.labels


def test_stage_contexts_constant():
    spec = valid_spec()
    env = lower_bound_instance(spec)
    _, starts, sets, _ = lower_bound_parts(spec)
    for s, X in zip(starts, sets):
        assert np.array_equal(env.context_set(int(s)), X)
        assert np.array_equal(env.context_set(int(s) + 1), X)


def test_out_of_regime_raises():
    spec = LowerBoundSpec(2, 10**6, 40, tuple([(1,) * 160]))
    with pytest.raises(NormViolation):
        lower_bound_instance(spec)


def test_four_dimensional_blocks():
    spec = LowerBoundSpec(4, 2 * 10**10, 2, random_signs(4, 2, 1))
    theta, starts, sets, _ = lower_bound_parts(spec)
    assert len(sets) == 2 * spec.L
    assert np.all(theta[[1, 3]] == 2 / 3)
    assert np.all(sets[-1][:, :2] == 0)


def test_flip():
    assert flip((1, -1, 1), 2) == (1, 1, 1)


def test_spec_validation():
    with pytest.raises(ValueError):
        lower_bound_parts(LowerBoundSpec(3, 100, 3, ((1,) * 8,)))
