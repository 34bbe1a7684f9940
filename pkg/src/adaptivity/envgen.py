"""Bandit environments: stochastic context sources and scheduled instances.

Randomness comes from Philox streams keyed by ``(seed, stream id)`` so the
hidden vector, contexts, noise and learner draws never share state.
Contexts are produced in fixed-size chunks addressed by the Philox counter,
which makes ``context_set(t)`` a pure function of ``(seed, t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from .optimal_design import NORM_SLACK, as_context_set

STREAM_THETA = 0
STREAM_CONTEXT = 1
STREAM_NOISE = 2
STREAM_LEARNER = 3
STREAM_HOLDOUT = 4

CHUNK = 1024


class NormViolation(ValueError):
    """A derived context or hidden vector has norm above one."""


class EnvironmentExhausted(IndexError):
    """Step index outside ``1..T`` or arm index outside the context set."""


def make_rng(seed: int, stream: int, counter: int = 0) -> np.random.Generator:
    """Philox generator for ``(seed, stream)``, positioned at block ``counter``."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be nonnegative")
    key = (int(stream) << 64) | (int(seed) & ((1 << 64) - 1))
    return np.random.Generator(np.random.Philox(key=key, counter=int(counter) << 128))


# ---------------------------------------------------------------------------
# Context specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteMultiset:
    sets: tuple
    probs: np.ndarray

    def __post_init__(self):
        sets = tuple(as_context_set(s) for s in self.sets)
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (len(sets),) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-10:
            raise ValueError("probs must be nonnegative, one per set, and sum to 1")
        if len({s.shape[1] for s in sets}) != 1:
            raise ValueError("all sets must share one dimension")
        object.__setattr__(self, "sets", sets)
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class UniformSphere:
    pass


@dataclass(frozen=True)
class CounterexampleD6:
    gamma: float


ContextSpec = Union[FiniteMultiset, UniformSphere, CounterexampleD6]


def counterexample_family(d: int, gamma: float) -> FiniteMultiset:
    """The rare-direction family: ``{e1}`` and ``d - 1`` tilted pairs."""
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if gamma < d:
        raise ValueError("gamma must be at least d so that eps <= 1")
    eps = math.sqrt(d / gamma)
    eye = np.eye(d)
    sets = [eye[:1].copy()]
    for i in range(1, d):
        tilted = math.sqrt(1.0 - eps * eps) * eye[i] + eps * eye[0]
        sets.append(np.stack([tilted, eye[i]]))
    p1 = 1.0 / (d * gamma)
    probs = np.array([p1] + [(1.0 - p1) / (d - 1)] * (d - 1))
    return FiniteMultiset(tuple(sets), probs)


def _sample_sphere(rng: np.random.Generator, n: int, K: int, d: int) -> np.ndarray:
    Z = rng.standard_normal((n, K, d))
    return Z / np.linalg.norm(Z, axis=2, keepdims=True)


def sample_sets(spec: ContextSpec, d: int, K: int, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``n`` i.i.d. context sets from ``spec``."""
    if isinstance(spec, CounterexampleD6):
        spec = counterexample_family(d, spec.gamma)
    if isinstance(spec, UniformSphere):
        return list(_sample_sphere(rng, n, K, d))
    if isinstance(spec, FiniteMultiset):
        cdf = np.cumsum(spec.probs)
        u = rng.random(n) * cdf[-1]
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        return [spec.sets[i] for i in idx]
    raise TypeError(f"unknown context spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PiecewiseSchedule:
    """Context sets constant on consecutive runs of steps.

    ``starts[j]`` is the first (1-based) step of run ``j``.
    """

    starts: np.ndarray
    sets: tuple

    def at(self, t: int) -> np.ndarray:
        return self.sets[int(np.searchsorted(self.starts, t, side="right")) - 1]


@dataclass(frozen=True, eq=False)
class Environment:
    d: int
    K: int
    T: int
    _theta: np.ndarray = field(repr=False)
    spec: ContextSpec | None = None
    schedule: PiecewiseSchedule | None = None
    ctx_seed: int = 0
    noise_seed: int = 0
    noise_scale: float = 1.0
    labels: tuple = ()

    def __post_init__(self):
        theta = np.asarray(self._theta, dtype=float)
        if theta.shape != (self.d,):
            raise ValueError("hidden vector has the wrong dimension")
        if np.linalg.norm(theta) > 1.0 + NORM_SLACK:
            raise NormViolation(f"hidden vector norm {np.linalg.norm(theta):.6g} exceeds 1")
        theta.setflags(write=False)
        object.__setattr__(self, "_theta", theta)
        if (self.spec is None) == (self.schedule is None):
            raise ValueError("exactly one of spec and schedule must be given")

    def context_set(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.T:
            raise EnvironmentExhausted(f"step {t} outside 1..{self.T}")
        if self.schedule is not None:
            return self.schedule.at(t)
        chunk, pos = divmod(t - 1, CHUNK)
        return _context_chunk(self, chunk)[pos]

    def noise_rng(self) -> np.random.Generator:
        return make_rng(self.noise_seed, STREAM_NOISE)

    def with_noise(self, scale: float) -> "Environment":
        return Environment(
            self.d, self.K, self.T, self._theta, self.spec, self.schedule,
            self.ctx_seed, self.noise_seed, scale, self.labels,
        )

    def meter(self) -> "RegretMeter":
        return RegretMeter(self._theta)


@lru_cache(maxsize=64)
def _context_chunk(env: Environment, chunk: int) -> list[np.ndarray]:
    rng = make_rng(env.ctx_seed, STREAM_CONTEXT, counter=chunk)
    return sample_sets(env.spec, env.d, env.K, CHUNK, rng)


class RegretMeter:
    """Holds the hidden vector; reports rewards means and regrets only."""

    __slots__ = ("_theta",)

    def __init__(self, theta: np.ndarray):
        self._theta = theta

    def means(self, X: np.ndarray) -> np.ndarray:
        return X @ self._theta

    def regret(self, X: np.ndarray, i: int) -> float:
        m = X @ self._theta
        return float(m.max() - m[i])


def step(env: Environment, t: int, i: int, rng: np.random.Generator) -> tuple[float, float]:
    """Reward and instantaneous regret for playing arm ``i`` at step ``t``."""
    X = env.context_set(t)
    if not 0 <= i < X.shape[0]:
        raise EnvironmentExhausted(f"arm {i} outside 0..{X.shape[0] - 1}")
    m = X @ env._theta
    noise = env.noise_scale * rng.standard_normal() if env.noise_scale else 0.0
    return float(m[i] + noise), float(m.max() - m[i])


def step_block(env: Environment, t0: int, arms, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``step`` for consecutive steps ``t0, t0 + 1, ...``; same draws as the loop."""
    arms = np.asarray(arms, dtype=np.int64)
    n = arms.size
    chosen = np.empty(n)
    best = np.empty(n)
    for j in range(n):
        X = env.context_set(t0 + j)
        if not 0 <= arms[j] < X.shape[0]:
            raise EnvironmentExhausted(f"arm {arms[j]} outside 0..{X.shape[0] - 1}")
        m = X @ env._theta
        chosen[j], best[j] = m[arms[j]], m.max()
    noise = env.noise_scale * rng.standard_normal(n) if env.noise_scale else np.zeros(n)
    return chosen + noise, best - chosen


def random_unit_theta(d: int, seed: int) -> np.ndarray:
    z = make_rng(seed, STREAM_THETA).standard_normal(d)
    return z / np.linalg.norm(z)


def stochastic_env(
    spec: ContextSpec,
    d: int,
    K: int,
    T: int,
    theta_seed: int,
    ctx_seed: int,
    noise_seed: int,
    theta: np.ndarray | None = None,
    noise_scale: float = 1.0,
) -> Environment:
    """I.i.d. contexts from ``spec``; unit-norm hidden vector unless given."""
    if isinstance(spec, CounterexampleD6):
        counterexample_family(d, spec.gamma)  # validates gamma
    if isinstance(spec, FiniteMultiset) and spec.sets[0].shape[1] != d:
        raise ValueError("multiset dimension does not match d")
    if theta is None:
        theta = random_unit_theta(d, theta_seed)
    return Environment(d, K, T, np.asarray(theta, dtype=float), spec=spec,
                       ctx_seed=ctx_seed, noise_seed=noise_seed, noise_scale=noise_scale)


# ---------------------------------------------------------------------------
# Lower-bound instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LowerBoundSpec:
    d: int
    T: int
    M: int
    u: tuple  # one sign sequence of length L per 2-d block

    @property
    def n_blocks(self) -> int:
        return self.d // 2

    @property
    def L(self) -> int:
        return 8 * self.M // self.d

    @property
    def block_T(self) -> int:
        return self.T // self.n_blocks

    def validate(self):
        if self.d < 2 or self.d % 2:
            raise ValueError("d must be even and positive")
        if (8 * self.M) % self.d or self.L < 1:
            raise ValueError("8M/d must be a positive integer")
        if self.T % self.n_blocks:
            raise ValueError("T must be divisible by d/2")
        if len(self.u) != self.n_blocks or any(len(b) != self.L for b in self.u):
            raise ValueError(f"u needs {self.n_blocks} sign sequences of length {self.L}")
        if any(s not in (-1, 1) for b in self.u for s in b):
            raise ValueError("u entries must be +1 or -1")

    @property
    def in_theorem_range(self) -> bool:
        return 20 * self.d <= self.M <= self.d * math.log(self.T) / 48


def random_signs(d: int, M: int, seed: int) -> tuple:
    L = 8 * M // d
    rng = make_rng(seed, STREAM_THETA)
    return tuple(tuple(int(s) for s in rng.choice([-1, 1], size=L)) for _ in range(d // 2))


@dataclass(frozen=True)
class BlockQuantities:
    upsilon: float
    psi: np.ndarray  # psi_0 .. psi_L
    z: np.ndarray  # z_1 .. z_L (index 0 unused)
    boundaries: np.ndarray  # t_0 .. t_L within the block


def block_quantities(block_T: int, L: int, u: Sequence[int]) -> BlockQuantities:
    ups = block_T ** (-1.0 / (2 * (L + 1)))
    powers = ups ** np.arange(1, L + 1)
    psi = np.concatenate([[0.5], 0.5 + np.cumsum(np.asarray(u) * powers)])
    z = np.concatenate([[np.nan], ups ** -(np.arange(1, L + 1) + 1.0) / math.sqrt(block_T)])
    bounds = np.array([math.ceil(j * block_T / L) for j in range(L + 1)])
    return BlockQuantities(ups, psi, z, bounds)


def lower_bound_parts(spec: LowerBoundSpec):
    """Hidden vector, stage starts and stage context sets, without norm checks."""
    spec.validate()
    d, L, Tb = spec.d, spec.L, spec.block_T
    theta = np.zeros(d)
    starts, sets = [], []
    quantities = []
    for ell in range(spec.n_blocks):
        q = block_quantities(Tb, L, spec.u[ell])
        quantities.append(q)
        a, b = 2 * ell, 2 * ell + 1
        theta[a], theta[b] = q.psi[L], 2.0 / 3.0
        for j in range(1, L + 1):
            if q.boundaries[j] == q.boundaries[j - 1]:
                continue
            X = np.zeros((2, d))
            X[0, a] = q.z[j]
            X[1, b] = 1.5 * q.z[j] * q.psi[j - 1]
            starts.append(ell * Tb + q.boundaries[j - 1] + 1)
            sets.append(X)
    return theta, np.array(starts), tuple(sets), quantities


def lower_bound_instance(spec: LowerBoundSpec, noise_seed: int = 0) -> Environment:
    """Scheduled two-arm instance; raises ``NormViolation`` outside the valid regime."""
    theta, starts, sets, _ = lower_bound_parts(spec)
    for X in sets:
        n = float(np.linalg.norm(X, axis=1).max())
        if n > 1.0 + NORM_SLACK:
            raise NormViolation(f"context norm {n:.6g} exceeds 1")
    if np.linalg.norm(theta) > 1.0 + NORM_SLACK:
        raise NormViolation(f"hidden vector norm {np.linalg.norm(theta):.6g} exceeds 1")
    labels = () if spec.in_theorem_range else ("illustrative",)
    schedule = PiecewiseSchedule(starts, sets)
    return Environment(spec.d, 2, spec.T, theta, schedule=schedule, noise_seed=noise_seed, labels=labels)


def flip(u: Sequence[int], j: int) -> tuple:
    """Copy of ``u`` with the 1-based entry ``j`` negated."""
    v = list(u)
    v[j - 1] = -v[j - 1]
    return tuple(v)


def lower_bound_diagnostics(spec: LowerBoundSpec) -> dict:
    """Every invariant of the instance, evaluated without raising."""
    theta, starts, sets, quantities = lower_bound_parts(spec)
    ctx_norm = max(float(np.linalg.norm(X, axis=1).max()) for X in sets)
    gaps = np.array([abs(float(np.diff(X @ theta)[0])) for X in sets])
    q0 = quantities[0]
    bound = 1.0 / (q0.upsilon * 2.0 * math.sqrt(spec.block_T))
    # suboptimal arm of stage j in the first block: 0 if arm 1 is worse
    def worse_arm(u, j):
        q = block_quantities(spec.block_T, spec.L, u)
        r0 = q.z[j] * q.psi[spec.L]
        r1 = 1.5 * q.z[j] * q.psi[j - 1] * (2.0 / 3.0)
        return 0 if r0 < r1 else 1
    u0 = spec.u[0]
    flips = [worse_arm(u0, j) != worse_arm(flip(u0, j), j) for j in range(1, spec.L + 1)]
    return {
        "upsilon": q0.upsilon,
        "L": spec.L,
        "stages_per_block": [int(np.sum(np.diff(q.boundaries) > 0)) for q in quantities],
        "theta_norm": float(np.linalg.norm(theta)),
        "max_context_norm": ctx_norm,
        "min_gap": float(gaps.min()),
        "gap_bound": bound,
        "gap_ok_fraction": float(np.mean(gaps >= bound)),
        "flip_ok_fraction": float(np.mean(flips)),
        "in_theorem_range": spec.in_theorem_range,
    }
