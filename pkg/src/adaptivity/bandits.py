"""Ridge estimation, confidence widths, elimination and the four learners."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .dist_design import core_learning
from .envgen import Environment, step, step_block
from .matrix_kernel import chol_factor, log_det, psd_solve, quad_form
from .optimal_design import GOptimal, SamplePolicy, Uniform, draw_from_weight_rows, policy_distributions


# ---------------------------------------------------------------------------
# Ridge state
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RidgeState:
    Lam: np.ndarray
    xi: np.ndarray
    lam_reg: float
    count: int = 0

    @classmethod
    def fresh(cls, d: int, lam_reg: float) -> "RidgeState":
        if lam_reg <= 0:
            raise ValueError("lam_reg must be positive")
        return cls(lam_reg * np.eye(d), np.zeros(d), float(lam_reg), 0)


def ridge_update(s: RidgeState, x, r: float) -> RidgeState:
    x = np.asarray(x, dtype=float)
    if x.shape != s.xi.shape:
        raise ValueError("vector dimension does not match the ridge state")
    return RidgeState(s.Lam + np.outer(x, x), s.xi + r * x, s.lam_reg, s.count + 1)


def ridge_estimate(s: RidgeState) -> np.ndarray:
    return psd_solve(s.Lam, s.xi)


def confidence_width(s: RidgeState, x, alpha: float) -> float:
    return alpha * math.sqrt(quad_form(s.Lam, 0.0, x))


def eliminate(survivors: Sequence[int], rhat, omega) -> np.ndarray:
    """Keep ``i`` with ``rhat_i + omega_i >= max_j (rhat_j - omega_j)``.

    ``rhat`` and ``omega`` are indexed by arm; only survivors are compared.
    """
    A = np.asarray(survivors, dtype=np.int64)
    if A.size == 0:
        raise ValueError("survivor set must be nonempty")
    rh = np.asarray(rhat, dtype=float)[A]
    om = np.asarray(omega, dtype=float)[A]
    return A[rh + om >= np.max(rh - om)]


class Estimate:
    """Frozen ``(theta_hat, Lambda)`` pair with fast per-arm widths."""

    __slots__ = ("theta", "Lam", "_Linv", "logdet")

    def __init__(self, Lam: np.ndarray, xi: np.ndarray):
        self.Lam = Lam.copy()
        L = chol_factor(Lam)
        self._Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
        self.theta = self._Linv.T @ (self._Linv @ xi)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(L))))

    def scores(self, X: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
        Z = X @ self._Linv.T
        return X @ self.theta, alpha * np.sqrt(np.einsum("ij,ij->i", Z, Z))

    def eliminate(self, X: np.ndarray, A: np.ndarray, alpha: float) -> np.ndarray:
        rh, om = self.scores(X[A], alpha)
        return A[rh + om >= np.max(rh - om)]


# ---------------------------------------------------------------------------
# Records and constants
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LearnerRecord:
    algo: str
    arms: np.ndarray
    regret: np.ndarray
    batch: np.ndarray
    switches: np.ndarray
    policy_id: np.ndarray
    grid: tuple = ()
    layer: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.arms)

    @property
    def regret_cum(self) -> np.ndarray:
        return np.cumsum(self.regret)

    @property
    def total_regret(self) -> float:
        return float(np.sum(self.regret))

    @property
    def batches_used(self) -> int:
        return int(self.batch.max()) if self.T else 0

    @property
    def switches_used(self) -> int:
        return int(self.switches[-1]) if self.T else 0


class _Recorder:
    def __init__(self, T: int, with_layer: bool = False):
        self.arms = np.zeros(T, dtype=np.int64)
        self.regret = np.zeros(T)
        self.batch = np.zeros(T, dtype=np.int64)
        self.switches = np.zeros(T, dtype=np.int64)
        self.policy_id = np.zeros(T, dtype=np.int64)
        self.layer = np.zeros(T, dtype=np.int64) if with_layer else None

    def put(self, t: int, arm: int, regret: float, batch: int, switches: int, policy_id: int, layer: int = 0):
        i = t - 1
        self.arms[i], self.regret[i], self.batch[i] = arm, regret, batch
        self.switches[i], self.policy_id[i] = switches, policy_id
        if self.layer is not None:
            self.layer[i] = layer

    def put_block(self, t0: int, arms, regrets, batch: int, switches: int, policy_id: int):
        sl = slice(t0 - 1, t0 - 1 + len(arms))
        self.arms[sl], self.regret[sl], self.batch[sl] = arms, regrets, batch
        self.switches[sl], self.policy_id[sl] = switches, policy_id

    def finish(self, algo: str, grid=(), **extra) -> LearnerRecord:
        return LearnerRecord(algo, self.arms, self.regret, self.batch, self.switches,
                             self.policy_id, tuple(grid), self.layer, extra)


def default_alpha(d: int, K: int, T: int, delta: float) -> float:
    return 10.0 * math.sqrt(math.log(2 * d * K * T / delta))


def coverage_alpha(K: int, T: int, delta: float, lam_reg: float) -> float:
    """Width multiplier from the sub-Gaussian ridge bound, union-bounded over every arm and step."""
    return math.sqrt(2.0 * math.log(2 * K * T / delta)) + math.sqrt(lam_reg)


def default_lam_reg(d: int, T: int, delta: float, factor: float = 16.0) -> float:
    return factor * math.log(2 * d * T / delta)


def _ceil_power(T: int, e: float) -> int:
    v = T ** e
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, v):
        return int(r)
    return math.ceil(v)


def _loglog_batches(T: int) -> int:
    return max(1, math.ceil(math.log2(math.log2(T)) - 1e-12))


def _monotone_grid(points: Sequence[int], T: int) -> tuple[int, ...]:
    grid: list[int] = []
    for v in points:
        v = min(int(v), T)
        if v < T and (not grid or v > grid[-1]):
            grid.append(v)
    grid.append(T)
    return tuple(grid)


def batch_grid(T: int) -> tuple[int, ...]:
    """Static grid ``ceil(T^(1 - 2^-i))`` for ``i < M`` and ``T_M = T``."""
    if T < 4:
        raise ValueError("T must be at least 4")
    M = _loglog_batches(T)
    return _monotone_grid([_ceil_power(T, 1.0 - 2.0 ** -i) for i in range(1, M)], T)


def dg_grid(T: int) -> tuple[int, ...]:
    """``ceil(sqrt T)``, ``ceil(2 sqrt T)``, then ``ceil(T^(1 - 2^-(i-1)))``, ending at ``T``."""
    if T < 16:
        raise ValueError("T must be at least 16")
    M = _loglog_batches(T) + 1
    root = math.sqrt(T)
    pts = [math.ceil(root - 1e-9), math.ceil(2 * root - 1e-9)]
    pts += [_ceil_power(T, 1.0 - 2.0 ** -(i - 1)) for i in range(3, M)]
    return _monotone_grid(pts[: M - 1], T)


class EstimateStack:
    """All previous batches' estimates, applied as a cascade of eliminations."""

    def __init__(self, estimates: Sequence[Estimate]):
        self.n = len(estimates)
        if self.n:
            self._thetas = np.stack([e.theta for e in estimates])
            self._Linvs = np.stack([e._Linv for e in estimates])

    def survivors(self, X: np.ndarray, alpha: float) -> np.ndarray:
        return np.flatnonzero(self.survivor_mask(X[None], alpha)[0])

    def survivor_mask(self, Xs: np.ndarray, alpha: float, alive: np.ndarray | None = None) -> np.ndarray:
        """Survivor mask for every set of an ``(n, K, d)`` stack."""
        alive = np.ones(Xs.shape[:2], dtype=bool) if alive is None else alive.copy()
        for k in range(self.n):
            rh = Xs @ self._thetas[k]
            Z = Xs @ self._Linvs[k].T
            om = alpha * np.sqrt(np.einsum("nki,nki->nk", Z, Z))
            lower = np.where(alive, rh - om, -np.inf).max(axis=1)
            alive &= rh + om >= lower[:, None]
        return alive


@dataclass
class _Block:
    """Outcome of one batch played under a fixed policy."""

    sets: list
    survivors: list
    arms: np.ndarray
    rewards: np.ndarray
    regrets: np.ndarray

    def chosen(self) -> np.ndarray:
        return np.stack([X[i] for X, i in zip(self.sets, self.arms)])


def _group_rows(sizes: Sequence[int]) -> dict[int, np.ndarray]:
    sizes = np.asarray(sizes)
    return {int(k): np.flatnonzero(sizes == k) for k in np.unique(sizes)}


def _masks(stack: EstimateStack, sets: list, alpha: float, alive: list | None = None) -> list:
    out: list = [None] * len(sets)
    for K, rows in _group_rows([X.shape[0] for X in sets]).items():
        Xs = np.stack([sets[r] for r in rows])
        start = None if alive is None else np.stack([alive[r] for r in rows])
        for r, m in zip(rows, stack.survivor_mask(Xs, alpha, start)):
            out[r] = m
    return out


def _play_block(
    env: Environment,
    t0: int,
    t1: int,
    stack: EstimateStack,
    alpha: float,
    pi: SamplePolicy,
    rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> _Block:
    """Steps ``t0..t1``: eliminate, sample from the survivors, observe.

    Survivor sets of size one are played without a draw; every other step
    consumes one uniform variate, in step order.
    """
    sets = [env.context_set(t) for t in range(t0, t1 + 1)]
    masks = _masks(stack, sets, alpha)
    survivors = [np.flatnonzero(m) for m in masks]
    n = len(sets)
    sizes = np.array([A.size for A in survivors])
    u = np.zeros(n)
    multi = sizes > 1
    u[multi] = rng.random(int(multi.sum()))
    arms = np.empty(n, dtype=np.int64)
    for m, rows in _group_rows(sizes).items():
        A = np.stack([survivors[r] for r in rows])
        if m == 1:
            arms[rows] = A[:, 0]
            continue
        sub = np.stack([sets[r][a] for r, a in zip(rows, A)])
        local = draw_from_weight_rows(policy_distributions(pi, sub), u[rows])
        arms[rows] = A[np.arange(len(rows)), local]
    rewards, regrets = step_block(env, t0, arms, noise_rng)
    return _Block(sets, survivors, arms, rewards, regrets)


def _estimate(lam_reg: float, Xc: np.ndarray, r: np.ndarray) -> Estimate:
    d = Xc.shape[1]
    return Estimate(lam_reg * np.eye(d) + Xc.T @ Xc, Xc.T @ r)


# ---------------------------------------------------------------------------
# Batched elimination learners
# ---------------------------------------------------------------------------


class SamplerMode(str, Enum):
    UNIFORM = "uniform"
    GOPTIMAL = "goptimal"


def run_batch_elimination(
    env: Environment,
    T: int | None,
    delta: float,
    sampler_mode: SamplerMode | str,
    rng: np.random.Generator,
    alpha: float | None = None,
    lam_reg: float | None = None,
    g_policy: GOptimal | None = None,
    noise_rng: np.random.Generator | None = None,
) -> LearnerRecord:
    """Static-grid elimination, sampling survivors uniformly or G-optimally."""
    T = T or env.T
    mode = SamplerMode(sampler_mode)
    d, K = env.d, env.K
    alpha = default_alpha(d, K, T, delta) if alpha is None else alpha
    lam_reg = default_lam_reg(d, T, delta) if lam_reg is None else lam_reg
    pi: SamplePolicy = Uniform() if mode is SamplerMode.UNIFORM else (g_policy or GOptimal())
    noise_rng = noise_rng or env.noise_rng()
    grid = batch_grid(T)
    rec = _Recorder(T)
    estimates: list[Estimate] = []
    start = 1
    for k, end in enumerate(grid, start=1):
        blk = _play_block(env, start, end, EstimateStack(estimates), alpha, pi, rng, noise_rng)
        rec.put_block(start, blk.arms, blk.regrets, k, k, k)
        estimates.append(_estimate(lam_reg, blk.chosen(), blk.rewards))
        start = end + 1
    algo = "BatchLinUCB" if mode is SamplerMode.UNIFORM else "BatchLinUCB-KW"
    return rec.finish(algo, grid, alpha=alpha, lam_reg=lam_reg)


@dataclass(frozen=True)
class DesignConfig:
    block_multiplier: float = 1.0
    tol_factor: float = 2.0
    jitter: float = 1e-9

    def g_policy(self) -> GOptimal:
        return GOptimal(jitter=self.jitter, tol_factor=self.tol_factor)


def run_batch_linucb_dg(
    env: Environment,
    T: int | None,
    delta: float,
    rng: np.random.Generator,
    design_cfg: DesignConfig | None = None,
    alpha: float | None = None,
    lam_reg: float | None = None,
    lam_design: float | None = None,
    noise_rng: np.random.Generator | None = None,
) -> LearnerRecord:
    """Elimination with sample policies learned between batches.

    Even offsets of each batch fit the ridge estimate; odd offsets, after a
    second elimination round, feed the core-based design learner.
    """
    T = T or env.T
    d, K = env.d, env.K
    cfg = design_cfg or DesignConfig()
    g_policy = cfg.g_policy()
    alpha = default_alpha(d, K, T, delta) if alpha is None else alpha
    lam_reg = default_lam_reg(d, T, delta, 32.0) if lam_reg is None else lam_reg
    lam_design = 1.0 / T if lam_design is None else lam_design
    noise_rng = noise_rng or env.noise_rng()
    grid = dg_grid(T)
    rec = _Recorder(T)
    estimates: list[Estimate] = []
    pi: SamplePolicy = g_policy
    design_sizes: list[int] = []
    start = 1
    for k, end in enumerate(grid, start=1):
        blk = _play_block(env, start, end, EstimateStack(estimates), alpha, pi, rng, noise_rng)
        rec.put_block(start, blk.arms, blk.regrets, k, k, k)
        start = end + 1
        if k == len(grid):
            break
        # even offsets fit the estimate, odd offsets feed design learning
        est = _estimate(lam_reg, blk.chosen()[0::2], blk.rewards[0::2])
        estimates.append(est)
        odd_sets = blk.sets[1::2]
        if odd_sets:
            alive = [np.isin(np.arange(X.shape[0]), A) for X, A in zip(odd_sets, blk.survivors[1::2])]
            masks = _masks(EstimateStack([est]), odd_sets, alpha, alive)
            S = [X[m] for X, m in zip(odd_sets, masks)]
        else:
            S = list(blk.sets)
        pi = core_learning(S, lam_design, K, cfg.block_multiplier, enforce_range=False, g_policy=g_policy)
        design_sizes.append(len(pi.components) - 1)
    return rec.finish("BatchLinUCB-DG", grid, alpha=alpha, lam_reg=lam_reg,
                      lam_design=lam_design, design_sizes=design_sizes)


# ---------------------------------------------------------------------------
# Rarely switching layered learner
# ---------------------------------------------------------------------------


SUP_CHUNK = 256
# exact equality in the growth test is common (det(I + xx^T) = 2 for unit x),
# so rounding must not decide it
SNAPSHOT_SLACK = 1e-12


def _layered_choice(snaps, alphas, varpi, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arm and layer for every set of an ``(n, K, d)`` stack under fixed snapshots.

    Layer 0 eliminates with its own widths; each later layer either narrows
    the survivors (all widths below its threshold) or explores the survivor
    with the widest layer-0 interval. The last layer plays the lowest index.
    """
    n = Xs.shape[0]
    L = len(snaps)
    rh = np.stack([Xs @ s.theta for s in snaps])
    om = np.empty_like(rh)
    for k, s in enumerate(snaps):
        Z = Xs @ s._Linv.T
        om[k] = alphas[k] * np.sqrt(np.einsum("nki,nki->nk", Z, Z))
    A = rh[0] + om[0] >= (rh[0] - om[0]).max(axis=1)[:, None]
    arm = np.empty(n, dtype=np.int64)
    layer = np.empty(n, dtype=np.int64)
    undecided = np.ones(n, dtype=bool)
    for k in range(L):
        if k == L - 1:
            arm[undecided] = np.argmax(A[undecided], axis=1)
            layer[undecided] = k
            break
        narrow = np.all(~A | (om[k] <= varpi[k]), axis=1)
        explore = undecided & ~narrow
        arm[explore] = np.argmax(np.where(A, om[0], -np.inf)[explore], axis=1)
        layer[explore] = k
        undecided &= narrow
        r = np.where(A, rh[k], -np.inf)
        A = np.where(undecided[:, None], A & (r >= r.max(axis=1)[:, None] - 2.0 * varpi[k]), A)
    return arm, layer


def suplinucb_switch_bound(d: int, T: int, C: float) -> int:
    return (math.ceil(math.log2(d)) + 1) * math.ceil(d * math.log(1 + T / d) / math.log(C) + 1)


def run_sup_linucb(
    env: Environment,
    T: int | None,
    delta: float,
    C: float,
    rng: np.random.Generator | None = None,
    alpha: float | None = None,
    alpha0: float | None = None,
    noise_rng: np.random.Generator | None = None,
) -> LearnerRecord:
    """Layered elimination with determinant-growth delayed snapshots.

    ``rng`` is accepted for interface symmetry; every choice is deterministic.
    """
    T = T or env.T
    if C < 2:
        raise ValueError("C must be at least 2")
    d, K = env.d, env.K
    if T < d:
        raise ValueError("T must be at least d")
    kappa0 = max(0, math.ceil(math.log2(d) - 1e-12))
    n_layers = kappa0 + 1
    alpha0 = 2.0 * math.sqrt(d * math.log(2 * T / delta)) if alpha0 is None else alpha0
    alpha_k = default_alpha(d, K, T, delta) if alpha is None else alpha
    alphas = [alpha0] + [alpha_k] * kappa0
    varpi = [d ** 1.5 / math.sqrt(T)]
    for _ in range(kappa0):
        varpi.append(varpi[-1] / 2.0)
    noise_rng = noise_rng or env.noise_rng()
    log_C = math.log(C)

    Lam = [np.eye(d) for _ in range(n_layers)]
    xi = [np.zeros(d) for _ in range(n_layers)]
    snaps = [Estimate(Lam[k], xi[k]) for k in range(n_layers)]
    switches = n_layers
    policy_id = 0
    rec = _Recorder(T, with_layer=True)
    t = 1
    while t <= T:
        # choices depend only on the snapshots, so a chunk is fixed until
        # the first step whose update triggers a new snapshot
        sets = [env.context_set(u) for u in range(t, min(T, t + SUP_CHUNK - 1) + 1)]
        arms = np.empty(len(sets), dtype=np.int64)
        layers = np.empty(len(sets), dtype=np.int64)
        for _, rows in _group_rows([X.shape[0] for X in sets]).items():
            arms[rows], layers[rows] = _layered_choice(snaps, alphas, varpi, np.stack([sets[r] for r in rows]))
        Xc = np.stack([X[i] for X, i in zip(sets, arms)])
        outer = Xc[:, :, None] * Xc[:, None, :]
        cums, first = {}, len(sets)
        for k in range(n_layers):
            idx = np.flatnonzero(layers == k)
            if idx.size == 0:
                continue
            cum = np.cumsum(np.concatenate([Lam[k][None], outer[idx]]), axis=0)[1:]
            logdets = 2.0 * np.log(np.diagonal(np.linalg.cholesky(cum), axis1=1, axis2=2)).sum(axis=1)
            hit = np.flatnonzero(logdets >= log_C + snaps[k].logdet - SNAPSHOT_SLACK)
            if hit.size:
                first = min(first, int(idx[hit[0]]))
            cums[k] = (idx, cum)
        n_use = min(first + 1, len(sets))
        rewards, regrets = step_block(env, t, arms[:n_use], noise_rng)
        for k, (idx, cum) in cums.items():
            used = idx < n_use
            if not np.any(used):
                continue
            Lam[k] = cum[int(np.sum(used)) - 1].copy()
            steps = idx[used]
            incr = rewards[steps, None] * Xc[steps]
            xi[k] = np.cumsum(np.concatenate([xi[k][None], incr]), axis=0)[-1]
        sw = np.full(n_use, switches)
        pid = np.full(n_use, policy_id)
        if first < len(sets):
            k = int(layers[first])
            snaps[k] = Estimate(Lam[k], xi[k])
            switches += 1
            policy_id += 1
            sw[-1], pid[-1] = switches, policy_id
        sl = slice(t - 1, t - 1 + n_use)
        rec.arms[sl], rec.regret[sl], rec.layer[sl] = arms[:n_use], regrets, layers[:n_use]
        rec.switches[sl], rec.policy_id[sl], rec.batch[sl] = sw, pid, pid + 1
        t += n_use
    return rec.finish("SupLinUCB", (T,), alphas=alphas, varpi=varpi,
                      switch_bound=suplinucb_switch_bound(d, T, C), layer_matrices=Lam)
