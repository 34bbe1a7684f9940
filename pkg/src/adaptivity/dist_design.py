"""Distributional G-optimal designs learned from sample multisets.

``build_mixed_design`` replays the stage-doubling trajectory over ``N``
blocks of the sample sequence. Within a stage the matrix ``W`` is frozen, so
every position of the cycle contributes a fixed increment; the stage end is
located by bisection on the monotone log-determinant of the partial sums
instead of stepping one round at a time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .matrix_kernel import chol_factor, log_det, psd_inverse, quad_forms_from_factor
from .optimal_design import (
    Argmax,
    GOptimal,
    Mixed,
    SamplePolicy,
    Softmax,
    info_matrix,
    prefill_g_designs,
    softmax_weights_rows,
)

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


class EmptyOutput(RuntimeError):
    """Every stage of the trajectory was shorter than one block."""


class IterationCap(RuntimeError):
    """Core identification exceeded its iteration bound."""


class Flavor(str, Enum):
    ARGMAX = "argmax"
    SOFTMAX = "softmax"


@dataclass(frozen=True, eq=False)
class MixedDesignParams:
    probs: np.ndarray
    matrices: np.ndarray
    flavor: Flavor
    alpha: float
    # trajectory diagnostics
    n_blocks: int = 0
    gamma: int = 0
    stage_lengths: tuple = ()
    logdet_start: float = 0.0
    logdet_end: float = 0.0

    @property
    def n(self) -> int:
        return len(self.probs)

    def to_json(self) -> dict:
        return {
            "flavor": self.flavor.value,
            "alpha": self.alpha,
            "components": [
                {"p": float(p), "matrix": M.tolist()} for p, M in zip(self.probs, self.matrices)
            ],
        }


@dataclass(frozen=True)
class CoreResult:
    kept_indices: np.ndarray
    iterations: int
    gamma: int
    pruned_per_iteration: tuple = ()
    max_variance: float = 0.0
    certificate_threshold: float = 0.0


def _dedupe(S: Sequence[np.ndarray]):
    """Unique sets in first-seen order and the position-to-unique map."""
    index: dict = {}
    uniq: list[np.ndarray] = []
    ids = np.empty(len(S), dtype=np.int64)
    for pos, X in enumerate(S):
        X = np.ascontiguousarray(X, dtype=float)
        key = (X.shape, X.tobytes())
        u = index.get(key)
        if u is None:
            u = index[key] = len(uniq)
            uniq.append(X)
        ids[pos] = u
    return uniq, ids


def _g_info(uniq: list[np.ndarray], g_policy: GOptimal) -> np.ndarray:
    designs = prefill_g_designs(uniq, g_policy)
    return np.stack([info_matrix(X, w) for X, w in zip(uniq, designs)])


def _stage_increments(groups, n_uniq: int, W: np.ndarray, flavor: Flavor, alpha: float) -> np.ndarray:
    """Per-unique-set increment under the frozen stage matrix ``W``."""
    Winv = psd_inverse(W)
    out = np.empty((n_uniq,) + W.shape)
    for idx, Xs in groups:
        scores = np.einsum("bki,ij,bkj->bk", Xs, Winv, Xs)
        if flavor is Flavor.ARGMAX:
            x = Xs[np.arange(len(idx)), np.argmax(scores, axis=1)]
            out[idx] = x[:, :, None] * x[:, None, :]
        else:
            w = softmax_weights_rows(scores, alpha)
            out[idx] = np.einsum("bk,bki,bkj->bij", w, Xs, Xs)
    return out


def _group_by_size(uniq: list[np.ndarray]):
    by_k: dict[int, list[int]] = {}
    for u, X in enumerate(uniq):
        by_k.setdefault(X.shape[0], []).append(u)
    return [(np.array(idx), np.stack([uniq[u] for u in idx])) for idx in by_k.values()]


def build_mixed_design(
    S: Sequence[np.ndarray],
    lam: float,
    flavor: Flavor | str = Flavor.ARGMAX,
    K: int | None = None,
    block_multiplier: float = 1.0,
    g_policy: GOptimal | None = None,
) -> MixedDesignParams:
    """Mixed-argmax or mixed-softmax parameters from the sample sequence ``S``."""
    flavor = Flavor(flavor)
    if not S:
        raise ValueError("sample sequence must be nonempty")
    if not 0 < lam < 1:
        raise ValueError("lambda must lie in (0, 1)")
    if block_multiplier <= 0:
        raise ValueError("block_multiplier must be positive")
    g_policy = g_policy or GOptimal()
    uniq, ids = _dedupe(S)
    d = uniq[0].shape[1]
    if d < 2:
        raise ValueError("dimension must be at least 2")
    gamma = len(S)
    if gamma <= 1.0 / lam:
        log.warning("sample count %d is at most 1/lambda = %.4g", gamma, 1.0 / lam)
    K = K or max(X.shape[0] for X in uniq)
    alpha = math.log(K)
    N = math.ceil(block_multiplier * 2 * d * d * math.log2(d))
    total = N * gamma

    counts = np.bincount(ids, minlength=len(uniq)).astype(float)
    Qg = _g_info(uniq, g_policy)
    U0 = lam * total * np.eye(d) + (N / 2.0) * np.einsum("u,uij->ij", counts, Qg)
    U0 = 0.5 * (U0 + U0.T)

    groups = _group_by_size(uniq)
    W = U0
    logdet_W = log_det(W)
    logdet_start = logdet_W
    t0 = 0
    stages: list[tuple[int, np.ndarray]] = []
    while t0 < total:
        inc = _stage_increments(groups, len(uniq), W, flavor, alpha)
        cum = np.zeros((gamma + 1, d, d))
        np.cumsum(inc[ids], axis=0, out=cum[1:])
        cycle = cum[gamma]
        o = t0 % gamma

        def partial(k: int) -> np.ndarray:
            q, r = divmod(k, gamma)
            end = o + r
            P = q * cycle + (cum[min(end, gamma)] - cum[o])
            if end > gamma:
                P = P + cum[end - gamma]
            return P

        def exceeds(k: int) -> bool:
            return log_det(W + partial(k)) - logdet_W > LN2

        remaining = total - t0
        if not exceeds(remaining):
            stages.append((remaining, W))
            t0 = total
            W = W + partial(remaining)
            break
        lo, hi = 0, remaining  # exceeds(hi) holds, exceeds(lo) does not
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if exceeds(mid):
                hi = mid
            else:
                lo = mid
        stages.append((hi, W))
        W = W + partial(hi)
        W = 0.5 * (W + W.T)
        logdet_W = log_det(W)
        t0 += hi
    logdet_end = log_det(W)

    lengths = np.array([n for n, _ in stages], dtype=float)
    keep = lengths >= gamma
    if not np.any(keep):
        raise EmptyOutput(f"all {len(stages)} stages were shorter than {gamma} steps")
    probs = lengths[keep] / lengths[keep].sum()
    mats = np.stack([total * psd_inverse(Wi) for (_, Wi), k in zip(stages, keep) if k])
    return MixedDesignParams(
        probs=probs,
        matrices=mats,
        flavor=flavor,
        alpha=alpha,
        n_blocks=N,
        gamma=gamma,
        stage_lengths=tuple(int(n) for n, _ in stages),
        logdet_start=logdet_start,
        logdet_end=logdet_end,
    )


def assemble_policy(params: MixedDesignParams, g_policy: GOptimal | None = None) -> Mixed:
    """Half mass on the G-optimal sampler, half spread over the components."""
    g_policy = g_policy or GOptimal()
    comps: list[tuple[float, SamplePolicy]] = [(0.5, g_policy)]
    for p, M in zip(params.probs, params.matrices):
        if params.flavor is Flavor.ARGMAX:
            comps.append((0.5 * p, Argmax(M)))
        else:
            comps.append((0.5 * p, Softmax(M, params.alpha)))
    return Mixed(tuple(comps))


def core_iteration_cap(d: int, lam: float) -> int:
    return math.ceil(3 * d * math.log2(2.0 / lam))


def core_identification(
    S: Sequence[np.ndarray],
    lam: float,
    c: int = 6,
    counts: Sequence[int] | None = None,
    gamma: int | None = None,
    g_policy: GOptimal | None = None,
) -> CoreResult:
    """Prune sample sets whose directions the G-optimal sampler leaves unexplored.

    ``counts`` gives the multiplicity of each entry of ``S``; ``gamma`` fixes
    the normalizer (defaults to the total multiplicity).
    """
    if not S:
        raise ValueError("sample sequence must be nonempty")
    if not 0 < lam < 1:
        raise ValueError("lambda must lie in (0, 1)")
    g_policy = g_policy or GOptimal()
    uniq, ids = _dedupe(S)
    d = uniq[0].shape[1]
    mult = np.ones(len(S)) if counts is None else np.asarray(counts, dtype=float)
    if mult.shape != (len(S),) or np.any(mult < 0):
        raise ValueError("counts must be nonnegative, one per sample")
    ucount = np.bincount(ids, weights=mult, minlength=len(uniq))
    gamma = int(round(mult.sum())) if gamma is None else int(gamma)
    Qg = _g_info(uniq, g_policy)
    allx = np.vstack(uniq)
    offsets = np.concatenate([[0], np.cumsum([X.shape[0] for X in uniq])[:-1]])
    threshold = float(d) ** c
    cap = core_iteration_cap(d, lam)

    alive = ucount > 0
    pruned: list[int] = []
    xi = 0
    while True:
        xi += 1
        if xi > cap:
            raise IterationCap(f"core identification exceeded {cap} iterations")
        J = lam * np.eye(d) + np.einsum("u,uij->ij", ucount * alive, Qg) / gamma
        var = np.maximum.reduceat(quad_forms_from_factor(chol_factor(J), allx), offsets)
        worst = float(var[alive].max()) if np.any(alive) else 0.0
        if worst <= threshold:
            break
        nxt = alive & (var <= 0.5 * threshold)
        pruned.append(int(ucount[alive & ~nxt].sum()))
        alive = nxt
    kept = np.flatnonzero(alive[ids] & (mult > 0))
    return CoreResult(
        kept_indices=kept,
        iterations=xi,
        gamma=gamma,
        pruned_per_iteration=tuple(pruned),
        max_variance=worst,
        certificate_threshold=threshold,
    )


@dataclass(frozen=True, eq=False)
class CoreLearningOutput:
    policy: Mixed
    core: CoreResult
    params: MixedDesignParams = field(repr=False)


def core_learning_full(
    S: Sequence[np.ndarray],
    lam: float,
    K: int | None = None,
    block_multiplier: float = 1.0,
    enforce_range: bool = True,
    g_policy: GOptimal | None = None,
) -> CoreLearningOutput:
    if not S:
        raise ValueError("sample sequence must be nonempty")
    d = np.asarray(S[0]).shape[1]
    if enforce_range and not math.exp(-d) < lam < 1:
        raise ValueError(f"lambda must lie in (exp(-{d}), 1), got {lam}")
    core = core_identification(S, lam, c=6, g_policy=g_policy)
    if core.kept_indices.size == 0:
        raise EmptyOutput("core identification kept no samples")
    kept = [S[i] for i in core.kept_indices]
    params = build_mixed_design(kept, lam, Flavor.SOFTMAX, K, block_multiplier, g_policy)
    return CoreLearningOutput(assemble_policy(params, g_policy), core, params)


def core_learning(
    S: Sequence[np.ndarray],
    lam: float,
    K: int | None = None,
    block_multiplier: float = 1.0,
    enforce_range: bool = True,
    g_policy: GOptimal | None = None,
) -> Mixed:
    """Core identification followed by a mixed-softmax design on the core."""
    return core_learning_full(S, lam, K, block_multiplier, enforce_range, g_policy).policy
