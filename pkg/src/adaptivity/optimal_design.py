"""G-optimal designs, sample policies and the lambda-variation estimators.

A context set is a ``(K, d)`` float array whose rows have norm at most one.
A design is a length-``K`` probability vector over those rows.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .matrix_kernel import chol_factor, quad_forms_from_factor

NORM_SLACK = 1e-12
WEIGHT_SUM_TOL = 1e-10
DEFAULT_G_JITTER = 1e-9


class DidNotConverge(RuntimeError):
    """Frank-Wolfe hit ``max_iter`` before reaching ``tol_factor * d``."""

    def __init__(self, best_value: float, weights: np.ndarray, message: str = ""):
        self.best_value = float(best_value)
        self.weights = weights
        super().__init__(message or f"G-optimal solver did not converge; best max variance {best_value:.6g}")


def as_context_set(vectors) -> np.ndarray:
    """Validate and return a ``(K, d)`` context array."""
    X = np.array(vectors, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"context set must be a non-empty (K, d) array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("context set has non-finite entries")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms > 1.0 + NORM_SLACK):
        raise ValueError(f"context vector norm {norms.max():.6g} exceeds 1")
    return X


def as_design(weights, K: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or (K is not None and w.shape[0] != K):
        raise ValueError("design length does not match the context set")
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError("design weights must be nonnegative and sum to 1")
    return w


def info_matrix(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``sum_i w_i x_i x_i^T``."""
    return (X.T * w) @ X


def design_variances(X: np.ndarray, w: np.ndarray, jitter: float) -> np.ndarray:
    """Per-point ``x^T (Q(w) + jitter I)^{-1} x``."""
    return quad_forms_from_factor(chol_factor(info_matrix(X, w), jitter), X)


def design_value(X, w, jitter: float = DEFAULT_G_JITTER) -> float:
    """Maximum normalized variance of a design."""
    X = as_context_set(X)
    return float(np.max(design_variances(X, np.asarray(w, dtype=float), jitter)))


def _fw_step(g: float, d: int) -> float:
    return (g / d - 1.0) / (g - 1.0)


def g_optimal_design(
    X,
    jitter: float = DEFAULT_G_JITTER,
    tol_factor: float = 2.0,
    max_iter: int = 10_000,
) -> np.ndarray:
    """Frank-Wolfe design whose max variance is at most ``tol_factor * d``.

    Starts from uniform weights and moves mass to the current max-variance
    point with the exact line-search step. Shares its arithmetic with the
    batched solver so cached designs do not depend on the code path.
    """
    X = as_context_set(X)
    return g_optimal_designs_batched([X], jitter, tol_factor, max_iter)[0]


def _g_design_unchecked(X: np.ndarray, pol: GOptimal) -> np.ndarray:
    return g_optimal_designs_batched([X], pol.jitter, pol.tol_factor, pol.max_iter)[0]


def g_optimal_designs_batched(
    sets: Sequence[np.ndarray],
    jitter: float = DEFAULT_G_JITTER,
    tol_factor: float = 2.0,
    max_iter: int = 10_000,
) -> list[np.ndarray]:
    """Same iteration as ``g_optimal_design`` run on many sets at once.

    Sets are zero-padded to a common size; padded rows carry no mass and are
    never selected.
    """
    if not sets:
        return []
    if tol_factor < 1:
        raise ValueError("tol_factor must be at least 1")
    d = sets[0].shape[1]
    B = len(sets)
    Kmax = max(s.shape[0] for s in sets)
    X = np.zeros((B, Kmax, d))
    mask = np.zeros((B, Kmax), dtype=bool)
    for b, s in enumerate(sets):
        X[b, : s.shape[0]] = s
        mask[b, : s.shape[0]] = True
    counts = mask.sum(axis=1)
    W = mask / counts[:, None]
    target = tol_factor * d
    active = np.arange(B)
    eye = np.eye(d)
    for _ in range(max_iter + 1):
        Xa, Wa = X[active], W[active]
        Q = np.einsum("bk,bki,bkj->bij", Wa, Xa, Xa) + jitter * eye
        sol = np.linalg.solve(Q, np.swapaxes(Xa, 1, 2))
        var = np.einsum("bki,bik->bk", Xa, sol)
        var = np.where(mask[active], var, -np.inf)
        j = np.argmax(var, axis=1)
        g = var[np.arange(len(active)), j]
        done = g <= target
        if np.all(done):
            active = active[:0]
            break
        keep = ~done
        active, j, g = active[keep], j[keep], g[keep]
        step = _fw_step(g, d)
        W[active] *= (1.0 - step)[:, None]
        W[active, j] += step
    if active.size:
        raise DidNotConverge(float(g.max()), W[active[0]].copy())
    return [W[b, : sets[b].shape[0]].copy() for b in range(B)]


# ---------------------------------------------------------------------------
# Sample policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class GOptimal:
    jitter: float = DEFAULT_G_JITTER
    tol_factor: float = 2.0
    max_iter: int = 10_000


@dataclass(frozen=True, eq=False)
class Argmax:
    V: np.ndarray


@dataclass(frozen=True, eq=False)
class Softmax:
    M: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("softmax alpha must be nonnegative")


@dataclass(frozen=True, eq=False)
class Mixed:
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        comps = tuple((float(w), p) for w, p in self.components)
        if not comps:
            raise ValueError("mixed policy needs at least one component")
        weights = np.array([w for w, _ in comps])
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError("mixed policy weights must be nonnegative and sum to 1")
        object.__setattr__(self, "components", comps)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])


SamplePolicy = Union[Uniform, GOptimal, Argmax, Softmax, Mixed]


class _DesignCache:
    """Bounded, lock-protected memo of G-optimal designs keyed by set content."""

    def __init__(self, maxsize: int = 65_536):
        self.maxsize = maxsize
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    @staticmethod
    def key(X: np.ndarray, pol: GOptimal):
        return (X.shape, X.tobytes(), pol.jitter, pol.tol_factor, pol.max_iter)

    def get(self, key):
        with self._lock:
            w = self._data.get(key)
            if w is not None:
                self._data.move_to_end(key)
            return w

    def put(self, key, w):
        with self._lock:
            self._data[key] = w
            self._data.move_to_end(key)
            while len(self._data) > self.maxsize:
                self._data.popitem(last=False)

    def clear(self):
        with self._lock:
            self._data.clear()


DESIGN_CACHE = _DesignCache()


def cached_g_design(X: np.ndarray, pol: GOptimal | None = None) -> np.ndarray:
    pol = pol or GOptimal()
    key = DESIGN_CACHE.key(X, pol)
    w = DESIGN_CACHE.get(key)
    if w is None:
        w = _g_design_unchecked(X, pol)
        w.setflags(write=False)
        DESIGN_CACHE.put(key, w)
    return w


def prefill_g_designs(sets: Sequence[np.ndarray], pol: GOptimal | None = None) -> list[np.ndarray]:
    """Designs for many sets, solving the cache misses in one batched run."""
    pol = pol or GOptimal()
    out: list = [None] * len(sets)
    missing = []
    for i, X in enumerate(sets):
        w = DESIGN_CACHE.get(DESIGN_CACHE.key(X, pol))
        if w is None:
            missing.append(i)
        else:
            out[i] = w
    if missing:
        by_k: dict[int, list[int]] = {}
        for i in missing:
            by_k.setdefault(sets[i].shape[0], []).append(i)
        for idx in by_k.values():
            for start in range(0, len(idx), 4096):
                chunk = idx[start : start + 4096]
                try:
                    ws = g_optimal_designs_batched([sets[i] for i in chunk], pol.jitter, pol.tol_factor, pol.max_iter)
                except DidNotConverge:
                    ws = [g_optimal_design(sets[i], pol.jitter, pol.tol_factor, pol.max_iter) for i in chunk]
                for i, w in zip(chunk, ws):
                    w.setflags(write=False)
                    DESIGN_CACHE.put(DESIGN_CACHE.key(sets[i], pol), w)
                    out[i] = w
    return out


def _check_matrix_dim(A: np.ndarray, d: int):
    if A.shape != (d, d):
        raise ValueError(f"policy matrix of shape {A.shape} does not match context dimension {d}")


def softmax_weights(scores: np.ndarray, alpha: float) -> np.ndarray:
    """Weights proportional to ``scores ** alpha``, evaluated in log space."""
    s = np.asarray(scores, dtype=float)
    if not np.any(s > 0):
        return np.full(s.shape[0], 1.0 / s.shape[0])
    logs = alpha * np.log(np.maximum(s, 1e-300))
    w = np.exp(logs - logs.max())
    return w / w.sum()


def quadratic_scores(X: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.einsum("ki,ij,kj->k", X, A, X)


def policy_distribution(pi: SamplePolicy, X) -> np.ndarray:
    """Exact probability weights of ``pi`` on the context set ``X``."""
    X = np.asarray(X, dtype=float)
    K, d = X.shape
    if isinstance(pi, Uniform):
        return np.full(K, 1.0 / K)
    if isinstance(pi, GOptimal):
        return np.array(cached_g_design(X, pi))
    if isinstance(pi, Argmax):
        _check_matrix_dim(pi.V, d)
        w = np.zeros(K)
        w[int(np.argmax(quadratic_scores(X, pi.V)))] = 1.0
        return w
    if isinstance(pi, Softmax):
        _check_matrix_dim(pi.M, d)
        return softmax_weights(quadratic_scores(X, pi.M), pi.alpha)
    if isinstance(pi, Mixed):
        return _mixed_distribution(pi, X)
    raise TypeError(f"unknown sample policy {type(pi).__name__}")


def softmax_weights_rows(scores: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise ``softmax_weights`` for a ``(n, K)`` score array."""
    s = np.asarray(scores, dtype=float)
    logs = alpha * np.log(np.maximum(s, 1e-300))
    w = np.exp(logs - logs.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    flat = ~np.any(s > 0, axis=1)
    if np.any(flat):
        w[flat] = 1.0 / s.shape[1]
    return w


def _softmax_groups(pi: Mixed):
    groups = getattr(pi, "_softmax_groups", None)
    if groups is None:
        by_alpha: dict[float, list] = {}
        for weight, sub in pi.components:
            if weight > 0 and isinstance(sub, Softmax):
                by_alpha.setdefault(sub.alpha, []).append((weight, sub.M))
        groups = [
            (alpha, np.array([c for c, _ in items]), np.stack([M for _, M in items]))
            for alpha, items in by_alpha.items()
        ]
        object.__setattr__(pi, "_softmax_groups", groups)
    return groups


def _mixed_distribution(pi: Mixed, X: np.ndarray) -> np.ndarray:
    # softmax components sharing one alpha are scored in a single einsum
    K, d = X.shape
    w = np.zeros(K)
    for weight, sub in pi.components:
        if weight > 0 and not isinstance(sub, Softmax):
            w += weight * policy_distribution(sub, X)
    for alpha, weights, mats in _softmax_groups(pi):
        if mats.shape[1:] != (d, d):
            raise ValueError(f"policy matrix of shape {mats.shape[1:]} does not match context dimension {d}")
        scores = np.einsum("ki,nij,kj->nk", X, mats, X)
        w += weights @ softmax_weights_rows(scores, alpha)
    return w


def draw_from_weights(w: np.ndarray, rng: np.random.Generator) -> int:
    """CDF inversion with a single uniform variate."""
    cdf = np.cumsum(w)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(w) - 1))


def draw_arm(pi: SamplePolicy, X, rng: np.random.Generator) -> int:
    return draw_from_weights(policy_distribution(pi, X), rng)


def policy_distributions(pi: SamplePolicy, Xs: np.ndarray) -> np.ndarray:
    """``policy_distribution`` for each set of a ``(n, K, d)`` stack."""
    n, K, d = Xs.shape
    if isinstance(pi, Uniform):
        return np.full((n, K), 1.0 / K)
    if isinstance(pi, GOptimal):
        return np.stack(prefill_g_designs(list(Xs), pi)) if n else np.zeros((0, K))
    if isinstance(pi, Argmax):
        _check_matrix_dim(pi.V, d)
        W = np.zeros((n, K))
        W[np.arange(n), np.argmax(np.einsum("bki,ij,bkj->bk", Xs, pi.V, Xs), axis=1)] = 1.0
        return W
    if isinstance(pi, Softmax):
        _check_matrix_dim(pi.M, d)
        return softmax_weights_rows(np.einsum("bki,ij,bkj->bk", Xs, pi.M, Xs), pi.alpha)
    if isinstance(pi, Mixed):
        W = np.zeros((n, K))
        for weight, sub in pi.components:
            if weight > 0 and not isinstance(sub, Softmax):
                W += weight * policy_distributions(sub, Xs)
        for alpha, weights, mats in _softmax_groups(pi):
            if mats.shape[1:] != (d, d):
                raise ValueError(f"policy matrix of shape {mats.shape[1:]} does not match context dimension {d}")
            scores = np.einsum("bki,mij,bkj->mbk", Xs, mats, Xs)
            rows = softmax_weights_rows(scores.reshape(-1, K), alpha).reshape(scores.shape)
            W += np.einsum("m,mbk->bk", weights, rows)
        return W
    raise TypeError(f"unknown sample policy {type(pi).__name__}")


def draw_from_weight_rows(W: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise ``draw_from_weights`` given one uniform variate per row."""
    cdf = np.cumsum(W, axis=1)
    idx = np.sum(cdf <= (u * cdf[:, -1])[:, None], axis=1)
    return np.minimum(idx, W.shape[1] - 1)


def policy_info_matrix(pi: SamplePolicy, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return info_matrix(X, policy_distribution(pi, X))


def _stack(samples: Sequence[np.ndarray]):
    sizes = np.array([s.shape[0] for s in samples])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return np.vstack(samples), offsets


def _max_variances(samples, pi, lam: float) -> np.ndarray:
    if not samples:
        raise ValueError("samples must be nonempty")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    samples = [np.asarray(s, dtype=float) for s in samples]
    Q = sum(policy_info_matrix(pi, s) for s in samples) / len(samples)
    allx, offsets = _stack(samples)
    var = quad_forms_from_factor(chol_factor(Q, lam), allx)
    return np.maximum.reduceat(var, offsets)


def empirical_variation(samples: Sequence[np.ndarray], pi: SamplePolicy, lam: float) -> float:
    """Mean over samples of the max quadratic form against ``lam I + Q_hat``."""
    return float(np.mean(_max_variances(samples, pi, lam)))


def empirical_deviation(samples: Sequence[np.ndarray], pi: SamplePolicy, lam: float) -> float:
    """Like ``empirical_variation`` with the square root inside the mean."""
    return float(np.mean(np.sqrt(_max_variances(samples, pi, lam))))
