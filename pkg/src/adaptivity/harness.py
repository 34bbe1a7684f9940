"""Experiment configuration, seeded execution, traces and summaries."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .bandits import (
    DesignConfig,
    LearnerRecord,
    run_batch_elimination,
    run_batch_linucb_dg,
    run_sup_linucb,
)
from .envgen import (
    STREAM_LEARNER,
    CounterexampleD6,
    Environment,
    FiniteMultiset,
    LowerBoundSpec,
    UniformSphere,
    lower_bound_instance,
    make_rng,
    random_signs,
    stochastic_env,
)

SCHEMA_VERSION = 1
ALGOS = ("BatchLinUCB", "BatchLinUCB-KW", "BatchLinUCB-DG", "SupLinUCB")
TRACE_HEADER = ("t", "arm", "regret_step", "regret_cum", "batch", "switches", "seed", "algo")
WORKERS_ENV = "ADAPTIVITY_WORKERS"


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class RunFailure(RuntimeError):
    def __init__(self, seed: int, cause: BaseException):
        self.seed = seed
        super().__init__(f"seed {seed}: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class ExperimentConfig:
    algo: str
    env: dict
    d: int
    K: int
    T: int
    delta: float
    seeds: tuple
    C: float = 2.0
    block_multiplier: float = 1.0
    tol_factor: float = 2.0
    output: str | None = None
    alpha: float | None = None
    alpha0: float | None = None
    lam_reg: float | None = None
    lam_design: float | None = None

    def to_json(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        out["schema_version"] = SCHEMA_VERSION
        return out


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _get(obj: dict, key: str, path: str, kind, required: bool = True, default=None):
    if key not in obj or obj[key] is None:
        if required:
            raise ConfigError(f"{path}{key}", "missing required field")
        return default
    value = obj[key]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}{key}", f"expected an integer, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{path}{key}", f"expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{path}{key}", f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _check_schema(obj: dict, path: str = ""):
    version = obj.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}schema_version", f"unsupported version {version!r}")


def parse_config(obj: Any) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    _check_schema(obj)
    algo = _get(obj, "algo", "", str)
    if algo not in ALGOS:
        raise ConfigError("algo", f"must be one of {', '.join(ALGOS)}")
    env = _get(obj, "env", "", dict)
    d = _get(obj, "d", "", int)
    K = _get(obj, "K", "", int)
    T = _get(obj, "T", "", int)
    delta = _get(obj, "delta", "", float)
    seeds = _get(obj, "seeds", "", list)
    if d < 1:
        raise ConfigError("d", "must be positive")
    if K < 1:
        raise ConfigError("K", "must be positive")
    if T < 4:
        raise ConfigError("T", "must be at least 4")
    if algo == "BatchLinUCB-DG" and T < 16:
        raise ConfigError("T", "BatchLinUCB-DG needs T >= 16")
    if not 0 < delta < 1:
        raise ConfigError("delta", "must lie in (0, 1)")
    if not seeds:
        raise ConfigError("seeds", "must be a nonempty list")
    for i, s in enumerate(seeds):
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise ConfigError(f"seeds[{i}]", f"expected a nonnegative integer, got {s!r}")
    C = _get(obj, "C", "", float, required=algo == "SupLinUCB", default=2.0)
    if C < 2:
        raise ConfigError("C", "must be at least 2")
    design = _get(obj, "design", "", dict, required=False, default={})
    bm = _get(design, "block_multiplier", "design.", float, required=False, default=1.0)
    tol = _get(design, "tol_factor", "design.", float, required=False, default=2.0)
    if bm <= 0:
        raise ConfigError("design.block_multiplier", "must be positive")
    if tol < 1:
        raise ConfigError("design.tol_factor", "must be at least 1")
    over = _get(obj, "overrides", "", dict, required=False, default={})
    known = {"alpha", "alpha0", "lam_reg", "lam_design"}
    for key in over:
        if key not in known:
            raise ConfigError(f"overrides.{key}", "unknown override")
    vals = {k: _get(over, k, "overrides.", float, required=False) for k in known}
    for k, v in vals.items():
        if v is not None and v <= 0:
            raise ConfigError(f"overrides.{k}", "must be positive")
    output = _get(obj, "output", "", str, required=False)
    _validate_env(env, d, K, T)
    return ExperimentConfig(algo, env, d, K, T, delta, tuple(seeds), C, bm, tol, output, **vals)


def _validate_env(env: dict, d: int, K: int, T: int):
    kind = _get(env, "kind", "env.", str)
    if kind == "UniformSphere":
        return
    if kind == "CounterexampleD6":
        gamma = _get(env, "gamma", "env.", float)
        if gamma < d:
            raise ConfigError("env.gamma", "must be at least d")
        if d < 2:
            raise ConfigError("d", "CounterexampleD6 needs d >= 2")
        return
    if kind == "FiniteMultiset":
        sets = _get(env, "sets", "env.", list)
        probs = _get(env, "probs", "env.", list)
        if not sets:
            raise ConfigError("env.sets", "must be nonempty")
        if len(probs) != len(sets):
            raise ConfigError("env.probs", "needs one probability per set")
        for i, s in enumerate(sets):
            arr = np.asarray(s, dtype=float) if isinstance(s, list) else None
            if arr is None or arr.ndim != 2 or arr.shape[1] != d or arr.shape[0] < 1:
                raise ConfigError(f"env.sets[{i}]", f"expected a nonempty list of {d}-vectors")
            if np.any(np.linalg.norm(arr, axis=1) > 1 + 1e-12):
                raise ConfigError(f"env.sets[{i}]", "vector norm exceeds 1")
        p = np.asarray(probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-10:
            raise ConfigError("env.probs", "must be nonnegative and sum to 1")
        return
    if kind == "LowerBound":
        M = _get(env, "M", "env.", int)
        if d % 2 or (8 * M) % d:
            raise ConfigError("env.M", "needs even d and 8M divisible by d")
        if T % (d // 2):
            raise ConfigError("T", "must be divisible by d/2")
        if K != 2:
            raise ConfigError("K", "lower-bound instances have K = 2")
        if "u" in env:
            L = 8 * M // d
            u = env["u"]
            if not isinstance(u, list) or len(u) != d // 2 or any(not isinstance(b, list) or len(b) != L for b in u):
                raise ConfigError("env.u", f"expected {d // 2} sign lists of length {L}")
        return
    raise ConfigError("env.kind", f"unknown environment kind {kind!r}")


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return parse_config(obj)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def build_env(cfg: ExperimentConfig, seed: int) -> Environment:
    env = cfg.env
    kind = env["kind"]
    if kind == "LowerBound":
        M = int(env["M"])
        u = env.get("u")
        u = tuple(tuple(int(s) for s in b) for b in u) if u else random_signs(cfg.d, M, seed)
        return lower_bound_instance(LowerBoundSpec(cfg.d, cfg.T, M, u), noise_seed=seed)
    if kind == "UniformSphere":
        spec = UniformSphere()
    elif kind == "CounterexampleD6":
        spec = CounterexampleD6(float(env["gamma"]))
    else:
        spec = FiniteMultiset(tuple(np.asarray(s, dtype=float) for s in env["sets"]), np.asarray(env["probs"]))
    return stochastic_env(spec, cfg.d, cfg.K, cfg.T, seed, seed, seed)


def run_single(cfg: ExperimentConfig, seed: int) -> LearnerRecord:
    env = build_env(cfg, seed)
    rng = make_rng(seed, STREAM_LEARNER)
    design = DesignConfig(cfg.block_multiplier, cfg.tol_factor)
    if cfg.algo in ("BatchLinUCB", "BatchLinUCB-KW"):
        mode = "uniform" if cfg.algo == "BatchLinUCB" else "goptimal"
        return run_batch_elimination(env, cfg.T, cfg.delta, mode, rng, cfg.alpha, cfg.lam_reg,
                                     design.g_policy())
    if cfg.algo == "BatchLinUCB-DG":
        return run_batch_linucb_dg(env, cfg.T, cfg.delta, rng, design, cfg.alpha, cfg.lam_reg, cfg.lam_design)
    return run_sup_linucb(env, cfg.T, cfg.delta, cfg.C, rng, cfg.alpha, cfg.alpha0)


def _run_cell(args) -> tuple[int, LearnerRecord | None, str | None]:
    cfg, seed = args
    try:
        return seed, run_single(cfg, seed), None
    except Exception as exc:  # reported with the seed by the collector
        return seed, None, f"{type(exc).__name__}: {exc}"


def worker_count(n_tasks: int) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(WORKERS_ENV, f"expected an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError(WORKERS_ENV, "must be at least 1")
    else:
        n = os.cpu_count() or 1
    return max(1, min(n, n_tasks))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    summary: dict
    trace_path: Path | None = None
    summary_path: Path | None = None


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, write: bool = True) -> ExperimentResult:
    """One learner run per seed; traces and summary written by this process."""
    started = time.perf_counter()
    tasks = [(cfg, s) for s in cfg.seeds]
    workers = workers or worker_count(len(tasks))
    if workers == 1:
        results = [_run_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, tasks))
    for seed, _, err in results:
        if err is not None:
            raise RunFailure(seed, RuntimeError(err))
    records = [rec for _, rec, _ in results]
    wall = time.perf_counter() - started
    summary = summarize_records(records, cfg.seeds, cfg.algo, wall, cfg.to_json())
    out = ExperimentResult(cfg, records, summary)
    if write and cfg.output:
        root = Path(cfg.output)
        root.mkdir(parents=True, exist_ok=True)
        out.trace_path = root / "trace.csv"
        out.summary_path = root / "summary.json"
        write_trace_csv(out.trace_path, records, cfg.seeds)
        out.summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def trace_rows(rec: LearnerRecord, seed: int) -> Iterable[tuple]:
    cum = np.cumsum(rec.regret)
    for i in range(rec.T):
        yield (i + 1, int(rec.arms[i]), repr(float(rec.regret[i])), repr(float(cum[i])),
               int(rec.batch[i]), int(rec.switches[i]), seed, rec.algo)


def write_trace_csv(path: str | os.PathLike, records: Sequence[LearnerRecord], seeds: Sequence[int]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for rec, seed in zip(records, seeds):
        writer.writerows(trace_rows(rec, seed))
    Path(path).write_text(buf.getvalue())


def _sample_std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def summarize_records(records, seeds, algo: str, wall_time: float, config: dict | None = None) -> dict:
    finals = np.array([r.total_regret for r in records])
    switches = np.array([r.switches_used for r in records], dtype=float)
    batches = np.array([r.batches_used for r in records], dtype=float)
    return {
        "schema_version": SCHEMA_VERSION,
        "algo": algo,
        "n": len(records),
        "regret_mean": float(np.mean(finals)),
        "regret_std": _sample_std(finals),
        "switches_mean": float(np.mean(switches)),
        "batches_mean": float(np.mean(batches)),
        "wall_time_s": wall_time,
        "per_seed": [
            {"seed": int(s), "regret": float(f), "switches": int(w), "batches": int(b)}
            for s, f, w, b in zip(seeds, finals, switches, batches)
        ],
        "config": config or {},
    }


def read_trace_csv(path: str | os.PathLike) -> dict[tuple[str, int], dict]:
    """Per ``(algo, seed)`` totals from a trace file."""
    runs: dict[tuple[str, int], dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_HEADER:
            raise ConfigError(str(path), "trace header does not match the schema")
        for row in reader:
            key = (row["algo"], int(row["seed"]))
            run = runs.setdefault(key, {"steps": 0, "regret": 0.0, "switches": 0, "batches": 0})
            run["steps"] += 1
            run["regret"] = float(row["regret_cum"])
            run["switches"] = int(row["switches"])
            run["batches"] = max(run["batches"], int(row["batch"]))
    return runs


def summarize_traces(paths: Sequence[str | os.PathLike]) -> list[dict]:
    """Summaries per algorithm over every run found in the given traces."""
    by_algo: dict[str, list[tuple[int, dict]]] = {}
    for p in paths:
        for (algo, seed), run in read_trace_csv(p).items():
            by_algo.setdefault(algo, []).append((seed, run))
    out = []
    for algo in sorted(by_algo):
        runs = sorted(by_algo[algo], key=lambda x: x[0])
        finals = np.array([r["regret"] for _, r in runs])
        out.append({
            "schema_version": SCHEMA_VERSION,
            "algo": algo,
            "n": len(runs),
            "regret_mean": float(np.mean(finals)),
            "regret_std": _sample_std(finals),
            "switches_mean": float(np.mean([r["switches"] for _, r in runs])),
            "batches_mean": float(np.mean([r["batches"] for _, r in runs])),
            "seeds": [s for s, _ in runs],
        })
    return out
