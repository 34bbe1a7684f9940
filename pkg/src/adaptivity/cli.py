"""Command line entry point: ``run``, ``design``, ``lbgen`` and ``summarize``."""

from __future__ import annotations

import argparse
import glob
import json
import sys
from pathlib import Path

import numpy as np

from .dist_design import Flavor, build_mixed_design, core_learning_full
from .envgen import (
    LowerBoundSpec,
    NormViolation,
    lower_bound_diagnostics,
    lower_bound_parts,
    random_signs,
)
from .harness import SCHEMA_VERSION, ConfigError, _check_schema, _get, load_config, run_experiment, summarize_traces
from .optimal_design import GOptimal, design_value, g_optimal_design

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "expected a JSON object")
    _check_schema(obj)
    return obj


def _emit(obj: dict, out: str | None):
    text = json.dumps(obj, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_sets(obj: dict) -> list[np.ndarray]:
    sets = _get(obj, "sets", "", list)
    if not sets:
        raise ConfigError("sets", "must be nonempty")
    out = []
    d = None
    for i, s in enumerate(sets):
        try:
            X = np.asarray(s, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"sets[{i}]", "expected a list of equal-length vectors") from None
        if X.ndim != 2 or X.shape[0] < 1:
            raise ConfigError(f"sets[{i}]", "expected a nonempty list of vectors")
        d = X.shape[1] if d is None else d
        if X.shape[1] != d:
            raise ConfigError(f"sets[{i}]", f"expected dimension {d}, got {X.shape[1]}")
        if np.any(np.linalg.norm(X, axis=1) > 1 + 1e-12):
            raise ConfigError(f"sets[{i}]", "vector norm exceeds 1")
        out.append(X)
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg = type(cfg)(**{**cfg.__dict__, "output": args.output})
    res = run_experiment(cfg)
    s = res.summary
    print(f"{s['algo']}: n={s['n']} regret={s['regret_mean']:.4f}±{s['regret_std']:.4f} "
          f"switches={s['switches_mean']:.1f} batches={s['batches_mean']:.1f}")
    if res.trace_path:
        print(f"trace: {res.trace_path}\nsummary: {res.summary_path}")
    return EXIT_OK


def cmd_design(args) -> int:
    sets = _load_sets(_read_json(args.contexts))
    g_policy = GOptimal(tol_factor=args.tol_factor)
    if args.flavor == "g":
        designs = []
        for X in sets:
            w = g_optimal_design(X, tol_factor=args.tol_factor)
            designs.append({"weights": w.tolist(), "max_variance": design_value(X, w)})
        _emit({"schema_version": SCHEMA_VERSION, "kind": "g_optimal", "designs": designs}, args.output)
        return EXIT_OK
    if args.lam is None:
        raise ConfigError("--lambda", f"required for flavor {args.flavor}")
    if not 0 < args.lam < 1:
        raise ConfigError("--lambda", "must lie in (0, 1)")
    if args.flavor == "core":
        out = core_learning_full(sets, args.lam, args.K, args.block_multiplier,
                                 enforce_range=False, g_policy=g_policy)
        core = out.core
        body = {
            "kind": "core_learning",
            "core": {
                "kept_indices": core.kept_indices.tolist(),
                "iterations": core.iterations,
                "pruned_per_iteration": list(core.pruned_per_iteration),
            },
            "design": out.params.to_json(),
        }
    else:
        flavor = Flavor(args.flavor)
        params = build_mixed_design(sets, args.lam, flavor, args.K, args.block_multiplier, g_policy)
        body = {"kind": f"mixed_{flavor.value}", "design": params.to_json(),
                "stage_lengths": list(params.stage_lengths)}
    body["g_mass"] = 0.5
    _emit({"schema_version": SCHEMA_VERSION, **body}, args.output)
    return EXIT_OK


def cmd_lbgen(args) -> int:
    obj = _read_json(args.spec)
    d = _get(obj, "d", "", int)
    T = _get(obj, "T", "", int)
    M = _get(obj, "M", "", int)
    if d < 2 or d % 2:
        raise ConfigError("d", "must be even and positive")
    if (8 * M) % d or M < 1:
        raise ConfigError("M", "8M/d must be a positive integer")
    if T % (d // 2):
        raise ConfigError("T", "must be divisible by d/2")
    L = 8 * M // d
    if "u" in obj:
        u = obj["u"]
        if not isinstance(u, list) or len(u) != d // 2:
            raise ConfigError("u", f"expected {d // 2} sign lists")
        for i, b in enumerate(u):
            if not isinstance(b, list) or len(b) != L or any(s not in (-1, 1) for s in b):
                raise ConfigError(f"u[{i}]", f"expected {L} entries from {{-1, 1}}")
        u = tuple(tuple(b) for b in u)
    else:
        u = random_signs(d, M, _get(obj, "seed", "", int, required=False, default=0))
    spec = LowerBoundSpec(d, T, M, u)
    diag = lower_bound_diagnostics(spec)
    if not args.allow_invalid and (diag["max_context_norm"] > 1 + 1e-12 or diag["theta_norm"] > 1 + 1e-12):
        raise NormViolation(
            f"context norm {diag['max_context_norm']:.6g}, hidden norm {diag['theta_norm']:.6g}; "
            "pass --allow-invalid to emit anyway"
        )
    theta, starts, sets, _ = lower_bound_parts(spec)
    ends = np.append(starts[1:] - 1, T)
    _emit({
        "schema_version": SCHEMA_VERSION,
        "d": d, "T": T, "M": M, "L": L,
        "label": "theorem" if spec.in_theorem_range else "illustrative",
        "u": [list(b) for b in u],
        "theta": theta.tolist(),
        "stages": [{"start": int(s), "end": int(e), "contexts": X.tolist()}
                   for s, e, X in zip(starts, ends, sets)],
        "diagnostics": diag,
    }, args.output)
    return EXIT_OK


def cmd_summarize(args) -> int:
    paths = sorted(glob.glob(args.pattern, recursive=True))
    if not paths:
        raise ConfigError("<glob>", f"no files match {args.pattern!r}")
    _emit({"schema_version": SCHEMA_VERSION, "files": paths, "summaries": summarize_traces(paths)}, args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptivity", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a seeded experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides the config)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("design", help="compute a design for a JSON list of context sets")
    p.add_argument("contexts")
    p.add_argument("--lambda", dest="lam", type=float, help="regularizer for the mixed designs")
    p.add_argument("--flavor", choices=("g", "argmax", "softmax", "core"), default=None,
                   help="g: per-set G-optimal weights (default without --lambda); "
                        "argmax/softmax: mixed design; core: core learning")
    p.add_argument("--K", type=int, default=None, help="arm count for the softmax temperature")
    p.add_argument("--block-multiplier", type=float, default=1.0)
    p.add_argument("--tol-factor", type=float, default=2.0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("lbgen", help="emit a lower-bound instance schedule")
    p.add_argument("spec")
    p.add_argument("--allow-invalid", action="store_true", help="emit even if norms exceed 1")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_lbgen)

    p = sub.add_parser("summarize", help="aggregate trace CSV files matching a glob")
    p.add_argument("pattern")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "design" and args.flavor is None:
        args.flavor = "g" if args.lam is None else "argmax"
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc.filename}: file not found", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
