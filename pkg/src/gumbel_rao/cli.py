"""``grk`` command line: check, bench, varmap, decompose, train.

Configuration is a JSON object.  Top-level keys are shared defaults; a
section named after the command overrides them for that command; flags
override both.  ``GRK_SEED`` in the environment overrides the config seed
(an explicit ``--seed`` still wins).

Numeric output uses 17 significant digits so that CSV files round-trip
64-bit floats exactly.  All work is keyed by deterministic stream ids and
written in a fixed order, so ``--workers`` never changes the bytes written.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checks
from .estimators import constant_objective, parse_estimator, random_table_objective
from .experiments import (
    DivergenceError,
    QpSpec,
    median_iterations,
    qp_objective_spec,
    simplex_grid,
    solve_qp,
    train_qp,
    variance_map,
)
from .gumbel_core import RngStream, check_logits
from .oracle import CapacityError, decompose_variance, estimator_fn, exact_gradient, measure_stats

log = logging.getLogger("grk")

COMMANDS = ("check", "bench", "varmap", "decompose", "train")

COMMON = {
    "seed": 0,
    "n": 3,
    "theta": None,
    "tau": [0.1, 0.5, 1.0],
    "k": [1, 10, 100],
    "b": [1],
    "replicates": 10_000,
    "objective": "qp",
    "q": None,
    "c": None,
    "workers": 1,
    "out": None,
}

SECTIONS = {
    "check": dict(checks.DEFAULTS),
    "bench": {"estimators": ["reinforce", "st", "stgs", "grmc"]},
    "varmap": {"estimators": ["stgs", "grmc1000"], "resolution": 40, "margin": 1e-3},
    "decompose": {"tau": [0.5], "k": [1, 10, 100], "b": [1, 2, 4, 8], "replicates": 100_000, "k_ref": 1_000_000},
    "train": {
        "estimators": ["stgs", "grmc1000"],
        "tau": [0.1],
        "lr": 0.1,
        "iters": 5000,
        "seeds": 20,
        "threshold_gap": 0.05,
    },
}

DEFAULT_THETA = (0.3, -0.7, 1.2)


class UsageError(ValueError):
    pass


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def write_csv(rows, header, path) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    text = buf.getvalue()
    if path:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


def dump_json(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


# --------------------------------------------------------------------------
# configuration


def _floats(text):
    return [float(t) for t in text.split(",") if t]


def _ints(text):
    return [int(t) for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grk", description="Gumbel-Rao gradient estimator experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output path (stdout if omitted)")
    parser.add_argument("--tau", type=_floats, help="comma-separated temperatures")
    parser.add_argument("--k", type=_ints, help="comma-separated Monte Carlo sample counts")
    parser.add_argument("--b", type=_ints, help="comma-separated minibatch sizes")
    parser.add_argument("--n", type=int, help="arity")
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--estimators", type=lambda s: [t for t in s.split(",") if t])
    parser.add_argument("--resolution", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--iters", type=int)
    parser.add_argument("--seeds", type=int)
    parser.add_argument("--objective", choices=["qp", "random", "constant"])
    parser.add_argument("--set", action="append", default=[], metavar="KEY=JSON", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
    cfg = dict(COMMON)
    cfg.update(SECTIONS[args.command])
    cfg.update({k: v for k, v in file_cfg.items() if k not in COMMANDS})
    cfg.update(file_cfg.get(args.command, {}))
    if "GRK_SEED" in environ:
        cfg["seed"] = int(environ["GRK_SEED"])
    for key in ("seed", "out", "tau", "k", "b", "n", "replicates", "workers", "estimators", "resolution", "lr", "iters", "seeds", "objective"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    for item in args.set:
        key, _, raw = item.partition("=")
        if not key or not raw:
            raise UsageError(f"--set expects KEY=JSON, got {item!r}")
        cfg[key] = json.loads(raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    for tau in cfg["tau"]:
        if not float(tau) > 0:
            raise UsageError(f"temperatures must be positive, got {tau}")
    for key in ("k", "b"):
        if any(int(v) < 1 for v in cfg[key]):
            raise UsageError(f"all {key} values must be >= 1")
    for key in ("replicates", "workers", "n", "seeds", "iters", "resolution"):
        if key in cfg and int(cfg[key]) < 1:
            raise UsageError(f"{key} must be >= 1")
    if "lr" in cfg and float(cfg["lr"]) < 0:
        raise UsageError("lr must be non-negative")
    for name in cfg.get("estimators", []):
        try:
            parse_estimator(name)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    out = cfg.get("out")
    if out and not os.access(Path(out).resolve().parent, os.W_OK):
        raise UsageError(f"output directory for {out} is not writable")


def qp_spec(cfg) -> QpSpec:
    n = int(cfg["n"])
    spec = QpSpec.default(n)
    if cfg.get("q") is not None or cfg.get("c") is not None:
        spec = QpSpec(
            np.asarray(cfg["q"]) if cfg.get("q") is not None else spec.q,
            np.asarray(cfg["c"]) if cfg.get("c") is not None else spec.c,
        )
    return spec


def problem(cfg):
    """``(theta, objective)`` for bench and decompose."""
    n = int(cfg["n"])
    if cfg.get("theta") is not None:
        theta = check_logits(cfg["theta"])
    elif n == 3:
        theta = np.array(DEFAULT_THETA)
    else:
        theta = np.linspace(1.0, -1.0, n)
    if theta.size != n:
        raise UsageError("theta length does not match n")
    kind = cfg["objective"]
    if kind == "qp":
        obj = qp_objective_spec(theta, qp_spec(cfg))
    elif kind == "random":
        obj = random_table_objective(RngStream(int(cfg["seed"]), 2**32), n)
    elif kind == "constant":
        obj = constant_objective(n, 1.0)
    else:
        raise UsageError(f"unknown objective {kind!r}")
    return theta, obj


# --------------------------------------------------------------------------
# commands


def cmd_check(cfg) -> tuple[int, str]:
    keys = set(checks.DEFAULTS)
    results = checks.run_checks({k: v for k, v in cfg.items() if k in keys}, seed=int(cfg["seed"]))
    report = {
        "version": 1,
        "command": "check",
        "passed": all(r.passed for r in results),
        "failed": [r.name for r in results if not r.passed],
        "checks": [r.as_dict() for r in results],
    }
    text = dump_json(report, cfg.get("out"))
    for r in results:
        if not r.passed:
            print(f"grk: check failed: {r.name} (value {r.value:g}, tolerance {r.tolerance:g})", file=sys.stderr)
    return (0 if report["passed"] else 1), text


def _bench_task(args):
    # the problem is rebuilt in the worker; objectives hold closures and do not pickle
    cfg, name, tau, b, stream = args
    theta, obj = problem(cfg)
    reference = exact_gradient(theta, obj)
    return measure_stats(estimator_fn(name, theta, obj, tau, b), reference, int(cfg["replicates"]), stream)


def bench_tasks(cfg) -> list[tuple]:
    """``(name, tau, K, B, stream)`` in output order.

    Estimators at the same ``(tau, B)`` share a stream, so their outcome
    sequences are paired.
    """
    base = RngStream(int(cfg["seed"]), 1)
    tasks = []
    for ti, tau in enumerate(cfg["tau"]):
        for bi, b in enumerate(cfg["b"]):
            stream = base.split(ti, bi)
            for est in cfg["estimators"]:
                kind, k0 = parse_estimator(est)
                ks = cfg["k"] if est == "grmc" else [k0]
                for k in ks:
                    name = f"grmc{k}" if kind == "grmc" else kind
                    tasks.append((name, float(tau), int(k), int(b), stream))
    return tasks


def cmd_bench(cfg) -> tuple[int, str]:
    theta, _ = problem(cfg)
    n = theta.size
    tasks = bench_tasks(cfg)
    plain = {k: v for k, v in cfg.items()}
    results = _map(_bench_task, [(plain, name, tau, b, stream) for name, tau, _, b, stream in tasks], int(cfg["workers"]))
    header = ["estimator", "tau", "K", "B", "n", "replicates"] + [f"mean_{i}" for i in range(n)]
    header += ["cov_trace", "bias_norm", "mse", "ci_radius"]
    rows = []
    for (name, tau, k, b, _), st in zip(tasks, results):
        kind, _ = parse_estimator(name)
        rows.append(
            [kind, tau, k, b, n, st.n_replicates, *st.mean.tolist(), st.cov_trace, st.bias_norm, st.mse, st.bias_radius]
        )
    return 0, write_csv(rows, header, cfg.get("out"))


def _map(fn, jobs, workers):
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, jobs, chunksize=1))
    return [fn(j) for j in jobs]


def cmd_varmap(cfg) -> tuple[int, str]:
    spec = qp_spec(cfg)
    grid = simplex_grid(int(cfg["resolution"]), float(cfg["margin"]), spec.n)
    rows = variance_map(
        spec,
        [float(t) for t in cfg["tau"]],
        cfg["estimators"],
        grid,
        int(cfg["replicates"]),
        RngStream(int(cfg["seed"]), 2),
        workers=int(cfg["workers"]),
    )
    header = [f"p{i}" for i in range(spec.n)] + ["tau", "estimator", "log10_trace", "ci_radius"]
    return 0, write_csv(rows, header, cfg.get("out"))


def cmd_decompose(cfg) -> tuple[int, str]:
    theta, obj = problem(cfg)
    tau = float(cfg["tau"][0])
    report = decompose_variance(
        theta,
        tau,
        obj,
        [int(k) for k in cfg["k"]],
        [int(b) for b in cfg["b"]],
        int(cfg["replicates"]),
        RngStream(int(cfg["seed"]), 3),
        k_ref=int(cfg["k_ref"]),
    )
    out = report.as_dict()
    out.update({"theta": theta.tolist(), "tau": tau, "replicates": int(cfg["replicates"]), "objective": cfg["objective"]})
    return 0, dump_json(out, cfg.get("out"))


def cmd_train(cfg) -> tuple[int, str]:
    spec = qp_spec(cfg)
    _, v_star = solve_qp(spec)
    threshold = v_star + float(cfg["threshold_gap"])
    seeds = range(int(cfg["seed"]), int(cfg["seed"]) + int(cfg["seeds"]))
    n = spec.n
    header = ["estimator", "tau", "lr", "seed", "iteration", "exact_objective"] + [f"theta_{i}" for i in range(n)]
    rows = []
    summary = {"version": 1, "v_star": v_star, "threshold": threshold, "lr": float(cfg["lr"]), "runs": []}
    status = 0
    for tau in cfg["tau"]:
        for name in cfg["estimators"]:
            hits = []
            for seed in seeds:
                try:
                    run = train_qp(spec, name, float(tau), float(cfg["lr"]), int(cfg["iters"]), seed)
                except DivergenceError as exc:
                    run, status = exc.run, 1
                    log.error("%s tau=%s seed=%d diverged: %s", name, tau, seed, exc)
                for it, (val, th) in enumerate(zip(run.objective, run.thetas)):
                    rows.append([name, float(tau), float(cfg["lr"]), seed, it, val, *th.tolist()])
                hits.append(run.iterations_to(threshold))
            summary["runs"].append(
                {
                    "estimator": name,
                    "tau": float(tau),
                    "per_seed": dict(zip((str(s) for s in seeds), hits)),
                    "median_iterations_to_threshold": _finite_or_none(median_iterations(hits)),
                }
            )
    out = cfg.get("out")
    csv_text = write_csv(rows, header, out)
    summary_text = dump_json(summary, str(Path(out).with_suffix(".summary.json")) if out else None)
    return status, summary_text if out else csv_text + summary_text


def _finite_or_none(x):
    return float(x) if np.isfinite(x) else None


HANDLERS = {
    "check": cmd_check,
    "bench": cmd_bench,
    "varmap": cmd_varmap,
    "decompose": cmd_decompose,
    "train": cmd_train,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (UsageError, ValueError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"grk: error: {exc}", file=sys.stderr)
        return 2
    try:
        status, text = HANDLERS[args.command](cfg)
    except CapacityError as exc:
        print(f"grk: {exc}", file=sys.stderr)
        return 1
    if not cfg.get("out") or args.command == "train":
        sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
