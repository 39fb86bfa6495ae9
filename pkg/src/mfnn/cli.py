"""Command-line experiment runner.

    mfnn run <config> [--out DIR] [--seed N]

The config is a TOML or JSON file with a ``kind`` of ``static_fit``,
``pde_solve`` or ``property_suite``; see the README for the keys each kind
accepts. Every run writes ``manifest.json`` plus CSV files (UTF-8, LF line
endings, header row, floats with 17 significant digits) into the output
directory.

Exit status: 0 on success, 2 for an invalid config, 3 when training
diverges (partial artifacts are kept and the manifest says so).
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import DivergenceError, save_params
from .dynamics import (
    PdeProblem,
    SolverConfig,
    evaluate_pde_mse,
    residual_order,
    solve,
)
from .measures import make_grid, random_bin_densities, sample_batch, estimate_bins_batch, moments_batch
from .networks import save_net
from .targets import eval_target, make_test_distribution
from .training import TrainConfig, generalization_error, train

log = logging.getLogger("mfnn")

KINDS = ("static_fit", "pde_solve", "property_suite")

# accepted spellings for a few solver keys
_ALIASES = {"N_T": "n_steps", "M_hat": "batch_size", "N": "n_samples", "target": "case"}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config parsing


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {path.name}: {exc}") from exc


def _section(cfg: dict, name: str, aliases: bool = False) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return {(_ALIASES.get(k, k) if aliases else k): v for k, v in sec.items()}


def _build(cls, values: dict, what: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _check_keys(cfg: dict, allowed: set):
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")


def _tests(ev: dict) -> list[int]:
    tests = ev.get("tests", [1, 2, 3])
    if not all(t in (1, 2, 3) for t in tests):
        raise ConfigError("evaluate.tests must list test laws among 1, 2, 3")
    return list(tests)


# --------------------------------------------------------------------------
# writers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_manifest(out: Path, manifest: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# kinds


def _write_static_histories(out: Path, result, artifacts: list):
    write_csv(out / "loss_history.csv", ["iteration", "loss"], result.loss_history)
    write_csv(out / "test_history.csv", ["iteration", "heldout_mse"], result.test_history)
    artifacts += ["loss_history.csv", "test_history.csv"]


def _run_static(cfg: dict, seed: int, out: Path, artifacts: list):
    _check_keys(cfg, {"kind", "seed", "train", "evaluate"})
    tr = _section(cfg, "train", aliases=True)
    tr["seed"] = seed
    if "grid" in tr:
        g = tr["grid"]
        try:
            tr["grid"] = make_grid(g["lo"], g["hi"], g["K"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train.grid: {exc}") from exc
    config = _build(TrainConfig, tr, "train")
    if str(config.case).upper() not in "ABCDE" or len(str(config.case)) != 1:
        raise ConfigError(f"unknown target case {config.case!r}")
    ev = _section(cfg, "evaluate")
    tests = _tests(ev)
    n_eval = int(ev.get("N", config.N_test or config.n_samples))
    variant = ev.get("test2_variant", "bimodal")

    try:
        result = train(config)
    except DivergenceError as err:
        _write_static_histories(out, err.partial, artifacts)
        raise
    _write_static_histories(out, result, artifacts)
    rows = []
    if config.iterations > 0:
        for k, which in enumerate(tests):
            err = generalization_error(result.net, config.case, which, n_eval, seed + 1000 + k, variant)
            rows.append((which, 0.0, err))
    write_csv(out / "test_mse.csv", ["test_id", "t_i", "mse"], rows)
    save_net(out / "checkpoints" / "net", result.net)
    artifacts += ["test_mse.csv", "checkpoints/net.json", "checkpoints/net.f64"]
    return config.to_dict()


def _save_solution(out: Path, sol, artifacts: list):
    for name, (model, theta) in sol.models.items():
        label = f"step{name:03d}" if isinstance(name, int) else str(name)
        for k, (net, th, heads) in enumerate(zip(model.nets, model.split(theta), model.heads)):
            stem = out / "checkpoints" / f"{label}_net{k}"
            save_params(stem, {**net.header(), "heads": list(heads), "time_input": model.time_input}, th)
            artifacts += [f"checkpoints/{stem.name}.json", f"checkpoints/{stem.name}.f64"]


def _run_pde(cfg: dict, seed: int, out: Path, artifacts: list):
    _check_keys(cfg, {"kind", "seed", "problem", "solver", "evaluate"})
    pr = _section(cfg, "problem", aliases=True)
    if "grid" in pr and not isinstance(pr["grid"], dict):
        raise ConfigError("problem.grid must be a table {lo, hi, K}")
    problem = _build(PdeProblem, pr, "problem")
    sv = _section(cfg, "solver", aliases=True)
    if "n_steps" in sv:
        raise ConfigError("n_steps belongs to [problem]")
    sv["seed"] = seed
    config = _build(SolverConfig, sv, "solver")
    ev = _section(cfg, "evaluate")
    tests = _tests(ev)
    times = [int(i) for i in ev.get("times", [0])]
    if any(not 0 <= i <= problem.n_steps for i in times):
        raise ConfigError(f"evaluate.times must lie in 0..{problem.n_steps}")
    n_eval = int(ev.get("N", 100000))
    variant = ev.get("test2_variant", "bimodal")

    try:
        sol = solve(problem, config)
    except DivergenceError as err:
        write_csv(out / "loss_history.csv", ["time_index", "iteration", "loss"], err.partial.loss_history)
        artifacts.append("loss_history.csv")
        raise
    write_csv(out / "loss_history.csv", ["time_index", "iteration", "loss"], sol.loss_history)
    _save_solution(out, sol, artifacts)
    rows = []
    for k, which in enumerate(tests):
        for t, mse in evaluate_pde_mse(sol, which, times, n_eval, seed + 1000 + k, variant):
            rows.append((which, t, mse))
    write_csv(out / "test_mse.csv", ["test_id", "t_i", "mse"], rows)
    artifacts += ["loss_history.csv", "test_mse.csv"]
    return {"problem": problem.to_dict(), "solver": config.to_dict()}


def _run_properties(cfg: dict, seed: int, out: Path, artifacts: list):
    """Fast self-checks of the numerical building blocks."""
    _check_keys(cfg, {"kind", "seed", "suite"})
    opts = _section(cfg, "suite")
    n = int(opts.get("N", 100000))
    rng = np.random.default_rng(seed)
    grid = make_grid(-1.3, 1.3, 100)
    rows = []

    P = random_bin_densities(grid, 20, rng)
    norm = float(np.max(np.abs(P.sum(axis=1) * grid.h - 1.0)))
    rows.append(("normalization", norm, 1e-12, norm <= 1e-12))

    X = sample_batch(grid, P[:1], n, rng)
    est = estimate_bins_batch(grid, X)[0]
    worst = float(np.max(np.abs(est - P[0]) / np.sqrt(P[0] / (n * grid.h))))
    rows.append(("round_trip_max_z", worst, 5.0, worst <= 5.0))

    mean, second = moments_batch(grid, P[:1])
    z = abs(X.mean() - mean[0]) / (X.std() / np.sqrt(n))
    rows.append(("moment_mean_z", float(z), 4.0, z <= 4.0))

    unif = make_grid(0.0, 1.0, 4)
    from .measures import BinDensity
    bd = BinDensity(unif, np.ones(4))
    for name, case, x, want in (("target_A", "A", 0.0, 2 / 3), ("target_B", "B", 0.5, 1 / 12),
                                ("target_C", "C", 0.0, 7 / 6), ("target_D", "D", 0.5, 0.25),
                                ("target_E", "E", 0.5, 0.5)):
        err = abs(eval_target(case, x, bd) - want)
        rows.append((name, err, 1e-12, err <= 1e-12))
    err = abs(eval_target("A", 0.0, make_test_distribution(1)) - 0.305)
    rows.append(("target_A_test1", err, 1e-12, err <= 1e-12))

    X0 = make_test_distribution(1).sample(n, rng)
    _, order = residual_order(PdeProblem(), X0, seed=seed)
    rows.append(("martingale_residual_order", order, 0.8, order >= 0.8))

    write_csv(out / "property_results.csv", ["property", "value", "threshold", "passed"],
              [(a, b, c, str(bool(d)).lower()) for a, b, c, d in rows])
    artifacts.append("property_results.csv")
    return {"suite": opts}


_RUNNERS = {"static_fit": _run_static, "pde_solve": _run_pde, "property_suite": _run_properties}


# --------------------------------------------------------------------------
# entry points


def run(config_path, out=None, seed=None) -> int:
    """Run one experiment; returns the process exit status."""
    try:
        cfg = load_config(config_path)
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a table/object")
        kind = cfg.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
        seed = int(cfg.get("seed", 0) if seed is None else seed)
        if seed < 0:
            raise ConfigError("seed must be non-negative")
    except ConfigError as exc:
        print(f"mfnn: invalid config: {exc}", file=sys.stderr)
        return 2

    out = Path(out) if out is not None else Path("runs") / Path(config_path).stem
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": kind,
        "seed": seed,
        "config_file": str(config_path),
        "config": cfg,
        "versions": {"mfnn": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    artifacts: list = []
    start = time.perf_counter()
    status, code = "ok", 0
    try:
        manifest["resolved"] = _RUNNERS[kind](cfg, seed, out, artifacts)
    except ConfigError as exc:
        print(f"mfnn: invalid config: {exc}", file=sys.stderr)
        status, code = "invalid_config", 2
    except DivergenceError as exc:
        print(f"mfnn: training diverged: {exc}", file=sys.stderr)
        status, code = "diverged", 3
        manifest["error"] = str(exc)
    manifest["status"] = status
    manifest["partial"] = code == 3
    manifest["artifacts"] = artifacts
    manifest["wall_time_s"] = time.perf_counter() - start
    _write_manifest(out, manifest)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mfnn", description="Mean-field neural network experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a TOML or JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory (default runs/<config stem>)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
