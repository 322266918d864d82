"""Command-line front end.

Subcommands::

    aoifl analyze  --n N --k K --m M [--probs p0,...,pm] [--json PATH]
    aoifl optimize --n N --k K --m M [--out PATH] [--verify] [--resolution R]
    aoifl simulate [CONFIG] [--out-dir DIR] [--rounds R] [--seed S] [--jobs J]
    aoifl train    [CONFIG] [--out-dir DIR] [--task synthetic|mnist] [--model M]
                   [--target A] [--jobs J]

Exit codes: 0 success, 2 usage, 3 validation, 4 I/O, 5 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import ConfigError, load_run_config
from .data import (
    IDXConsistencyError,
    IDXFormatError,
    PartitionSpec,
    generate_synthetic,
    load_idx,
)
from .fl_sim import TrainConfig, run_federated
from .models import DivergenceError
from .policy_math import (
    MarkovPolicy,
    PolicyConfig,
    grid_search_optimum,
    optimal_policy,
    random_selection_stats,
    return_time_distribution,
    return_time_moments,
    stationary_distribution,
)
from .sched_sim import (
    POLICY_NAMES,
    InitMode,
    default_burn_in,
    format_table,
    make_policy,
    policy_seed,
    run_simulation,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_DIVERGENCE = 5

DATA_DIR_ENV = "AOIFL_DATA_DIR"
CONSTRAINT_TOL = 1e-9

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

logger = logging.getLogger("aoifl")


class UsageError(Exception):
    pass


class CLIValidationError(Exception):
    pass


def _dump_json(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _fraction_str(x) -> str:
    return str(x) if isinstance(x, Fraction) else repr(float(x))


def _parse_probs(text: str) -> tuple:
    out = []
    for token in text.split(","):
        token = token.strip()
        try:
            out.append(Fraction(token))
        except (ValueError, ZeroDivisionError):
            raise CLIValidationError(f"cannot parse probability {token!r}") from None
    return tuple(out)


def _policy_config(n, k, m) -> PolicyConfig:
    try:
        return PolicyConfig(n, k, m)
    except (TypeError, ValueError) as exc:
        raise CLIValidationError(f"invalid (n, k, m) = ({n}, {k}, {m}): {exc}") from None


# ---------------------------------------------------------------------- analyze

def cmd_analyze(args) -> int:
    config = _policy_config(args.n, args.k, args.m)
    if args.probs is None:
        result = optimal_policy(config, exact=True)
        policy, regime = result.policy, result.regime.value
    else:
        probs = _parse_probs(args.probs)
        if len(probs) != config.m + 1:
            raise CLIValidationError(
                f"--probs has {len(probs)} entries, expected m + 1 = {config.m + 1}"
            )
        try:
            policy = MarkovPolicy(probs)
        except ValueError as exc:
            raise CLIValidationError(f"invalid policy: {exc}") from None
        regime = None
    moments = return_time_moments(policy)
    residual = float(moments.mean - config.ratio)
    if abs(residual) > CONSTRAINT_TOL:
        raise CLIValidationError(
            f"constraint E[X] = n/k violated: E[X] = {float(moments.mean):.10g}, "
            f"n/k = {float(config.ratio):.10g}, residual = {residual:.10g}"
        )
    pi = stationary_distribution(policy).pi
    baseline = random_selection_stats(config, exact=True)
    report = {
        "n": config.n,
        "k": config.k,
        "m": config.m,
        "probs": [float(p) for p in policy.probs],
        "probs_exact": [_fraction_str(p) for p in policy.probs],
        "regime": regime,
        "stationary": [float(v) for v in pi],
        "expected_return_time": [float(v) for v in moments.e],
        "mean": float(moments.mean),
        "variance": float(moments.variance),
        "variance_exact": _fraction_str(moments.variance),
        "constraint_residual": residual,
        "baseline_mean": float(baseline.mean),
        "baseline_variance": float(baseline.variance),
    }
    lines = [
        f"n={config.n} k={config.k} m={config.m}" + (f"  regime={regime}" if regime else ""),
        f"{'state':>5} {'p':>12} {'pi':>12} {'E_i':>12}",
    ]
    for i, (p, q, e) in enumerate(zip(policy.probs, pi, moments.e)):
        lines.append(f"{i:>5} {float(p):>12.6f} {float(q):>12.6f} {float(e):>12.6f}")
    lines.append(f"E[X]   = {float(moments.mean):.6f}")
    lines.append(f"Var[X] = {float(moments.variance):.4f}  ({_fraction_str(moments.variance)})")
    lines.append(
        f"random selection: E[X] = {float(baseline.mean):.6f}, "
        f"Var[X] = {float(baseline.variance):.4f}"
    )
    print("\n".join(lines))
    if args.json:
        _dump_json(report, args.json)
    return EXIT_OK


# --------------------------------------------------------------------- optimize

def _verify(config: PolicyConfig, result, resolution: int) -> dict:
    policy = result.policy
    pmf = return_time_distribution(policy, max(config.m, 1) + 64)
    grid = grid_search_optimum(config, resolution)
    pmf_var = pmf.variance()
    checks = {
        "pmf_variance": _fraction_str(pmf_var),
        "pmf_matches": abs(float(pmf_var) - float(result.min_variance)) <= 1e-9,
        "grid_variance": grid.variance,
        "grid_probs": [float(p) for p in grid.policy.probs],
        "grid_not_better": grid.variance >= float(result.min_variance) - 1e-6,
        "grid_gap": grid.variance - float(result.min_variance),
    }
    return checks


def cmd_optimize(args) -> int:
    config = _policy_config(args.n, args.k, args.m)
    result = optimal_policy(config, exact=True)
    out = {
        "n": config.n,
        "k": config.k,
        "m": config.m,
        "probs": [float(p) for p in result.policy.probs],
        "probs_exact": [_fraction_str(p) for p in result.policy.probs],
        "min_variance": float(result.min_variance),
        "min_variance_exact": _fraction_str(result.min_variance),
        "regime": result.regime.value,
    }
    ok = True
    if args.verify:
        checks = _verify(config, result, args.resolution)
        out["verify"] = checks
        ok = checks["pmf_matches"] and checks["grid_not_better"]
    text = _dump_json(out)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    if not ok:
        print("verification failed", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


# ------------------------------------------------------------- run directories

def _commit_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _staging_dir(final: Path) -> Path:
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))


def _echo_config(cfg: dict, sections) -> dict:
    return {s: cfg[s] for s in sections}


# --------------------------------------------------------------------- simulate

def _simulate_one(args):
    config, name, rounds, burn_in, seed, init = args
    policy = make_policy(name, config)
    return name, run_simulation(config, policy, rounds, burn_in, policy_seed(seed, name), init)


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_simulate(args) -> int:
    overrides = {}
    if args.rounds is not None:
        overrides.setdefault("simulate", {})["rounds"] = args.rounds
    if args.seed is not None:
        overrides.setdefault("simulate", {})["seed"] = args.seed
    if args.burn_in is not None:
        overrides.setdefault("simulate", {})["burn_in"] = args.burn_in
    if args.policies is not None:
        overrides.setdefault("simulate", {})["policies"] = args.policies.split(",")
    cfg = load_run_config(args.config, overrides)
    pc = cfg["policy"]
    config = _policy_config(pc["n"], pc["k"], pc["m"])
    sim = cfg["simulate"]
    burn_in = sim["burn_in"] if sim["burn_in"] is not None else default_burn_in(config)
    cfg["simulate"]["burn_in"] = burn_in
    rounds = sim["rounds"]
    if not isinstance(rounds, int) or not isinstance(burn_in, int) or burn_in < 0:
        raise CLIValidationError("simulate.rounds and simulate.burn_in must be integers")
    if rounds <= burn_in:
        raise UsageError(f"no rounds left after burn-in (rounds={rounds}, burn_in={burn_in})")
    try:
        init = InitMode(sim["init"])
    except ValueError:
        raise CLIValidationError(f"unknown init mode {sim['init']!r}") from None
    names = list(sim["policies"])
    if not names or len(set(names)) != len(names):
        raise CLIValidationError(f"simulate.policies must be non-empty and unique: {names}")
    for name in names:
        if name not in POLICY_NAMES:
            raise CLIValidationError(f"unknown policy {name!r}")

    out_root = Path(args.out_dir or cfg["output"]["dir"])
    final = out_root / f"simulate-n{config.n}-k{config.k}-m{config.m}-seed{sim['seed']}"
    items = [(config, name, rounds, burn_in, sim["seed"], init) for name in names]
    results = dict(_pool_map(_simulate_one, items, args.jobs))

    stage = _staging_dir(final)
    try:
        _dump_json(_echo_config(cfg, ("policy", "simulate")), stage / "config.json")
        _dump_json({name: results[name].to_dict() for name in names}, stage / "metrics.json")
        for name in names:
            rows = ["x,count"] + [f"{x},{c}" for x, c in results[name].histogram_rows()]
            (stage / f"hist_{name}.csv").write_text("\n".join(rows) + "\n")
        table = format_table({name: results[name] for name in names})
        (stage / "table.txt").write_text(table + "\n")
        _commit_dir(stage, final)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    print(table)
    print(f"wrote {final}")
    return EXIT_OK


# ------------------------------------------------------------------------ train

def _find_mnist(data_dir) -> dict:
    if not data_dir:
        raise FileNotFoundError(
            f"MNIST data directory not set; export {DATA_DIR_ENV}=/path/to/mnist or set "
            "[mnist] data_dir in the config. The directory must hold "
            + ", ".join(MNIST_FILES.values()) + " (optionally .gz)."
        )
    root = Path(data_dir)
    found = {}
    for key, stem in MNIST_FILES.items():
        for candidate in (root / stem, root / f"{stem}.gz"):
            if candidate.is_file():
                found[key] = candidate
                break
        else:
            raise FileNotFoundError(
                f"missing MNIST file {stem} in {root}; download the four IDX files from the "
                f"MNIST distribution into that directory (or point {DATA_DIR_ENV} elsewhere)"
            )
    return found


def _load_task(cfg: dict):
    task = cfg["train"]["task"]
    if task == "synthetic":
        s = cfg["synthetic"]
        return generate_synthetic(s["d"], s["classes"], s["samples"], s["separation"],
                                  seed=0, test_samples=s["test_samples"], noise=s["noise"])
    if task == "mnist":
        data_dir = cfg["mnist"]["data_dir"] or os.environ.get(DATA_DIR_ENV)
        files = _find_mnist(data_dir)
        train = load_idx(files["train_images"], files["train_labels"])
        test = load_idx(files["test_images"], files["test_labels"])
        return train, test
    raise CLIValidationError(f"unknown task {task!r}; expected synthetic or mnist")


_TASK_CACHE = {}


def _train_one(item):
    cfg_json, name, seed = item
    cfg = json.loads(cfg_json)
    if cfg_json not in _TASK_CACHE:
        _TASK_CACHE.clear()
        _TASK_CACHE[cfg_json] = _load_task(cfg)
    train, test = _TASK_CACHE[cfg_json]
    pc, tr, part = cfg["policy"], cfg["train"], cfg["partition"]
    config = PolicyConfig(pc["n"], pc["k"], pc["m"])
    tcfg = TrainConfig(
        rounds=tr["rounds"], local_epochs=tr["local_epochs"], batch_size=tr["batch_size"],
        lr0=tr["lr0"], lr_decay=tr["lr_decay"], target_accuracy=tr["target"], seed=seed,
        model=tr["model"], hidden=tr["hidden"], init=tr["init"],
    )
    spec = PartitionSpec(part["kind"], part["alpha"])
    history = run_federated(train, test, spec, config, make_policy(name, config), tcfg)
    return name, seed, history


def _seed_tag(seeds) -> str:
    seeds = [int(s) for s in seeds]
    if seeds == list(range(seeds[0], seeds[0] + len(seeds))) and len(seeds) > 1:
        return f"{seeds[0]}-{seeds[-1]}"
    return "_".join(str(s) for s in seeds)


def cmd_train(args) -> int:
    overrides = {}
    for flag, key in (("task", "task"), ("model", "model"), ("target", "target"),
                      ("rounds", "rounds")):
        value = getattr(args, flag)
        if value is not None:
            overrides.setdefault("train", {})[key] = value
    if args.seeds is not None:
        overrides.setdefault("train", {})["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.policies is not None:
        overrides.setdefault("train", {})["policies"] = args.policies.split(",")
    cfg = load_run_config(args.config, overrides)
    pc, tr = cfg["policy"], cfg["train"]
    config = _policy_config(pc["n"], pc["k"], pc["m"])
    for name in tr["policies"]:
        if name not in POLICY_NAMES:
            raise CLIValidationError(f"unknown policy {name!r}")
    if not tr["seeds"] or not tr["policies"]:
        raise CLIValidationError("train.seeds and train.policies must be non-empty")
    try:
        TrainConfig(rounds=tr["rounds"], local_epochs=tr["local_epochs"],
                    batch_size=tr["batch_size"], lr0=tr["lr0"], lr_decay=tr["lr_decay"],
                    target_accuracy=tr["target"], model=tr["model"], hidden=tr["hidden"],
                    init=tr["init"])
        PartitionSpec(cfg["partition"]["kind"], cfg["partition"]["alpha"])
    except (TypeError, ValueError) as exc:
        raise CLIValidationError(str(exc)) from None
    if tr["task"] == "mnist":
        # fail before any work if the data is missing
        _find_mnist(cfg["mnist"]["data_dir"] or os.environ.get(DATA_DIR_ENV))

    out_root = Path(args.out_dir or cfg["output"]["dir"])
    part = cfg["partition"]
    final = out_root / (
        f"train-{tr['task']}-{tr['model']}-{part['kind']}-n{config.n}-k{config.k}-m{config.m}"
        f"-seeds{_seed_tag(tr['seeds'])}"
    )
    echo = _echo_config(cfg, ("policy", "train", "partition", "synthetic", "mnist"))
    if echo["mnist"]["data_dir"] is None and tr["task"] == "mnist":
        echo["mnist"]["data_dir"] = os.environ.get(DATA_DIR_ENV)
    cfg_json = json.dumps(cfg, sort_keys=True)
    items = [(cfg_json, name, seed) for name in tr["policies"] for seed in tr["seeds"]]
    runs = _pool_map(_train_one, items, args.jobs)

    summary = {"target_accuracy": tr["target"], "rounds": tr["rounds"], "policies": {}}
    for name in tr["policies"]:
        hist = [h for (p, _, h) in runs if p == name]
        reached = [h.rounds_to_target for h in hist if h.rounds_to_target is not None]
        summary["policies"][name] = {
            "seeds": [h.seed for h in hist],
            "rounds_to_target": [h.rounds_to_target for h in hist],
            "reached": len(reached),
            "mean_rounds_to_target": float(np.mean(reached)) if reached else None,
            "mean_final_accuracy": float(np.mean([h.accuracy[-1] for h in hist])),
        }

    stage = _staging_dir(final)
    try:
        _dump_json(echo, stage / "config.json")
        (stage / "runs").mkdir()
        for name, seed, h in runs:
            (stage / "runs" / f"{name}-seed{seed}.csv").write_text(h.to_csv())
        _dump_json(summary, stage / "summary.json")
        _commit_dir(stage, final)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    for name, entry in summary["policies"].items():
        mean = entry["mean_rounds_to_target"]
        shown = "n/a" if mean is None else f"{mean:.2f}"
        print(f"{name:<10} reached {entry['reached']}/{len(entry['seeds'])}  "
              f"mean rounds-to-target {shown}")
    print(f"wrote {final}")
    return EXIT_OK


# ------------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aoifl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="stationary law, return times and Var[X] of a policy")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--probs", help="comma-separated p0..pm (fractions allowed); default optimal")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("optimize", help="optimal Markov policy for (n, k, m)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--out", help="write the policy JSON here instead of stdout")
    p.add_argument("--verify", action="store_true",
                   help="cross-check against the pmf oracle and the grid search")
    p.add_argument("--resolution", type=int, default=200)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="Monte-Carlo comparison of selection policies")
    p.add_argument("config", nargs="?")
    p.add_argument("--out-dir")
    p.add_argument("--rounds", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--policies", help=f"comma-separated subset of {','.join(POLICY_NAMES)}")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="federated training under several selection policies")
    p.add_argument("config", nargs="?")
    p.add_argument("--out-dir")
    p.add_argument("--task", choices=("synthetic", "mnist"))
    p.add_argument("--model", choices=("logistic", "mlp"))
    p.add_argument("--target", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--policies", help=f"comma-separated subset of {','.join(POLICY_NAMES)}")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CLIValidationError, ConfigError, IDXFormatError, IDXConsistencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
