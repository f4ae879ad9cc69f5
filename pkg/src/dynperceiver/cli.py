"""Command-line entry point: train, evaluate, calibrate, sweep, profile, gradcheck.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .calibration import (ABOVE_ONE, budget_sweep, collect_records, exit_fractions, simulate, solve_q,
                          thresholds_from_fractions, write_curve)
from .checkpoint import load_checkpoint
from .config import PRESETS, ModelConfig, get_preset, load_config, save_config
from .data import Dataset, generate_synthetic, load_idx
from .errors import BudgetError, ConfigError, ContractError, DynPerceiverError, FormatError, NumericalError
from .exits import ExitPolicy, batch_evaluate, write_trace_log
from .flops import flops_profile, measured_profile
from .gradcheck import MAX_GRADCHECK_PARAMS, model_gradcheck
from .losses import LossWeights
from .model import build_model
from .train import TrainSettings, train, write_history

GRADCHECK_TOLERANCE = 1e-4

# Defaults live here rather than in argparse so a --run-config file can fill unset flags.
DEFAULTS = {
    "seed": 0, "epochs": 30, "batch_size": 32, "lr": 1e-3, "warmup_epochs": 2.0, "weight_decay": 0.05,
    "alpha": 0.5, "label_smoothing": 0.1, "split": "eval", "budgets": "linspace:10", "eps": 1e-5,
    "max_entries": None, "plot": True, "clamp": False, "check": False, "json": False,
}


def g(x) -> str:
    """Six significant digits for console output."""
    return f"{x:.6g}"


class UsageError(DynPerceiverError):
    pass


# -- argument handling -------------------------------------------------------------

def _add_model_args(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--preset", help=f"named model config ({', '.join(sorted(PRESETS))})")
    group.add_argument("--config", help="model config YAML file")


def _add_common(p: argparse.ArgumentParser, out_required: bool) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required, help="output directory (created if missing)")
    p.add_argument("--run-config", help="YAML file of option values; flags on the command line win")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="synthetic:CxN (C classes, N per class) or idx:IMAGES,LABELS")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynperceiver", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    _add_model_args(p)
    _add_data(p)
    _add_common(p, out_required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-epochs", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--label-smoothing", type=float)
    p.add_argument("--no-plot", dest="plot", action="store_const", const=False)

    p = sub.add_parser("evaluate", help="early-exit inference with fixed thresholds")
    p.add_argument("--checkpoint")
    _add_data(p)
    _add_common(p, out_required=True)
    p.add_argument("--thresholds", help="comma-separated, one per exit, last must be 0")
    p.add_argument("--thresholds-file", help="thresholds.json written by 'calibrate'")
    p.add_argument("--split", choices=["train", "cal", "eval"])

    p = sub.add_parser("calibrate", help="solve thresholds for one FLOPs budget")
    p.add_argument("--checkpoint")
    _add_data(p)
    _add_common(p, out_required=True)
    p.add_argument("--budget", help="FLOPs per image, or 'full'")
    p.add_argument("--clamp", action="store_const", const=True)

    p = sub.add_parser("sweep", help="accuracy vs FLOPs curve over a list of budgets")
    p.add_argument("--checkpoint")
    _add_data(p)
    _add_common(p, out_required=True)
    p.add_argument("--budgets", help="'full', 'linspace:N' or a comma-separated list")
    p.add_argument("--clamp", action="store_const", const=True)
    p.add_argument("--no-plot", dest="plot", action="store_const", const=False)

    p = sub.add_parser("profile", help="per-exit cumulative FLOPs and parameter count")
    _add_model_args(p)
    _add_common(p, out_required=False)
    p.add_argument("--check", action="store_const", const=True, help="compare with the runtime counter")
    p.add_argument("--json", action="store_const", const=True, help="print JSON instead of a table")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    _add_model_args(p)
    _add_common(p, out_required=False)
    p.add_argument("--eps", type=float)
    p.add_argument("--max-entries", type=int, help="check at most this many entries per parameter")
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from --run-config, then from DEFAULTS."""
    file_values = {}
    if getattr(args, "run_config", None):
        try:
            with open(args.run_config) as fh:
                file_values = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise UsageError(f"cannot read run config {args.run_config}: {exc.strerror}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("run_config", "must be a mapping of option names to values")
        file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
    for key, value in vars(args).items():
        if value is None:
            if key in file_values:
                setattr(args, key, file_values[key])
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])
    return args


def model_config(args) -> ModelConfig:
    if args.config:
        return load_config(args.config)
    return get_preset(args.preset or "tiny")


def load_data(spec: str | None, config: ModelConfig, seed: int) -> Dataset:
    """Train / calibration / eval splits of 50 / 25 / 25 percent, stratified by class."""
    if not spec:
        raise UsageError("--data is required (synthetic:CxN or idx:IMAGES,LABELS)")
    kind, _, rest = spec.partition(":")
    img = config.image
    if kind == "synthetic":
        try:
            c, n = (int(v) for v in rest.lower().split("x"))
        except ValueError:
            raise UsageError(f"bad synthetic spec {spec!r}; expected synthetic:CxN") from None
        if c > config.num_classes:
            raise ConfigError("data", f"{c} classes but the model has {config.num_classes} outputs")
        if img.height != img.width:
            raise ConfigError("image", "synthetic images are square")
        return generate_synthetic(c, n, img.height, seed=seed, channels=img.channels, cal_fraction=0.5)
    if kind == "idx":
        paths = rest.split(",")
        if len(paths) != 2:
            raise UsageError(f"bad idx spec {spec!r}; expected idx:IMAGES,LABELS")
        ds = load_idx(paths[0], paths[1], seed=seed, cal_fraction=0.5, num_classes=config.num_classes)
        if ds.images.shape[1:] != (img.channels, img.height, img.width):
            raise ConfigError("image", f"idx images are {ds.images.shape[1:]}, model expects "
                                       f"{(img.channels, img.height, img.width)}")
        return ds
    raise UsageError(f"unknown data source {kind!r}; use synthetic:CxN or idx:IMAGES,LABELS")


def _out_dir(args) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _checkpoint(args):
    path = args.checkpoint or (Path(args.out) / "model.ckpt")
    return load_checkpoint(path)


def parse_budgets(text: str, costs) -> list[float]:
    text = str(text).strip()
    if text == "full":
        return [float(costs[-1])]
    if text.startswith("linspace:"):
        try:
            n = int(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad budget spec {text!r}") from None
        if n < 1:
            raise UsageError("linspace needs at least one point")
        return [float(b) for b in np.linspace(costs[0], costs[-1], n)]
    try:
        return [float(costs[-1]) if b.strip() == "full" else float(b) for b in text.split(",")]
    except ValueError:
        raise UsageError(f"bad budget list {text!r}") from None


# -- subcommands -----------------------------------------------------------------

def cmd_train(args) -> int:
    config = model_config(args)
    data = load_data(args.data, config, args.seed)
    out = _out_dir(args)
    model = build_model(config, args.seed)
    settings = TrainSettings(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                             warmup_epochs=args.warmup_epochs, weight_decay=args.weight_decay)
    weights = LossWeights(alpha=args.alpha, label_smoothing=args.label_smoothing)

    def report(row):
        accs = " ".join(f"exit{k[8:]}={g(v)}" for k, v in row.items() if k.startswith("acc_exit"))
        print(f"epoch {row['epoch']:3d}  loss={g(row['loss'])}  {accs}", flush=True)

    history = train(model, data, weights=weights, seed=args.seed, settings=settings,
                    checkpoint_path=out / "model.ckpt", on_epoch=report)
    with open(out / "history.csv", "w") as fh:
        write_history(fh, history)
    save_config(config, out / "config.yaml")
    final = {k: v for k, v in history[-1].items() if k.startswith("acc_exit")} if history else {}
    _dump_json(out / "train_summary.json", {"epochs": len(history), "final": final,
                                            "num_parameters": model.num_parameters()})
    if args.plot and history:
        from .plotting import plot_history
        plot_history(history, out / "history.png")
    print("final eval accuracy: " + " ".join(f"exit{k[8:]}={g(v)}" for k, v in final.items()))
    return 0


def _policy_from_args(args, exits) -> ExitPolicy:
    if args.thresholds and args.thresholds_file:
        raise UsageError("give --thresholds or --thresholds-file, not both")
    if args.thresholds_file:
        try:
            values = json.loads(Path(args.thresholds_file).read_text())["thresholds"]
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot read thresholds from {args.thresholds_file}: {exc}") from None
    elif args.thresholds:
        try:
            values = [float(t) for t in args.thresholds.split(",")]
        except ValueError:
            raise UsageError(f"bad thresholds {args.thresholds!r}") from None
    else:
        values = [ABOVE_ONE] * (len(exits) - 1) + [0.0]
    return ExitPolicy(tuple(values), tuple(exits))


def cmd_evaluate(args) -> int:
    model, config = _checkpoint(args)
    data = load_data(args.data, config, args.seed)
    policy = _policy_from_args(args, model.exits)
    images, labels = data.split(args.split)
    out = _out_dir(args)
    result = batch_evaluate(model, images, labels, policy)
    ids = np.flatnonzero(data.splits == args.split)
    with open(out / "trace.csv", "w") as fh:
        write_trace_log(fh, result.traces, model.exits, ids)
    _dump_json(out / "evaluate.json", {
        "split": args.split, "thresholds": list(policy.thresholds), "accuracy": result.accuracy,
        "mean_flops": result.mean_flops, "exit_histogram": {str(k): v for k, v in result.exit_histogram.items()},
    })
    print(f"accuracy={g(result.accuracy)}  mean_flops={g(result.mean_flops)}  "
          + " ".join(f"exit{k}={v}" for k, v in result.exit_histogram.items()))
    return 0


def _records(model, data: Dataset):
    cal = collect_records(model, *data.split("cal"))
    ev = collect_records(model, *data.split("eval"))
    return cal, ev


def cmd_calibrate(args) -> int:
    model, config = _checkpoint(args)
    data = load_data(args.data, config, args.seed)
    if args.budget is None:
        raise UsageError("--budget is required")
    cal, ev = _records(model, data)
    (budget,) = parse_budgets(args.budget, cal.costs)
    q = solve_q(cal.costs, budget, clamp=args.clamp)
    p = exit_fractions(q, cal.num_exits)
    theta = thresholds_from_fractions(cal, p)
    on_cal, on_eval = simulate(cal, theta), simulate(ev, theta)
    out = _out_dir(args)
    _dump_json(out / "thresholds.json", {
        "budget": budget, "q": q, "fractions": p.tolist(), "thresholds": theta.tolist(),
        "exits": list(model.exits), "costs": cal.costs.tolist(),
        "cal": {"mean_flops": on_cal.mean_flops, "accuracy": on_cal.accuracy},
        "eval": {"mean_flops": on_eval.mean_flops, "accuracy": on_eval.accuracy},
    })
    print(f"budget={g(budget)}  q={g(q)}  thresholds=" + ",".join(g(t) for t in theta))
    print(f"cal: mean_flops={g(on_cal.mean_flops)} accuracy={g(on_cal.accuracy)}  "
          f"eval: mean_flops={g(on_eval.mean_flops)} accuracy={g(on_eval.accuracy)}")
    return 0


def cmd_sweep(args) -> int:
    model, config = _checkpoint(args)
    data = load_data(args.data, config, args.seed)
    cal, ev = _records(model, data)
    budgets = parse_budgets(args.budgets, cal.costs)
    rows = budget_sweep(cal, ev, budgets, clamp=args.clamp)
    out = _out_dir(args)
    with open(out / "curve.csv", "w") as fh:
        write_curve(fh, rows, model.exits)
    if args.plot:
        from .plotting import plot_curve
        plot_curve(rows, out / "curve.png", exit_costs=cal.costs.tolist(), title=config.name)
    print("budget        q             mean_flops    accuracy")
    for r in rows:
        print(f"{g(r['budget']):<13} {g(r['q']):<13} {g(r['mean_flops']):<13} {g(r['accuracy'])}")
    # Endpoints of the curve must coincide with fixed single-exit evaluations on the calibration split.
    ok = True
    for cost, col, label in ((cal.costs[0], 0, "exit-1 only"), (cal.costs[-1], -1, "full model")):
        ref = float(cal.correct[:, col].mean())
        hits = [r for r in rows if r["budget"] == cost]
        match = all(r["cal_accuracy"] == ref and r["cal_mean_flops"] == cost for r in hits)
        ok &= match
        state = ("match" if match else "MISMATCH") if hits else "not in sweep"
        print(f"endpoint {label}: flops={g(cost)} cal_accuracy={g(ref)} [{state}]")
    return 0 if ok else 1


def cmd_profile(args) -> int:
    config = model_config(args)
    model = build_model(config, args.seed)
    prof = flops_profile(config)
    report = {"name": config.name, "num_parameters": model.num_parameters(),
              "cumulative_flops": {str(k): v for k, v in prof.cumulative.items()}}
    status = 0
    if args.check:
        measured = measured_profile(model)
        report["measured_flops"] = {str(k): v for k, v in measured.cumulative.items()}
        report["check"] = "match" if measured.cumulative == prof.cumulative else "mismatch"
        status = 0 if report["check"] == "match" else 1
    out = _out_dir(args)
    if out is not None:
        _dump_json(out / "profile.json", report)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(f"{config.name}: {report['num_parameters']} parameters")
        for k, v in prof.cumulative.items():
            extra = f"  measured={g(report['measured_flops'][str(k)])}" if args.check else ""
            print(f"exit {k}: {g(v)} FLOPs{extra}")
        if args.check:
            print(f"counter check: {report['check']}")
    return status


def cmd_gradcheck(args) -> int:
    config = model_config(args)
    n = build_model(config, args.seed).num_parameters()
    if n >= MAX_GRADCHECK_PARAMS:
        print(f"refusing: {config.name} has {n} parameters; gradcheck needs two forward passes per "
              f"parameter and is limited to models under {MAX_GRADCHECK_PARAMS}", file=sys.stderr)
        return 2
    report = model_gradcheck(config, seed=args.seed, eps=args.eps, max_entries=args.max_entries)
    passed = bool(report.max_error < GRADCHECK_TOLERANCE)
    out = _out_dir(args)
    if out is not None:
        _dump_json(out / "gradcheck.json", {"max_relative_error": float(report.max_error),
                                            "errors": {k: float(v) for k, v in report.errors.items()},
                                            "checked_entries": report.checked_entries, "passed": passed})
    print(f"checked {report.checked_entries} of {report.num_parameters} parameter entries")
    for name, err in report.worst(3):
        print(f"  {name}: {g(err)}")
    print(f"max relative error {g(report.max_error)} ({'PASS' if passed else 'FAIL'} at {g(GRADCHECK_TOLERANCE)})")
    return 0 if passed else 1


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "calibrate": cmd_calibrate,
            "sweep": cmd_sweep, "profile": cmd_profile, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](resolve(args))
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ConfigError, FormatError, BudgetError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
