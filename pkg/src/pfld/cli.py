"""Command-line entry point: ``pfld {train,sweep,calibrate-clip,plot-data,account}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .accountant import DUAL, PRIMAL, AccountingError, PrivacyLedger, calibrate_sigma, to_dp_with_order
from .data import DataError
from .experiment import (
    MODELS,
    PLOT_KINDS,
    SWEEP_AXES,
    DataSpec,
    ExperimentConfig,
    ExperimentError,
    emit_plot_data,
    run_experiment,
    summary_table,
    write_plot_data,
)
from .fairness import build_constraints
from .lagrangian import TrainerConfig, train_fld
from .privacy import REALIZED, BOUNDED, PrivacyConfig, PrivacyError

log = logging.getLogger("pfld")


def read_config_file(path: str) -> dict[str, str]:
    """``key = value`` lines; keys are long option names with or without dashes."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", help="CSV file (needs --schema); synthetic data otherwise")
    g.add_argument("--schema", help="column-role schema file for --data")
    g.add_argument("--n", type=int, default=5000, help="synthetic rows")
    g.add_argument("--dim", type=int, default=5, help="synthetic feature count")
    g.add_argument("--groups", type=int, default=2, help="synthetic protected groups")
    g.add_argument("--bias", type=float, default=0.4, help="synthetic base-rate spread across groups")
    g.add_argument("--separation", type=float, default=1.0, help="synthetic label signal strength")
    g.add_argument("--group-shift", type=float, default=1.0, help="synthetic group signal strength")
    g.add_argument("--minority-share", type=float, default=0.15,
                   help="share of rows in group 0; <= 0 means equal group sizes")


def _add_trainer_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--batch", type=int, default=128)
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--dual-step", type=float, default=1.0)
    g.add_argument("--lambda-max", type=float, default=1.0)
    g.add_argument("--fairness", choices=("dp", "eo", "ap"), default="dp")
    g.add_argument("--hidden", default="16,16", help="two hidden widths, comma separated")


def _add_privacy_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("privacy")
    g.add_argument("--cp", type=float, default=10.0, help="per-sample gradient clip")
    g.add_argument("--cd", type=float, default=5.0, help="per-sample statistic clip")
    g.add_argument("--sigma-p", type=float, default=1.0, help="primal noise multiplier")
    g.add_argument("--sigma-d", type=float, default=1.0, help="dual noise multiplier")
    g.add_argument("--epsilon", type=float, default=1.0,
                   help="target budget; calibrates the noise multipliers (<= 0 uses --sigma-p/--sigma-d)")
    g.add_argument("--delta", type=float, default=1e-5)
    g.add_argument("--dual-ratio", type=float, default=1.0, help="sigma_d / sigma_p when calibrating")
    g.add_argument("--group-size-mode", choices=(REALIZED, BOUNDED), default=REALIZED)
    g.add_argument("--reported-fraction", type=float, default=1.0,
                   help="share of training rows that report the protected attribute")


def _add_run_args(p: argparse.ArgumentParser, sweep: bool) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--model", action="append", choices=MODELS, help="repeatable; default all")
    g.add_argument("--folds", type=int, default=5)
    g.add_argument("--fold-limit", type=int, help="evaluate only the first K folds")
    g.add_argument("--repetitions", type=int, default=10 if sweep else 1)
    g.add_argument("--seed", type=int, required=sweep, default=None if sweep else 0)
    g.add_argument("--out", default="results", help="output directory")
    if sweep:
        g.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
        g.add_argument("--values", required=True, help="comma-separated sweep values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfld", description="Private and fair Lagrangian dual training.")
    parser.add_argument("--config", help="plain-text key = value file supplying option defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train CLF / F-LD / PF-LD with k-fold evaluation")
    _add_data_args(p)
    _add_trainer_args(p)
    _add_privacy_args(p)
    _add_run_args(p, sweep=False)

    p = sub.add_parser("sweep", help="repeat training over a grid of one setting")
    _add_data_args(p)
    _add_trainer_args(p)
    _add_privacy_args(p)
    _add_run_args(p, sweep=True)

    p = sub.add_parser("calibrate-clip", help="print error-bound curves over a clip grid as CSV")
    _add_data_args(p)
    _add_trainer_args(p)
    _add_privacy_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("primal", "dual"), default="primal")
    p.add_argument("--grid", default="0.05:5:100", help="start:stop:count of clip values")
    p.add_argument("--multipliers", type=float, help="multiplier value for every constraint (default lambda-max)")
    p.add_argument("--warmup-epochs", type=int, default=5,
                   help="unconstrained epochs before measuring per-sample norms")

    p = sub.add_parser("plot-data", help="turn a report into (x, series, mean, std) CSV")
    p.add_argument("report", help="report directory containing summary.json")
    p.add_argument("--kind", required=True, choices=sorted(PLOT_KINDS))
    p.add_argument("--out", help="output CSV (stdout by default)")

    p = sub.add_parser("account", help="privacy ledger queries")
    p.add_argument("--n", type=int, required=True, help="training rows")
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--sigma-p", type=float, default=1.0)
    p.add_argument("--sigma-d", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--epsilon", type=float, help="calibrate multipliers for this budget instead")
    p.add_argument("--dual-ratio", type=float, default=1.0)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    early, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if early.config and command:
        defaults = read_config_file(early.config)
        sub = choices[command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(defaults) - set(known))
        if unknown:
            parser.error(f"unknown keys in {early.config}: {', '.join(unknown)}")
        converted = {}
        for key, raw in defaults.items():
            action = known[key]
            if isinstance(action, argparse._AppendAction):
                converted[key] = [v.strip() for v in raw.split(",")]
            else:
                converted[key] = action.type(raw) if action.type else raw
        sub.set_defaults(**converted)
        for action in sub._actions:
            if action.dest in converted:
                action.required = False
    return parser.parse_args(argv)


def _hidden(text: str) -> tuple[int, int]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 2:
        raise SystemExit("--hidden needs exactly two widths")
    return parts


def trainer_from_args(args) -> TrainerConfig:
    return TrainerConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        dual_step=args.dual_step,
        lambda_max=args.lambda_max,
        fairness=args.fairness,
        seed=getattr(args, "seed", 0) or 0,
        hidden=_hidden(args.hidden),
    )


def privacy_from_args(args) -> PrivacyConfig:
    return PrivacyConfig(
        clip_grad=args.cp,
        clip_value=args.cd,
        sigma_primal=args.sigma_p,
        sigma_dual=args.sigma_d,
        target_epsilon=args.epsilon if args.epsilon and args.epsilon > 0 else None,
        delta=args.delta,
        dual_ratio=args.dual_ratio,
        group_size_mode=args.group_size_mode,
    )


def data_from_args(args) -> DataSpec:
    return DataSpec(
        path=args.data,
        schema=args.schema,
        n=args.n,
        dim=args.dim,
        groups=args.groups,
        bias=args.bias,
        separation=args.separation,
        group_shift=args.group_shift,
        minority_share=args.minority_share if args.minority_share and args.minority_share > 0 else None,
    )


def experiment_from_args(args) -> ExperimentConfig:
    sweep = args.command == "sweep"
    return ExperimentConfig(
        data=data_from_args(args),
        trainer=trainer_from_args(args),
        privacy=privacy_from_args(args),
        models=tuple(args.model or MODELS),
        axis=args.axis if sweep else None,
        values=tuple(float(v) for v in args.values.split(",")) if sweep else (),
        repetitions=args.repetitions,
        folds=args.folds,
        fold_limit=args.fold_limit,
        reported_fraction=args.reported_fraction,
        seed=args.seed,
        output_dir=args.out,
    )


def cmd_run(args) -> int:
    summary = run_experiment(experiment_from_args(args))
    print(summary_table(summary))
    print(f"reports written to {args.out}")
    return 0


def _grid(text: str) -> np.ndarray:
    try:
        start, stop, count = text.split(":")
        return np.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise SystemExit("--grid must look like start:stop:count") from None


def cmd_calibrate_clip(args) -> int:
    dataset = data_from_args(args).load(args.seed)
    trainer = trainer_from_args(args)
    privacy = privacy_from_args(args)
    warm = TrainerConfig(**{**trainer.to_dict(), "epochs": max(1, args.warmup_epochs), "lambda_max": 0.0})
    state, _ = train_fld(dataset, warm)
    cset = build_constraints(dataset, trainer.fairness)
    lam_value = args.multipliers if args.multipliers is not None else trainer.lambda_max
    sigma_p, sigma_d = privacy.sigma_primal, privacy.sigma_dual
    if privacy.target_epsilon is not None:
        q = min(1.0, trainer.batch_size / dataset.n)
        sigma_p, sigma_d = calibrate_sigma(
            privacy.target_epsilon, privacy.delta, q,
            trainer.epochs * math.ceil(dataset.n / trainer.batch_size), trainer.epochs, privacy.dual_ratio,
        )
    inputs = analysis.bound_inputs_from_model(
        state.params, dataset, cset, np.full(len(cset), lam_value),
        sigma_primal=sigma_p, sigma_dual=sigma_d, clip_grad=privacy.clip_grad, clip_value=privacy.clip_value,
        lambda_max=trainer.lambda_max, batch_size=trainer.batch_size,
    )
    writer_rows = []
    if args.kind == "primal":
        for c, b in analysis.bound_curve(inputs, _grid(args.grid), "primal"):
            writer_rows.append(("primal", "all", c, b))
        if trainer.lambda_max > 0 and sigma_p > 0:
            print(f"# bound-minimising clip_grad: {analysis.optimal_clip_grad(inputs):.6g}", file=sys.stderr)
    else:
        for i, con in enumerate(cset):
            for c, b in analysis.bound_curve(inputs, _grid(args.grid), "dual", i):
                writer_rows.append(("dual", con.descriptor, c, b))
    print("kind,constraint,clip,bound")
    for kind, con, c, b in writer_rows:
        print(f"{kind},{con},{c!r},{b!r}")
    return 0


def cmd_plot_data(args) -> int:
    rows = emit_plot_data(args.report, args.kind)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_plot_data(rows, fh)
    else:
        write_plot_data(rows, sys.stdout)
    return 0


def cmd_account(args) -> int:
    q = min(1.0, args.batch / args.n)
    primal_steps = args.epochs * math.ceil(args.n / args.batch)
    sigma_p, sigma_d = args.sigma_p, args.sigma_d
    if args.epsilon is not None:
        sigma_p, sigma_d = calibrate_sigma(args.epsilon, args.delta, q, primal_steps, args.epochs, args.dual_ratio)
    ledger = PrivacyLedger()
    ledger.compose(PRIMAL, q, sigma_p, primal_steps)
    ledger.compose(DUAL, 1.0, sigma_d, args.epochs)
    eps, order = to_dp_with_order(ledger.curve(), args.delta)
    print(json.dumps({
        "sigma_primal": sigma_p,
        "sigma_dual": sigma_d,
        "q": q,
        "primal_steps": primal_steps,
        "dual_steps": args.epochs,
        "delta": args.delta,
        "epsilon": eps,
        "best_order": order,
    }, indent=2))
    return 0


COMMANDS = {
    "train": cmd_run,
    "sweep": cmd_run,
    "calibrate-clip": cmd_calibrate_clip,
    "plot-data": cmd_plot_data,
    "account": cmd_account,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (OSError, DataError, ExperimentError, PrivacyError, AccountingError, analysis.BoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
