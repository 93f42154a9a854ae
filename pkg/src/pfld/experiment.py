"""Experiment orchestration: folds x repetitions x sweep points, written as reports.

A run produces two files in the output directory:

``summary.json``  config, config hash and per (model, sweep point) aggregates
``rows.csv``      one row per (model, x, fold, rep, epoch), long format

Summary aggregates are recomputed from the final epoch of each run in
``rows.csv``; nothing in the summary is measured separately.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import TabularDataset, kfold, load_csv, synthesize_biased
from .lagrangian import TrainerConfig, train_fld
from .privacy import PrivacyConfig, train_pfld

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODELS = ("clf", "fld", "pfld")
SWEEP_AXES = {
    "epsilon": "target_epsilon",
    "clip_grad": "clip_grad",
    "clip_value": "clip_value",
    "reported_fraction": None,
    "lambda_max": None,
}
ROW_FIELDS = (
    "config_hash", "model", "axis", "x", "fold", "rep", "seed", "epoch",
    "train_loss", "train_acc", "train_fv", "test_acc", "test_fv", "epsilon", "lambda",
)
PLOT_KINDS = {
    "tradeoff": "epsilon",
    "clip": "clip_grad",
    "clip-dual": "clip_value",
    "missing": "reported_fraction",
}


class ExperimentError(ValueError):
    pass


@dataclass
class DataSpec:
    """Either a CSV file with its schema, or parameters of the synthetic generator."""

    path: str | None = None
    schema: str | None = None
    n: int = 5000
    dim: int = 5
    groups: int = 2
    bias: float = 0.4
    separation: float = 1.0
    group_shift: float = 1.0
    minority_share: float | None = 0.15

    def __post_init__(self):
        if (self.path is None) != (self.schema is None):
            raise ExperimentError("a CSV dataset needs both a path and a schema")

    @property
    def synthetic(self) -> bool:
        return self.path is None

    def load(self, seed: int) -> TabularDataset:
        if not self.synthetic:
            return load_csv(self.path, self.schema)
        return synthesize_biased(
            self.n,
            self.dim,
            self.groups,
            self.bias,
            seed,
            separation=self.separation,
            group_shift=self.group_shift,
            minority_share=self.minority_share,
        )


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    privacy: PrivacyConfig = field(default_factory=lambda: PrivacyConfig(target_epsilon=1.0))
    models: tuple[str, ...] = MODELS
    axis: str | None = None
    values: tuple[float, ...] = ()
    repetitions: int = 10
    folds: int = 5
    fold_limit: int | None = None
    reported_fraction: float = 1.0
    seed: int = 0
    output_dir: str = "results"

    def __post_init__(self):
        self.models = tuple(self.models)
        self.values = tuple(float(v) for v in self.values)
        unknown = set(self.models) - set(MODELS)
        if unknown or not self.models:
            raise ExperimentError(f"models must be drawn from {MODELS}, got {self.models}")
        if self.repetitions < 1:
            raise ExperimentError("repetitions must be >= 1")
        if self.folds < 2:
            raise ExperimentError("folds must be >= 2")
        if self.fold_limit is not None and not 1 <= self.fold_limit <= self.folds:
            raise ExperimentError("fold_limit must lie in [1, folds]")
        if self.axis is not None:
            if self.axis not in SWEEP_AXES:
                raise ExperimentError(f"unknown sweep axis {self.axis!r}; choose from {sorted(SWEEP_AXES)}")
            if not self.values:
                raise ExperimentError("a sweep needs at least one value")
        elif self.values:
            raise ExperimentError("sweep values given without an axis")
        if not 0 < self.reported_fraction <= 1:
            raise ExperimentError("reported_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "trainer": self.trainer.to_dict(),
            "privacy": self.privacy.to_dict(),
            "models": list(self.models),
            "axis": self.axis,
            "values": list(self.values),
            "repetitions": self.repetitions,
            "folds": self.folds,
            "fold_limit": self.fold_limit,
            "reported_fraction": self.reported_fraction,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# running


def _point_settings(cfg: ExperimentConfig, x: float | None):
    """Trainer config, privacy config and reported fraction at one sweep point."""
    trainer, privacy, r = cfg.trainer, cfg.privacy, cfg.reported_fraction
    if cfg.axis is None:
        return trainer, privacy, r
    if cfg.axis == "reported_fraction":
        return trainer, privacy, x
    if cfg.axis == "lambda_max":
        return replace(trainer, lambda_max=x), privacy, r
    return trainer, PrivacyConfig(**{**privacy.to_dict(), SWEEP_AXES[cfg.axis]: x}), r


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def train_one(model: str, train: TabularDataset, test: TabularDataset, trainer: TrainerConfig, privacy: PrivacyConfig):
    """Train one model and return its per-epoch records."""
    if model == "clf":
        _, report = train_fld(train, replace(trainer, lambda_max=0.0), test)
    elif model == "fld":
        _, report = train_fld(train, trainer, test)
    else:
        _, report, _ = train_pfld(train, trainer, privacy, test)
    return report.epochs


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every (sweep point, rep, fold, model) and write the two report files.

    Repetition ``rep`` uses seed ``cfg.seed + rep`` for the synthetic data,
    the fold plan, the hidden-attribute mask and training. A failing run is
    logged and listed under ``failures``; the sweep goes on.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.config_hash()
    points = list(cfg.values) if cfg.axis else [None]
    folds_used = cfg.fold_limit or cfg.folds
    rows: list[dict] = []
    failures: list[dict] = []

    datasets: dict[int, tuple[TabularDataset, object]] = {}
    for rep in range(cfg.repetitions):
        seed = cfg.seed + rep
        dataset = cfg.data.load(seed)
        datasets[rep] = (dataset, kfold(dataset, cfg.folds, seed))

    for x in points:
        trainer, privacy, r = _point_settings(cfg, x)
        for rep in range(cfg.repetitions):
            seed = cfg.seed + rep
            dataset, plan = datasets[rep]
            for fold in range(folds_used):
                train_idx, test_idx = plan.split(fold)
                train, test = dataset.subset(train_idx), dataset.subset(test_idx)
                if r < 1.0:
                    train = train.hide_protected(r, seed)
                for model in cfg.models:
                    try:
                        epochs = train_one(model, train, test, replace(trainer, seed=seed), privacy)
                    except Exception as exc:  # a failed point is recorded, not fatal
                        log.error("run failed: model=%s x=%s rep=%d fold=%d: %s", model, x, rep, fold, exc)
                        failures.append({
                            "model": model, "x": x, "rep": rep, "fold": fold,
                            "error": f"{type(exc).__name__}: {exc}",
                            "traceback": traceback.format_exc(limit=3),
                        })
                        continue
                    for rec in epochs:
                        rows.append({
                            "config_hash": digest, "model": model, "axis": cfg.axis or "", "x": x,
                            "fold": fold, "rep": rep, "seed": seed, "epoch": rec["epoch"],
                            "train_loss": rec["train_loss"], "train_acc": rec["train_acc"],
                            "train_fv": rec["train_fv"], "test_acc": rec["test_acc"], "test_fv": rec["test_fv"],
                            "epsilon": rec.get("epsilon"),
                            "lambda": ";".join(repr(v) for v in rec["lambda"]),
                        })
                log.info("x=%s rep=%d fold=%d done", x, rep, fold)

    with open(out / "rows.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROW_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in ROW_FIELDS])

    summary = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": digest,
        "config": cfg.to_dict(),
        "axis": cfg.axis,
        "results": aggregate(rows),
        "failures": failures,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean/std of final-epoch test metrics per (model, x), from long-format rows."""
    last: dict[tuple, dict] = {}
    for row in rows:
        key = (row["model"], row["x"], row["rep"], row["fold"])
        if key not in last or int(row["epoch"]) > int(last[key]["epoch"]):
            last[key] = row
    groups: dict[tuple, list[dict]] = {}
    for (model, x, _, _), row in last.items():
        groups.setdefault((model, x), []).append(row)
    out = []
    for (model, x), finals in groups.items():
        acc = np.array([float(r["test_acc"]) for r in finals])
        fv = np.array([float(r["test_fv"]) for r in finals])
        entry = {
            "model": model,
            "x": None if x in (None, "") else float(x),
            "runs": len(finals),
            "acc_mean": float(acc.mean()),
            "acc_std": float(acc.std()),
            "fv_mean": float(fv.mean()),
            "fv_std": float(fv.std()),
        }
        eps = [r["epsilon"] for r in finals if r["epsilon"] not in (None, "")]
        if eps:
            entry["epsilon_spent_max"] = max(float(e) for e in eps)
        out.append(entry)
    return out


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["x"] = float(row["x"]) if row["x"] else None
    return rows


# --------------------------------------------------------------------------
# plot data


REQUIRED_RESULT_KEYS = ("model", "x", "acc_mean", "acc_std", "fv_mean", "fv_std")


def emit_plot_data(report_dir: str | Path, kind: str) -> list[tuple[float, str, float, float]]:
    """Tidy (x, series, mean, std) rows for one figure kind.

    With a single model the series are ``acc`` and ``fv``; with several they
    are prefixed by the model name, e.g. ``pfld:fv``.
    """
    if kind not in PLOT_KINDS:
        raise ExperimentError(f"unknown plot kind {kind!r}; choose from {sorted(PLOT_KINDS)}")
    with open(Path(report_dir) / "summary.json") as fh:
        summary = json.load(fh)
    results = summary.get("results", [])
    missing = sorted({k for r in results for k in REQUIRED_RESULT_KEYS if k not in r})
    if not results:
        missing = list(REQUIRED_RESULT_KEYS)
    if missing:
        raise ExperimentError(f"report lacks columns needed for plot data: {', '.join(missing)}")
    axis = PLOT_KINDS[kind]
    if summary.get("axis") != axis:
        raise ExperimentError(f"plot kind {kind!r} needs a sweep over {axis!r}, report swept {summary.get('axis')!r}")
    models = sorted({r["model"] for r in results})
    out = []
    for r in sorted(results, key=lambda r: (r["model"], r["x"])):
        prefix = "" if len(models) == 1 else f"{r['model']}:"
        out.append((r["x"], f"{prefix}acc", r["acc_mean"], r["acc_std"]))
        out.append((r["x"], f"{prefix}fv", r["fv_mean"], r["fv_std"]))
    return out


def write_plot_data(rows, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(("x", "series", "mean", "std"))
    for x, series, mean, std in rows:
        writer.writerow((_fmt(x), series, _fmt(mean), _fmt(std)))


def summary_table(summary: dict) -> str:
    lines = [f"{'model':6} {'x':>10} {'runs':>5} {'acc':>14} {'fv':>14}"]
    for r in summary["results"]:
        x = "-" if r["x"] is None else f"{r['x']:g}"
        lines.append(
            f"{r['model']:6} {x:>10} {r['runs']:5d} "
            f"{r['acc_mean']:.3f}+-{r['acc_std']:.3f}  {r['fv_mean']:.3f}+-{r['fv_std']:.3f}"
        )
    if summary["failures"]:
        lines.append(f"{len(summary['failures'])} run(s) failed; see summary.json")
    return "\n".join(lines)
