"""Fairness-constrained training by Lagrangian dual ascent.

The primal phase runs minibatch gradient descent on

    J(theta; B) + sum_i lambda_i |mu(B_P_i) - mu(B_G_i)|

and after every epoch the multipliers move by ``s_k`` times the full-data
violations, capped at ``lambda_max``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TabularDataset
from .fairness import (
    ConstraintSet,
    FairnessNotion,
    accuracy,
    build_constraints,
    fairness_violation_metric,
    violation_vector,
)
from .model import ModelParams, grad_loss, init_params, loss, per_sample_stat_grads

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.01
    dual_step: float = 1.0
    lambda_max: float = 1.0
    fairness: FairnessNotion = FairnessNotion.DEMOGRAPHIC_PARITY
    seed: int = 0
    hidden: tuple[int, int] = (16, 16)

    def __post_init__(self):
        self.fairness = FairnessNotion.parse(self.fairness)
        self.hidden = tuple(self.hidden)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.dual_step < 0:
            raise ValueError("dual_step must be nonnegative")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be nonnegative")

    def step_size(self, epoch: int) -> float:
        """Dual step s_k; constant."""
        return self.dual_step

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fairness"] = self.fairness.value
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class ModelState:
    params: ModelParams
    multipliers: np.ndarray
    lambda_max: float


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    skipped_constraints: int = 0

    @property
    def final(self) -> dict:
        return self.epochs[-1]

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "skipped_constraints": self.skipped_constraints}


# --------------------------------------------------------------------------
# single steps


def lagrangian_value(params: ModelParams, lam: np.ndarray, batch: TabularDataset, cset: ConstraintSet) -> float:
    """J(theta; B) + lambda . |mu(B_P) - mu(B_G)| with ``cset`` indexing ``batch``."""
    value = loss(params, batch.features, batch.labels)
    if np.any(lam):
        value += float(np.dot(lam, violation_vector(params, batch, cset)))
    return value


def penalty_gradient(
    values: np.ndarray,
    grads: np.ndarray,
    cset: ConstraintSet,
    lam: np.ndarray,
    *,
    group_transform=None,
    min_group: int = 1,
) -> tuple[np.ndarray, list[int]]:
    """Subgradient of sum_i lambda_i |mu(P_i) - mu(G_i)| from per-sample data.

    ``values``/``grads`` hold h(z) and its gradient for every row the
    constraint indices refer to. ``group_transform`` is applied to the
    group-term gradient rows before averaging (the private trainer clips
    them there). Constraints whose group has fewer than ``min_group`` rows
    are skipped and reported. A zero violation contributes nothing.
    """
    total = np.zeros(grads.shape[1])
    skipped = []
    for i, c in enumerate(cset):
        if len(c.group) < min_group or len(c.group) == 0 or len(c.population) == 0:
            skipped.append(i)
            continue
        sign = np.sign(np.mean(values[c.population]) - np.mean(values[c.group]))
        if sign == 0 or lam[i] == 0:
            continue
        group_grads = grads[c.group]
        if group_transform is not None:
            group_grads = group_transform(group_grads)
        total += (lam[i] * sign) * (grads[c.population].mean(axis=0) - group_grads.mean(axis=0))
    return total, skipped


def lagrangian_gradient(
    params: ModelParams, lam: np.ndarray, batch: TabularDataset, cset: ConstraintSet
) -> tuple[np.ndarray, list[int]]:
    g = grad_loss(params, batch.features, batch.labels)
    if not np.any(lam):
        return g, []
    values, grads = per_sample_stat_grads(params, batch.features, batch.labels, cset.notion.stat_kind)
    penalty, skipped = penalty_gradient(values, grads, cset, lam)
    return g + penalty, skipped


def primal_step(
    params: ModelParams,
    lam: np.ndarray,
    batch: TabularDataset,
    lr: float,
    notion: FairnessNotion | str,
) -> tuple[ModelParams, list[int]]:
    """One descent step on the Lagrangian over ``batch``; returns skipped constraints."""
    cset = build_constraints(batch, notion, strict=False)
    direction, skipped = lagrangian_gradient(params, lam, batch, cset)
    if skipped:
        log.warning("batch skipped constraints %s (empty group)", [cset.constraints[i].descriptor for i in skipped])
    return params.step(direction, lr), skipped


def dual_step(lam: np.ndarray, violations: np.ndarray, step: float, lambda_max: float) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    violations = np.asarray(violations, dtype=np.float64)
    if violations.shape != lam.shape:
        raise ValueError(f"violation vector shape {violations.shape} != multiplier shape {lam.shape}")
    return np.minimum(lambda_max, lam + step * violations)


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    """Shuffle once and cut into consecutive batches; the last may be short."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# --------------------------------------------------------------------------
# trainer


class LagrangianTrainer:
    """Epoch loop shared by the plain and the private trainer."""

    def __init__(self, dataset: TabularDataset, config: TrainerConfig, eval_data: TabularDataset | None = None):
        self.dataset = dataset
        self.config = config
        self.eval_data = eval_data
        self.constraints = build_constraints(dataset, config.fairness)
        init_seq, shuffle_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(3)
        self.init_rng = np.random.default_rng(init_seq)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.noise_rng = np.random.default_rng(noise_seq)
        self.report = TrainReport()

    def primal_update(self, params: ModelParams, lam: np.ndarray, batch: TabularDataset) -> ModelParams:
        params, skipped = primal_step(params, lam, batch, self.config.lr, self.config.fairness)
        self.report.skipped_constraints += len(skipped)
        return params

    def dual_update(self, params: ModelParams, lam: np.ndarray, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        v = violation_vector(params, self.dataset, self.constraints)
        return dual_step(lam, v, self.config.step_size(epoch), self.config.lambda_max), v

    def epoch_extras(self, epoch: int) -> dict:
        return {}

    def run(self) -> tuple[ModelState, TrainReport]:
        cfg = self.config
        params = init_params(self.dataset.dim, cfg.hidden, self.init_rng)
        lam = np.zeros(len(self.constraints))
        for epoch in range(1, cfg.epochs + 1):
            for idx in epoch_batches(self.shuffle_rng, self.dataset.n, cfg.batch_size):
                params = self.primal_update(params, lam, self.dataset.subset(idx))
            lam, v = self.dual_update(params, lam, epoch)
            record = {
                "epoch": epoch,
                "train_loss": loss(params, self.dataset.features, self.dataset.labels),
                "train_acc": accuracy(params, self.dataset),
                "train_fv": fairness_violation_metric(params, self.dataset, cfg.fairness),
                "violations": v.tolist(),
                "lambda": lam.tolist(),
            }
            if self.eval_data is not None:
                record["test_acc"] = accuracy(params, self.eval_data)
                record["test_fv"] = fairness_violation_metric(params, self.eval_data, cfg.fairness)
            record.update(self.epoch_extras(epoch))
            self.report.epochs.append(record)
        return ModelState(params, lam, cfg.lambda_max), self.report


def train_fld(
    dataset: TabularDataset, config: TrainerConfig, eval_data: TabularDataset | None = None
) -> tuple[ModelState, TrainReport]:
    return LagrangianTrainer(dataset, config, eval_data).run()
