"""Private and fair Lagrangian dual training.

Only the terms that read the protected attribute are privatised: the group
part of the penalty gradient (per-sample clipping to C_p, Gaussian noise
scaled by the primal sensitivity) and the group means in the dual update
(value clipping to C_d, Gaussian noise scaled by the dual sensitivity).
The loss gradient and population terms use public data and stay exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np

from .accountant import DUAL, PRIMAL, PrivacyLedger, calibrate_sigma
from .data import TabularDataset
from .fairness import ConstraintSet, build_constraints
from .lagrangian import (
    LagrangianTrainer,
    ModelState,
    TrainerConfig,
    TrainReport,
    penalty_gradient,
)
from .model import ModelParams, grad_loss, per_sample_stat_grads, stat_values

log = logging.getLogger(__name__)

REALIZED = "realized"
BOUNDED = "bounded"


class PrivacyError(ValueError):
    pass


@dataclass
class PrivacyConfig:
    clip_grad: float = 10.0
    clip_value: float = 5.0
    sigma_primal: float = 1.0
    sigma_dual: float = 1.0
    reported_fraction: float | None = None
    target_epsilon: float | None = None
    delta: float = 1e-5
    dual_ratio: float = 1.0
    group_size_mode: str = REALIZED

    def __post_init__(self):
        if self.clip_grad <= 0 or self.clip_value <= 0:
            raise PrivacyError("clipping bounds must be positive")
        if self.sigma_primal < 0 or self.sigma_dual < 0:
            raise PrivacyError("noise multipliers must be nonnegative")
        if self.reported_fraction is not None and not 0 < self.reported_fraction <= 1:
            raise PrivacyError("reported_fraction must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise PrivacyError("delta must lie in (0, 1)")
        if self.group_size_mode not in (REALIZED, BOUNDED):
            raise PrivacyError(f"group_size_mode must be {REALIZED!r} or {BOUNDED!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def clip_gradient(g: np.ndarray, bound: float) -> np.ndarray:
    """Scale ``g`` into the l2 ball of radius ``bound``."""
    return g / max(1.0, float(np.linalg.norm(g)) / bound)


def clip_gradients(rows: np.ndarray, bound: float) -> np.ndarray:
    """Row-wise :func:`clip_gradient`."""
    scale = np.maximum(1.0, np.linalg.norm(rows, axis=1) / bound)
    return rows / scale[:, None]


def clip_value(h, bound: float):
    """Scale ``h`` (scalar or array) into [-bound, bound]."""
    return np.clip(h, -bound, bound)


def sensitivity_primal(
    min_group_size: int, clip_grad: float, lambda_max: float, reported_fraction: float = 1.0
) -> float:
    """2 C_p lambda_max / (min_i |B_G_i| - 1), divided by the reported fraction."""
    if min_group_size < 2:
        raise PrivacyError(f"primal sensitivity needs every group size >= 2, got {min_group_size}")
    return 2.0 * clip_grad * lambda_max / (min_group_size - 1) / reported_fraction


def sensitivity_dual(min_group_size: int, clip_value: float, reported_fraction: float = 1.0) -> float:
    """sqrt(2) C_d / (min_i |D_G_i| - 1), divided by the reported fraction."""
    if min_group_size < 2:
        raise PrivacyError(f"dual sensitivity needs every group size >= 2, got {min_group_size}")
    return math.sqrt(2.0) * clip_value / (min_group_size - 1) / reported_fraction


@dataclass
class NoisyRelease:
    value: np.ndarray
    sensitivity: float
    min_group_size: int
    skipped: list[int]


def private_penalty_gradient(
    values: np.ndarray,
    grads: np.ndarray,
    cset: ConstraintSet,
    lam: np.ndarray,
    *,
    clip_grad: float,
    sigma: float,
    lambda_max: float,
    reported_fraction: float,
    rng: np.random.Generator,
    min_group_size: int | None = None,
) -> NoisyRelease:
    """Clipped penalty gradient plus N(0, (sigma * Delta_p)^2 I).

    ``min_group_size`` overrides the realised smallest group in the
    sensitivity denominator (data-independent bound mode).
    """
    penalty, skipped = penalty_gradient(
        values, grads, cset, lam, group_transform=partial(clip_gradients, bound=clip_grad), min_group=2
    )
    used = [len(c.group) for i, c in enumerate(cset) if i not in skipped]
    if not used:
        return NoisyRelease(penalty, 0.0, 0, skipped)
    denom = min(used) if min_group_size is None else min_group_size
    delta_p = sensitivity_primal(denom, clip_grad, lambda_max, reported_fraction)
    std = sigma * delta_p
    if std > 0:
        penalty = penalty + rng.normal(0.0, std, size=penalty.shape)
    return NoisyRelease(penalty, delta_p, denom, skipped)


def private_violations(
    values: np.ndarray,
    cset: ConstraintSet,
    *,
    clip_value_bound: float,
    sigma: float,
    reported_fraction: float,
    rng: np.random.Generator,
) -> NoisyRelease:
    """|mu(P_i) - clipped mu(G_i)| + N(0, (sigma * Delta_d)^2) per constraint."""
    sizes = cset.group_sizes()
    if sizes.min() < 2:
        bad = cset.constraints[int(np.argmin(sizes))]
        raise PrivacyError(f"dual update needs >= 2 reporting members per group; {bad.descriptor} has {sizes.min()}")
    v = np.array(
        [abs(np.mean(values[c.population]) - np.mean(clip_value(values[c.group], clip_value_bound))) for c in cset]
    )
    delta_d = sensitivity_dual(int(sizes.min()), clip_value_bound, reported_fraction)
    std = sigma * delta_d
    if std > 0:
        v = v + rng.normal(0.0, std, size=v.shape)
    return NoisyRelease(v, delta_d, int(sizes.min()), [])


def private_primal_step(
    params: ModelParams,
    lam: np.ndarray,
    batch: TabularDataset,
    lr: float,
    config: PrivacyConfig,
    lambda_max: float,
    rng: np.random.Generator,
    *,
    notion="dp",
    reported_fraction: float = 1.0,
    min_group_size: int | None = None,
) -> tuple[ModelParams, NoisyRelease | None]:
    """One private descent step; the loss gradient is exact, the penalty noisy.

    With all multipliers at zero the penalty vanishes identically and the
    step is a plain gradient step (nothing sensitive is read).
    """
    g = grad_loss(params, batch.features, batch.labels)
    if not np.any(lam):
        return params.step(g, lr), None
    cset = build_constraints(batch, notion, strict=False)
    values, grads = per_sample_stat_grads(params, batch.features, batch.labels, cset.notion.stat_kind)
    release = private_penalty_gradient(
        values,
        grads,
        cset,
        lam,
        clip_grad=config.clip_grad,
        sigma=config.sigma_primal,
        lambda_max=lambda_max,
        reported_fraction=reported_fraction,
        rng=rng,
        min_group_size=min_group_size,
    )
    if release.skipped:
        log.info("private step skipped constraints %s (< 2 reporting members)",
                 [cset.constraints[i].descriptor for i in release.skipped])
    return params.step(g + release.value, lr), release


def private_dual_step(
    lam: np.ndarray,
    values: np.ndarray,
    cset: ConstraintSet,
    config: PrivacyConfig,
    step: float,
    lambda_max: float,
    rng: np.random.Generator,
    *,
    reported_fraction: float = 1.0,
) -> tuple[np.ndarray, NoisyRelease]:
    """Noisy multiplier ascent, projected back onto [0, lambda_max]."""
    release = private_violations(
        values,
        cset,
        clip_value_bound=config.clip_value,
        sigma=config.sigma_dual,
        reported_fraction=reported_fraction,
        rng=rng,
    )
    return np.clip(lam + step * release.value, 0.0, lambda_max), release


class PrivateLagrangianTrainer(LagrangianTrainer):
    def __init__(
        self,
        dataset: TabularDataset,
        config: TrainerConfig,
        privacy: PrivacyConfig,
        eval_data: TabularDataset | None = None,
    ):
        super().__init__(dataset, config, eval_data)
        sizes = self.constraints.group_sizes()
        if sizes.min() < 2:
            raise PrivacyError("every protected group needs >= 2 reporting members")
        self.reported_fraction = privacy.reported_fraction or dataset.reported_fraction
        self.q = min(1.0, config.batch_size / dataset.n)
        batches_per_epoch = math.ceil(dataset.n / config.batch_size)
        if privacy.target_epsilon is not None:
            sigma_p, sigma_d = calibrate_sigma(
                privacy.target_epsilon,
                privacy.delta,
                self.q,
                config.epochs * batches_per_epoch,
                config.epochs,
                privacy.dual_ratio,
            )
            privacy = PrivacyConfig(**{**privacy.to_dict(), "sigma_primal": sigma_p, "sigma_dual": sigma_d})
        self.privacy = privacy
        self.fixed_min_group = None
        if privacy.group_size_mode == BOUNDED:
            self.fixed_min_group = int(math.floor(self.q * sizes.min()))
            if self.fixed_min_group < 2:
                raise PrivacyError("bounded group-size mode needs q * min group size >= 2")
        self.ledger = PrivacyLedger()

    def primal_update(self, params, lam, batch):
        params, release = private_primal_step(
            params,
            lam,
            batch,
            self.config.lr,
            self.privacy,
            self.config.lambda_max,
            self.noise_rng,
            notion=self.config.fairness,
            reported_fraction=self.reported_fraction,
            min_group_size=self.fixed_min_group,
        )
        self.ledger.compose(PRIMAL, self.q, self.privacy.sigma_primal)
        if release is not None:
            self.report.skipped_constraints += len(release.skipped)
            if release.min_group_size:
                self.ledger.record_sensitivity(
                    PRIMAL, release.sensitivity, release.min_group_size, self.reported_fraction
                )
        return params

    def dual_update(self, params, lam, epoch):
        values = stat_values(params, self.dataset.features, self.dataset.labels, self.constraints.notion.stat_kind)
        lam, release = private_dual_step(
            lam,
            values,
            self.constraints,
            self.privacy,
            self.config.step_size(epoch),
            self.config.lambda_max,
            self.noise_rng,
            reported_fraction=self.reported_fraction,
        )
        self.ledger.compose(DUAL, 1.0, self.privacy.sigma_dual)
        self.ledger.record_sensitivity(DUAL, release.sensitivity, release.min_group_size, self.reported_fraction)
        return lam, release.value

    def epoch_extras(self, epoch):
        return {"epsilon": self.ledger.epsilon(self.privacy.delta)}


def train_pfld(
    dataset: TabularDataset,
    config: TrainerConfig,
    privacy: PrivacyConfig,
    eval_data: TabularDataset | None = None,
) -> tuple[ModelState, TrainReport, PrivacyLedger]:
    trainer = PrivateLagrangianTrainer(dataset, config, privacy, eval_data)
    state, report = trainer.run()
    return state, report, trainer.ledger
