"""Error bounds for clipped, noised releases and tools to pick clipping bounds.

Both bounds split the expected error of a private release into a noise part
(grows with the clip) and a clipping-bias part (shrinks with it). The
expectations are empirical: averages over the per-sample norms or values the
caller supplies for each constraint group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TabularDataset
from .fairness import ConstraintSet, violations_from_values
from .lagrangian import penalty_gradient
from .model import ModelParams, per_sample_stat_grads
from .privacy import private_penalty_gradient, private_violations


class BoundError(ValueError):
    pass


@dataclass
class BoundInputs:
    """Everything the bound calculators read.

    ``grad_norms[i]`` and ``value_magnitudes[i]`` hold the per-sample
    gradient norms and |h| values of the members of constraint ``i``'s group.
    """

    dim: int
    sigma_primal: float
    sigma_dual: float
    clip_grad: float
    clip_value: float
    lambda_max: float
    multipliers: np.ndarray
    min_batch_group: int
    min_data_group: int
    grad_norms: list[np.ndarray] = field(default_factory=list)
    value_magnitudes: list[np.ndarray] = field(default_factory=list)
    reported_fraction: float = 1.0

    def __post_init__(self):
        self.multipliers = np.asarray(self.multipliers, dtype=np.float64)
        self.grad_norms = [np.asarray(a, dtype=np.float64) for a in self.grad_norms]
        self.value_magnitudes = [np.abs(np.asarray(a, dtype=np.float64)) for a in self.value_magnitudes]
        if self.dim < 1:
            raise BoundError("dim must be positive")
        if min(self.sigma_primal, self.sigma_dual, self.clip_grad, self.clip_value, self.lambda_max) < 0:
            raise BoundError("noise multipliers, clips and lambda_max must be nonnegative")
        if np.any(self.multipliers < 0):
            raise BoundError("multipliers must be nonnegative")
        if not 0 < self.reported_fraction <= 1:
            raise BoundError("reported_fraction must lie in (0, 1]")
        for name in ("grad_norms", "value_magnitudes"):
            lists = getattr(self, name)
            if lists and len(lists) != len(self.multipliers):
                raise BoundError(f"{name} needs one array per constraint")
            if any(a.size == 0 for a in lists):
                raise BoundError(f"{name} has an empty group")


def _check_min(size: int, what: str) -> None:
    if size < 2:
        raise BoundError(f"{what} group size must be >= 2, got {size}")


def primal_noise_scale(inputs: BoundInputs) -> float:
    """Slope of the noise part of the primal bound in the clip C_p."""
    _check_min(inputs.min_batch_group, "min batch")
    return (
        2.0 * math.sqrt(inputs.dim) * inputs.sigma_primal * inputs.lambda_max
        / (inputs.min_batch_group - 1) / inputs.reported_fraction
    )


def primal_error_bound(inputs: BoundInputs, clip_grad: float | None = None) -> float:
    """Bound on E||G - G~|| for the clipped, noised penalty gradient."""
    c = inputs.clip_grad if clip_grad is None else clip_grad
    if not inputs.grad_norms:
        raise BoundError("primal bound needs per-group gradient norms")
    bias = sum(
        lam * float(np.mean(np.maximum(0.0, norms - c)))
        for lam, norms in zip(inputs.multipliers, inputs.grad_norms)
    )
    return float(primal_noise_scale(inputs) * c + bias)


def optimal_cp_residual(inputs: BoundInputs, clip_grad: float) -> float:
    """Noise slope minus the multiplier-weighted share of norms at or above the clip.

    Negative means raising the clip still lowers the bound.
    """
    share = sum(
        lam * float(np.mean(norms >= clip_grad)) for lam, norms in zip(inputs.multipliers, inputs.grad_norms)
    )
    return primal_noise_scale(inputs) - share


def optimal_clip_grad(inputs: BoundInputs) -> float:
    """Clip minimising :func:`primal_error_bound` over the observed norms.

    The bound is piecewise linear between consecutive knots ``u_j`` (zero and
    the distinct norms), with slope ``residual(u_{j+1})`` to the right of
    ``u_j``. The residual only grows with the clip, so bisection finds the
    first knot whose right slope is nonnegative. A result of 0 means the noise
    outweighs any gradient signal at every clip.
    """
    if not inputs.grad_norms:
        raise BoundError("clip search needs per-group gradient norms")
    knots = np.unique(np.concatenate([[0.0], *inputs.grad_norms]))

    def right_slope(j: int) -> float:
        if j + 1 >= len(knots):
            return primal_noise_scale(inputs)
        return optimal_cp_residual(inputs, float(knots[j + 1]))

    lo, hi = 0, len(knots) - 1
    if right_slope(lo) >= 0:
        return float(knots[0])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if right_slope(mid) >= 0:
            hi = mid
        else:
            lo = mid
    return float(knots[hi])


def dual_error_bound(inputs: BoundInputs, constraint: int, clip_value: float | None = None) -> float:
    """Bound on E|V_i - V~_i| for the clipped, noised violation of one constraint."""
    c = inputs.clip_value if clip_value is None else clip_value
    _check_min(inputs.min_data_group, "min dataset")
    if not inputs.value_magnitudes:
        raise BoundError("dual bound needs per-group statistic values")
    noise = math.sqrt(2.0) * c * inputs.sigma_dual / (inputs.min_data_group - 1) / inputs.reported_fraction
    bias = float(np.mean(np.maximum(0.0, inputs.value_magnitudes[constraint] - c)))
    return noise + bias


def bound_curve(inputs: BoundInputs, grid, kind: str = "primal", constraint: int = 0) -> list[tuple[float, float]]:
    """(clip, bound) pairs over ``grid`` for ``kind`` in {"primal", "dual"}."""
    if kind == "primal":
        return [(float(c), primal_error_bound(inputs, float(c))) for c in grid]
    if kind == "dual":
        return [(float(c), dual_error_bound(inputs, constraint, float(c))) for c in grid]
    raise BoundError(f"unknown bound kind {kind!r}")


def bound_inputs_from_model(
    params: ModelParams,
    dataset: TabularDataset,
    cset: ConstraintSet,
    multipliers: np.ndarray,
    *,
    sigma_primal: float,
    sigma_dual: float,
    clip_grad: float,
    clip_value: float,
    lambda_max: float,
    batch_size: int,
) -> BoundInputs:
    """Collect empirical norms and values for ``cset`` on ``dataset``.

    The smallest batch group is estimated as the expected share of a batch,
    ``floor(batch_size / n * min group size)``.
    """
    values, grads = per_sample_stat_grads(params, dataset.features, dataset.labels, cset.notion.stat_kind)
    norms = np.linalg.norm(grads, axis=1)
    sizes = cset.group_sizes()
    q = min(1.0, batch_size / dataset.n)
    return BoundInputs(
        dim=grads.shape[1],
        sigma_primal=sigma_primal,
        sigma_dual=sigma_dual,
        clip_grad=clip_grad,
        clip_value=clip_value,
        lambda_max=lambda_max,
        multipliers=multipliers,
        min_batch_group=max(2, int(math.floor(q * sizes.min()))),
        min_data_group=int(sizes.min()),
        grad_norms=[norms[c.group] for c in cset],
        value_magnitudes=[values[c.group] for c in cset],
        reported_fraction=dataset.reported_fraction,
    )


def inputs_for_release(
    values: np.ndarray,
    grads: np.ndarray,
    cset: ConstraintSet,
    lam: np.ndarray,
    **settings,
) -> BoundInputs:
    """BoundInputs matching exactly the release computed on (values, grads, cset)."""
    sizes = cset.group_sizes()
    norms = np.linalg.norm(grads, axis=1)
    return BoundInputs(
        dim=grads.shape[1],
        multipliers=lam,
        min_batch_group=int(sizes.min()),
        min_data_group=int(sizes.min()),
        grad_norms=[norms[c.group] for c in cset],
        value_magnitudes=[values[c.group] for c in cset],
        **settings,
    )


# --------------------------------------------------------------------------
# Monte Carlo checks against the private module's actual releases


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    draws: int


def _estimate(errors: np.ndarray) -> MonteCarloEstimate:
    return MonteCarloEstimate(float(errors.mean()), float(errors.std(ddof=1) / math.sqrt(len(errors))), len(errors))


def monte_carlo_primal_error(
    values: np.ndarray,
    grads: np.ndarray,
    cset: ConstraintSet,
    inputs: BoundInputs,
    draws: int,
    rng: np.random.Generator,
) -> MonteCarloEstimate:
    """Sampled ||G - G~|| where G is the exact and G~ the private penalty gradient."""
    exact, _ = penalty_gradient(values, grads, cset, inputs.multipliers)
    errors = np.empty(draws)
    for k in range(draws):
        noisy = private_penalty_gradient(
            values,
            grads,
            cset,
            inputs.multipliers,
            clip_grad=inputs.clip_grad,
            sigma=inputs.sigma_primal,
            lambda_max=inputs.lambda_max,
            reported_fraction=inputs.reported_fraction,
            rng=rng,
        )
        errors[k] = np.linalg.norm(exact - noisy.value)
    return _estimate(errors)


def monte_carlo_dual_error(
    values: np.ndarray,
    cset: ConstraintSet,
    inputs: BoundInputs,
    constraint: int,
    draws: int,
    rng: np.random.Generator,
) -> MonteCarloEstimate:
    """Sampled |V_i - V~_i| for one constraint of the private violation release."""
    exact = violations_from_values(values, cset)[constraint]
    errors = np.empty(draws)
    for k in range(draws):
        noisy = private_violations(
            values,
            cset,
            clip_value_bound=inputs.clip_value,
            sigma=inputs.sigma_dual,
            reported_fraction=inputs.reported_fraction,
            rng=rng,
        )
        errors[k] = abs(exact - noisy.value[constraint])
    return _estimate(errors)


def with_clips(inputs: BoundInputs, clip_grad: float | None = None, clip_value: float | None = None) -> BoundInputs:
    return replace(
        inputs,
        clip_grad=inputs.clip_grad if clip_grad is None else clip_grad,
        clip_value=inputs.clip_value if clip_value is None else clip_value,
    )
