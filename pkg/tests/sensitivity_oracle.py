"""Exhaustive adjacency enumeration for the clipped private releases.

A toy is a handful of rows with a statistic value, a per-sample gradient and
a group id in {0, 1}. Adjacent toys differ in exactly one group id. The
releases are evaluated through the privacy module with zero noise, so what is
measured is the implementation's own clipped function.
"""

from dataclasses import dataclass

import numpy as np

from pfld.data import TabularDataset
from pfld.fairness import build_constraints
from pfld.privacy import private_penalty_gradient, private_violations


@dataclass
class Toy:
    values: np.ndarray
    grads: np.ndarray
    groups: np.ndarray
    lam: np.ndarray
    clip_grad: float
    clip_value: float
    lambda_max: float


def random_toy(rng, n_max=8, dim=3, clip_grad=1.0, clip_value=1.0, lambda_max=1.0) -> Toy:
    """Nonnegative statistics up to 1.5x the value clip and gradients up to 2x the gradient clip."""
    n = int(rng.integers(4, n_max + 1))
    while True:
        groups = rng.integers(0, 2, n)
        if np.bincount(groups, minlength=2).min() >= 2:
            break
    values = rng.uniform(0.0, 1.5 * clip_value, n)
    directions = rng.normal(size=(n, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    grads = directions * rng.uniform(0.0, 2.0 * clip_grad, n)[:, None]
    lam = rng.uniform(0.0, lambda_max, 2)
    return Toy(values, grads, groups, lam, clip_grad, clip_value, lambda_max)


def constraint_set(groups):
    n = len(groups)
    ds = TabularDataset(np.zeros((n, 1)), np.zeros(n, dtype=np.int64), groups, np.ones(n, bool), 2)
    return build_constraints(ds, "dp")


def dual_release(toy: Toy, groups):
    return private_violations(
        toy.values, constraint_set(groups), clip_value_bound=toy.clip_value, sigma=0.0,
        reported_fraction=1.0, rng=np.random.default_rng(0),
    )


def primal_release(toy: Toy, groups):
    return private_penalty_gradient(
        toy.values, toy.grads, constraint_set(groups), toy.lam, clip_grad=toy.clip_grad, sigma=0.0,
        lambda_max=toy.lambda_max, reported_fraction=1.0, rng=np.random.default_rng(0),
    )


def neighbours(groups):
    """Every group vector differing in one entry that keeps both groups at >= 2 members."""
    for j in range(len(groups)):
        other = groups.copy()
        other[j] = 1 - other[j]
        if np.bincount(other, minlength=2).min() >= 2:
            yield other


def violation_signs(toy: Toy, groups):
    """Sign of population mean minus group mean per group, as the penalty subgradient sees it."""
    return np.sign([toy.values.mean() - toy.values[groups == g].mean() for g in (0, 1)])


def worst_changes(toy: Toy) -> dict:
    """Largest realised change and the slack to the base toy's sensitivity, per release.

    Each ordered pair (toy, neighbour) is checked against the sensitivity the
    mechanism would use on the base toy. Primal pairs over the bound are
    counted separately by whether some violation changed sign.
    """
    out = {"dual_change": 0.0, "dual_excess": -np.inf, "primal_change": 0.0, "primal_excess": -np.inf, "pairs": 0,
           "primal_bad_flip": 0, "primal_bad_same_sign": 0}
    base_d, base_p = dual_release(toy, toy.groups), primal_release(toy, toy.groups)
    base_signs = violation_signs(toy, toy.groups)
    for other in neighbours(toy.groups):
        out["pairs"] += 1
        d = float(np.linalg.norm(base_d.value - dual_release(toy, other).value))
        p = float(np.linalg.norm(base_p.value - primal_release(toy, other).value))
        out["dual_change"] = max(out["dual_change"], d)
        out["primal_change"] = max(out["primal_change"], p)
        out["dual_excess"] = max(out["dual_excess"], d - base_d.sensitivity)
        out["primal_excess"] = max(out["primal_excess"], p - base_p.sensitivity)
        if p - base_p.sensitivity > 1e-9:
            flipped = np.any(violation_signs(toy, other) != base_signs)
            out["primal_bad_flip" if flipped else "primal_bad_same_sign"] += 1
    return out
