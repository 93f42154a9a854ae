"""Group-fairness constraints as population-vs-group equalities of a statistic."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .data import TabularDataset
from .model import LOSS, PROBABILITY, ModelParams, predict, stat_values


class FairnessNotion(enum.Enum):
    DEMOGRAPHIC_PARITY = "dp"
    EQUALIZED_ODDS = "eo"
    ACCURACY_PARITY = "ap"

    @property
    def stat_kind(self) -> str:
        return LOSS if self is FairnessNotion.ACCURACY_PARITY else PROBABILITY

    @classmethod
    def parse(cls, value: "str | FairnessNotion") -> "FairnessNotion":
        return value if isinstance(value, cls) else cls(value.lower())


class ConstraintError(ValueError):
    def __init__(self, group: int, label: int | None = None):
        where = f"group {group}" if label is None else f"group {group} with label {label}"
        super().__init__(f"constraint group is empty: {where}")
        self.group = group
        self.label = label


@dataclass(frozen=True)
class Constraint:
    population: np.ndarray
    group: np.ndarray
    stat_kind: str
    group_id: int
    label: int | None = None

    @property
    def descriptor(self) -> str:
        return f"a={self.group_id}" if self.label is None else f"y={self.label},a={self.group_id}"


@dataclass(frozen=True)
class ConstraintSet:
    notion: FairnessNotion
    constraints: tuple[Constraint, ...]

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    def group_sizes(self) -> np.ndarray:
        return np.array([len(c.group) for c in self.constraints])


def build_constraints(
    dataset: TabularDataset,
    notion: FairnessNotion | str,
    indices: np.ndarray | None = None,
    *,
    strict: bool = True,
) -> ConstraintSet:
    """Index sets for each constraint of ``notion``.

    ``indices`` restricts to a subset of rows (a minibatch); returned index
    arrays always refer to rows of ``dataset``. Rows without a reported
    protected attribute join population terms only. With ``strict`` an empty
    group raises :class:`ConstraintError`; otherwise the constraint is kept
    with an empty group and the caller decides what to do with it.
    """
    notion = FairnessNotion.parse(notion)
    rows = np.arange(dataset.n) if indices is None else np.asarray(indices, dtype=np.int64)
    labels = dataset.labels[rows]
    known = dataset.protected_known[rows]
    prot = dataset.protected[rows]
    kind = notion.stat_kind

    cells: list[tuple[int | None, np.ndarray]]
    if notion is FairnessNotion.EQUALIZED_ODDS:
        cells = [(y, labels == y) for y in (0, 1)]
    else:
        cells = [(None, np.ones(len(rows), dtype=bool))]

    out = []
    for y, in_pop in cells:
        population = rows[in_pop]
        for g in range(dataset.group_count):
            group = rows[in_pop & known & (prot == g)]
            if strict and group.size == 0:
                raise ConstraintError(g, y)
            out.append(Constraint(population, group, kind, g, y))
    return ConstraintSet(notion, tuple(out))


def mu(params: ModelParams, dataset: TabularDataset, indices: np.ndarray, stat_kind: str) -> float:
    """Empirical mean of h over the given rows."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("mean statistic over an empty set")
    values = stat_values(params, dataset.features[indices], dataset.labels[indices], stat_kind)
    return float(np.mean(values))


def violations_from_values(values: np.ndarray, cset: ConstraintSet) -> np.ndarray:
    """|mean(values[population]) - mean(values[group])| per constraint.

    ``values`` is indexed by dataset row.
    """
    return np.array([abs(np.mean(values[c.population]) - np.mean(values[c.group])) for c in cset])


def violation_vector(params: ModelParams, dataset: TabularDataset, cset: ConstraintSet) -> np.ndarray:
    for c in cset:
        if c.group.size == 0 or c.population.size == 0:
            raise ConstraintError(c.group_id, c.label)
    values = stat_values(params, dataset.features, dataset.labels, cset.notion.stat_kind)
    return violations_from_values(values, cset)


def group_rates(
    stat: np.ndarray,
    labels: np.ndarray,
    protected: np.ndarray,
    known: np.ndarray,
    group_count: int,
    by_label: bool = False,
) -> dict:
    """Mean of a per-row evaluation statistic for every group, keyed by label cell.

    With ``by_label`` the rows are split by true label first (equalized odds);
    otherwise the single cell is keyed ``None``. Groups without members in a
    cell are left out of that cell.
    """
    stat = np.asarray(stat, dtype=np.float64)
    cells = [(y, labels == y) for y in (0, 1)] if by_label else [(None, np.ones(len(stat), dtype=bool))]
    out = {}
    for y, mask in cells:
        rates = {}
        for g in range(group_count):
            sel = mask & known & (protected == g)
            if sel.any():
                rates[g] = float(stat[sel].mean())
        out[y] = rates
    return out


def max_pairwise_gap(rates: dict) -> float:
    gaps = [0.0]
    for per_group in rates.values():
        vals = list(per_group.values())
        gaps.extend(abs(a - b) for a, b in combinations(vals, 2))
    return max(gaps)


def evaluation_stat(proba: np.ndarray, labels: np.ndarray, notion: FairnessNotion, hard: bool = True) -> np.ndarray:
    """Per-row statistic compared across groups: positive prediction or error."""
    pred = (proba >= 0.5).astype(np.float64) if hard else proba
    if notion is FairnessNotion.ACCURACY_PARITY:
        return np.abs(pred - labels)
    return pred


def fairness_violation_metric(
    params: ModelParams,
    dataset: TabularDataset,
    notion: FairnessNotion | str,
    *,
    hard: bool = True,
) -> float:
    """Largest gap of the group statistic between any two protected groups.

    Hard predictions (threshold 0.5) by default; ``hard=False`` uses the
    predicted probabilities instead.
    """
    notion = FairnessNotion.parse(notion)
    proba = stat_values(params, dataset.features, None, PROBABILITY)
    stat = evaluation_stat(proba, dataset.labels, notion, hard)
    rates = group_rates(stat, dataset.labels, dataset.protected, dataset.protected_known,
                        dataset.group_count, by_label=notion is FairnessNotion.EQUALIZED_ODDS)
    return max_pairwise_gap(rates)


def accuracy(params: ModelParams, dataset: TabularDataset) -> float:
    return float(np.mean(predict(params, dataset.features) == dataset.labels))
