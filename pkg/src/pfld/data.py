"""Tabular datasets with a (possibly partially reported) protected attribute."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SNAPSHOT_VERSION = 1
UNKNOWN_GROUP = -1
ROLES = ("feature", "label", "protected", "drop")


class DataError(ValueError):
    """Base class for dataset problems."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class ValidationError(DataError):
    pass


def standardize(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale every column; constant columns keep std 1.

    Returns the standardized matrix together with the means and stds used.
    """
    features = np.asarray(features, dtype=np.float64)
    means = features.mean(axis=0)
    centered = features - means
    stds = np.sqrt(np.mean(centered**2, axis=0))
    stds = np.where(stds > 1e-12, stds, 1.0)
    return centered / stds, means, stds


@dataclass(frozen=True)
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    protected: np.ndarray
    protected_known: np.ndarray
    group_count: int
    feature_means: np.ndarray | None = None
    feature_stds: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    group_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.labels)
        if n < 1:
            raise ValidationError("dataset must contain at least one row")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValidationError("features must be an (n, d) matrix matching labels")
        if len(self.protected) != n or len(self.protected_known) != n:
            raise ValidationError("protected vectors must have one entry per row")
        if self.group_count < 1:
            raise ValidationError("group_count must be positive")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValidationError("labels must be binary")
        known = self.protected[self.protected_known]
        if known.size and (known.min() < 0 or known.max() >= self.group_count):
            raise ValidationError("known protected ids must lie in [0, group_count)")
        if not self.protected_known.any():
            raise ValidationError("at least one row must report the protected attribute")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def reported_fraction(self) -> float:
        return float(np.count_nonzero(self.protected_known)) / self.n

    def group_sizes(self, indices: np.ndarray | None = None) -> np.ndarray:
        """Known-attribute member counts per group, optionally restricted to rows."""
        prot, known = self.protected, self.protected_known
        if indices is not None:
            prot, known = prot[indices], known[indices]
        return np.bincount(prot[known], minlength=self.group_count)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "TabularDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TabularDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            protected=self.protected[idx],
            protected_known=self.protected_known[idx],
            group_count=self.group_count,
            feature_means=self.feature_means,
            feature_stds=self.feature_stds,
            feature_names=self.feature_names,
            group_names=self.group_names,
        )

    def hide_protected(self, reported_fraction: float, seed: int) -> "TabularDataset":
        """Mark a random share of rows as not reporting their protected attribute.

        Every group keeps at least two reporting members when it had them.
        """
        if not 0.0 < reported_fraction <= 1.0:
            raise ValidationError("reported_fraction must lie in (0, 1]")
        rng = np.random.default_rng(seed)
        known = self.protected_known.copy()
        for g in range(self.group_count):
            members = np.flatnonzero(known & (self.protected == g))
            keep = max(min(2, len(members)), int(round(reported_fraction * len(members))))
            hidden = rng.permutation(members)[keep:]
            known[hidden] = False
        protected = np.where(known, self.protected, UNKNOWN_GROUP)
        return TabularDataset(
            features=self.features,
            labels=self.labels,
            protected=protected,
            protected_known=known,
            group_count=self.group_count,
            feature_means=self.feature_means,
            feature_stds=self.feature_stds,
            feature_names=self.feature_names,
            group_names=self.group_names,
        )


# --------------------------------------------------------------------------
# CSV ingestion


@dataclass
class Schema:
    """Column roles plus a few ingestion options.

    The schema file is plain ``key = value`` text. Column lines map a header
    name to one of ``feature``, ``label``, ``protected`` or ``drop``. Lines
    whose key starts with ``@`` set options:

    ``@missing_token``         marker for an unreported protected value (default ``?``)
    ``@label_positive``        label value mapped to 1 when labels are not 0/1
    ``@protected_bins``        ascending numeric cut points for a numeric attribute
    ``@protected_bin_groups``  group id for each of the len(bins)+1 intervals
    """

    roles: dict[str, str]
    missing_token: str = "?"
    label_positive: str | None = None
    protected_bins: tuple[float, ...] = ()
    protected_bin_groups: tuple[int, ...] = ()

    def __post_init__(self):
        bad = {c: r for c, r in self.roles.items() if r not in ROLES}
        if bad:
            raise SchemaError(f"unknown roles: {bad}")
        for role in ("label", "protected"):
            count = sum(r == role for r in self.roles.values())
            if count != 1:
                raise SchemaError(f"schema must name exactly one {role} column, found {count}")
        if self.protected_bins:
            if list(self.protected_bins) != sorted(self.protected_bins):
                raise SchemaError("@protected_bins must be ascending")
            if len(self.protected_bin_groups) != len(self.protected_bins) + 1:
                raise SchemaError("@protected_bin_groups needs one entry per interval")

    def column(self, role: str) -> str:
        return next(c for c, r in self.roles.items() if r == role)

    @classmethod
    def parse(cls, text: str) -> "Schema":
        roles: dict[str, str] = {}
        options: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"schema line {lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key.startswith("@"):
                options[key[1:]] = value
            else:
                roles[key] = value
        kwargs: dict = {}
        if "missing_token" in options:
            kwargs["missing_token"] = options.pop("missing_token")
        if "label_positive" in options:
            kwargs["label_positive"] = options.pop("label_positive")
        if "protected_bins" in options:
            kwargs["protected_bins"] = tuple(float(v) for v in options.pop("protected_bins").split(","))
        if "protected_bin_groups" in options:
            kwargs["protected_bin_groups"] = tuple(
                int(v) for v in options.pop("protected_bin_groups").split(",")
            )
        if options:
            raise SchemaError(f"unknown schema options: {sorted(options)}")
        return cls(roles=roles, **kwargs)

    @classmethod
    def read(cls, path: str | Path) -> "Schema":
        return cls.parse(Path(path).read_text())


def _is_numeric(values: list[str]) -> bool:
    try:
        for v in values:
            float(v)
    except ValueError:
        return False
    return True


def load_csv(path: str | Path, schema: Schema | str | Path) -> TabularDataset:
    if not isinstance(schema, Schema):
        schema = Schema.read(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {rowno} has {len(row)} fields, header has {len(header)}"
                )
            rows.append([cell.strip() for cell in row])
    if not rows:
        raise ParseError(f"{path}: no data rows")

    missing_cols = [c for c in schema.roles if c not in header]
    if missing_cols:
        raise SchemaError(f"columns named in schema but absent from header: {missing_cols}")
    columns = {name: [r[j] for r in rows] for j, name in enumerate(header)}

    labels = _encode_labels(columns[schema.column("label")], schema)
    protected, known, group_names = _encode_protected(columns[schema.column("protected")], schema)

    blocks, names = [], []
    for col in header:
        if schema.roles.get(col, "feature") != "feature":
            continue
        values = columns[col]
        if _is_numeric(values):
            blocks.append(np.array([float(v) for v in values])[:, None])
            names.append(col)
        else:
            cats = sorted(set(values))
            blocks.append(np.array([[v == c for c in cats] for v in values], dtype=np.float64))
            names.extend(f"{col}={c}" for c in cats)
    if not blocks:
        raise SchemaError("schema selects no feature columns")
    raw = np.hstack(blocks)
    feats, means, stds = standardize(raw)
    m = len(group_names)
    dataset = TabularDataset(
        features=feats,
        labels=labels,
        protected=protected,
        protected_known=known,
        group_count=m,
        feature_means=means,
        feature_stds=stds,
        feature_names=tuple(names),
        group_names=tuple(group_names),
    )
    empty = np.flatnonzero(dataset.group_sizes() == 0)
    if empty.size:
        raise ValidationError(f"protected group(s) {[group_names[g] for g in empty]} have no members")
    return dataset


def _encode_labels(values: list[str], schema: Schema) -> np.ndarray:
    distinct = set(values)
    if schema.label_positive is not None:
        if len(distinct) > 2 or schema.label_positive not in distinct:
            raise SchemaError(
                f"label column is not binary with positive {schema.label_positive!r}: {sorted(distinct)[:5]}"
            )
        return np.array([v == schema.label_positive for v in values], dtype=np.int64)
    try:
        numeric = {float(v) for v in distinct}
    except ValueError:
        numeric = None
    if numeric is None or not numeric <= {0.0, 1.0}:
        raise SchemaError(f"label column is not binary: {sorted(distinct)[:5]}")
    return np.array([float(v) for v in values], dtype=np.float64).astype(np.int64)


def _encode_protected(values: list[str], schema: Schema):
    known = np.array([v != schema.missing_token for v in values])
    if schema.protected_bins:
        m = max(schema.protected_bin_groups) + 1
        ids = np.full(len(values), UNKNOWN_GROUP, dtype=np.int64)
        for i, v in enumerate(values):
            if known[i]:
                try:
                    interval = int(np.searchsorted(schema.protected_bins, float(v), side="right"))
                except ValueError:
                    raise SchemaError(f"protected value {v!r} is not numeric but bins are set") from None
                ids[i] = schema.protected_bin_groups[interval]
        return ids, known, [f"group{g}" for g in range(m)]
    cats = sorted({v for v, k in zip(values, known) if k})
    lookup = {c: g for g, c in enumerate(cats)}
    ids = np.array([lookup[v] if k else UNKNOWN_GROUP for v, k in zip(values, known)], dtype=np.int64)
    return ids, known, cats


# --------------------------------------------------------------------------
# snapshots


def save_snapshot(dataset: TabularDataset, path: str | Path) -> None:
    np.savez(
        path,
        format_version=np.array(SNAPSHOT_VERSION),
        features=dataset.features,
        labels=dataset.labels,
        protected=dataset.protected,
        protected_known=dataset.protected_known,
        group_count=np.array(dataset.group_count),
        feature_means=dataset.feature_means if dataset.feature_means is not None else np.zeros(0),
        feature_stds=dataset.feature_stds if dataset.feature_stds is not None else np.zeros(0),
        feature_names=np.array(dataset.feature_names, dtype=str),
        group_names=np.array(dataset.group_names, dtype=str),
    )


def load_snapshot(path: str | Path) -> TabularDataset:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != SNAPSHOT_VERSION:
            raise ParseError(f"unsupported snapshot version {version}")
        means, stds = z["feature_means"], z["feature_stds"]
        return TabularDataset(
            features=z["features"],
            labels=z["labels"],
            protected=z["protected"],
            protected_known=z["protected_known"],
            group_count=int(z["group_count"]),
            feature_means=means if means.size else None,
            feature_stds=stds if stds.size else None,
            feature_names=tuple(z["feature_names"].tolist()),
            group_names=tuple(z["group_names"].tolist()),
        )


# --------------------------------------------------------------------------
# synthetic data


def synthesize_biased(
    n: int,
    d: int,
    m: int,
    bias: float,
    seed: int,
    *,
    separation: float = 1.0,
    group_shift: float = 1.0,
    minority_share: float | None = None,
) -> TabularDataset:
    """Draw a labelled dataset whose positive rate differs across groups by ``bias``.

    Groups have (near) equal sizes unless ``minority_share`` gives group 0 a
    smaller share, the rest splitting evenly. Base rates spread linearly over
    ``0.5 +/- bias/2``, group 0 lowest. Features are Gaussian around a
    label-dependent mean along the first axis and a group-dependent mean along
    the second, so the group is partly recoverable from the features even
    though the protected attribute is never a model input.
    """
    if m < 1 or n < 4 * m:
        raise ValidationError(f"need n >= 4m, got n={n}, m={m}")
    if d < 2:
        raise ValidationError("need d >= 2")
    if not 0.0 <= bias <= 1.0:
        raise ValidationError("bias must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    if minority_share is None or m == 1:
        protected = rng.permutation(np.arange(n) % m)
    else:
        n0 = int(round(minority_share * n))
        if not 4 <= n0 <= n - 4 * (m - 1):
            raise ValidationError(f"minority_share={minority_share} leaves a group with fewer than 4 rows")
        rest = np.arange(n - n0) % (m - 1) + 1
        protected = rng.permutation(np.concatenate([np.zeros(n0, dtype=np.int64), rest]))
    position = protected / (m - 1) - 0.5 if m > 1 else np.zeros(n)
    base_rate = 0.5 + bias * position
    labels = (rng.random(n) < base_rate).astype(np.int64)

    raw = rng.standard_normal((n, d))
    raw[:, 0] += separation * (2 * labels - 1)
    raw[:, 1] += group_shift * 2 * position
    feats, means, stds = standardize(raw)
    return TabularDataset(
        features=feats,
        labels=labels,
        protected=protected.astype(np.int64),
        protected_known=np.ones(n, dtype=bool),
        group_count=m,
        feature_means=means,
        feature_stds=stds,
        feature_names=tuple(f"x{j}" for j in range(d)),
        group_names=tuple(f"group{g}" for g in range(m)),
    )


# --------------------------------------------------------------------------
# cross validation


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray
    stratified_by_group: bool = field(default=True)

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (train indices, test indices) for one fold."""
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


def kfold(dataset: TabularDataset, k: int, seed: int) -> FoldPlan:
    if k < 2 or k > dataset.n:
        raise ValidationError(f"need 2 <= k <= n, got k={k}, n={dataset.n}")
    rng = np.random.default_rng(seed)
    by_group = bool(np.all(dataset.group_sizes() >= k))
    if not by_group:
        warnings.warn(
            f"some protected group has fewer than k={k} members; stratifying by label only",
            stacklevel=2,
        )
    # Strata ordered label-major so each label occupies one contiguous run of
    # the round-robin sequence; that keeps per-fold label counts within one.
    group_key = np.where(dataset.protected_known, dataset.protected, dataset.group_count)
    order = []
    for y in (0, 1):
        if by_group:
            for g in range(dataset.group_count + 1):
                members = np.flatnonzero((dataset.labels == y) & (group_key == g))
                order.append(rng.permutation(members))
        else:
            order.append(rng.permutation(np.flatnonzero(dataset.labels == y)))
    sequence = np.concatenate(order)
    assignments = np.empty(dataset.n, dtype=np.int64)
    assignments[sequence] = np.arange(dataset.n) % k
    return FoldPlan(k=k, assignments=assignments, stratified_by_group=by_group)


def train_test_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = max(1, int(math.floor(test_fraction * n)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])
