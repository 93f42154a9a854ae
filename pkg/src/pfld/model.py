"""Two-hidden-layer ReLU network with a logistic output, in plain numpy.

Everything is float64. Besides the usual mean-loss gradient the module
exposes per-sample gradients of a scalar statistic h(z), either the predicted
probability or the per-sample cross-entropy; the fairness penalty and its
private counterpart are built from those.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

PROBABILITY = "probability"
LOSS = "loss"
STAT_KINDS = (PROBABILITY, LOSS)

CHECKPOINT_MAGIC = b"PFLDPRM1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Weights for d -> h1 -> h2 -> 1.

    Weight matrices are stored (fan_in, fan_out) so a batch forward is ``X @ W + b``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    @classmethod
    def unflatten(cls, flat: np.ndarray, dims: tuple[int, int, int]) -> "ModelParams":
        d, h1, h2 = dims
        shapes = [(d, h1), (h1,), (h1, h2), (h2,), (h2, 1), (1,)]
        expected = sum(int(np.prod(s)) for s in shapes)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (expected,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({expected},)")
        parts, offset = [], 0
        for shape in shapes:
            count = int(np.prod(shape))
            parts.append(flat[offset : offset + count].reshape(shape).copy())
            offset += count
        return cls(*parts)

    def copy(self) -> "ModelParams":
        return ModelParams(*(t.copy() for t in self.tensors()))

    def step(self, direction: np.ndarray, lr: float) -> "ModelParams":
        """Return params - lr * direction, with direction in flattened layout."""
        return ModelParams.unflatten(self.flatten() - lr * direction, self.dims)


def init_params(d: int, hidden: tuple[int, int] = (16, 16), seed: int | np.random.Generator = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h1, h2 = hidden

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)

    w1, b1 = layer(d, h1)
    w2, b2 = layer(h1, h2)
    w3, b3 = layer(h2, 1)
    return ModelParams(w1, b1, w2, b2, w3, b3)


def zero_params(d: int, hidden: tuple[int, int] = (16, 16)) -> ModelParams:
    h1, h2 = hidden
    return ModelParams(
        np.zeros((d, h1)), np.zeros(h1), np.zeros((h1, h2)), np.zeros(h2), np.zeros((h2, 1)), np.zeros(1)
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    logits: np.ndarray
    proba: np.ndarray


def forward(params: ModelParams, features: np.ndarray) -> ForwardCache:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise ValueError(f"features of shape {x.shape} do not match input dim {params.w1.shape[0]}")
    z1 = x @ params.w1 + params.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params.w2 + params.b2
    a2 = np.maximum(z2, 0.0)
    logits = (a2 @ params.w3)[:, 0] + params.b3[0]
    return ForwardCache(x, z1, a1, z2, a2, logits, expit(logits))


def predict_proba(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return forward(params, features).proba


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return (predict_proba(params, features) >= 0.5).astype(np.int64)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # log(1 + e^z) - y z, stable for large |z|
    return np.logaddexp(0.0, logits) - labels * logits


def loss(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy."""
    if len(labels) == 0:
        raise ValueError("loss of an empty batch")
    cache = forward(params, features)
    return float(np.mean(_cross_entropy(cache.logits, np.asarray(labels, dtype=np.float64))))


def _backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> np.ndarray:
    """Flattened gradient of sum_j dlogits[j] * logit_j."""
    da2 = np.outer(dlogits, params.w3[:, 0])
    dz2 = da2 * (cache.z2 > 0)
    da1 = dz2 @ params.w2.T
    dz1 = da1 * (cache.z1 > 0)
    return np.concatenate(
        [
            (cache.x.T @ dz1).ravel(),
            dz1.sum(axis=0),
            (cache.a1.T @ dz2).ravel(),
            dz2.sum(axis=0),
            (cache.a2.T @ dlogits)[:, None].ravel(),
            [dlogits.sum()],
        ]
    )


def grad_loss(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    cache = forward(params, features)
    n = len(labels)
    return _backward(params, cache, (cache.proba - labels) / n)


def _stat_and_dlogit(cache: ForwardCache, labels: np.ndarray | None, kind: str):
    if kind == PROBABILITY:
        p = cache.proba
        return p, p * (1.0 - p)
    if kind == LOSS:
        if labels is None:
            raise ValueError("loss statistic needs labels")
        y = np.asarray(labels, dtype=np.float64)
        return _cross_entropy(cache.logits, y), cache.proba - y
    raise ValueError(f"unknown statistic kind {kind!r}; expected one of {STAT_KINDS}")


def stat_values(params: ModelParams, features: np.ndarray, labels: np.ndarray | None, kind: str) -> np.ndarray:
    """h(z) for every row."""
    return _stat_and_dlogit(forward(params, features), labels, kind)[0]


def per_sample_stat_grads(
    params: ModelParams, features: np.ndarray, labels: np.ndarray | None, kind: str
) -> tuple[np.ndarray, np.ndarray]:
    """Values h(z) and their gradients, one row of the (b, S) matrix per sample."""
    if len(features) == 0:
        raise ValueError("no samples")
    cache = forward(params, features)
    values, dlogit = _stat_and_dlogit(cache, labels, kind)
    b = len(values)
    dw3 = cache.a2 * dlogit[:, None]
    dz2 = np.outer(dlogit, params.w3[:, 0]) * (cache.z2 > 0)
    dz1 = (dz2 @ params.w2.T) * (cache.z1 > 0)
    dw2 = cache.a1[:, :, None] * dz2[:, None, :]
    dw1 = cache.x[:, :, None] * dz1[:, None, :]
    grads = np.concatenate(
        [dw1.reshape(b, -1), dz1, dw2.reshape(b, -1), dz2, dw3, dlogit[:, None]], axis=1
    )
    return values, grads


# --------------------------------------------------------------------------
# checkpoints: magic, version, three dims, then float64 little-endian values


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    header = CHECKPOINT_MAGIC + struct.pack("<I3Q", CHECKPOINT_VERSION, *params.dims)
    Path(path).write_bytes(header + params.flatten().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, d, h1, h2 = struct.unpack_from("<I3Q", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    flat = np.frombuffer(blob, dtype="<f8", offset=8 + struct.calcsize("<I3Q")).astype(np.float64)
    return ModelParams.unflatten(flat, (d, h1, h2))
