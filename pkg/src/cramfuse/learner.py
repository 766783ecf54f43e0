"""Tiny trainable heads and an SGD-with-momentum loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TinyHead:
    """One or two affine maps with tanh in between.

    ``weights[k]`` has shape (in, out); ``biases[k]`` has shape (out,).
    """

    weights: list
    biases: list

    def __post_init__(self):
        if not 1 <= len(self.weights) <= 2 or len(self.weights) != len(self.biases):
            raise ValueError("TinyHead holds one or two affine layers")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: inconsistent shapes {w.shape} / {b.shape}")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ValueError("layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "TinyHead":
        return TinyHead([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def init(cls, in_dim: int, out_dim: int, hidden: int = 0, rng=None, scale: float = 1.0) -> "TinyHead":
        rng = np.random.default_rng(rng)
        if hidden <= 0:
            return cls([np.zeros((in_dim, out_dim))], [np.zeros(out_dim)])
        w1 = rng.standard_normal((in_dim, hidden)) * scale / np.sqrt(in_dim)
        return cls([w1, np.zeros((hidden, out_dim))], [np.zeros(hidden), np.zeros(out_dim)])

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, hidden: int = 0) -> "TinyHead":
        if hidden <= 0:
            return cls([np.zeros((in_dim, out_dim))], [np.zeros(out_dim)])
        return cls(
            [np.zeros((in_dim, hidden)), np.zeros((hidden, out_dim))],
            [np.zeros(hidden), np.zeros(out_dim)],
        )


def head_forward(head: TinyHead, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.in_dim:
        raise ValueError(f"head expects {head.in_dim} inputs, got {x.shape[-1]}")
    h = x @ head.weights[0] + head.biases[0]
    if len(head.weights) == 2:
        h = np.tanh(h) @ head.weights[1] + head.biases[1]
    return h


def head_backward(head: TinyHead, x, dy):
    """Gradients of a scalar loss through the head.

    Returns (grads, dx) where ``grads`` mirrors ``head.params()`` order
    (w0, b0[, w1, b1]).
    """
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if x.shape[-1] != head.in_dim or dy.shape[-1] != head.out_dim:
        raise ValueError("dimension mismatch in head_backward")
    x2 = x.reshape(-1, head.in_dim)
    dy2 = dy.reshape(-1, head.out_dim)
    if len(head.weights) == 1:
        grads = [x2.T @ dy2, dy2.sum(axis=0)]
        dx = dy2 @ head.weights[0].T
    else:
        a = np.tanh(x2 @ head.weights[0] + head.biases[0])
        grads_w1 = a.T @ dy2
        grads_b1 = dy2.sum(axis=0)
        da = (dy2 @ head.weights[1].T) * (1.0 - a * a)
        grads = [x2.T @ da, da.sum(axis=0), grads_w1, grads_b1]
        dx = da @ head.weights[0].T
    return grads, dx.reshape(x.shape)


Heads = dict  # name -> TinyHead


def copy_heads(heads: Heads) -> Heads:
    return {k: v.copy() for k, v in heads.items()}


@dataclass
class FitResult:
    heads: Heads
    trace: list = field(default_factory=list)


def _clip(grads: list, max_norm: float) -> list:
    if max_norm is None or max_norm <= 0:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return grads


def fit(heads: Heads, dataset, config: TrainConfig, objective: Callable | None = None) -> FitResult:
    """SGD with momentum on the objective summed over a batch of frames.

    ``objective(heads, item, rng)`` returns ``(loss, grads)`` where grads
    maps head name to a list aligned with ``TinyHead.params()``; heads
    absent from ``grads`` get zero gradient. Gradients are clipped to
    ``config.clip_norm`` per head. The trace holds the batch-mean loss
    evaluated before each update.
    """
    if len(dataset) == 0:
        raise ValueError("fit needs a non-empty dataset")
    if objective is None:
        from .pipeline import training_objective as objective
    heads = copy_heads(heads)
    names = sorted(heads)
    velocity = {k: [np.zeros_like(p) for p in heads[k].params()] for k in names}
    rng = np.random.default_rng(config.seed)
    trace = []
    for step in range(config.steps):
        batch = rng.choice(len(dataset), size=min(config.batch, len(dataset)), replace=False)
        total = 0.0
        acc = {k: [np.zeros_like(p) for p in heads[k].params()] for k in names}
        for idx in sorted(batch.tolist()):
            loss, grads = objective(heads, dataset[idx], rng)
            total += loss
            for k, g in grads.items():
                for a, gi in zip(acc[k], g):
                    a += gi
        total /= len(batch)
        if not np.isfinite(total):
            raise DivergenceError(f"loss became non-finite at step {step}")
        trace.append(float(total))
        for k in names:
            g = _clip([a / len(batch) for a in acc[k]], config.clip_norm)
            params = heads[k].params()
            for p, v, gi in zip(params, velocity[k], g):
                v *= config.momentum
                v -= config.learning_rate * gi
                p += v
        if step % 50 == 0:
            log.debug("step %d loss %.5f", step, total)
    return FitResult(heads, trace)


def save_heads(path, heads: Heads, meta: dict | None = None) -> None:
    """Write heads as CRMH records plus a JSON sidecar with names and meta."""
    from .dataset import HEAD_MAGIC, write_records

    path = Path(path)
    names = sorted(heads)
    arrays, layout = [], {}
    for name in names:
        layout[name] = len(heads[name].weights)
        arrays.extend(heads[name].params())
    write_records(path, arrays, magic=HEAD_MAGIC)
    sidecar = {"heads": names, "layers": layout, "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_heads(path):
    """Inverse of ``save_heads``; returns (heads, meta)."""
    from .dataset import HEAD_MAGIC, ParseError, read_records

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} not found")
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    arrays = [a.astype(np.float64) for a in read_records(path, magic=HEAD_MAGIC)]
    heads, pos = {}, 0
    for name in sidecar["heads"]:
        n = sidecar["layers"][name]
        chunk = arrays[pos:pos + 2 * n]
        if len(chunk) != 2 * n:
            raise ParseError(f"{path}: missing records for head {name!r}")
        heads[name] = TinyHead(chunk[0::2], chunk[1::2])
        pos += 2 * n
    return heads, sidecar.get("meta", {})
