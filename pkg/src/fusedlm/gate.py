"""Shared token-level gate and the logit-fusion arithmetic.

Each specialist's hidden state is scored by the same two-layer network; the
scores are softmaxed across specialists and used as convex weights on the
specialists' logits.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor


class GateNetwork:
    """``score(h) = relu(h @ w1 + b1) @ w2 + b2``.

    ``w1`` starts as N(0, 1/d_model) and everything else at zero, so an untrained
    gate gives every specialist exactly the same weight.
    """

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> None:
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def create(cls, d_model: int, d_gate: int | None = None, seed: int = 0) -> "GateNetwork":
        d_gate = d_gate or d_model
        rng = np.random.default_rng([seed, 7])
        return cls(
            Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), size=(d_model, d_gate)), requires_grad=True),
            Tensor(np.zeros(d_gate), requires_grad=True),
            Tensor(np.zeros((d_gate, 1)), requires_grad=True),
            Tensor(np.zeros(1), requires_grad=True),
        )

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def params(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "GateNetwork":
        return GateNetwork(*(Tensor(p.data.copy(), requires_grad=p.requires_grad) for p in self.params.values()))

    def score(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.d_model:
            raise ShapeError(f"gate expects width {self.d_model}, got {h.shape[-1]}")
        hidden = nc.relu(nc.add(nc.matmul(_as_matrix(h), self.w1), self.b1))
        return nc.add(nc.matmul(hidden, self.w2), self.b2)

    def weights(self, hiddens: Sequence[Tensor]) -> Tensor:
        return fuse_weights(nc.concat([self.score(h) for h in hiddens], axis=-1))

    def score_np(self, h: np.ndarray) -> np.ndarray:
        p = {k: v.data for k, v in self.params.items()}
        return np.maximum(h @ p["w1"] + p["b1"], 0.0) @ p["w2"] + p["b2"]

    def weights_np(self, hiddens: Sequence[np.ndarray]) -> np.ndarray:
        return nc._softmax_np(np.concatenate([self.score_np(h) for h in hiddens], axis=-1), -1)


class FixedGate:
    """A gate that ignores its inputs and returns a constant weight vector.

    Used to pin fusion to one specialist (one-hot) or to plain averaging.
    """

    params: dict[str, Tensor] = {}

    def __init__(self, weights: Sequence[float]) -> None:
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("fixed gate weights must be a probability vector")
        self.fixed = w

    @classmethod
    def one_hot(cls, index: int, n: int) -> "FixedGate":
        w = np.zeros(n)
        w[index] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, n: int) -> "FixedGate":
        return cls(np.full(n, 1.0 / n))

    def copy(self) -> "FixedGate":
        return FixedGate(self.fixed)

    def _check(self, hiddens) -> None:
        if len(hiddens) != len(self.fixed):
            raise ShapeError(f"fixed gate built for {len(self.fixed)} specialists, got {len(hiddens)}")

    def weights(self, hiddens: Sequence[Tensor]) -> Tensor:
        self._check(hiddens)
        return Tensor(np.broadcast_to(self.fixed, hiddens[0].shape[:-1] + (len(self.fixed),)).copy())

    def weights_np(self, hiddens: Sequence[np.ndarray]) -> np.ndarray:
        self._check(hiddens)
        return np.broadcast_to(self.fixed, hiddens[0].shape[:-1] + (len(self.fixed),)).copy()


def _as_matrix(h: Tensor) -> Tensor:
    return h if h.ndim >= 2 else nc.reshape(h, (1, h.shape[0]))


def score(gate: GateNetwork, h: Tensor) -> Tensor:
    return gate.score(h)


def fuse_weights(scores) -> Tensor:
    """Softmax over the trailing specialist axis of ``[..., S]`` scores."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    if scores.shape[-1] < 2:
        raise ShapeError("fusion needs at least two specialists")
    return nc.softmax(scores, axis=-1)


def fuse_logits(weights, logits: Sequence) -> Tensor:
    """``out[..., v] = sum_s weights[..., s] * logits[s][..., v]``."""
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    logits = [x if isinstance(x, Tensor) else Tensor(x) for x in logits]
    if len(logits) != weights.shape[-1]:
        raise ShapeError(f"{weights.shape[-1]} weights per position but {len(logits)} logit tensors")
    first = logits[0].shape
    if any(x.shape != first for x in logits) or weights.shape[:-1] != first[:-1]:
        raise ShapeError(f"logit shapes {[x.shape for x in logits]} vs weights {weights.shape}")
    stacked = nc.stack(logits, axis=-2)
    w = nc.reshape(weights, weights.shape + (1,))
    return nc.sum(nc.mul(w, stacked), axis=-2)
