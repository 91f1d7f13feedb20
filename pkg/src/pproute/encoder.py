"""A single MPC-friendly transformer block.

Softmax is replaced by the 2ReLU normalization and GeLU by ReLU. There is
no residual path and no LayerNorm. Weights are the router party's private
inputs; activations are shared.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ring
from .engine import Party
from .errors import ConfigurationError
from .protocols import relu, secure_matmul, softmax_2relu
from .ring import FixedPointConfig
from .sharing import FixedShare, mul_public

WEIGHT_LIMIT = 4.0
_MATS = ("W_q", "W_k", "W_v", "W1", "b1", "W2", "b2")


@dataclass
class EncoderWeights:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        for name in _MATS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d, d_ff = self.d, self.d_ff
        want = {
            "W_q": (d, d), "W_k": (d, d), "W_v": (d, d),
            "W1": (d, d_ff), "b1": (d_ff,), "W2": (d_ff, d), "b2": (d,),
        }
        for name, shape in want.items():
            a = getattr(self, name)
            if a.shape != shape:
                raise ConfigurationError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)) or np.any(np.abs(a) > WEIGHT_LIMIT):
                raise ConfigurationError(f"{name} entries must be finite with magnitude <= {WEIGHT_LIMIT}")

    @property
    def d(self) -> int:
        return int(self.W_q.shape[0])

    @property
    def d_ff(self) -> int:
        return int(self.W1.shape[1])

    @classmethod
    def random(cls, d: int, d_ff: int | None = None, seed: int = 0) -> "EncoderWeights":
        d_ff = 2 * d if d_ff is None else d_ff
        rng = np.random.default_rng(seed)

        def mat(rows, cols):
            return np.clip(rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols)), -WEIGHT_LIMIT, WEIGHT_LIMIT)

        return cls(
            mat(d, d), mat(d, d), mat(d, d),
            mat(d, d_ff), rng.uniform(-0.1, 0.1, d_ff),
            mat(d_ff, d), rng.uniform(-0.1, 0.1, d),
        )

    def to_dict(self) -> dict:
        out = {"d": self.d, "d_ff": self.d_ff}
        out.update({name: getattr(self, name).tolist() for name in _MATS})
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderWeights":
        try:
            w = cls(**{name: data[name] for name in _MATS})
        except KeyError as exc:
            raise ConfigurationError(f"weights file lacks {exc}") from exc
        if ("d" in data and data["d"] != w.d) or ("d_ff" in data and data["d_ff"] != w.d_ff):
            raise ConfigurationError("declared dims disagree with matrix shapes")
        return w

    @classmethod
    def load(cls, path) -> "EncoderWeights":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: malformed JSON ({exc})") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    def quantized(self, cfg: FixedPointConfig) -> "EncoderWeights":
        """The weights exactly as the fixed-point encoding represents them."""
        return EncoderWeights(**{n: ring.decode(ring.encode(getattr(self, n), cfg), cfg) for n in _MATS})


def _weight(ctx: Party, w: np.ndarray) -> FixedShare:
    return ctx.private(1, ring.encode(w, ctx.cfg))


def secure_linear(ctx: Party, x: FixedShare, w: FixedShare, b: FixedShare | None = None):
    """x @ w (+ b) for shared x and router-held w; one round."""
    with ctx.scope("secure_linear"):
        y = yield from secure_matmul(ctx, x, w)
    return y if b is None else y + b.broadcast_to(y.shape)


def attention_2relu(ctx: Party, x: FixedShare, weights: EncoderWeights):
    """Single-head attention over rows of x (..., s, d) with 2ReLU normalization."""
    d = weights.d
    if x.shape[-1] != d:
        raise ConfigurationError(f"input width {x.shape[-1]} != model width {d}")
    with ctx.scope("attention"):
        wqkv = _weight(ctx, np.concatenate([weights.W_q, weights.W_k, weights.W_v], axis=1))
        qkv = yield from secure_linear(ctx, x, wqkv)
        q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
        kt = FixedShare(ctx.id, np.swapaxes(k.elem, -1, -2), ctx.cfg)
        scores = yield from secure_matmul(ctx, q, kt)
        scores = mul_public(scores, 1.0 / math.sqrt(d))
        p = yield from softmax_2relu(ctx, scores)
        out = yield from secure_matmul(ctx, p, v)
    return out


def ffn_relu(ctx: Party, x: FixedShare, weights: EncoderWeights):
    with ctx.scope("ffn"):
        h = yield from secure_linear(ctx, x, _weight(ctx, weights.W1), _weight(ctx, weights.b1))
        h = yield from relu(ctx, h)
        y = yield from secure_linear(ctx, h, _weight(ctx, weights.W2), _weight(ctx, weights.b2))
    return y


def encoder_block(ctx: Party, x: FixedShare, weights: EncoderWeights):
    a = yield from attention_2relu(ctx, x, weights)
    return (yield from ffn_relu(ctx, a, weights))


# plaintext references of the same MPC-friendly formulas


def softmax_2relu_ref(x: np.ndarray, cfg: FixedPointConfig) -> np.ndarray:
    num = np.maximum(x, 0.0)
    return num / (num.sum(axis=-1, keepdims=True) + x.shape[-1] / cfg.scale)


def attention_ref(x: np.ndarray, w: EncoderWeights, cfg: FixedPointConfig) -> np.ndarray:
    q, k, v = x @ w.W_q, x @ w.W_k, x @ w.W_v
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(w.d)
    return softmax_2relu_ref(scores, cfg) @ v


def ffn_ref(x: np.ndarray, w: EncoderWeights) -> np.ndarray:
    return np.maximum(x @ w.W1 + w.b1, 0.0) @ w.W2 + w.b2


def encoder_block_ref(x: np.ndarray, w: EncoderWeights, cfg: FixedPointConfig) -> np.ndarray:
    """Float evaluation on the fixed-point-quantized inputs and weights."""
    xq = ring.decode(ring.encode(x, cfg), cfg)
    wq = w.quantized(cfg)
    return ffn_ref(attention_ref(xq, wq, cfg), wq)
