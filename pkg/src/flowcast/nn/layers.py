"""Network building blocks on top of the autodiff Tensor.

Shapes follow the (..., time, width) convention so the same code handles both
batched and unbatched inputs. All parameters are float64 Tensors initialized
from a caller-supplied numpy Generator (one seeded generator per model keeps
runs reproducible).
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import IdOutOfRange, ShapeMismatch
from .tensor import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    """Scaled-uniform init: U(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    size = shape if shape is not None else (fan_in, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=size), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax.

    The max-shift is a constant (detached): softmax is shift invariant, so
    subtracting a constant per row leaves both the value and the true gradient
    unchanged, which keeps the autodiff gradient exact.
    """
    shifted = x - x.data.max(axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.data.max(axis=axis, keepdims=True)
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None,
            train: bool) -> Tensor:
    """Inverted dropout. Identity when not training or rate is 0."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V.

    Inputs are (..., T, d_k). With causal=True, position i only attends to
    positions <= i (strictly later scores are masked before the softmax).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(f"attention shapes {q.shape}, {k.shape}, {v.shape}")
    dk = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    if causal:
        tq, tk = scores.shape[-2], scores.shape[-1]
        mask = np.triu(np.ones((tq, tk), dtype=bool), k=1)
        scores = scores.masked_fill(mask, -np.inf)
    return softmax(scores, axis=-1) @ v


class LayerNorm:
    def __init__(self, width: int, eps: float = 1e-5):
        self.g = ones(width)
        self.b = zeros(width)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * ((var + self.eps) ** -0.5) * self.g + self.b

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}


class TransformerBlock:
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)).

    With the output projection and second FFN matrix zero-initialized the
    block is the identity; training moves it away from that point smoothly.
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 causal: bool, ffn_mult: int = 4, drop_rate: float = 0.0):
        if width % heads != 0:
            raise ShapeMismatch(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.causal = causal
        self.drop_rate = drop_rate
        hidden = ffn_mult * width
        self.ln1 = LayerNorm(width)
        # attention projections carry no biases: a key bias shifts every
        # score in a row equally and cancels inside the softmax, so it can
        # never receive gradient, and the rest add nothing the FFN biases
        # do not already cover
        self.wq = glorot(rng, width, width)
        self.wk = glorot(rng, width, width)
        self.wv = glorot(rng, width, width)
        self.wo = glorot(rng, width, width)
        self.ln2 = LayerNorm(width)
        self.w1 = glorot(rng, width, hidden)
        self.b1 = zeros(hidden)
        self.w2 = glorot(rng, hidden, width)
        self.b2 = zeros(width)

    def _heads(self, x: Tensor) -> Tensor:
        t, w = x.shape[-2], x.shape[-1]
        dk = w // self.heads
        split = x.reshape(*x.shape[:-2], t, self.heads, dk)
        return split.swapaxes(-3, -2)  # (..., heads, T, dk)

    def __call__(self, x: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        a = self.ln1(x)
        q = self._heads(a @ self.wq)
        k = self._heads(a @ self.wk)
        v = self._heads(a @ self.wv)
        att = attention(q, k, v, causal=self.causal)
        t = att.shape[-2]
        merged = att.swapaxes(-3, -2).reshape(*att.shape[:-3], t, self.width)
        x = x + dropout(merged @ self.wo, self.drop_rate, rng, train)
        f = self.ln2(x)
        f = (f @ self.w1 + self.b1).relu() @ self.w2 + self.b2
        return x + dropout(f, self.drop_rate, rng, train)

    def params(self, prefix: str) -> dict:
        out = self.ln1.params(f"{prefix}.ln1")
        for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        out.update(self.ln2.params(f"{prefix}.ln2"))
        return out


def transformer_block(h: Tensor, params: TransformerBlock, train: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    return params(h, train=train, rng=rng)


def embed(ids, w_e: Tensor, w_p: Tensor) -> Tensor:
    """Token + learned position embeddings: W_e[ids] + W_p[:T]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= w_e.shape[0]):
        raise IdOutOfRange(f"ids outside [0, {w_e.shape[0]})")
    t = ids.shape[-1]
    if t > w_p.shape[0]:
        raise ShapeMismatch(f"sequence length {t} exceeds position table {w_p.shape[0]}")
    return w_e.take_rows(ids) + w_p[:t]


class LstmParams:
    """Gate parameters for one LSTM cell (input, forget, output, candidate)."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for gate in ("i", "f", "o", "g"):
            setattr(self, f"w_{gate}", glorot(rng, input_dim, hidden_dim))
            setattr(self, f"u_{gate}", glorot(rng, hidden_dim, hidden_dim))
            setattr(self, f"b_{gate}", zeros(hidden_dim))

    def params(self, prefix: str) -> dict:
        out = {}
        for gate in ("i", "f", "o", "g"):
            for kind in ("w", "u", "b"):
                name = f"{kind}_{gate}"
                out[f"{prefix}.{name}"] = getattr(self, name)
        return out


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
              params: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step.

    i = sig(x W_i + h U_i + b_i)   f = sig(x W_f + h U_f + b_f)
    o = sig(x W_o + h U_o + b_o)   g = tanh(x W_g + h U_g + b_g)
    c = f * c_prev + i * g         h = o * tanh(c)
    """
    if x_t.shape[-1] != params.input_dim or h_prev.shape[-1] != params.hidden_dim:
        raise ShapeMismatch(
            f"lstm_cell got x {x_t.shape}, h {h_prev.shape}; expected "
            f"(..,{params.input_dim}) and (..,{params.hidden_dim})")
    i = (x_t @ params.w_i + h_prev @ params.u_i + params.b_i).sigmoid()
    f = (x_t @ params.w_f + h_prev @ params.u_f + params.b_f).sigmoid()
    o = (x_t @ params.w_o + h_prev @ params.u_o + params.b_o).sigmoid()
    g = (x_t @ params.w_g + h_prev @ params.u_g + params.b_g).tanh()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c
