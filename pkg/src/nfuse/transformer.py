"""Pre-norm transformer encoder layers.

Each layer computes::

    z' = MHA(LN1(z)) + z
    z  = FFN(LN2(z')) + z'

No positional information and no dropout, so the stack is equivariant to
any permutation of the token axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from nfuse import ops
from nfuse.params import ones, xavier_uniform, zeros
from nfuse.tensor import ShapeError, Tensor, default_dtype

LN_EPS = 1e-5
ACTIVATIONS = {"gelu": ops.gelu, "relu": ops.relu}


@dataclass
class AttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    num_heads: int = 4

    def __post_init__(self):
        c = self.w_q.shape[0]
        if self.num_heads < 1 or c % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} must divide channels C={c}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class EncoderLayerParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    ffn: FfnParams

    @property
    def channels(self) -> int:
        return self.attn.channels


@dataclass
class EncoderStack:
    layers: list[EncoderLayerParams]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder stack needs at least one layer")
        widths = {layer.channels for layer in self.layers}
        if len(widths) != 1:
            raise ValueError(f"layers disagree on channel width: {sorted(widths)}")

    @property
    def channels(self) -> int:
        return self.layers[0].channels

    @property
    def depth(self) -> int:
        return len(self.layers)


def init_encoder_layer(channels: int, rng: np.random.Generator, num_heads: int = 4,
                       ffn_expansion: int = 4, activation: str = "gelu", dtype=None) -> EncoderLayerParams:
    dtype = dtype or default_dtype()
    c, h = channels, max(1, ffn_expansion * channels)

    def proj():
        return xavier_uniform(rng, c, c, dtype), zeros((c,), dtype)

    (wq, bq), (wk, bk), (wv, bv), (wo, bo) = proj(), proj(), proj(), proj()
    return EncoderLayerParams(
        ln1=LayerNormParams(ones((c,), dtype), zeros((c,), dtype)),
        attn=AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo, num_heads=num_heads),
        ln2=LayerNormParams(ones((c,), dtype), zeros((c,), dtype)),
        ffn=FfnParams(xavier_uniform(rng, c, h, dtype), zeros((h,), dtype),
                      xavier_uniform(rng, h, c, dtype), zeros((c,), dtype), activation=activation),
    )


def init_encoder_stack(channels: int, depth: int = 8, num_heads: int = 4, ffn_expansion: int = 4,
                       activation: str = "gelu", rng: np.random.Generator | None = None,
                       dtype=None) -> EncoderStack:
    rng = rng if rng is not None else np.random.default_rng(0)
    return EncoderStack([
        init_encoder_layer(channels, rng, num_heads, ffn_expansion, activation, dtype)
        for _ in range(depth)
    ])


def _check_tokens(op: str, z: Tensor, channels: int) -> None:
    if z.ndim != 3 or z.shape[-1] != channels:
        raise ShapeError(op, z.shape, (channels,), detail="expected B x T x C tokens")


def multi_head_attention(z: Tensor, p: AttentionParams) -> Tensor:
    """Scaled dot-product self-attention within each batch element."""
    c = p.channels
    _check_tokens("multi_head_attention", z, c)
    heads = p.num_heads
    d = c // heads
    q = ops.linear(z, p.w_q, p.b_q)
    k = ops.linear(z, p.w_k, p.b_k)
    v = ops.linear(z, p.w_v, p.b_v)
    qs, ks, vs = (ops.split(t, -1, [d] * heads) for t in (q, k, v))
    outs = []
    for qh, kh, vh in zip(qs, ks, vs):
        scores = ops.scale(ops.matmul(qh, ops.transpose_last_two(kh)), 1.0 / math.sqrt(d))
        outs.append(ops.matmul(ops.softmax(scores, axis=-1), vh))
    merged = outs[0] if heads == 1 else ops.concat(outs, axis=-1)
    return ops.linear(merged, p.w_o, p.b_o)


def feed_forward(z: Tensor, p: FfnParams) -> Tensor:
    if z.shape[-1] != p.w1.shape[0] or p.w2.shape != (p.w1.shape[1], p.w1.shape[0]):
        raise ShapeError("feed_forward", z.shape, p.w1.shape, p.w2.shape)
    hidden = ACTIVATIONS[p.activation](ops.linear(z, p.w1, p.b1))
    return ops.linear(hidden, p.w2, p.b2)


def encoder_layer(z_prev: Tensor, p: EncoderLayerParams) -> Tensor:
    z_mid = ops.add(multi_head_attention(ops.layer_norm(z_prev, p.ln1.gamma, p.ln1.beta, LN_EPS), p.attn), z_prev)
    return ops.add(feed_forward(ops.layer_norm(z_mid, p.ln2.gamma, p.ln2.beta, LN_EPS), p.ffn), z_mid)


def encoder_stack_forward(z0: Tensor, stack: EncoderStack) -> Tensor:
    z = z0
    for layer in stack.layers:
        z = encoder_layer(z, layer)
    return z
