"""TFusion: N-to-one fusion of a variable set of modality feature maps.

Pipeline for an input set ``{f_k : k in K}`` of B x C x R_f tensors:

1. ``tokenize``: flatten R_f to R positions, view each position as a
   C-dimensional token, concatenate modalities in ascending id order to get
   B x (R*|K|) x C.
2. ``correlation_extraction``: run the encoder stack, then reshape/split the
   tokens back to one B x C x R_f tensor per modality.
3. ``modal_attention``: softmax across modalities at every voxel.
4. ``fuse``: weight the *original* inputs by those maps and sum.

With a single modality the softmax weight is exactly 1.0, so the block
returns its input bitwise unchanged.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Iterator

from nfuse import ops
from nfuse.tensor import ShapeError, Tensor
from nfuse.transformer import EncoderStack, encoder_stack_forward


class ModalitySet(Mapping):
    """Ordered map modality id -> B x C x R_f tensor, iterated by ascending id."""

    def __init__(self, entries: Mapping[int, Tensor], num_modalities: int | None = None):
        if not entries:
            raise ValueError("no available modalities")
        ids = sorted(int(k) for k in entries)
        s = num_modalities if num_modalities is not None else ids[-1]
        if ids[0] < 1 or ids[-1] > s:
            raise ValueError(f"modality ids {ids} must lie in 1..{s}")
        self._entries = {k: entries[k] for k in ids}
        shapes = {t.shape for t in self._entries.values()}
        if len(shapes) != 1:
            raise ShapeError("ModalitySet", *sorted(shapes), detail="all modalities must share a shape")
        shape = shapes.pop()
        if len(shape) < 3:
            raise ShapeError("ModalitySet", shape, detail="expected B x C x R_f with at least one feature axis")
        self.num_modalities = s
        self.shape = shape

    def __getitem__(self, k: int) -> Tensor:
        return self._entries[k]

    def __iter__(self) -> Iterator[int]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(ids={self.ids}, shape={self.shape}, S={self.num_modalities})"

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(self._entries)

    @property
    def batch(self) -> int:
        return self.shape[0]

    @property
    def channels(self) -> int:
        return self.shape[1]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.shape[2:]

    def relabel(self, mapping: Mapping[int, int]) -> "ModalitySet":
        return type(self)({mapping[k]: t for k, t in self.items()}, self.num_modalities)


class TransformedSet(ModalitySet):
    """Per-modality scores f'_k with the same ids and shapes as the input set."""


class WeightMaps(ModalitySet):
    """Per-voxel fusion weights; they sum to one across modalities."""


@dataclass
class TokenBatch:
    values: Tensor                      # B x T x C
    modality_layout: tuple[int, ...]    # ascending ids, each owning R consecutive tokens
    feature_shape: tuple[int, ...]
    num_modalities: int

    @property
    def tokens_per_modality(self) -> int:
        return math.prod(self.feature_shape)


def tokenize(input: ModalitySet) -> TokenBatch:
    if not len(input):
        raise ValueError("no available modalities")
    b, c = input.batch, input.channels
    r = math.prod(input.feature_shape)
    runs = [ops.transpose_last_two(ops.reshape(input[k], (b, c, r))) for k in input.ids]
    values = runs[0] if len(runs) == 1 else ops.concat(runs, axis=1)
    return TokenBatch(values, input.ids, input.feature_shape, input.num_modalities)


def detokenize(tokens: TokenBatch, z: Tensor | None = None, cls=ModalitySet) -> ModalitySet:
    """Inverse of ``tokenize`` applied to ``z`` (defaults to the batch's own values)."""
    z = tokens.values if z is None else z
    b, _, c = z.shape
    r = tokens.tokens_per_modality
    n = len(tokens.modality_layout)
    if z.shape[1] != r * n:
        raise ShapeError("detokenize", z.shape, detail=f"expected T = {r} * {n}")
    parts = [z] if n == 1 else ops.split(z, 1, [r] * n)
    out = {
        k: ops.reshape(ops.transpose_last_two(part), (b, c) + tuple(tokens.feature_shape))
        for k, part in zip(tokens.modality_layout, parts)
    }
    return cls(out, tokens.num_modalities)


def add_modality_embeddings(tokens: TokenBatch, embeddings: Tensor) -> Tensor:
    """Add row k-1 of an S x C table to every token owned by modality k."""
    z = tokens.values
    s, c = tokens.num_modalities, z.shape[-1]
    if embeddings.shape != (s, c):
        raise ShapeError("modality_embeddings", embeddings.shape, (s, c))
    r = tokens.tokens_per_modality
    n = len(tokens.modality_layout)
    parts = [z] if n == 1 else ops.split(z, 1, [r] * n)
    shifted = [
        ops.bias_add(part, ops.reshape(ops.slice_axis(embeddings, 0, k - 1, k), (c,)))
        for k, part in zip(tokens.modality_layout, parts)
    ]
    return shifted[0] if n == 1 else ops.concat(shifted, axis=1)


def correlation_extraction(z0: TokenBatch, stack: EncoderStack,
                           embeddings: Tensor | None = None) -> TransformedSet:
    c = z0.values.shape[-1]
    if stack.channels != c:
        raise ShapeError("correlation_extraction", z0.values.shape, (stack.channels,),
                         detail="stack width must equal token width C")
    z = z0.values if embeddings is None else add_modality_embeddings(z0, embeddings)
    z_last = encoder_stack_forward(z, stack)
    return detokenize(z0, z_last, cls=TransformedSet)


def modal_attention(transformed: ModalitySet) -> WeightMaps:
    """Softmax over the modality axis at every (batch, channel, voxel) position."""
    ids = transformed.ids
    weights = ops.softmax(ops.stack([transformed[k] for k in ids], axis=0), axis=0)
    if len(ids) == 1:
        maps = [ops.reshape(weights, transformed.shape)]
    else:
        maps = [ops.reshape(w, transformed.shape) for w in ops.split(weights, 0, [1] * len(ids))]
    return WeightMaps(dict(zip(ids, maps)), transformed.num_modalities)


def fuse(original: ModalitySet, weights: ModalitySet) -> Tensor:
    """Voxelwise sum of original inputs scaled by their weight maps."""
    if original.ids != weights.ids:
        raise ValueError(f"modality ids differ: {original.ids} vs {weights.ids}")
    if original.shape != weights.shape:
        raise ShapeError("fuse", original.shape, weights.shape)
    out = None
    for k in original.ids:
        term = ops.mul(original[k], weights[k])
        out = term if out is None else ops.add(out, term)
    return out


def tfusion_forward(input: ModalitySet, stack: EncoderStack, embeddings: Tensor | None = None) -> Tensor:
    transformed = correlation_extraction(tokenize(input), stack, embeddings)
    return fuse(input, modal_attention(transformed))


def tfusion_without_ce(input: ModalitySet) -> Tensor:
    """Ablation: modal attention computed from the raw inputs."""
    return fuse(input, modal_attention(input))


def tfusion_without_ma(input: ModalitySet, stack: EncoderStack, embeddings: Tensor | None = None) -> Tensor:
    """Ablation: plain sum of the transformed representations."""
    transformed = correlation_extraction(tokenize(input), stack, embeddings)
    out = None
    for k in transformed.ids:
        out = transformed[k] if out is None else ops.add(out, transformed[k])
    return out
