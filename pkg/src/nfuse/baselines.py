"""Competing N-to-one fusion strategies: arithmetic mean, max selection, and
a zero-padded 1x1 convolution with a fixed input arity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nfuse import ops
from nfuse.params import xavier_uniform, zeros
from nfuse.tensor import Tensor, default_dtype
from nfuse.tfusion import ModalitySet


def mean_fusion(input: ModalitySet) -> Tensor:
    """Voxelwise mean over the available modalities (divides by |K|, not S)."""
    if not len(input):
        raise ValueError("no available modalities")
    return ops.mean(ops.stack([input[k] for k in input.ids], axis=0), axis=0)


def max_fusion(input: ModalitySet) -> Tensor:
    """Voxelwise maximum; ties resolve to the lowest modality id."""
    if not len(input):
        raise ValueError("no available modalities")
    return ops.max(ops.stack([input[k] for k in input.ids], axis=0), axis=0)


@dataclass
class ConvFusionParams:
    """1x1 projection from S*C stacked channels down to C.

    ``hidden`` holds optional extra (weight, bias) pairs of shape C x C applied
    after a ReLU, for a deeper conv head.
    """

    weight: Tensor
    bias: Tensor
    num_modalities: int
    hidden: list = field(default_factory=list)

    def __post_init__(self):
        sc, c = self.weight.shape
        if sc != self.num_modalities * c or self.bias.shape != (c,):
            raise ValueError(
                f"conv weight {self.weight.shape} / bias {self.bias.shape} inconsistent with "
                f"S={self.num_modalities}"
            )

    @property
    def channels(self) -> int:
        return self.weight.shape[1]


def init_conv_fusion(num_modalities: int, channels: int, rng: np.random.Generator,
                     depth: int = 1, dtype=None) -> ConvFusionParams:
    dtype = dtype or default_dtype()
    hidden = [
        (xavier_uniform(rng, channels, channels, dtype), zeros((channels,), dtype))
        for _ in range(depth - 1)
    ]
    return ConvFusionParams(
        xavier_uniform(rng, num_modalities * channels, channels, dtype),
        zeros((channels,), dtype), num_modalities, hidden,
    )


def zero_pad_conv_fusion(input: ModalitySet, p: ConvFusionParams) -> Tensor:
    """Fill missing modality slots with zeros, stack all S blocks, project per voxel."""
    if not len(input):
        raise ValueError("no available modalities")
    if max(input.ids) > p.num_modalities:
        raise ValueError(f"modality id {max(input.ids)} exceeds S={p.num_modalities}")
    shape = input.shape
    b, c = shape[0], shape[1]
    r = math.prod(shape[2:])
    blank = Tensor(np.zeros((b, c, r)), dtype=input[input.ids[0]].dtype)
    blocks = [
        ops.reshape(input[k], (b, c, r)) if k in input else blank
        for k in range(1, p.num_modalities + 1)
    ]
    x = ops.transpose_last_two(ops.concat(blocks, axis=1))   # B x R x S*C
    y = ops.linear(x, p.weight, p.bias)
    for w, bias in p.hidden:
        y = ops.linear(ops.relu(y), w, bias)
    return ops.reshape(ops.transpose_last_two(y), shape)
