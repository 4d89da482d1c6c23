"""Fusion model = one fuser (TFusion, an ablation, or a baseline) + a linear head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from nfuse import ops
from nfuse.baselines import ConvFusionParams, init_conv_fusion, max_fusion, mean_fusion, zero_pad_conv_fusion
from nfuse.params import named_tensors, with_tensors, zeros
from nfuse.tensor import Tensor, default_dtype
from nfuse.tfusion import ModalitySet, tfusion_forward, tfusion_without_ce, tfusion_without_ma
from nfuse.transformer import ACTIVATIONS, EncoderStack, init_encoder_stack

FUSERS = ("tfusion", "tfusion_no_ce", "tfusion_no_ma", "mean", "max", "conv_pad")
VARIANTS = {"full": "tfusion", "no_ce": "tfusion_no_ce", "no_ma": "tfusion_no_ma"}


@dataclass(frozen=True)
class BlockConfig:
    channels: int | None = None   # must match the task's C when given
    depth: int = 2                # desk scale; the full block uses 8
    heads: int = 4
    ffn_expansion: int = 4
    modality_embeddings: bool = False
    variant: str = "full"
    activation: str = "gelu"
    conv_depth: int = 1

    def validate(self) -> None:
        if self.depth < 1 or self.heads < 1 or self.ffn_expansion < 1 or self.conv_depth < 1:
            raise ValueError("depth, heads, ffn_expansion and conv_depth must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")


def resolve_fuser(fuser: str, block: BlockConfig) -> str:
    """``tfusion`` plus a non-default block variant names the matching ablation."""
    if fuser not in FUSERS:
        raise ValueError(f"fuser must be one of {FUSERS}")
    if fuser == "tfusion":
        return VARIANTS[block.variant]
    return fuser


@dataclass
class Head:
    weight: Tensor
    bias: Tensor


@dataclass
class FusionModel:
    fuser: str
    num_modalities: int
    head: Head
    stack: EncoderStack | None = None
    embeddings: Tensor | None = None
    conv: ConvFusionParams | None = None

    def fuse(self, input: ModalitySet) -> Tensor:
        if self.fuser == "tfusion":
            return tfusion_forward(input, self.stack, self.embeddings)
        if self.fuser == "tfusion_no_ce":
            return tfusion_without_ce(input)
        if self.fuser == "tfusion_no_ma":
            return tfusion_without_ma(input, self.stack, self.embeddings)
        if self.fuser == "mean":
            return mean_fusion(input)
        if self.fuser == "max":
            return max_fusion(input)
        return zero_pad_conv_fusion(input, self.conv)

    def logits(self, input: ModalitySet) -> Tensor:
        fused = self.fuse(input)
        flat = ops.reshape(fused, (fused.shape[0], math.prod(fused.shape[1:])))
        return ops.linear(flat, self.head.weight, self.head.bias)

    def predict(self, input: ModalitySet) -> np.ndarray:
        return np.argmax(self.logits(input).data, axis=1)

    def parameters(self) -> dict[str, Tensor]:
        return named_tensors(self)

    def with_parameters(self, mapping: Mapping[str, Tensor]) -> "FusionModel":
        missing = set(mapping) - set(self.parameters())
        if missing:
            raise KeyError(f"unknown parameters: {sorted(missing)}")
        return with_tensors(self, mapping)


def build_model(fuser: str, num_modalities: int, channels: int, feature_shape, num_classes: int,
                block: BlockConfig, rng: np.random.Generator, dtype=None) -> FusionModel:
    """Fresh model.  The head starts at zero, so an untrained model predicts class 0."""
    dtype = dtype or default_dtype()
    block.validate()
    if block.channels is not None and block.channels != channels:
        raise ValueError(f"block channels {block.channels} != task channels {channels}")
    kind = resolve_fuser(fuser, block)
    features = channels * math.prod(feature_shape)
    head = Head(zeros((features, num_classes), dtype), zeros((num_classes,), dtype))
    model = FusionModel(kind, num_modalities, head)
    if kind in ("tfusion", "tfusion_no_ma"):
        model.stack = init_encoder_stack(channels, block.depth, block.heads, block.ffn_expansion,
                                         block.activation, rng=rng, dtype=dtype)
        if block.modality_embeddings:
            model.embeddings = Tensor(rng.normal(0.0, 0.02, size=(num_modalities, channels)),
                                      grad_enabled=True, dtype=dtype)
    elif kind == "conv_pad":
        model.conv = init_conv_fusion(num_modalities, channels, rng, block.conv_depth, dtype)
    return model
