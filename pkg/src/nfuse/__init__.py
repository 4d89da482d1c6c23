"""Transformer-based N-to-one multimodal fusion on a small numpy autodiff core."""

from nfuse.tensor import NumericalError, ShapeError, Tape, Tensor, backward, grad, no_grad, precision
from nfuse.tfusion import (
    ModalitySet,
    TokenBatch,
    TransformedSet,
    WeightMaps,
    correlation_extraction,
    fuse,
    modal_attention,
    tfusion_forward,
    tfusion_without_ce,
    tfusion_without_ma,
    tokenize,
)
from nfuse.transformer import EncoderStack, encoder_stack_forward, init_encoder_stack

__version__ = "0.1.0"
