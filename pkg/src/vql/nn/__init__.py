"""Minimal dense-tensor layer: numpy forward passes with hand-derived
analytic backward passes, windowed attention masks, checkpoint IO, and
finite-difference gradient checking."""

from .modules import (Conv2d, CrossAttentionBlock, FeedForward, GELU,
                      LayerNorm, Linear, Module, MultiHeadAttention,
                      Parameter, PatchEncoder, PositionalEmbedding3D,
                      DownsampleStack, SelfAttentionBlock, flatten_tokens,
                      unflatten_tokens)
from .masks import mask_to_bias, validate_mask, windowed_temporal_mask
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, check_gradients, scalar_readout

__all__ = [
    "Conv2d", "CrossAttentionBlock", "FeedForward", "GELU", "LayerNorm",
    "Linear", "Module", "MultiHeadAttention", "Parameter", "PatchEncoder",
    "PositionalEmbedding3D", "DownsampleStack", "SelfAttentionBlock",
    "flatten_tokens", "unflatten_tokens", "mask_to_bias", "validate_mask",
    "windowed_temporal_mask", "load_checkpoint", "save_checkpoint",
    "GradCheckResult", "check_gradients", "scalar_readout",
]
