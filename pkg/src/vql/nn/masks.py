"""Attention masks for the temporal stage.

A mask is a boolean matrix, rows = destination tokens, columns = source
tokens; ``True`` means the position may be attended. The windowed temporal
mask lets a token at frame t attend a source token at frame t' iff
``|t - t'| <= half_width``.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError


def windowed_temporal_mask(n_frames: int, tokens_per_frame: int,
                           half_width: int) -> np.ndarray:
    """Boolean (T*hw, T*hw) mask with window length 2*half_width + 1 frames."""
    if half_width < 0:
        raise ConfigurationError("window half-width must be >= 0")
    frame_idx = np.repeat(np.arange(n_frames), tokens_per_frame)
    return np.abs(frame_idx[:, None] - frame_idx[None, :]) <= half_width


def global_mask(n_tokens: int) -> np.ndarray:
    return np.ones((n_tokens, n_tokens), dtype=bool)


def validate_mask(mask: np.ndarray) -> None:
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ConfigurationError(f"mask must be square, got {mask.shape}")
    rows = mask.sum(axis=1)
    if np.any(rows == 0):
        bad = int(np.argmin(rows))
        raise ConfigurationError(f"mask row {bad} allows no source token "
                                 "(softmax would produce NaN)")


def mask_to_bias(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """0 at allowed positions, -inf at masked ones; -inf logits take exactly
    zero weight after softmax."""
    validate_mask(mask)
    bias = np.zeros(mask.shape, dtype=dtype)
    bias[~mask] = -np.inf
    return bias
