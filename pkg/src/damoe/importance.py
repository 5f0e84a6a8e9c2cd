"""Token importance from attention weights and the per-token expert count.

A token's importance is the mean over heads of the largest weight in the
attention row where that token is the query. The expert count is
``ceil(importance * E)`` clamped to ``[1, E]``. Both are discrete routing
decisions and never carry gradients.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, DimensionError


def _as_array(weights):
    return np.asarray(getattr(weights, "data", weights))


def compute_token_importance(weights, padding_mask=None):
    """Importance scores [B, L] from attention weights [B, H, L, L].

    Padded tokens get score 0.
    """
    a = _as_array(weights)
    if a.ndim != 4 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"attention weights must be [B, H, L, L], got {a.shape}")
    b, h, length, _ = a.shape
    scores = a.max(axis=-1).sum(axis=1) / a.dtype.type(h)
    if padding_mask is not None:
        padding_mask = np.asarray(padding_mask, dtype=bool)
        if padding_mask.shape != (b, length):
            raise DimensionError(f"padding_mask must be ({b}, {length}), got {padding_mask.shape}")
        scores = np.where(padding_mask, scores, 0).astype(a.dtype)
    return scores


def experts_per_token(scores, n_experts, padding_mask=None):
    """Expert counts with the same shape as ``scores``; padded tokens get 0."""
    if int(n_experts) != n_experts or n_experts < 1:
        raise ConfigError(f"number of experts must be a positive integer, got {n_experts}")
    n_experts = int(n_experts)
    s = np.asarray(scores)
    # a non-finite score routes everywhere so the NaN reaches the loss
    s = np.where(np.isfinite(s), s, 1.0)
    counts = np.clip(np.ceil(s * n_experts), 1, n_experts).astype(np.int64)
    if padding_mask is not None:
        counts = np.where(np.asarray(padding_mask, dtype=bool), counts, 0)
    return counts
