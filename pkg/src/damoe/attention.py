"""Multi-head self-attention that also returns its post-softmax weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, DimensionError


@dataclass
class AttentionParams:
    """Packed projections; head ``h`` owns columns ``h*d_head:(h+1)*d_head``."""

    wq: nx.Tensor
    bq: nx.Tensor
    wk: nx.Tensor
    bk: nx.Tensor
    wv: nx.Tensor
    bv: nx.Tensor
    wo: nx.Tensor
    bo: nx.Tensor
    n_heads: int

    @property
    def d_model(self):
        return self.wq.shape[0]

    def validate(self):
        d = self.d_model
        if self.n_heads < 1 or d % self.n_heads:
            raise ConfigError(f"d_model={d} is not divisible by n_heads={self.n_heads}")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be ({d}, {d})")
        for name in ("bq", "bk", "bv", "bo"):
            if getattr(self, name).shape != (d,):
                raise DimensionError(f"{name} must be ({d},)")


@dataclass
class AttentionOutput:
    output: nx.Tensor   # [B, L, d_model]
    weights: nx.Tensor  # [B, H, L, L], rows are queries


def attention_mask(padding_mask, batch, length, causal=False):
    """Boolean [B, 1, L, L] (or broadcastable) mask of keys each query may see."""
    mask = np.ones((batch, 1, 1, length), dtype=bool)
    if padding_mask is not None:
        padding_mask = np.asarray(padding_mask, dtype=bool)
        if padding_mask.shape != (batch, length):
            raise DimensionError(f"padding_mask must be ({batch}, {length}), got {padding_mask.shape}")
        mask = padding_mask[:, None, None, :]
    if causal:
        mask = mask & np.tril(np.ones((length, length), dtype=bool))[None, None]
    return mask


def mhsa_forward(x, params, padding_mask=None, causal=False):
    """Scaled dot-product attention over ``x`` [B, L, d_model].

    Padded keys get exactly zero weight. Padded queries still attend to the
    valid keys; their outputs are ignored downstream.
    """
    params.validate()
    if x.ndim != 3 or x.shape[-1] != params.d_model:
        raise DimensionError(f"expected [B, L, {params.d_model}] input, got {x.shape}")
    b, length, d = x.shape
    h = params.n_heads
    dh = d // h

    def heads(t):
        return t.reshape(b, length, h, dh).transpose(0, 2, 1, 3)

    q = heads(x @ params.wq + params.bq)
    k = heads(x @ params.wk + params.bk)
    v = heads(x @ params.wv + params.bv)
    scores = (q @ nx.swap_last(k)) * (1.0 / np.sqrt(dh))
    mask = attention_mask(padding_mask, b, length, causal)
    weights = nx.softmax(scores, axis=-1, mask=mask)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return AttentionOutput(output=ctx @ params.wo + params.bo, weights=weights)
