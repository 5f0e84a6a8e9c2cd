"""Dynamic and fixed-K routers.

Both routers share one pipeline: router probabilities, per-token top-K
selection, an expert mask, and a capacity pass. They differ only in where K
comes from: the dynamic router derives it per token from attention-based
importance, the fixed router uses a constant.

Tokens are flattened batch-major (batch, then position). That order decides
who wins capacity slots: earlier tokens are kept, later overflow is dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ContractError, DimensionError
from .importance import compute_token_importance, experts_per_token


@dataclass
class RouterParams:
    w_r: nx.Tensor  # [E, d_model]

    @property
    def n_experts(self):
        return self.w_r.shape[0]


@dataclass(frozen=True)
class CapacityConfig:
    capacity_factor: float = 1.25

    def __post_init__(self):
        if not self.capacity_factor > 0:
            raise ConfigError("capacity_factor must be positive")

    def capacity(self, num_tokens, n_experts):
        """Per-expert slot count ``ceil(factor * tokens / E)``, at least 1."""
        return max(1, math.ceil(self.capacity_factor * num_tokens / n_experts))


def _resolve_capacity(capacity, num_tokens, n_experts):
    if capacity is None:
        capacity = CapacityConfig()
    if isinstance(capacity, CapacityConfig):
        return capacity.capacity(num_tokens, n_experts)
    if isinstance(capacity, (int, np.integer)) and capacity >= 1:
        return int(capacity)
    raise ConfigError(f"capacity must be a CapacityConfig or a positive int, got {capacity!r}")


@dataclass
class RoutingPlan:
    """Routing decisions for a flat sequence of tokens.

    ``position_in_expert`` is -1 wherever the final mask is 0.
    """

    counts: np.ndarray               # [T] K per token (0 for padding)
    expert_index: list               # T arrays of selected experts, best first
    expert_gate: list                # T arrays of matching gate values
    selection_mask: np.ndarray       # [T, E] before capacity
    expert_mask: np.ndarray          # [T, E] after capacity
    position_in_expert: np.ndarray   # [T, E]
    dropped: np.ndarray              # [T, E]
    capacity: int
    probs: np.ndarray                # [T, E]
    importance: np.ndarray | None = None
    token_mask: np.ndarray | None = None
    renormalized: bool = False
    order: np.ndarray | None = None  # [T, E] experts by descending probability

    @property
    def num_tokens(self):
        return self.expert_mask.shape[0]

    @property
    def n_experts(self):
        return self.expert_mask.shape[1]

    def kept_assignments(self):
        """(token, expert, slot) triples of the final mask in token order.

        Within a token, experts follow selection order (highest gate first).
        """
        if self.order is None:
            tokens, experts = [], []
            for t, idx in enumerate(self.expert_index):
                for e in idx:
                    if self.expert_mask[t, e]:
                        tokens.append(t)
                        experts.append(e)
            tokens = np.asarray(tokens, dtype=np.intp)
            experts = np.asarray(experts, dtype=np.intp)
        else:
            ranked_kept = np.take_along_axis(self.expert_mask, self.order, axis=1).astype(bool)
            ranked_kept &= np.arange(self.n_experts)[None, :] < self.counts[:, None]
            tokens, ranks = np.nonzero(ranked_kept)
            experts = self.order[tokens, ranks]
        return tokens, experts, self.position_in_expert[tokens, experts].astype(np.intp)

    def expert_load(self):
        return self.expert_mask.sum(axis=0).astype(np.int64)

    def stats(self):
        valid = self.counts > 0
        total = int(self.counts.sum())
        n_dropped = int(self.dropped.sum())
        return {
            "expert_load": self.expert_load().tolist(),
            "drop_rate": n_dropped / total if total else 0.0,
            "mean_K": float(self.counts[valid].mean()) if valid.any() else 0.0,
            "capacity": int(self.capacity),
            "dropped": n_dropped,
            "assigned": total,
        }

    def records(self):
        """Per-token analysis rows; padded tokens are skipped."""
        rows = []
        for t in range(self.num_tokens):
            if self.counts[t] == 0:
                continue
            idx = self.expert_index[t]
            rows.append({
                "token": t,
                "importance": None if self.importance is None else float(self.importance[t]),
                "K": int(self.counts[t]),
                "expert_ids": [int(e) for e in idx],
                "gates": [float(g) for g in self.expert_gate[t]],
                "dropped_ids": [int(e) for e in idx if self.dropped[t, e]],
            })
        return rows

    def equals(self, other, gate_tol=0.0):
        """Structural equality; gates compared within ``gate_tol``."""
        if self.capacity != other.capacity or self.num_tokens != other.num_tokens:
            return False
        for a, b in (
            (self.counts, other.counts),
            (self.selection_mask, other.selection_mask),
            (self.expert_mask, other.expert_mask),
            (self.position_in_expert, other.position_in_expert),
            (self.dropped, other.dropped),
        ):
            if not np.array_equal(a, b):
                return False
        for ia, ib, ga, gb in zip(self.expert_index, other.expert_index,
                                  self.expert_gate, other.expert_gate):
            if not np.array_equal(ia, ib):
                return False
            if len(ga) and np.max(np.abs(np.asarray(ga, float) - np.asarray(gb, float))) > gate_tol:
                return False
        return True


def router_probabilities(x, params):
    """Softmax over experts of ``x @ W_r^T``; ``x`` is [T, d_model]."""
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.w_r.shape[1]:
        raise DimensionError(f"router input must be [T, {params.w_r.shape[1]}], got {x.shape}")
    logits = x @ nx.transpose(params.w_r)
    return nx.softmax(logits, axis=-1)


def select_topk(probs, k):
    """Top-``k`` experts of one probability row.

    Indices come out in descending probability; ties go to the lower index.
    Gates are the raw probabilities.
    """
    probs = np.asarray(probs)
    if probs.ndim != 1:
        raise DimensionError("select_topk expects a single row of probabilities")
    if int(k) != k or not 1 <= k <= probs.size:
        raise ContractError(f"K={k} outside [1, {probs.size}]")
    order = np.argsort(-probs, kind="stable")[: int(k)]
    return order, probs[order]


def build_expert_mask(selections, n_experts):
    """Binary [T, E] mask from per-token expert index lists."""
    mask = np.zeros((len(selections), n_experts), dtype=np.int8)
    for t, idx in enumerate(selections):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= n_experts):
            raise ContractError(f"token {t}: expert index out of range")
        if np.unique(idx).size != idx.size:
            raise ContractError(f"token {t}: duplicate expert index in selection")
        mask[t, idx] = 1
    return mask


def apply_capacity(mask, capacity):
    """Keep each expert's first ``capacity`` assignments in token order.

    Returns ``(final_mask, position_in_expert, dropped)``. Positions are
    0-based slots; -1 marks entries not in the final mask.
    """
    if capacity < 1:
        raise ContractError("capacity must be at least 1")
    mask = np.asarray(mask).astype(np.int8)
    position = np.cumsum(mask, axis=0, dtype=np.int64) - 1
    keep = (mask == 1) & (position < capacity)
    final = keep.astype(np.int8)
    dropped = ((mask == 1) & ~keep).astype(np.int8)
    return final, np.where(keep, position, -1), dropped


def plan_from_probs(probs, counts, capacity, importance=None, token_mask=None,
                    renormalize=False):
    """Top-K selection, mask and capacity for precomputed probabilities.

    ``probs`` is [T, E], ``counts`` [T] with 0 meaning "do not route" and
    ``capacity`` the integer slot count per expert.
    """
    probs = np.asarray(getattr(probs, "data", probs))
    counts = np.asarray(counts, dtype=np.int64).reshape(-1)
    t, e = probs.shape
    if counts.shape != (t,):
        raise DimensionError("counts must have one entry per token")
    if counts.size and (counts.min() < 0 or counts.max() > e):
        raise ContractError(f"expert counts must lie in [0, {e}]")

    order = np.argsort(-probs, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(e)[None, :].repeat(t, axis=0), axis=1)
    selection = (ranks < counts[:, None]).astype(np.int8)

    expert_index = [order[i, : counts[i]] for i in range(t)]
    expert_gate = [probs[i, expert_index[i]] for i in range(t)]
    if renormalize:
        expert_gate = [g / g.sum() if g.size else g for g in expert_gate]
    final, position, dropped = apply_capacity(selection, capacity)
    return RoutingPlan(
        counts=counts,
        expert_index=expert_index,
        expert_gate=expert_gate,
        selection_mask=selection,
        expert_mask=final,
        position_in_expert=position,
        dropped=dropped,
        capacity=int(capacity),
        probs=probs,
        importance=importance,
        token_mask=token_mask,
        renormalized=renormalize,
        order=order,
    )


def _flatten_tokens(x, padding_mask):
    x = np.asarray(getattr(x, "data", x))
    if x.ndim == 3:
        b, length, d = x.shape
        flat = x.reshape(b * length, d)
        lead = (b, length)
    elif x.ndim == 2:
        flat = x
        lead = (x.shape[0],)
    else:
        raise DimensionError(f"router input must be [B, L, d] or [T, d], got {x.shape}")
    if padding_mask is None:
        token_mask = np.ones(flat.shape[0], dtype=bool)
    else:
        token_mask = np.asarray(padding_mask, dtype=bool)
        if token_mask.shape != lead:
            raise DimensionError(f"padding_mask must have shape {lead}")
        token_mask = token_mask.reshape(-1)
    return flat, token_mask


def route_dynamic(x, attention_weights, params, capacity=None, padding_mask=None,
                  renormalize=False):
    """Importance-driven routing of ``x`` [B, L, d] given attention [B, H, L, L]."""
    a = np.asarray(getattr(attention_weights, "data", attention_weights))
    x_arr = np.asarray(getattr(x, "data", x))
    if x_arr.ndim != 3 or a.ndim != 4 or a.shape[0] != x_arr.shape[0] or a.shape[2] != x_arr.shape[1]:
        raise DimensionError(f"inconsistent shapes: x {x_arr.shape}, attention {a.shape}")
    flat, token_mask = _flatten_tokens(x_arr, padding_mask)
    e = params.n_experts
    mask2d = token_mask.reshape(x_arr.shape[:2])
    scores = compute_token_importance(a, mask2d).reshape(-1)
    counts = experts_per_token(scores, e, token_mask)
    probs = router_probabilities(flat, params).data
    cap = _resolve_capacity(capacity, int(token_mask.sum()), e)
    return plan_from_probs(probs, counts, cap, importance=scores, token_mask=token_mask,
                           renormalize=renormalize)


def route_fixed(x, params, k, capacity=None, padding_mask=None, renormalize=False):
    """Constant-K routing; ``k=1`` is Switch-style top-1."""
    e = params.n_experts
    if int(k) != k or not 1 <= k <= e:
        raise ConfigError(f"fixed K={k} outside [1, {e}]")
    flat, token_mask = _flatten_tokens(x, padding_mask)
    counts = np.where(token_mask, int(k), 0).astype(np.int64)
    probs = router_probabilities(flat, params).data
    cap = _resolve_capacity(capacity, int(token_mask.sum()), e)
    return plan_from_probs(probs, counts, cap, token_mask=token_mask, renormalize=renormalize)


def load_balance_loss(probs, final_mask, token_mask=None):
    """``E * sum_e (share of tokens dispatched to e) * (mean prob of e)``.

    Differentiable in ``probs`` when it is a Tensor; the dispatch share is a
    constant. Equals 1 for uniform probabilities with uniform top-1 dispatch.
    """
    probs = nx.as_tensor(probs)
    final_mask = np.asarray(final_mask)
    if probs.shape != final_mask.shape:
        raise DimensionError("probs and final_mask must have the same shape")
    n, e = probs.shape
    if token_mask is None:
        weights = np.ones((n, 1), dtype=probs.dtype)
    else:
        weights = np.asarray(token_mask, dtype=probs.dtype).reshape(n, 1)
    n_valid = weights.sum()
    share = (final_mask * weights).sum(axis=0) / n_valid
    mean_prob = nx.tensor_sum(probs * weights, axis=0) * (1.0 / n_valid)
    return nx.tensor_sum(mean_prob * share.astype(probs.dtype)) * float(e)
