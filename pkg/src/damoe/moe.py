"""Sparse expert FFN bank with capacity-bounded dispatch and gated combine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ContractError, DimensionError

ACTIVATIONS = {"relu": nx.relu, "gelu": nx.gelu}


@dataclass
class ExpertParams:
    """Stacked weights of E two-layer FFNs (d_model -> d_ff -> d_model)."""

    w1: nx.Tensor  # [E, d_model, d_ff]
    b1: nx.Tensor  # [E, d_ff]
    w2: nx.Tensor  # [E, d_ff, d_model]
    b2: nx.Tensor  # [E, d_model]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        e, d, f = self.w1.shape
        if self.b1.shape != (e, f) or self.w2.shape != (e, f, d) or self.b2.shape != (e, d):
            raise DimensionError("expert parameter shapes are inconsistent")

    @property
    def n_experts(self):
        return self.w1.shape[0]

    @property
    def d_model(self):
        return self.w1.shape[1]


@dataclass
class MoEOutput:
    output: nx.Tensor
    stats: dict


def _ffn(x, w1, b1, w2, b2, activation):
    return ACTIVATIONS[activation](x @ w1 + b1) @ w2 + b2


def expert_forward(x_subset, e, experts, capacity=None):
    """Run expert ``e`` on ``x_subset`` [n, d_model]."""
    x_subset = nx.as_tensor(x_subset)
    if not 0 <= e < experts.n_experts:
        raise ContractError(f"expert id {e} out of range")
    if capacity is not None and x_subset.shape[0] > capacity:
        raise ContractError(f"expert {e} received {x_subset.shape[0]} tokens, capacity is {capacity}")
    d, f = experts.d_model, experts.w1.shape[2]
    w1 = nx.take(experts.w1, [e]).reshape(d, f)
    b1 = nx.take(experts.b1, [e]).reshape(f)
    w2 = nx.take(experts.w2, [e]).reshape(f, d)
    b2 = nx.take(experts.b2, [e]).reshape(d)
    return _ffn(x_subset, w1, b1, w2, b2, experts.activation)


def _gate_values(plan, tokens, experts_idx, probs):
    t, e = plan.num_tokens, plan.n_experts
    if probs is None:
        table = np.zeros((t, e), dtype=np.float64)
        for i, (idx, gate) in enumerate(zip(plan.expert_index, plan.expert_gate)):
            table[i, idx] = gate
        return table[tokens, experts_idx]
    probs = nx.as_tensor(probs)
    if probs.shape != (t, e):
        raise DimensionError(f"gate probabilities must be [{t}, {e}]")
    gates = nx.take(probs.reshape(t * e, 1), tokens * e + experts_idx)
    if plan.renormalized:
        selected = nx.tensor_sum(probs * plan.selection_mask.astype(probs.dtype), axis=1, keepdims=True)
        gates = gates / nx.take(selected, tokens)
    return gates


def moe_forward(x, plan, experts, probs=None):
    """Combine expert outputs for ``x`` [B, L, d] (or [T, d]) under ``plan``.

    Each kept (token, expert) pair is written to slot ``position_in_expert`` of
    a [E, C, d] buffer; every expert runs once on its buffer and results are
    scattered back weighted by the gate. Gates are taken from ``probs`` (a
    [T, E] tensor, so gradients reach the router) or, if ``probs`` is None,
    from the plan as constants. Tokens whose assignments were all dropped get
    a zero row.
    """
    x = nx.as_tensor(x)
    shape = x.shape
    d = shape[-1]
    n_tokens = int(np.prod(shape[:-1]))
    if n_tokens != plan.num_tokens:
        raise ContractError(f"plan covers {plan.num_tokens} tokens, input has {n_tokens}")
    if d != experts.d_model or plan.n_experts != experts.n_experts:
        raise DimensionError("input / plan / expert dimensions disagree")
    e_count, cap = experts.n_experts, plan.capacity

    tokens, expert_idx, slots = plan.kept_assignments()
    if slots.size and slots.max() >= cap:
        raise ContractError("slot index exceeds expert capacity")
    flat = x.reshape(n_tokens, d)
    buffer_rows = expert_idx * cap + slots
    buffer = nx.index_add(buffer_rows, nx.take(flat, tokens), e_count * cap).reshape(e_count, cap, d)
    hidden = _ffn(buffer, experts.w1, experts.b1.reshape(e_count, 1, -1),
                  experts.w2, experts.b2.reshape(e_count, 1, d), experts.activation)
    picked = nx.take(hidden.reshape(e_count * cap, d), buffer_rows)
    gates = _gate_values(plan, tokens, expert_idx, probs)
    if not isinstance(gates, nx.Tensor):
        gates = nx.Tensor(gates.astype(x.dtype))
    weighted = picked * gates.reshape(-1, 1)
    out = nx.index_add(tokens, weighted, n_tokens).reshape(shape)
    return MoEOutput(output=out, stats=plan.stats())
