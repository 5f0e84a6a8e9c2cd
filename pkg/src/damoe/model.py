"""Pre-norm MoE encoder: embeddings, N blocks of MHSA + routed expert FFN, task head."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import AttentionParams, mhsa_forward
from .config import ModelConfig
from .exceptions import DimensionError
from .importance import compute_token_importance, experts_per_token
from .moe import ExpertParams, moe_forward
from .router import CapacityConfig, RouterParams, load_balance_loss, plan_from_probs


def truncated_normal(rng, shape, std, bound=2.0):
    """Normal(0, std) samples redrawn until within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_parameters(config):
    """Named parameter arrays for ``config`` in canonical order."""
    d, f, e = config.d_model, config.d_ff, config.n_experts
    rng = np.random.default_rng([config.seed, 0])
    params = OrderedDict()

    def lin(shape, fan_in):
        return truncated_normal(rng, shape, 1.0 / np.sqrt(fan_in))

    params["embed.tokens"] = rng.standard_normal((config.vocab_size, d)) * 0.02
    params["embed.positions"] = rng.standard_normal((config.max_len, d)) * 0.02
    for i in range(config.n_blocks):
        p = f"blocks.{i}."
        params[p + "ln1.gain"] = np.ones(d)
        params[p + "ln1.bias"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            params[p + f"attn.w{name}"] = lin((d, d), d)
            params[p + f"attn.b{name}"] = np.zeros(d)
        params[p + "ln2.gain"] = np.ones(d)
        params[p + "ln2.bias"] = np.zeros(d)
        params[p + "router.w_r"] = lin((e, d), d)
        # one generator per expert so experts never start identical
        w1, w2 = [], []
        for j in range(e):
            erng = np.random.default_rng([config.seed, 1 + i, j])
            w1.append(truncated_normal(erng, (d, f), 1.0 / np.sqrt(d)))
            w2.append(truncated_normal(erng, (f, d), 1.0 / np.sqrt(f)))
        params[p + "moe.w1"] = np.stack(w1)
        params[p + "moe.b1"] = np.zeros((e, f))
        params[p + "moe.w2"] = np.stack(w2)
        params[p + "moe.b2"] = np.zeros((e, d))
    params["final_ln.gain"] = np.ones(d)
    params["final_ln.bias"] = np.zeros(d)
    out_dim = config.vocab_size if config.head == "lm" else config.num_classes
    params["head.w"] = lin((d, out_dim), d)
    params["head.b"] = np.zeros(out_dim)
    return params


def parameter_shapes(config):
    d, f, e = config.d_model, config.d_ff, config.n_experts
    shapes = OrderedDict()
    shapes["embed.tokens"] = (config.vocab_size, d)
    shapes["embed.positions"] = (config.max_len, d)
    for i in range(config.n_blocks):
        p = f"blocks.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{name}"] = (d, d)
            shapes[p + f"attn.b{name}"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "router.w_r"] = (e, d)
        shapes[p + "moe.w1"] = (e, d, f)
        shapes[p + "moe.b1"] = (e, f)
        shapes[p + "moe.w2"] = (e, f, d)
        shapes[p + "moe.b2"] = (e, d)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    out_dim = config.vocab_size if config.head == "lm" else config.num_classes
    shapes["head.w"] = (d, out_dim)
    shapes["head.b"] = (out_dim,)
    return shapes


@dataclass
class BlockParams:
    ln1_gain: nx.Tensor
    ln1_bias: nx.Tensor
    attention: AttentionParams
    ln2_gain: nx.Tensor
    ln2_bias: nx.Tensor
    router: RouterParams
    experts: ExpertParams


@dataclass
class BlockOutput:
    output: nx.Tensor
    attention_weights: nx.Tensor
    plan: object
    probs: nx.Tensor
    stats: dict = field(default_factory=dict)


def block_forward(x, block, config, padding_mask=None):
    """``y = x2 + MoE(LN(x2))`` with ``x2 = x + MHSA(LN(x))``.

    In dynamic mode the block's own attention weights set each token's
    expert count.
    """
    b, length, d = x.shape
    h = nx.layernorm(x, block.ln1_gain, block.ln1_bias)
    att = mhsa_forward(h, block.attention, padding_mask, causal=config.causal)
    x2 = x + att.output
    h2 = nx.layernorm(x2, block.ln2_gain, block.ln2_bias)

    token_mask = (np.ones(b * length, dtype=bool) if padding_mask is None
                  else np.asarray(padding_mask, dtype=bool).reshape(-1))
    n_experts = block.router.n_experts
    probs = nx.softmax(h2.reshape(b * length, d) @ nx.transpose(block.router.w_r), axis=-1)
    importance = None
    if config.router_mode == "dynamic":
        importance = compute_token_importance(att.weights, token_mask.reshape(b, length)).reshape(-1)
        counts = experts_per_token(importance, n_experts, token_mask)
    else:
        counts = np.where(token_mask, config.fixed_k, 0)
    capacity = CapacityConfig(config.capacity_factor).capacity(int(token_mask.sum()), n_experts)
    plan = plan_from_probs(probs.data, counts, capacity, importance=importance,
                           token_mask=token_mask, renormalize=config.renormalize_gates)
    moe = moe_forward(h2, plan, block.experts, probs=probs)
    return BlockOutput(output=x2 + moe.output, attention_weights=att.weights,
                       plan=plan, probs=probs, stats=moe.stats)


@dataclass
class ForwardResult:
    logits: nx.Tensor
    blocks: list

    def aux_loss(self):
        """Mean load-balance loss over blocks (differentiable in router probs)."""
        total = None
        for blk in self.blocks:
            term = load_balance_loss(blk.probs, blk.plan.expert_mask, blk.plan.token_mask)
            total = term if total is None else total + term
        return total * (1.0 / len(self.blocks))


class DAMoEModel:
    """Parameters plus forward pass for a :class:`ModelConfig`."""

    def __init__(self, config, params=None):
        self.config = config
        self.dtype = nx.resolve_dtype(config.precision)
        arrays = init_parameters(config) if params is None else params
        expected = parameter_shapes(config)
        if list(arrays) != list(expected):
            raise DimensionError("parameter names do not match the configuration")
        self.params = OrderedDict()
        for name, arr in arrays.items():
            arr = np.asarray(getattr(arr, "data", arr), dtype=self.dtype)
            if arr.shape != expected[name]:
                raise DimensionError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            self.params[name] = nx.Tensor(arr.copy(), requires_grad=True, name=name)

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def block(self, i):
        p = self.params
        pre = f"blocks.{i}."
        return BlockParams(
            ln1_gain=p[pre + "ln1.gain"],
            ln1_bias=p[pre + "ln1.bias"],
            attention=AttentionParams(
                wq=p[pre + "attn.wq"], bq=p[pre + "attn.bq"],
                wk=p[pre + "attn.wk"], bk=p[pre + "attn.bk"],
                wv=p[pre + "attn.wv"], bv=p[pre + "attn.bv"],
                wo=p[pre + "attn.wo"], bo=p[pre + "attn.bo"],
                n_heads=self.config.n_heads,
            ),
            ln2_gain=p[pre + "ln2.gain"],
            ln2_bias=p[pre + "ln2.bias"],
            router=RouterParams(p[pre + "router.w_r"]),
            experts=ExpertParams(
                w1=p[pre + "moe.w1"], b1=p[pre + "moe.b1"],
                w2=p[pre + "moe.w2"], b2=p[pre + "moe.b2"],
                activation=self.config.activation,
            ),
        )

    def embed(self, token_ids):
        b, length = token_ids.shape
        tok = nx.take(self.params["embed.tokens"], token_ids.reshape(-1)).reshape(b, length, -1)
        return tok + nx.take(self.params["embed.positions"], np.arange(length))

    def forward(self, token_ids, padding_mask=None):
        """Logits and per-block details for integer ``token_ids`` [B, L].

        The LM head gives [B, L, vocab]; the classifier head mean-pools final
        states over unmasked positions and gives [B, num_classes].
        """
        cfg = self.config
        token_ids = np.asarray(token_ids)
        if token_ids.ndim != 2:
            raise DimensionError(f"token_ids must be [B, L], got shape {token_ids.shape}")
        if token_ids.dtype.kind not in "iu":
            raise DimensionError("token_ids must be integers")
        b, length = token_ids.shape
        if length > cfg.max_len:
            raise DimensionError(f"sequence length {length} exceeds max_len {cfg.max_len}")
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        if padding_mask is not None:
            padding_mask = np.asarray(padding_mask, dtype=bool)
            if padding_mask.shape != (b, length):
                raise DimensionError("padding_mask must match token_ids")

        x = self.embed(token_ids)
        blocks = []
        for i in range(cfg.n_blocks):
            out = block_forward(x, self.block(i), cfg, padding_mask)
            blocks.append(out)
            x = out.output
        x = nx.layernorm(x, self.params["final_ln.gain"], self.params["final_ln.bias"])
        if cfg.head == "classifier":
            mask = (np.ones((b, length)) if padding_mask is None else padding_mask).astype(self.dtype)
            pooled = nx.tensor_sum(x * mask[:, :, None], axis=1) / mask.sum(axis=1, keepdims=True)
            x = pooled
        logits = x @ self.params["head.w"] + self.params["head.b"]
        return ForwardResult(logits=logits, blocks=blocks)

    def __call__(self, token_ids, padding_mask=None):
        return self.forward(token_ids, padding_mask).logits

    def loss(self, token_ids, targets, padding_mask=None, aux_loss_coef=0.0):
        """Cross-entropy (plus optional load-balance term) and the forward result.

        LM targets are [B, L] next-token ids, counted where ``padding_mask``
        is set; classifier targets are [B] labels.
        """
        result = self.forward(token_ids, padding_mask)
        logits = result.logits
        if self.config.head == "lm":
            b, length, v = logits.shape
            weights = None if padding_mask is None else np.asarray(padding_mask).reshape(-1)
            loss = nx.cross_entropy(logits.reshape(b * length, v), np.asarray(targets).reshape(-1), weights)
        else:
            loss = nx.cross_entropy(logits, np.asarray(targets).reshape(-1))
        if aux_loss_coef:
            loss = loss + result.aux_loss() * float(aux_loss_coef)
        return loss, result

    def state_arrays(self):
        return OrderedDict((k, v.data) for k, v in self.params.items())
