"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (printed and repeated in the pytest
terminal summary). Run just these with ``pytest tests/test_acceptance.py -s``.
"""

import contextlib
import io
import json
import math
import time

import numpy as np
import pytest

from acceptance_report import note, record
from damoe import cli
from damoe import numerics as nx
from damoe.checkpoint import load_checkpoint
from damoe.config import ModelConfig, RunConfig
from damoe.importance import compute_token_importance, experts_per_token
from damoe.model import DAMoEModel
from damoe.router import CapacityConfig, RouterParams, route_dynamic, route_fixed
from damoe.training import load_labeled_data, load_lm_data, probe_batch, read_metrics, train
from reference import plan_matches, ref_capacity, ref_expert_count, ref_importance, ref_route
from test_model import dense_reference


def softmax_rows(logits):
    z = np.exp(logits - logits.max(-1, keepdims=True))
    return z / z.sum(-1, keepdims=True)


# ---------------------------------------------------------------------------

def test_router_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures = []
    for case in range(1000):
        b, h, length, e = (int(rng.integers(1, hi + 1)) for hi in (4, 4, 16, 8))
        d = int(rng.integers(1, 9))
        factor = float(rng.uniform(0.1, 4.0))
        x = rng.normal(size=(b, length, d))
        a = softmax_rows(rng.normal(scale=float(rng.uniform(0.1, 5.0)), size=(b, h, length, length)))
        w = rng.normal(size=(e, d))
        plan = route_dynamic(x, a, RouterParams(nx.Tensor(w)), capacity=CapacityConfig(factor))
        counts = [ref_expert_count(s, e) for s in ref_importance(a).reshape(-1)]
        ref = ref_route(x.reshape(-1, d), w, counts, ref_capacity(b * length, e, factor))
        problems = plan_matches(plan, ref, gate_tol=1e-6)
        if problems:
            failures.append((case, problems))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    record("router-oracle-equivalence", ok,
           f"1000 cases, {len(failures)} mismatches, {elapsed:.1f}s (limit 60s)")
    assert ok, failures[:5]


def test_importance_and_count_conformance():
    checks = []
    uniform = np.full((2, 3, 4, 4), 0.25)
    s = compute_token_importance(uniform)
    checks.append(bool((s == 0.25).all()))
    for e in range(1, 9):
        checks.append(bool((experts_per_token(s, e) == max(1, math.ceil(0.25 * e))).all()))
    identity = np.broadcast_to(np.eye(5), (2, 3, 5, 5))
    s = compute_token_importance(identity)
    checks.append(bool((s == 1.0).all()))
    checks.extend(bool((experts_per_token(s, e) == e).all()) for e in range(1, 9))

    rng = np.random.default_rng(7)
    random_ok = True
    for _ in range(500):
        b, h, length, e = (int(rng.integers(1, hi + 1)) for hi in (4, 4, 16, 8))
        a = softmax_rows(rng.normal(scale=float(rng.uniform(0.01, 10)), size=(b, h, length, length)))
        lengths = rng.integers(1, length + 1, size=b)
        mask = np.arange(length)[None, :] < lengths[:, None]
        a = a * mask[:, None, None, :]
        a = a / a.sum(-1, keepdims=True)
        s = compute_token_importance(a, mask)
        k = experts_per_token(s, e, mask)
        lo = 1.0 / lengths[:, None] - 1e-12
        random_ok &= bool(((s >= lo) & (s <= 1 + 1e-12))[mask].all())
        random_ok &= bool(((k >= 1) & (k <= e))[mask].all()) and bool((k[~mask] == 0).all())
    checks.append(random_ok)
    ok = all(checks)
    record("importance-count-conformance", ok,
           f"{sum(checks)}/{len(checks)} checks (uniform, identity, 500 random masked batches)")
    assert ok


def test_gradient_check():
    cfg = ModelConfig(vocab_size=11, d_model=8, d_ff=16, n_heads=2, n_blocks=2, n_experts=4,
                      max_len=6, precision="double", causal=True)
    model = DAMoEModel(cfg)
    rng = np.random.default_rng(5)
    ids = rng.integers(0, 11, size=(2, 6))
    targets = rng.integers(0, 11, size=(2, 6))

    def loss():
        return model.loss(ids, targets, aux_loss_coef=0.01)[0]

    t0 = time.perf_counter()
    grads = nx.backward(loss(), model.params)
    worst, worst_name, checked = 0.0, "", 0
    for name, p in model.params.items():
        numeric = nx.numerical_gradient(lambda: loss().item(), p.data, h=1e-5)
        g = grads[name]
        big = np.abs(g) > 1e-8
        if big.any():
            rel = np.abs(g - numeric)[big] / np.maximum(np.abs(g[big]), np.abs(numeric[big]))
            checked += int(big.sum())
            if rel.max() > worst:
                worst, worst_name = float(rel.max()), name
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 300
    record("gradient-check", ok,
           f"{checked} elements, max relative error {worst:.2e} ({worst_name}), {elapsed:.1f}s")
    assert ok


def test_degenerate_equivalences():
    rng = np.random.default_rng(9)
    worst = 0.0
    for seed in range(5):
        cfg = ModelConfig(vocab_size=13, d_model=8, d_ff=16, n_heads=2, n_blocks=2, n_experts=1,
                          max_len=8, precision="double", seed=seed)
        model = DAMoEModel(cfg)
        ids = rng.integers(0, 13, size=(3, 7))
        worst = max(worst, float(np.abs(model(ids).data - dense_reference(model.state_arrays(), cfg, ids)).max()))
    dense_ok = worst <= 1e-6

    plans_ok = True
    for _ in range(200):
        b, h, length, e = (int(rng.integers(1, hi + 1)) for hi in (4, 4, 16, 8))
        x = rng.normal(size=(b, length, 5))
        params = RouterParams(nx.Tensor(rng.normal(size=(e, 5))))
        cap = CapacityConfig(float(rng.uniform(0.2, 3.0)))
        identity = np.broadcast_to(np.eye(length), (b, h, length, length))
        dyn = route_dynamic(x, identity, params, capacity=cap)
        fixed = route_fixed(x, params, e, capacity=cap)
        plans_ok &= dyn.equals(fixed, gate_tol=0.0)
    ok = dense_ok and plans_ok
    record("degenerate-equivalences", ok,
           f"(a) E=1 vs dense max |diff| {worst:.1e} (tol 1e-6); (b) identity-attention vs fixed K=E "
           f"plans {'identical' if plans_ok else 'DIFFER'} over 200 cases")
    assert ok


def test_capacity_safety():
    rng = np.random.default_rng(11)
    violations = 0
    for _ in range(200):
        b, h, length, e = (int(rng.integers(1, hi + 1)) for hi in (4, 4, 16, 8))
        x = rng.normal(size=(b, length, 4))
        a = softmax_rows(rng.normal(scale=3.0, size=(b, h, length, length)))
        params = RouterParams(nx.Tensor(rng.normal(size=(e, 4))))
        plan = route_dynamic(x, a, params, capacity=CapacityConfig(float(rng.uniform(0.05, 2.0))))
        over = (plan.expert_mask.sum(axis=0) > plan.capacity).any()
        conserved = plan.expert_mask.sum() + plan.dropped.sum() == plan.counts.sum()
        violations += int(over or not conserved)
    ok = violations == 0
    record("capacity-safety", ok, f"200 cases, {violations} violations")
    assert ok


# ---------------------------------------------------------------------------
# training-based criteria

# No expert may run out of slots in the trend runs. With dynamic K the
# router asks for about 0.7 * E experts per token, so the usual factor of
# 1.25 turns extra experts into extra dropped assignments and the comparison
# would measure capacity starvation instead of expert count. Factor 8 makes
# C >= the token count for every E in {2, 4, 8}.
TREND_CAPACITY_FACTOR = 8.0
TREND_EXPERTS = (2, 4, 8)
SEEDS = (0, 1, 2)


def _trend_runs(data, capacity_factor):
    finals, ratios = {}, {}
    for e in TREND_EXPERTS:
        finals[e], ratios[e] = [], []
        for seed in SEEDS:
            run = RunConfig(n_experts=e, d_model=64, steps=500, seed=seed,
                            capacity_factor=capacity_factor, save_checkpoint=False)
            s = train(run, data=data).summary
            finals[e].append(s["final_loss"])
            ratios[e].append(s["final_loss"] / s["initial_loss"])
    return finals, ratios


@pytest.mark.slow
def test_training_sanity():
    data = load_lm_data()
    t0 = time.perf_counter()
    finals, ratios = _trend_runs(data, TREND_CAPACITY_FACTOR)
    means = {e: float(np.mean(v)) for e, v in finals.items()}
    worst_ratio = max(max(r) for r in ratios.values())
    ratio_ok = worst_ratio <= 0.7
    pairs = list(zip(TREND_EXPERTS, TREND_EXPERTS[1:]))
    trend_ok = all(means[b] <= means[a] * 1.02 for a, b in pairs)
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"E{e}={means[e]:.4f}" for e in TREND_EXPERTS)
    record("training-sanity", ratio_ok and trend_ok,
           f"(i) worst final/initial {worst_ratio:.3f} (<= 0.7); (ii) seed-mean final loss {detail} "
           f"(each <= 1.02 x previous); capacity_factor {TREND_CAPACITY_FACTOR}; {elapsed / 60:.1f} min")

    # same protocol at the default capacity factor, reported for reference only
    default_finals, _ = _trend_runs(data, CapacityConfig().capacity_factor)
    note("training trend at default capacity_factor 1.25: " + ", ".join(
        f"E{e}={np.mean(v):.4f}" for e, v in default_finals.items()))
    assert ratio_ok and trend_ok


@pytest.mark.slow
def test_baseline_parity():
    data = load_labeled_data()
    t0 = time.perf_counter()
    acc = {"dynamic": [], "fixed": []}
    for mode in acc:
        for seed in SEEDS:
            run = RunConfig(task="classify", tokenizer="whitespace", router_mode=mode, fixed_k=1,
                            n_experts=4, seed=seed, save_checkpoint=False)
            acc[mode].append(train(run, data=data).summary["accuracy"])
    dyn, fix = float(np.mean(acc["dynamic"])), float(np.mean(acc["fixed"]))
    ok = dyn >= fix - 0.02
    record("baseline-parity", ok,
           f"dynamic {dyn:.4f} vs fixed top-1 {fix:.4f} (mean of 3 seeds; need >= fixed - 0.02), "
           f"{(time.perf_counter() - t0) / 60:.1f} min")

    # both routers saturate at the full budget; a short one is reported as well
    short = {mode: np.mean([train(RunConfig(task="classify", tokenizer="whitespace", router_mode=mode,
                                            fixed_k=1, n_experts=4, steps=60, seed=seed,
                                            save_checkpoint=False), data=data).summary["accuracy"]
                            for seed in SEEDS]) for mode in ("dynamic", "fixed")}
    note(f"sentiment accuracy after 60 steps: dynamic {short['dynamic']:.4f}, fixed top-1 {short['fixed']:.4f}")
    assert ok


def _strip_wall_time(lines):
    out = []
    for line in lines:
        rec = json.loads(line)
        rec.pop("wall_time")
        out.append(rec)
    return out


def test_determinism_and_serialization(tmp_path):
    data = load_lm_data()
    run = RunConfig(n_experts=4, steps=20, seed=3)
    a = train(run, out_dir=tmp_path / "a", data=data)
    b = train(run, out_dir=tmp_path / "b", data=data)
    la = a.metrics_path.read_text(encoding="utf-8").splitlines()
    lb = b.metrics_path.read_text(encoding="utf-8").splitlines()
    same_metrics = len(la) == 20 and _strip_wall_time(la) == _strip_wall_time(lb)

    probe = probe_batch(data, run)
    loaded = load_checkpoint(a.checkpoint_path)
    bit_exact = loaded(probe["ids"]).data.tobytes() == a.model(probe["ids"]).data.tobytes()
    ok = same_metrics and bit_exact
    record("determinism-serialization", ok,
           f"metrics streams {'identical' if same_metrics else 'DIFFER'} over 20 steps (wall_time excluded); "
           f"reloaded logits {'bit-exact' if bit_exact else 'DIFFER'}")
    assert ok


def _run_cli(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(argv)
    return code, buf.getvalue()


def _recompute_importance(weights):
    """Sequential float32 loop over heads, mirroring the stored precision."""
    _, h, length, _ = weights.shape
    out = []
    for t in range(length):
        acc = np.float32(0)
        for head in range(h):
            acc = np.float32(acc + max(weights[0, head, t, :]))
        out.append(float(acc / np.float32(h)))
    return out


def test_importance_export_integrity(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps = 30\nn_experts = 4\nbatch_size = 8\nseq_len = 32\n", encoding="utf-8")
    code, _ = _run_cli(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert code == 0
    ckpt = str(tmp_path / "run" / "model.damo")
    text = "The movie was incredibly inspiring."
    code, out = _run_cli(["importance", "--checkpoint", ckpt, "--text", text, "--json",
                          "--dump-attention", str(tmp_path / "att.npz")])
    records = json.loads(out)
    dumped = np.load(tmp_path / "att.npz")
    n_experts = 4
    mismatches = 0
    for block in range(2):
        rows = [r for r in records if r["block"] == block]
        expected = _recompute_importance(dumped[f"block{block}"])
        mismatches += sum(r["importance"] != v for r, v in zip(rows, expected))
        mismatches += sum(r["K"] != ref_expert_count(v, n_experts) for r, v in zip(rows, expected))
        mismatches += int(len(rows) != len(text))
    code1, out1 = _run_cli(["importance", "--checkpoint", ckpt, "--text", "T", "--json"])
    single = json.loads(out1)
    single_ok = code1 == 0 and all(r["importance"] == 1.0 and r["K"] == n_experts for r in single)
    ok = code == 0 and mismatches == 0 and single_ok
    record("importance-export-integrity", ok,
           f"{len(records)} records, {mismatches} mismatches vs recomputation from dumped attention; "
           f"single-token importance/K {'1.0/E' if single_ok else 'WRONG'}")
    assert ok
