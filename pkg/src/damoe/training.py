"""Training and evaluation loops, metrics files and run comparison."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import rng_state_json, save_checkpoint
from .config import RunConfig
from .data import (
    UNK,
    Tokenizer,
    bundled_corpus_path,
    ingest,
    lm_eval_windows,
    lm_stream,
    load_labeled,
    pad_batch,
    sample_lm_batch,
    synthetic_sentiment,
)
from .exceptions import ComparisonError, ConfigError, IngestionError, NumericalAbort
from .importance import compute_token_importance
from .model import DAMoEModel

log = logging.getLogger(__name__)

SENTIMENT_TRAIN = 800
SENTIMENT_VALID = 200
FINAL_WINDOW = 25


# ---------------------------------------------------------------------------
# datasets

@dataclass
class LMData:
    tokenizer: Tokenizer
    train: np.ndarray
    valid: np.ndarray


@dataclass
class LabeledData:
    tokenizer: Tokenizer
    train: list
    valid: list


def load_lm_data(path=None, seed=0, tokenizer="char"):
    corpus = ingest(path or bundled_corpus_path(), seed=seed)
    tok = Tokenizer.fit(corpus.documents, mode=tokenizer)
    valid_docs = corpus.valid or corpus.train[-1:]
    return LMData(tok, lm_stream(tok, corpus.train), lm_stream(tok, valid_docs))


def load_labeled_data(path=None, tokenizer="whitespace"):
    """Labeled rows from ``path`` (80/20 split) or the synthetic sentiment set."""
    if path:
        rows = load_labeled(path)
        cut = max(1, int(0.8 * len(rows)))
        train, valid = rows[:cut], rows[cut:] or rows[-1:]
    else:
        rows = synthetic_sentiment(SENTIMENT_TRAIN + SENTIMENT_VALID, seed=0)
        train, valid = rows[:SENTIMENT_TRAIN], rows[SENTIMENT_TRAIN:]
    tok = Tokenizer.fit([x for x, _ in train], mode=tokenizer)
    return LabeledData(tok, train, valid)


def encode_rows(tokenizer, rows, max_len):
    seqs = [tokenizer.encode(x)[:max_len] or [UNK] for x, _ in rows]
    ids, mask = pad_batch(seqs)
    return ids, mask, np.asarray([y for _, y in rows], dtype=np.int64)


# ---------------------------------------------------------------------------
# metrics

def step_record(step, loss, result, run_name, seed, lm, t0, aux=None, accuracy=None):
    layers = []
    load_total = None
    assigned = dropped = 0
    for i, blk in enumerate(result.blocks):
        s = blk.stats
        layers.append({"layer": i, "expert_load": s["expert_load"], "drop_rate": s["drop_rate"],
                       "mean_K": s["mean_K"], "assigned": s["assigned"], "dropped": s["dropped"],
                       "capacity": s["capacity"]})
        load = np.asarray(s["expert_load"])
        load_total = load if load_total is None else load_total + load
        assigned += s["assigned"]
        dropped += s["dropped"]
    rec = {
        "run": run_name,
        "seed": seed,
        "step": step,
        "loss": loss,
        "mean_K": float(np.mean([lay["mean_K"] for lay in layers])),
        "drop_rate": dropped / assigned if assigned else 0.0,
        "expert_load": load_total.tolist(),
        "assigned": assigned,
        "dropped": dropped,
        "layers": layers,
    }
    if lm:
        rec["perplexity"] = math.exp(loss)
    if aux is not None:
        rec["aux_loss"] = aux
    if accuracy is not None:
        rec["accuracy"] = accuracy
    rec["wall_time"] = round(time.perf_counter() - t0, 6)
    return rec


def read_metrics(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read metrics file {path}: {exc}") from exc
    try:
        return [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: malformed metrics line: {exc}") from exc


def initial_loss(metrics):
    return metrics[0]["loss"]


def final_loss(metrics, window=FINAL_WINDOW):
    """Mean training loss over the last ``window`` steps."""
    tail = metrics[-window:]
    return float(np.mean([m["loss"] for m in tail]))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: DAMoEModel
    metrics: list
    summary: dict
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None
    tokenizer: Tokenizer | None = None
    data: object = None


def _dump_nan(out_dir, step, batch):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nan_dump_step{step}.npz"
    np.savez(path, step=step, **{k: np.asarray(v) for k, v in batch.items() if v is not None})
    return path


def probe_batch(data, run):
    """Fixed evaluation batch used to check checkpoint round trips."""
    if isinstance(data, LMData):
        x, y = lm_eval_windows(data.valid, run.seq_len)
        return {"ids": x[: run.batch_size], "targets": y[: run.batch_size], "mask": None}
    ids, mask, labels = encode_rows(data.tokenizer, data.valid[: run.batch_size], run.seq_len)
    return {"ids": ids, "targets": labels, "mask": mask}


def probe_loss(model, batch):
    loss, _ = model.loss(batch["ids"], batch["targets"], batch["mask"])
    return float(loss.item())


def train(run, out_dir=None, data=None):
    """Seeded training loop; writes metrics/checkpoint when ``out_dir`` is given.

    Every step records the loss of the batch before the update. A non-finite
    loss stops the run with :class:`NumericalAbort` after dumping the batch.
    """
    out_dir = Path(out_dir or run.out) if (out_dir or run.out) else None
    lm = run.task == "lm"
    if data is None:
        data = (load_lm_data(run.data or None, seed=run.seed, tokenizer=run.tokenizer) if lm
                else load_labeled_data(run.data or None, tokenizer=run.tokenizer))
    tok = data.tokenizer
    max_len = run.seq_len
    if not lm:
        max_len = max(run.seq_len, max(len(tok.encode(x)) for x, _ in data.train + data.valid))
    config = run.model_config(tok.vocab_size, max_len=max_len)
    model = DAMoEModel(config)
    model.meta = {"tokenizer": tok.to_json(), "task": run.task}
    opt = nx.Adam(model.params, lr=run.lr, beta1=run.beta1, beta2=run.beta2, eps=run.eps)
    rng = np.random.default_rng([run.seed, 2])
    run_name = run.run_name or f"{run.router_mode}-E{run.n_experts}"

    if not lm:
        train_ids, train_mask, train_labels = encode_rows(tok, data.train, config.max_len)
        order = np.empty(0, dtype=np.int64)

    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    metrics = []
    t0 = time.perf_counter()
    try:
        for step in range(run.steps):
            if lm:
                x, y = sample_lm_batch(data.train, run.batch_size, run.seq_len, rng)
                batch = {"ids": x, "targets": y, "mask": None}
            else:
                if order.size < run.batch_size:
                    order = np.concatenate([order, rng.permutation(len(data.train))])
                pick, order = order[: run.batch_size], order[run.batch_size:]
                ids, mask = train_ids[pick], train_mask[pick]
                width = int(mask.sum(axis=1).max())
                batch = {"ids": ids[:, :width], "targets": train_labels[pick], "mask": mask[:, :width]}
            task_loss, result = model.loss(batch["ids"], batch["targets"], batch["mask"])
            loss = task_loss
            aux_value = None
            if run.aux_loss_coef:
                aux = result.aux_loss()
                aux_value = float(aux.item())
                loss = task_loss + aux * float(run.aux_loss_coef)
            value = float(task_loss.item())
            if not (np.isfinite(value) and np.isfinite(loss.item())):
                dump = _dump_nan(out_dir, step, batch)
                raise NumericalAbort(f"non-finite loss at step {step} (dump: {dump})", step=step,
                                     dump_path=dump)
            accuracy = None
            if not lm:
                accuracy = float((result.logits.data.argmax(axis=1) == batch["targets"]).mean())
            grads = nx.backward(loss, model.params)
            opt.step(grads)
            rec = step_record(step, value, result, run_name, run.seed, lm, t0, aux_value, accuracy)
            metrics.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec) + "\n")
            if step % 100 == 0:
                log.info("%s seed=%d step=%d loss=%.4f", run_name, run.seed, step, value)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    probe = probe_batch(data, run)
    summary = {
        "run": run_name,
        "seed": run.seed,
        "task": run.task,
        "steps": run.steps,
        "initial_loss": initial_loss(metrics) if metrics else None,
        "final_loss": final_loss(metrics) if metrics else None,
        "probe_loss": probe_loss(model, probe),
        "n_parameters": model.num_parameters(),
    }
    if not lm:
        summary.update(evaluate(model, data))
    model.meta["rng_state"] = rng_state_json(rng)
    ckpt = None
    if out_dir is not None:
        if run.save_checkpoint:
            ckpt = save_checkpoint(model, out_dir / "model.damo", optimizer=opt.state)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return TrainResult(model=model, metrics=metrics, summary=summary, checkpoint_path=ckpt,
                       metrics_path=None if out_dir is None else out_dir / "metrics.jsonl",
                       tokenizer=tok, data=data)


# ---------------------------------------------------------------------------
# evaluation

def f1_score(predictions, labels, positive=1):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    tp = int(((predictions == positive) & (labels == positive)).sum())
    fp = int(((predictions == positive) & (labels != positive)).sum())
    fn = int(((predictions != positive) & (labels == positive)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def classification_metrics(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return {"accuracy": float((predictions == labels).mean()), "f1": f1_score(predictions, labels),
            "n": int(labels.size)}


def evaluate(model, data, split="valid", batch_size=32):
    """Perplexity (LM head) or accuracy/F1 (classifier head) over a whole split."""
    head = model.config.head
    if isinstance(data, LMData):
        if head != "lm":
            raise ConfigError("language-model data given to a classifier checkpoint")
        stream = data.valid if split == "valid" else data.train
        x, y = lm_eval_windows(stream, min(model.config.max_len, 64))
        total = 0.0
        count = 0
        for i in range(0, x.shape[0], batch_size):
            loss, _ = model.loss(x[i:i + batch_size], y[i:i + batch_size])
            n = y[i:i + batch_size].size
            total += float(loss.item()) * n
            count += n
        mean = total / count
        return {"loss": mean, "perplexity": math.exp(mean), "tokens": count}
    if isinstance(data, LabeledData):
        if head != "classifier":
            raise ConfigError("labeled data given to a language-model checkpoint")
        rows = data.valid if split == "valid" else data.train
        preds = []
        for i in range(0, len(rows), batch_size):
            ids, mask, _ = encode_rows(data.tokenizer, rows[i:i + batch_size], model.config.max_len)
            preds.append(model(ids, mask).data.argmax(axis=1))
        return classification_metrics(np.concatenate(preds), [y for _, y in rows])
    raise ConfigError(f"unsupported dataset type {type(data).__name__}")


# ---------------------------------------------------------------------------
# importance export and route traces

def model_tokenizer(model):
    meta = getattr(model, "meta", {}) or {}
    if "tokenizer" not in meta:
        raise ConfigError("checkpoint carries no tokenizer")
    return Tokenizer.from_json(meta["tokenizer"])


def export_importance(model, text, tokenizer=None):
    """Per-block, per-token routing records for ``text``.

    Returns ``(records, attention)`` where ``attention`` maps block index to the
    [1, H, L, L] weights the scores were computed from.
    """
    tokenizer = tokenizer or model_tokenizer(model)
    pieces = tokenizer.split(text)
    if not pieces:
        raise ConfigError("cannot export importance for an empty input")
    ids = np.asarray([tokenizer.encode(text)], dtype=np.int64)
    if ids.shape[1] > model.config.max_len:
        raise ConfigError(f"input has {ids.shape[1]} tokens; model max_len is {model.config.max_len}")
    result = model.forward(ids)
    records, attention = [], {}
    for b, blk in enumerate(result.blocks):
        weights = blk.attention_weights.data
        attention[b] = weights
        scores = compute_token_importance(weights).reshape(-1)
        plan = blk.plan
        for pos, piece in enumerate(pieces):
            idx = plan.expert_index[pos]
            records.append({
                "block": b,
                "batch": 0,
                "position": pos,
                "token": piece,
                "importance": float(scores[pos]),
                "K": int(plan.counts[pos]),
                "selected_experts": [int(e) for e in idx],
                "gates": [float(g) for g in plan.expert_gate[pos]],
                "dropped": [int(e) for e in idx if plan.dropped[pos, e]],
            })
    return records, attention


def route_trace(model, data, max_batches=None, batch_size=8):
    """Routing plans for evaluation batches, one record per (batch, block)."""
    if isinstance(data, LMData):
        x, _ = lm_eval_windows(data.valid, min(model.config.max_len, 64))
        batches = [(x[i:i + batch_size], None) for i in range(0, x.shape[0], batch_size)]
    else:
        batches = []
        for i in range(0, len(data.valid), batch_size):
            ids, mask, _ = encode_rows(data.tokenizer, data.valid[i:i + batch_size], model.config.max_len)
            batches.append((ids, mask))
    out = []
    for n, (ids, mask) in enumerate(batches[:max_batches]):
        result = model.forward(ids, mask)
        for b, blk in enumerate(result.blocks):
            out.append({"batch": n, "block": b, "capacity": blk.plan.capacity,
                        "stats": blk.stats, "tokens": blk.plan.records()})
    return out


# ---------------------------------------------------------------------------
# comparison

@dataclass
class Comparison:
    rows: list
    groups: dict
    steps: list = field(default_factory=list)

    def table(self):
        lines = [f"{'file':<40} {'run':<16} {'seed':>4} {'final_loss':>11} {'diff':>9} {'mean_K':>7} {'drop':>6}"]
        for r in self.rows:
            lines.append(f"{r['file'][-40:]:<40} {r['run']:<16} {r['seed']:>4} {r['final_loss']:>11.5f} "
                         f"{r['diff']:>+9.5f} {r['mean_K']:>7.3f} {r['drop_rate']:>6.3f}")
        lines.append("")
        lines.append(f"{'run':<16} {'seeds':>5} {'mean_final_loss':>16}")
        for name, g in self.groups.items():
            lines.append(f"{name:<16} {len(g['seeds']):>5} {g['mean_final_loss']:>16.5f}")
        return "\n".join(lines)


def compare_runs(paths):
    """Side-by-side final losses; differences are relative to the first file."""
    if len(paths) < 2:
        raise ComparisonError("need at least two metrics files")
    loaded = [(str(p), read_metrics(p)) for p in paths]
    steps = None
    for path, metrics in loaded:
        if not metrics:
            raise ComparisonError(f"{path} has no metrics")
        these = [m["step"] for m in metrics]
        if steps is None:
            steps = these
        elif these != steps:
            raise ComparisonError(f"{path} is not aligned with {loaded[0][0]} (different steps)")
    rows = []
    for path, metrics in loaded:
        tail = metrics[-FINAL_WINDOW:]
        rows.append({
            "file": path,
            "run": str(metrics[-1].get("run", Path(path).parent.name)),
            "seed": int(metrics[-1].get("seed", 0)),
            "final_loss": final_loss(metrics),
            "mean_K": float(np.mean([m["mean_K"] for m in tail])),
            "drop_rate": float(np.mean([m["drop_rate"] for m in tail])),
        })
    base = rows[0]["final_loss"]
    for r in rows:
        r["diff"] = r["final_loss"] - base
    groups = {}
    for r in rows:
        g = groups.setdefault(r["run"], {"seeds": [], "final_losses": []})
        g["seeds"].append(r["seed"])
        g["final_losses"].append(r["final_loss"])
    for g in groups.values():
        g["mean_final_loss"] = float(np.mean(g["final_losses"]))
    return Comparison(rows=rows, groups=groups, steps=steps)
