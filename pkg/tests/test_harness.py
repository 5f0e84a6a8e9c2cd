import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damoe import cli
from damoe.config import ModelConfig, RunConfig, format_kv, parse_kv
from damoe.data import (
    PAD,
    Tokenizer,
    bundled_corpus_path,
    ingest,
    load_labeled,
    pad_batch,
    split_documents,
    synthetic_sentiment,
    write_labeled,
)
from damoe.exceptions import ComparisonError, ConfigError, IngestionError
from damoe.model import DAMoEModel
from damoe.training import (
    LabeledData,
    classification_metrics,
    compare_runs,
    evaluate,
    f1_score,
    load_lm_data,
    read_metrics,
    train,
)

TINY = dict(d_model=16, d_ff=32, n_heads=2, n_blocks=1, n_experts=2, batch_size=4, seq_len=16)


# -- ingestion ------------------------------------------------------------------

def test_ingest_two_documents(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("first doc\nline two\n\n\nsecond doc\n", encoding="utf-8")
    corpus = ingest(f)
    assert corpus.documents == ["first doc\nline two", "second doc"]


def test_ingest_errors(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(IngestionError):
        ingest(empty)
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"\xff\xfe ok")
    with pytest.raises(IngestionError):
        ingest(bad)
    with pytest.raises(IngestionError):
        ingest(tmp_path / "missing.txt")


def test_hash_split_matches_oracle():
    docs = [f"document number {i}" for i in range(1000)]
    corpus = ingest_docs(docs)
    expected = ["valid" if int.from_bytes(hashlib.sha256(f"0\x00{d}".encode()).digest()[:8], "little") % 100 < 5
                else "train" for d in docs]
    assert corpus.splits == expected
    assert 30 <= len(corpus.valid) <= 70
    assert ingest_docs(docs).splits == corpus.splits


def ingest_docs(docs):
    from damoe.data import Corpus
    return Corpus.from_documents(docs, seed=0)


def test_bundled_corpus_size():
    path = bundled_corpus_path()
    assert 80_000 <= path.stat().st_size <= 120_000
    corpus = ingest(path)
    assert len(corpus.valid) > 0 and len(corpus.train) > 10 * len(corpus.valid)


def test_directory_ingest(tmp_path):
    (tmp_path / "b.txt").write_text("bee\n\nbuzz", encoding="utf-8")
    (tmp_path / "a.txt").write_text("ant", encoding="utf-8")
    (tmp_path / "skip.md").write_text("nope", encoding="utf-8")
    assert ingest(tmp_path).documents == ["ant", "bee", "buzz"]


# -- tokenizer ------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcde fgh.\n", max_size=40))
def test_char_tokenizer_round_trip(text):
    tok = Tokenizer.fit(["abcde fgh.\n"])
    ids = tok.encode(text)
    assert PAD not in ids
    assert tok.decode(ids) == text


def test_whitespace_tokenizer_and_unknowns():
    tok = Tokenizer.fit(["the cat sat"], mode="whitespace")
    assert tok.decode(tok.encode("the cat sat")) == "the cat sat"
    assert tok.encode("the dog") == [tok.stoi["the"], 1]
    assert Tokenizer.from_json(tok.to_json()) == tok
    with pytest.raises(ConfigError):
        Tokenizer("bytes", [])


def test_pad_batch():
    ids, mask = pad_batch([[5, 6, 7], [8]])
    np.testing.assert_array_equal(ids, [[5, 6, 7], [8, 0, 0]])
    np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 0, 0]])


def test_split_documents_handles_whitespace_lines():
    assert split_documents("a\n  \nb\n\n\nc") == ["a", "b", "c"]


# -- sentiment data -------------------------------------------------------------

def test_synthetic_sentiment_is_deterministic_and_balanced():
    rows = synthetic_sentiment(400)
    assert rows == synthetic_sentiment(400)
    labels = [y for _, y in rows]
    assert 150 < sum(labels) < 250
    assert any("inspiring" in x for x, y in rows if y == 1)


def test_labeled_file_round_trip(tmp_path):
    rows = [("good film", 1), ("bad film", 0)]
    write_labeled(rows, tmp_path / "l.tsv")
    assert load_labeled(tmp_path / "l.tsv") == rows
    (tmp_path / "bad.tsv").write_text("oops no tab\n", encoding="utf-8")
    with pytest.raises(IngestionError):
        load_labeled(tmp_path / "bad.tsv")


# -- config ---------------------------------------------------------------------

def test_kv_round_trip():
    cfg = ModelConfig(d_model=32, n_heads=4, capacity_factor=1.5, causal=True)
    assert ModelConfig.from_kv(cfg.to_kv()) == cfg
    assert parse_kv("# c\n a = 1 \n\nb=x=y\n") == {"a": "1", "b": "x=y"}
    assert format_kv([("a", "1")]) == "a=1\n"


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(n_experts=2, fixed_k=3)
    with pytest.raises(ConfigError):
        ModelConfig.from_kv("unknown_key = 3")
    with pytest.raises(ConfigError):
        ModelConfig.from_kv("causal = maybe")
    with pytest.raises(ConfigError):
        RunConfig(task="translate")


# -- metrics and training -------------------------------------------------------

@pytest.fixture(scope="module")
def lm_data():
    return load_lm_data()


def test_zero_steps_checkpoint_equals_init(tmp_path, lm_data):
    run = RunConfig(steps=0, **TINY)
    res = train(run, out_dir=tmp_path, data=lm_data)
    fresh = DAMoEModel(res.model.config)
    for name, p in fresh.params.items():
        np.testing.assert_array_equal(res.model.params[name].data, p.data)
    assert (tmp_path / "model.damo").exists() and read_metrics(tmp_path / "metrics.jsonl") == []


def test_metrics_consistency_and_determinism(tmp_path, lm_data):
    run = RunConfig(steps=6, aux_loss_coef=0.01, **TINY)
    a = train(run, out_dir=tmp_path / "a", data=lm_data)
    b = train(run, out_dir=tmp_path / "b", data=lm_data)
    ma, mb = read_metrics(a.metrics_path), read_metrics(b.metrics_path)
    assert len(ma) == 6
    for x, y in zip(ma, mb):
        x.pop("wall_time"), y.pop("wall_time")
        assert x == y
    for rec in ma:
        assert rec["perplexity"] == pytest.approx(math.exp(rec["loss"]), rel=1e-6)
        assert sum(rec["expert_load"]) == rec["assigned"] - rec["dropped"]
        assert rec["aux_loss"] > 0


def test_classification_training_and_evaluation(tmp_path):
    run = RunConfig(task="classify", tokenizer="whitespace", steps=160, **TINY)
    res = train(run, out_dir=tmp_path)
    assert "accuracy" in res.summary and 0.0 <= res.summary["f1"] <= 1.0
    assert res.summary["accuracy"] > 0.6
    with pytest.raises(ConfigError):
        evaluate(res.model, load_lm_data())


def test_random_classifier_is_near_chance():
    cfg = ModelConfig(vocab_size=200, d_model=16, d_ff=32, n_heads=2, n_blocks=1, n_experts=2,
                      head="classifier", max_len=32)
    rows = synthetic_sentiment(400, seed=3)
    tok = Tokenizer.fit([x for x, _ in rows], mode="whitespace")
    model = DAMoEModel(cfg)
    acc = evaluate(model, LabeledData(tok, rows, rows))["accuracy"]
    # 4 standard deviations of a fair binomial at n=400; a constant predictor
    # lands at the class balance
    balance = np.mean([y for _, y in rows])
    assert abs(acc - 0.5) < 4 * 0.025 or abs(acc - balance) < 1e-12 or abs(acc - (1 - balance)) < 1e-12


def test_f1_and_accuracy():
    assert classification_metrics([1, 0, 1], [1, 0, 1]) == {"accuracy": 1.0, "f1": 1.0, "n": 3}
    assert classification_metrics([1, 1, 1, 1], [1, 0, 1, 0])["accuracy"] == 0.5
    assert f1_score([1, 0, 0, 0], [1, 1, 0, 0]) == pytest.approx(2 / 3)


def _write_metrics(path, losses, run="r", seed=0):
    with open(path, "w", encoding="utf-8") as fh:
        for i, loss in enumerate(losses):
            fh.write(json.dumps({"run": run, "seed": seed, "step": i, "loss": loss,
                                 "mean_K": 1.0, "drop_rate": 0.0}) + "\n")


def test_compare_self_is_zero(tmp_path):
    _write_metrics(tmp_path / "m.jsonl", [3.0, 2.0, 1.0])
    cmp = compare_runs([tmp_path / "m.jsonl", tmp_path / "m.jsonl"])
    assert [r["diff"] for r in cmp.rows] == [0.0, 0.0]
    assert "final_loss" in cmp.table()


def test_compare_three_seed_means(tmp_path):
    paths = []
    for seed, last in enumerate([1.0, 2.0, 4.0]):
        p = tmp_path / f"dyn{seed}.jsonl"
        _write_metrics(p, [5.0] * 30 + [last] * 25, run="dynamic", seed=seed)
        paths.append(p)
    p = tmp_path / "fix.jsonl"
    _write_metrics(p, [5.0] * 30 + [3.0] * 25, run="fixed")
    cmp = compare_runs(paths + [p])
    assert cmp.groups["dynamic"]["mean_final_loss"] == pytest.approx(7 / 3)
    assert cmp.groups["fixed"]["mean_final_loss"] == pytest.approx(3.0)
    assert cmp.rows[3]["diff"] == pytest.approx(2.0)


def test_compare_errors(tmp_path):
    _write_metrics(tmp_path / "a.jsonl", [1.0, 2.0])
    _write_metrics(tmp_path / "b.jsonl", [1.0, 2.0, 3.0])
    with pytest.raises(ComparisonError):
        compare_runs([tmp_path / "a.jsonl", tmp_path / "b.jsonl"])
    with pytest.raises(ComparisonError):
        compare_runs([tmp_path / "a.jsonl"])


# -- CLI --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    cfg = out / "run.cfg"
    cfg.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()) + "steps = 5\n", encoding="utf-8")
    assert cli.main(["train", "--config", str(cfg), "--out", str(out / "run")]) == 0
    return out


def test_cli_eval_and_route_trace(trained_dir, capsys):
    ckpt = str(trained_dir / "run" / "model.damo")
    corpus = str(bundled_corpus_path())
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", corpus]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["perplexity"] == pytest.approx(math.exp(result["loss"]))
    assert cli.main(["route-trace", "--checkpoint", ckpt, "--data", corpus, "--max-batches", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["tokens"]


def test_cli_importance_formats(trained_dir, capsys, tmp_path):
    ckpt = str(trained_dir / "run" / "model.damo")
    capsys.readouterr()
    assert cli.main(["importance", "--checkpoint", ckpt, "--text", "The cat.", "--json",
                     "--dump-attention", str(tmp_path / "att.npz")]) == 0
    records = json.loads(capsys.readouterr().out)
    assert len(records) == len("The cat.")
    assert set(np.load(tmp_path / "att.npz").files) == {"block0"}
    assert cli.main(["importance", "--checkpoint", ckpt, "--text", "The cat.", "--csv"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("block,batch,position,token,importance,K")
    assert len(out) == 1 + len("The cat.")


def test_cli_compare(trained_dir, capsys):
    m = str(trained_dir / "run" / "metrics.jsonl")
    capsys.readouterr()
    assert cli.main(["compare", m, m, "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["rows"][1]["diff"] == 0.0


def test_cli_exit_codes(trained_dir, tmp_path):
    ckpt = str(trained_dir / "run" / "model.damo")
    assert cli.main([]) == 1
    assert cli.main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 1
    assert cli.main(["importance", "--checkpoint", ckpt, "--text", ""]) == 1
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.damo"), "--data", "x"]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"\xff")
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", str(bad)]) == 2
    cfg = tmp_path / "c.cfg"
    cfg.write_text("d_model = 10\nn_heads = 3\n", encoding="utf-8")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_cli_numerical_abort(tmp_path):
    cfg = tmp_path / "nan.cfg"
    cfg.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()) + "steps = 3\nlr = 1e30\n",
                   encoding="utf-8")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert list((tmp_path / "o").glob("nan_dump_step*.npz"))
