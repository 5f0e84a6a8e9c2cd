"""Corpus ingestion, tokenizers, bundled datasets and batching."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, IngestionError

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<cls>")
VALID_PERCENT = 5


def _split_of(doc, seed):
    digest = hashlib.sha256(f"{seed}\x00{doc}".encode("utf-8")).digest()
    return "valid" if int.from_bytes(digest[:8], "little") % 100 < VALID_PERCENT else "train"


@dataclass
class Corpus:
    documents: list
    splits: list  # "train" / "valid", parallel to documents

    def split(self, name):
        return [d for d, s in zip(self.documents, self.splits) if s == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def valid(self):
        return self.split("valid")

    @classmethod
    def from_documents(cls, documents, seed=0):
        docs = [d for d in documents if d.strip()]
        if not docs:
            raise IngestionError("corpus has no non-empty documents")
        return cls(docs, [_split_of(d, seed) for d in docs])


def split_documents(text):
    return [d.strip() for d in re.split(r"\n[ \t]*\n", text) if d.strip()]


def ingest(path, seed=0):
    """Read UTF-8 text (a file, or every ``*.txt`` in a directory) into a Corpus.

    Documents are separated by blank lines. Each document lands in the
    validation split when its seeded hash falls in the lowest 5%.
    """
    path = Path(path)
    files = sorted(path.glob("*.txt")) if path.is_dir() else [path]
    if not files:
        raise IngestionError(f"no .txt files under {path}")
    docs = []
    for f in files:
        try:
            raw = f.read_bytes()
        except OSError as exc:
            raise IngestionError(f"cannot read {f}: {exc}") from exc
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IngestionError(f"{f} is not valid UTF-8: {exc}") from exc
        docs.extend(split_documents(text))
    if not docs:
        raise IngestionError(f"{path} contains no documents")
    return Corpus.from_documents(docs, seed=seed)


def bundled_corpus_path():
    return Path(str(resources.files("damoe") / "data" / "corpus.txt"))


class Tokenizer:
    """Character or whitespace tokenizer with reserved pad/unk/cls ids."""

    def __init__(self, mode, tokens):
        if mode not in ("char", "whitespace"):
            raise ConfigError(f"unknown tokenizer mode {mode!r}")
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens) or set(tokens) & set(RESERVED):
            raise ConfigError("tokenizer vocabulary must be unique and exclude reserved tokens")
        self.mode = mode
        self.tokens = tokens
        self.itos = list(RESERVED) + tokens
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def fit(cls, texts, mode="char"):
        vocab = set()
        for text in texts:
            vocab.update(text if mode == "char" else text.split())
        return cls(mode, sorted(vocab - set(RESERVED)))

    @property
    def vocab_size(self):
        return len(self.itos)

    def split(self, text):
        return list(text) if self.mode == "char" else text.split()

    def encode(self, text):
        return [self.stoi.get(t, UNK) for t in self.split(text)]

    def decode(self, ids):
        pieces = [self.itos[i] for i in ids if i != PAD]
        return "".join(pieces) if self.mode == "char" else " ".join(pieces)

    def to_json(self):
        return json.dumps({"mode": self.mode, "tokens": self.tokens}, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(obj["mode"], obj["tokens"])

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and self.mode == other.mode and self.tokens == other.tokens


# ---------------------------------------------------------------------------
# synthetic sentiment data

_POSITIVE = ["inspiring", "wonderful", "brilliant", "delightful", "moving", "superb",
             "charming", "excellent", "beautiful", "gripping"]
_NEGATIVE = ["boring", "dreadful", "awful", "tedious", "clumsy", "dull",
             "painful", "terrible", "bland", "messy"]
_SUBJECTS = ["the movie", "the film", "the story", "the ending", "the cast", "the script",
             "the music", "the show", "the plot", "the acting"]
_INTENSIFIERS = ["", "very", "incredibly", "rather", "truly", "quite", "somewhat"]
_FILLERS = ["honestly", "overall", "in the end", "for me", "at times", "to be fair",
            "from start to finish", "as expected", "i think", "this year"]
_TEMPLATES = [
    "{subj} was {neg} {intens} {adj}",
    "{filler} {subj} was {neg} {intens} {adj}",
    "{subj} felt {neg} {intens} {adj} {filler}",
    "i found {subj} {neg} {intens} {adj}",
    "{filler} i thought {subj} was {neg} {adj}",
]
NEGATION_RATE = 0.3


def synthetic_sentiment(n, seed=0):
    """``n`` (sentence, label) pairs.

    The label is the polarity of the adjective, flipped when the sentence
    negates it ("was not very inspiring" is negative).
    """
    rng = np.random.default_rng([seed, 7])
    out = []
    for _ in range(n):
        polarity = int(rng.integers(2))
        negated = bool(rng.random() < NEGATION_RATE)
        adj = rng.choice(_POSITIVE if polarity else _NEGATIVE)
        template = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        text = template.format(
            subj=rng.choice(_SUBJECTS), intens=rng.choice(_INTENSIFIERS),
            adj=adj, filler=rng.choice(_FILLERS), neg="not" if negated else "",
        )
        out.append((" ".join(text.split()), polarity ^ int(negated)))
    return out


def load_labeled(path):
    """Read ``label<TAB>text`` lines."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        label, sep, sentence = line.partition("\t")
        if not sep or not label.strip().lstrip("-").isdigit():
            raise IngestionError(f"{path}:{lineno}: expected 'label<TAB>text'")
        rows.append((sentence.strip(), int(label)))
    if not rows:
        raise IngestionError(f"{path} has no labeled rows")
    return rows


def write_labeled(rows, path):
    Path(path).write_text("".join(f"{y}\t{x}\n" for x, y in rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# batching

def pad_batch(sequences, length=None):
    """Right-pad id lists into ``(ids [B, L], mask [B, L])``."""
    length = length or max(len(s) for s in sequences)
    ids = np.full((len(sequences), length), PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for i, seq in enumerate(sequences):
        seq = seq[:length]
        ids[i, :len(seq)] = seq
        mask[i, :len(seq)] = True
    return ids, mask


def lm_stream(tokenizer, documents):
    return np.asarray(tokenizer.encode("\n\n".join(documents)), dtype=np.int64)


def sample_lm_batch(stream, batch_size, seq_len, rng):
    if stream.size < seq_len + 1:
        raise IngestionError(f"text stream of {stream.size} tokens is shorter than seq_len + 1")
    starts = rng.integers(0, stream.size - seq_len, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    window = stream[idx]
    return window[:, :-1], window[:, 1:]


def lm_eval_windows(stream, seq_len):
    """Non-overlapping (inputs, targets) windows covering ``stream``."""
    n = (stream.size - 1) // seq_len
    if n == 0:
        raise IngestionError("evaluation text is shorter than one window")
    x = stream[: n * seq_len].reshape(n, seq_len)
    y = stream[1: n * seq_len + 1].reshape(n, seq_len)
    return x, y
