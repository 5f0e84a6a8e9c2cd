"""scikit-learn style wrappers around the training harness.

Inputs are sequences of strings. The wrappers build a :class:`RunConfig`
from their constructor arguments, so ``get_params``/``set_params``/``clone``
work as with any other estimator.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .data import Tokenizer, lm_stream, pad_batch
from .exceptions import DimensionError
from .importance import compute_token_importance
from .training import LabeledData, LMData, encode_rows, export_importance, lm_eval_windows, train


def check_text_array(X, name="X"):
    """Validate a 1-D collection of strings and return it as a list."""
    if isinstance(X, str):
        raise ValueError(f"{name} must be a sequence of strings, not a single string")
    arr = np.asarray(X, dtype=object)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    bad = [i for i, x in enumerate(arr) if not isinstance(x, str)]
    if bad:
        raise ValueError(f"{name}[{bad[0]}] is not a string")
    return [str(x) for x in arr]


def check_token_batch(ids, padding_mask=None, vocab_size=None):
    """Validate integer ids [B, L] and an optional boolean mask of the same shape."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be [B, L], got shape {ids.shape}")
    if ids.dtype.kind not in "iu":
        raise DimensionError(f"token ids must be integers, got dtype {ids.dtype}")
    if vocab_size is not None and ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id out of range [0, {vocab_size})")
    if padding_mask is None:
        return ids.astype(np.int64), None
    mask = np.asarray(padding_mask)
    if mask.shape != ids.shape:
        raise DimensionError(f"padding mask shape {mask.shape} does not match ids {ids.shape}")
    return ids.astype(np.int64), mask.astype(bool)


class _DAMoEBase(BaseEstimator):
    _task = "lm"

    def __init__(self, n_experts=4, router_mode="dynamic", fixed_k=1, capacity_factor=1.25,
                 d_model=64, d_ff=256, n_heads=4, n_blocks=2, steps=500, batch_size=16,
                 lr=3e-3, aux_loss_coef=0.0, tokenizer="char", seq_len=64, seed=0):
        self.n_experts = n_experts
        self.router_mode = router_mode
        self.fixed_k = fixed_k
        self.capacity_factor = capacity_factor
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.aux_loss_coef = aux_loss_coef
        self.tokenizer = tokenizer
        self.seq_len = seq_len
        self.seed = seed

    def _run_config(self, **extra):
        return RunConfig(task=self._task, save_checkpoint=False, **self.get_params(), **extra)

    def _store(self, result):
        self.model_ = result.model
        self.tokenizer_ = result.tokenizer
        self.metrics_ = result.metrics
        self.summary_ = result.summary
        return self


class DAMoEClassifier(ClassifierMixin, _DAMoEBase):
    """Sequence classifier (mean-pooled encoder + linear head)."""

    _task = "classify"

    def __init__(self, n_experts=4, router_mode="dynamic", fixed_k=1, capacity_factor=1.25,
                 d_model=64, d_ff=256, n_heads=4, n_blocks=2, steps=500, batch_size=16,
                 lr=3e-3, aux_loss_coef=0.0, tokenizer="whitespace", seq_len=64, seed=0):
        super().__init__(n_experts, router_mode, fixed_k, capacity_factor, d_model, d_ff, n_heads,
                         n_blocks, steps, batch_size, lr, aux_loss_coef, tokenizer, seq_len, seed)

    def fit(self, X, y):
        X = check_text_array(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes to fit a classifier")
        rows = list(zip(X, encoded.tolist()))
        tok = Tokenizer.fit(X, mode=self.tokenizer)
        data = LabeledData(tok, rows, rows)
        return self._store(train(self._run_config(num_classes=int(self.classes_.size)), data=data))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_text_array(X)
        rows = [(x, 0) for x in X]
        out = []
        for i in range(0, len(rows), 64):
            ids, mask, _ = encode_rows(self.tokenizer_, rows[i:i + 64], self.model_.config.max_len)
            out.append(self.model_(ids, mask).data)
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "classes_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class DAMoELanguageModel(_DAMoEBase):
    """Causal character/word LM; ``score`` is the negative mean token loss."""

    _task = "lm"

    def fit(self, X, y=None):
        docs = check_text_array(X)
        tok = Tokenizer.fit(docs, mode=self.tokenizer)
        stream = lm_stream(tok, docs)
        return self._store(train(self._run_config(), data=LMData(tok, stream, stream)))

    def _mean_loss(self, X):
        check_is_fitted(self, "model_")
        stream = lm_stream(self.tokenizer_, check_text_array(X))
        x, y = lm_eval_windows(stream, min(self.seq_len, self.model_.config.max_len))
        total = 0.0
        for i in range(0, x.shape[0], 32):
            loss, _ = self.model_.loss(x[i:i + 32], y[i:i + 32])
            total += float(loss.item()) * y[i:i + 32].size
        return total / y.size

    def score(self, X, y=None):
        return -self._mean_loss(X)

    def perplexity(self, X):
        return math.exp(self._mean_loss(X))


class TokenImportanceTransformer(TransformerMixin, BaseEstimator):
    """Map sentences to per-token importance scores of one block.

    ``estimator`` is a fitted DAMoE estimator (or anything with ``model_`` and
    ``tokenizer_``). The output is [n_samples, max_tokens] with zeros at
    padded positions, like the scores the router itself sees.
    """

    def __init__(self, estimator=None, block=0, max_tokens=None):
        self.estimator = estimator
        self.block = block
        self.max_tokens = max_tokens

    def fit(self, X=None, y=None):
        if self.estimator is None:
            raise ValueError("TokenImportanceTransformer needs a fitted DAMoE estimator")
        check_is_fitted(self.estimator, "model_")
        if not 0 <= self.block < self.estimator.model_.config.n_blocks:
            raise ValueError(f"block {self.block} does not exist")
        self.model_ = self.estimator.model_
        self.tokenizer_ = self.estimator.tokenizer_
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_text_array(X)
        width = self.max_tokens or self.model_.config.max_len
        seqs = [(self.tokenizer_.encode(x) or [0])[:width] for x in X]
        ids, mask = pad_batch(seqs, max(len(s) for s in seqs))
        weights = self.model_.forward(ids, mask).blocks[self.block].attention_weights.data
        scores = compute_token_importance(weights, mask)
        if self.max_tokens:
            scores = np.pad(scores, ((0, 0), (0, self.max_tokens - scores.shape[1])))
        return scores.astype(np.float64)

    def records(self, text):
        """Full per-token routing records for one sentence."""
        check_is_fitted(self, "model_")
        return [r for r in export_importance(self.model_, text, self.tokenizer_)[0] if r["block"] == self.block]
