"""scikit-learn style wrappers around the model and the corpus filters."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import corpus
from .inference import TemperatureSampler, generate, greedy
from .model import ZambaConfig, build
from .schedule import Phase1Schedule
from .train import MixedBatchSampler, OptimizerState, evaluate, run_phase

__all__ = ["ZambaLanguageModel", "QualityFilter", "NearDuplicateFilter"]


def _as_texts(X) -> list[str]:
    if isinstance(X, str):
        raise TypeError("expected a sequence of strings, got a single string")
    texts = list(X)
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise TypeError(f"element {i} is {type(t).__name__}, expected str")
    return texts


def _as_tokens(X) -> np.ndarray:
    if isinstance(X, str):
        return corpus.byte_tokenize(X, specials=False)
    arr = np.asarray(X)
    if arr.dtype.kind in "US" or arr.dtype == object:
        return np.concatenate([corpus.byte_tokenize(t, specials=False) for t in _as_texts(X)])
    if arr.dtype.kind not in "iu":
        raise TypeError("expected text or integer token ids")
    return arr.astype(np.int64).ravel()


class ZambaLanguageModel(BaseEstimator):
    """Byte-level hybrid language model with a fit/predict/score interface.

    ``fit`` takes text (a string or a list of strings) or a 1-d token array.
    ``predict`` maps each row of an (n, T) token array to its argmax next token.
    ``score`` is the negative mean next-token cross-entropy.
    """

    def __init__(self, d_model=64, n_layers=6, gsa_period=3, n_heads=4, d_state=16,
                 context_length=128, seq_len=64, batch_size=8, max_steps=200,
                 learning_rate=2e-3, min_learning_rate=1e-3, warmup_fraction=0.01,
                 weight_decay=0.1, random_state=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.gsa_period = gsa_period
        self.n_heads = n_heads
        self.d_state = d_state
        self.context_length = context_length
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.min_learning_rate = min_learning_rate
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _config(self) -> ZambaConfig:
        return ZambaConfig(vocab_size=corpus.VOCAB_SIZE, d_model=self.d_model, n_layers=self.n_layers,
                           gsa_period=self.gsa_period, n_heads=self.n_heads, d_state=self.d_state,
                           context_length=self.context_length, seed=self.random_state)

    def fit(self, X, y=None):
        if self.seq_len > self.context_length:
            raise ValueError("seq_len must not exceed context_length")
        tokens = _as_tokens(X)
        self.model_ = build(self._config())
        schedule = Phase1Schedule(self.max_steps, self.learning_rate, self.min_learning_rate,
                                  self.warmup_fraction)
        sampler = MixedBatchSampler([(tokens, 1.0)], self.batch_size, self.seq_len, self.random_state)
        opt = OptimizerState.for_params(self.model_.named_parameters(), weight_decay=self.weight_decay)
        result = run_phase(self.model_, schedule, sampler, self.max_steps, opt_state=opt)
        self.loss_curve_ = result.losses
        self.n_iter_ = self.max_steps
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = np.atleast_2d(np.asarray(X))
        return self.model_.forward(X).data[:, -1, :].argmax(-1)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "model_")
        tokens = _as_tokens(X)
        seq = min(self.seq_len, len(tokens) - 1)
        return -evaluate(self.model_, tokens, seq)

    def generate(self, prompt: str, n: int = 64, temperature: float = 0.0, seed: int = 0) -> str:
        check_is_fitted(self, "model_")
        sampler = greedy if temperature == 0 else TemperatureSampler(temperature, seed)
        ids = generate(self.model_, corpus.byte_tokenize(prompt, specials=False), n, sampler)
        return corpus.detokenize(ids)


class QualityFilter(TransformerMixin, BaseEstimator):
    """Drop texts failing the length, word-length and character-fraction heuristics."""

    def fit(self, X, y=None):
        _as_texts(X)
        self.n_features_in_ = 1
        return self

    def verdicts(self, X) -> list[corpus.FilterVerdict]:
        return [corpus.filter_doc(t) for t in _as_texts(X)]

    def transform(self, X) -> list[str]:
        check_is_fitted(self, "n_features_in_")
        texts = _as_texts(X)
        return [t for t, v in zip(texts, self.verdicts(texts)) if v.keep]


class NearDuplicateFilter(TransformerMixin, BaseEstimator):
    """MinHash/LSH fuzzy dedup.

    ``fit`` indexes the non-duplicate subset of ``X``; ``transform`` drops texts
    that collide with the index without inserting them. ``fit_transform``
    therefore returns the self-deduplicated input.
    """

    def __init__(self, num_perm=128, bands=25, rows=5, seed=1):
        self.num_perm = num_perm
        self.bands = bands
        self.rows = rows
        self.seed = seed

    def _signature(self, text: str) -> corpus.MinHashSignature:
        return corpus.minhash(corpus.shingle_13grams(text), self.seed, self.num_perm)

    def fit(self, X, y=None):
        if self.bands * self.rows > self.num_perm:
            raise ValueError("bands * rows exceeds num_perm")
        self.index_ = corpus.LshIndex(self.bands, self.rows)
        self.kept_mask_ = np.zeros(0, dtype=bool)
        mask = []
        for i, text in enumerate(_as_texts(X)):
            sig = self._signature(text)
            dup = bool(self.index_.query(sig))
            if not dup:
                self.index_.insert(str(i), sig)
            mask.append(not dup)
        self.kept_mask_ = np.asarray(mask, dtype=bool)
        return self

    def duplicate_mask(self, X) -> np.ndarray:
        check_is_fitted(self, "index_")
        return np.asarray([bool(self.index_.query(self._signature(t))) for t in _as_texts(X)], dtype=bool)

    def transform(self, X) -> list[str]:
        texts = _as_texts(X)
        return [t for t, d in zip(texts, self.duplicate_mask(texts)) if not d]

    def fit_transform(self, X, y=None, **fit_params) -> list[str]:
        texts = _as_texts(X)
        self.fit(texts)
        return [t for t, k in zip(texts, self.kept_mask_) if k]
