"""Estimator-style front end: fit/predict objects wrapping the training
pipeline, following scikit-learn conventions (params stored verbatim in
__init__, fitted state in trailing-underscore attributes, get_params/
set_params/clone compatible).

SpanReader is the plain CE model, EnsembleReader trains N members and
predicts with averaged distributions, DistilledReader trains a student
against an ensemble's annotations with the joint objective.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .corpus import Vocabulary, validate_examples
from .distill import DistillConfig, annotate_example
from .errors import ConfigError, DataError, NotFittedEstimatorError
from .evalspan import evaluate, topk_spans
from .reader import ReaderConfig, forward_example
from .training import (
    TrainConfig,
    baseline_config,
    predict_answers,
    predict_answers_ensemble,
    train_model,
)


def _check_fitted(estimator, attr: str) -> None:
    if not hasattr(estimator, attr):
        raise NotFittedEstimatorError(
            f"{type(estimator).__name__} must be fitted before this call"
        )


def _as_example_list(X, require_gold: bool):
    X = list(X)
    if not X:
        raise DataError("need at least one example")
    validate_examples(X, require_gold=require_gold)
    return X


class SpanReader(BaseEstimator):
    """Single reader trained with cross entropy on gold spans."""

    def __init__(self, dim=32, hidden=32, window=2, epochs=30, batch_size=32,
                 learning_rate=1e-3, clip_norm=5.0, vocab_cap=5000,
                 max_span_len=15, seed=0):
        self.dim = dim
        self.hidden = hidden
        self.window = window
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.vocab_cap = vocab_cap
        self.max_span_len = max_span_len
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return baseline_config(TrainConfig(
            seed=self.seed,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            reader=ReaderConfig(dim=self.dim, hidden=self.hidden,
                                window=self.window, seed=self.seed),
            distill=DistillConfig(max_span_len=self.max_span_len),
        ))

    def fit(self, X, y=None, dev=None):
        """Train on labeled examples. dev (default: X) drives model selection."""
        X = _as_example_list(X, require_gold=True)
        dev = X if dev is None else _as_example_list(dev, require_gold=True)
        self.vocab_ = Vocabulary.from_examples(X, cap=self.vocab_cap)
        result = train_model(self._train_config(), X, dev, self.vocab_)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X):
        """Answer string per example, in input order."""
        _check_fitted(self, "params_")
        X = _as_example_list(X, require_gold=False)
        preds = predict_answers(self.params_, X, self.vocab_, self.max_span_len)
        return [preds[ex.id] for ex in X]

    def predict_spans(self, X, k=1):
        """Top-k SpanPrediction lists per example."""
        _check_fitted(self, "params_")
        X = _as_example_list(X, require_gold=False)
        out = []
        for ex in X:
            o = forward_example(self.params_, ex, self.vocab_)
            out.append(topk_spans(o.start_dist.values, o.end_dist.values, k,
                                  self.max_span_len, example=ex))
        return out

    def score(self, X, y=None):
        """Corpus F1 / 100 (0 to 1, higher is better)."""
        _check_fitted(self, "params_")
        X = _as_example_list(X, require_gold=True)
        preds = predict_answers(self.params_, X, self.vocab_, self.max_span_len)
        return evaluate(preds, X).f1 / 100.0


class EnsembleReader(BaseEstimator):
    """N independently seeded CE readers; predictions average the members'
    start/end distributions. Also the annotation source for distillation."""

    def __init__(self, n_members=3, dim=32, hidden=32, window=2, epochs=30,
                 batch_size=32, learning_rate=1e-3, clip_norm=5.0,
                 vocab_cap=5000, max_span_len=15, tau=2.0, top_k=4, seed=0):
        self.n_members = n_members
        self.dim = dim
        self.hidden = hidden
        self.window = window
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.vocab_cap = vocab_cap
        self.max_span_len = max_span_len
        self.tau = tau
        self.top_k = top_k
        self.seed = seed

    def fit(self, X, y=None, dev=None):
        if self.n_members < 1:
            raise ConfigError(f"n_members must be at least 1, got {self.n_members}")
        X = _as_example_list(X, require_gold=True)
        dev = X if dev is None else _as_example_list(dev, require_gold=True)
        self.vocab_ = Vocabulary.from_examples(X, cap=self.vocab_cap)
        self.members_ = []
        self.histories_ = []
        for i in range(self.n_members):
            single = SpanReader(
                dim=self.dim, hidden=self.hidden, window=self.window,
                epochs=self.epochs, batch_size=self.batch_size,
                learning_rate=self.learning_rate, clip_norm=self.clip_norm,
                vocab_cap=self.vocab_cap, max_span_len=self.max_span_len,
                seed=self.seed + i,
            )
            result = train_model(single._train_config(), X, dev, self.vocab_)
            self.members_.append(result.params)
            self.histories_.append(result.history)
        return self

    def predict(self, X):
        _check_fitted(self, "members_")
        X = _as_example_list(X, require_gold=False)
        preds = predict_answers_ensemble(self.members_, X, self.vocab_, self.max_span_len)
        return [preds[ex.id] for ex in X]

    def score(self, X, y=None):
        _check_fitted(self, "members_")
        X = _as_example_list(X, require_gold=True)
        preds = predict_answers_ensemble(self.members_, X, self.vocab_, self.max_span_len)
        return evaluate(preds, X).f1 / 100.0

    def annotate(self, X):
        """TeacherAnnotation per example id, aggregated across members at
        the configured tau."""
        _check_fitted(self, "members_")
        X = _as_example_list(X, require_gold=False)
        cfg = DistillConfig(tau=self.tau, top_k=self.top_k, max_span_len=self.max_span_len,
                            ensemble_size=self.n_members)
        return {ex.id: annotate_example(self.members_, ex, self.vocab_, cfg) for ex in X}


class DistilledReader(BaseEstimator):
    """Student trained with the joint objective against teacher annotations."""

    def __init__(self, dim=32, hidden=32, window=2, epochs=30, batch_size=32,
                 learning_rate=1e-3, clip_norm=5.0, vocab_cap=5000,
                 max_span_len=15, tau=2.0, lam=None, gamma=0.3, delta=0.1,
                 top_k=4, margin=1.0, use_kd=True, use_ans=True, use_att=True,
                 stagewise=False, warmup_epochs=5, seed=0):
        self.dim = dim
        self.hidden = hidden
        self.window = window
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.vocab_cap = vocab_cap
        self.max_span_len = max_span_len
        self.tau = tau
        self.lam = lam
        self.gamma = gamma
        self.delta = delta
        self.top_k = top_k
        self.margin = margin
        self.use_kd = use_kd
        self.use_ans = use_ans
        self.use_att = use_att
        self.stagewise = stagewise
        self.warmup_epochs = warmup_epochs
        self.seed = seed

    def _distill_config(self) -> DistillConfig:
        return DistillConfig(
            tau=self.tau, lam=self.lam, gamma=self.gamma, delta=self.delta,
            top_k=self.top_k, margin=self.margin, max_span_len=self.max_span_len,
            use_kd=self.use_kd, use_ans=self.use_ans, use_att=self.use_att,
            stagewise=self.stagewise,
        )

    def fit(self, X, y=None, dev=None, teacher=None, annotations=None,
            soft_only_ids=None):
        """Train the student on X. Soft targets come either from a fitted
        EnsembleReader (teacher=...) or a precomputed annotation mapping.
        With a teacher, its vocabulary is reused so comparisons share an
        embedding space."""
        X = _as_example_list(X, require_gold=False)
        dev = X if dev is None else _as_example_list(dev, require_gold=True)
        if annotations is None:
            if teacher is None:
                raise ConfigError("DistilledReader.fit needs a fitted teacher or annotations")
            _check_fitted(teacher, "members_")
            annotations = teacher.annotate(X)
        if teacher is not None and hasattr(teacher, "vocab_"):
            self.vocab_ = teacher.vocab_
        else:
            self.vocab_ = Vocabulary.from_examples(X, cap=self.vocab_cap)
        config = TrainConfig(
            seed=self.seed,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            warmup_epochs=self.warmup_epochs,
            reader=ReaderConfig(dim=self.dim, hidden=self.hidden,
                                window=self.window, seed=self.seed),
            distill=self._distill_config(),
        )
        result = train_model(config, X, dev, self.vocab_, annotations=annotations,
                             soft_only_ids=soft_only_ids)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X):
        _check_fitted(self, "params_")
        X = _as_example_list(X, require_gold=False)
        preds = predict_answers(self.params_, X, self.vocab_, self.max_span_len)
        return [preds[ex.id] for ex in X]

    def score(self, X, y=None):
        _check_fitted(self, "params_")
        X = _as_example_list(X, require_gold=True)
        preds = predict_answers(self.params_, X, self.vocab_, self.max_span_len)
        return evaluate(preds, X).f1 / 100.0
