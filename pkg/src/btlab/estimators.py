"""Estimator front-end in scikit-learn style.

Thin adapters over the functional training code: constructor arguments are
stored verbatim (so get_params/set_params/clone behave), fitted state lives
in trailing-underscore attributes, and all fits are deterministic under the
`seed` parameter.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from . import nn
from .classifier import TrainRunConfig, finetune_revision, select_model, split_validation, train_classifier
from .data import LabeledDataset
from .distill import DistillConfig, DistilledSet, collect_distilled, train_plain_ce
from .exceptions import InputError
from .transition import TransitionTrainConfig, train_transition, transition_matrices


def _check_X(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_2d=True)


def _check_labels(y, n_classes: int | None) -> tuple[np.ndarray, int]:
    y = np.asarray(y)
    if y.ndim != 1:
        raise InputError("y must be 1-D")
    y = y.astype(np.int64)
    if y.size == 0:
        raise InputError("y is empty")
    if y.min() < 0:
        raise InputError("labels must be non-negative integers")
    C = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if y.max() >= C:
        raise InputError(f"labels outside [0, {C})")
    return y, C


class FeedforwardClassifier(BaseEstimator, ClassifierMixin):
    """Softmax MLP trained with plain cross-entropy."""

    def __init__(self, hidden_sizes=(32, 32), epochs=30, batch_size=128, lr=0.01,
                 optimizer="sgd", momentum=0.9, weight_decay=0.0, n_classes=None, seed=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X, y):
        X = _check_X(X)
        y, C = _check_labels(y, self.n_classes)
        self.params_ = train_plain_ce(
            X, y, C, hidden_sizes=tuple(self.hidden_sizes), epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            seed=self.seed, optimizer=self.optimizer, weight_decay=self.weight_decay,
        )
        self.n_classes_ = C
        self.classes_ = np.arange(C)
        return self

    def predict_proba(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError("fit first")
        return nn.forward_probs(self.params_, _check_X(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


class TransitionMatrixNet(BaseEstimator):
    """Maps x to a row-stochastic (C, C) noisy-label transition matrix."""

    def __init__(self, hidden_sizes=(32, 32), epochs=5, batch_size=128, lr=0.01,
                 momentum=0.9, n_classes=None, seed=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X, y_bayes, y_noisy):
        X = _check_X(X)
        y_bayes, C = _check_labels(y_bayes, self.n_classes)
        y_noisy, _ = _check_labels(y_noisy, C)
        if y_noisy.shape != y_bayes.shape or X.shape[0] != y_bayes.shape[0]:
            raise InputError("X, y_bayes, y_noisy disagree on n")
        distilled = DistilledSet(
            indices=np.arange(X.shape[0]), features=X, noisy_labels=y_noisy,
            bayes_labels=y_bayes, admit_posteriors=np.ones(X.shape[0]), n_classes=C,
        )
        cfg = TransitionTrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                    lr=self.lr, momentum=self.momentum,
                                    hidden_sizes=tuple(self.hidden_sizes), seed=self.seed)
        self.params_ = train_transition(distilled, cfg)
        self.n_classes_ = C
        return self

    def predict_matrix(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError("fit first")
        return transition_matrices(self.params_, _check_X(X))

    def transform(self, X):
        return self.predict_matrix(X)


class ForwardCorrectedClassifier(BaseEstimator, ClassifierMixin):
    """Classifier trained on noisy labels through a frozen transition network."""

    def __init__(self, transition_net=None, hidden_sizes=(32, 32), epochs=30,
                 batch_size=128, lr=1e-3, weight_decay=1e-4, optimizer="adam",
                 momentum=0.9, validation_fraction=0.1, revision_epochs=0,
                 revision_lr=1e-3, n_classes=None, seed=0):
        self.transition_net = transition_net
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.momentum = momentum
        self.validation_fraction = validation_fraction
        self.revision_epochs = revision_epochs
        self.revision_lr = revision_lr
        self.n_classes = n_classes
        self.seed = seed

    def _theta(self) -> nn.NetworkParams:
        t = self.transition_net
        if t is None:
            raise InputError("transition_net is required (fit a TransitionMatrixNet first)")
        if isinstance(t, nn.NetworkParams):
            return t
        if hasattr(t, "params_"):
            return t.params_
        raise NotFittedError("transition_net is not fitted")

    def fit(self, X, y_noisy):
        X = _check_X(X)
        y_noisy, C = _check_labels(y_noisy, self.n_classes)
        theta = self._theta()
        ds = LabeledDataset(features=X, clean_labels=y_noisy, bayes_labels=y_noisy,
                            n_classes=C, noisy_labels=y_noisy)
        cfg = TrainRunConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, optimizer=self.optimizer,
            momentum=self.momentum, validation_fraction=self.validation_fraction,
            hidden_sizes=tuple(self.hidden_sizes), revision_epochs=self.revision_epochs,
            revision_lr=self.revision_lr, seed=self.seed,
        )
        checkpoints = train_classifier(ds, theta, cfg)
        _, val_idx = split_validation(len(ds), cfg.validation_fraction, cfg.seed)
        selected = select_model(checkpoints, ds.subset(val_idx), theta)
        self.slack_ = np.zeros((C, C))
        self.diverged_ = False
        if cfg.revision_epochs > 0:
            result = finetune_revision(selected, np.zeros((C, C)), theta,
                                       ds.subset(val_idx), cfg)
            selected, self.slack_, self.diverged_ = result.params, result.slack, result.diverged
        self.params_ = selected
        self.checkpoints_ = checkpoints
        self.n_classes_ = C
        self.classes_ = np.arange(C)
        return self

    def predict_proba(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError("fit first")
        return nn.forward_probs(self.params_, _check_X(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


class DistilledTransitionClassifier(BaseEstimator, ClassifierMixin):
    """End-to-end noisy-label pipeline behind a single fit(X, y_noisy).

    Stages: warm-up posterior fit, threshold distillation, transition-network
    training on the distilled set, then forward-corrected classifier training
    with model selection (and optional slack revision).
    """

    def __init__(self, rho_max=0.3, warmup_epochs=5, warmup_lr=0.01, warmup_momentum=0.9,
                 transition_epochs=5, transition_lr=0.01, transition_momentum=0.9,
                 epochs=30, batch_size=128, lr=1e-3, weight_decay=1e-4, optimizer="adam",
                 momentum=0.9, validation_fraction=0.1, revision_epochs=0, revision_lr=1e-3,
                 hidden_sizes=(32, 32), n_classes=None, seed=0):
        self.rho_max = rho_max
        self.warmup_epochs = warmup_epochs
        self.warmup_lr = warmup_lr
        self.warmup_momentum = warmup_momentum
        self.transition_epochs = transition_epochs
        self.transition_lr = transition_lr
        self.transition_momentum = transition_momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.momentum = momentum
        self.validation_fraction = validation_fraction
        self.revision_epochs = revision_epochs
        self.revision_lr = revision_lr
        self.hidden_sizes = hidden_sizes
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X, y_noisy):
        X = _check_X(X)
        y_noisy, C = _check_labels(y_noisy, self.n_classes)
        ds = LabeledDataset(features=X, clean_labels=y_noisy, bayes_labels=y_noisy,
                            n_classes=C, noisy_labels=y_noisy)
        dcfg = DistillConfig(rho_max=self.rho_max, warmup_epochs=self.warmup_epochs,
                             batch_size=self.batch_size, lr=self.warmup_lr,
                             momentum=self.warmup_momentum,
                             hidden_sizes=tuple(self.hidden_sizes), seed=self.seed)
        self.warmup_params_ = train_plain_ce(
            X, y_noisy, C, hidden_sizes=tuple(self.hidden_sizes),
            epochs=self.warmup_epochs, batch_size=self.batch_size, lr=self.warmup_lr,
            momentum=self.warmup_momentum, seed=self.seed,
        )
        self.distilled_ = collect_distilled(ds, self.warmup_params_, dcfg)
        tcfg = TransitionTrainConfig(epochs=self.transition_epochs, batch_size=self.batch_size,
                                     lr=self.transition_lr, momentum=self.transition_momentum,
                                     hidden_sizes=tuple(self.hidden_sizes), seed=self.seed)
        self.transition_params_ = train_transition(self.distilled_, tcfg)
        inner = ForwardCorrectedClassifier(
            transition_net=self.transition_params_, hidden_sizes=tuple(self.hidden_sizes),
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, optimizer=self.optimizer, momentum=self.momentum,
            validation_fraction=self.validation_fraction, revision_epochs=self.revision_epochs,
            revision_lr=self.revision_lr, n_classes=C, seed=self.seed,
        ).fit(X, y_noisy)
        self.params_ = inner.params_
        self.slack_ = inner.slack_
        self.n_classes_ = C
        self.classes_ = np.arange(C)
        return self

    def predict_proba(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError("fit first")
        return nn.forward_probs(self.params_, _check_X(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
