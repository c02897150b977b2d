"""Distilled-example collection.

A warm-up network is fit to the noisy labels for a few epochs; an instance is
distilled when its estimated noisy-posterior maximum strictly exceeds
(1 + rho_max) / 2, in which case the argmax is provably the Bayes label
whenever the true flip rates stay at or below rho_max. Collection also accepts
a precomputed posterior matrix so oracle posteriors can stand in for the
warm-up network in tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import LabeledDataset
from .exceptions import ConfigError, InputError, ParseError

FLOAT_FMT = "%.17g"


@dataclass
class DistillConfig:
    """Distillation settings; the admission threshold is (1 + rho_max) / 2."""

    rho_max: float = 0.3
    warmup_epochs: int = 5
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"
    hidden_sizes: tuple = (32, 32)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rho_max < 1.0):
            raise ConfigError("rho_max must lie in [0, 1)")
        if self.warmup_epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("warmup_epochs >= 0, batch_size > 0, lr > 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @property
    def threshold(self) -> float:
        return (1.0 + self.rho_max) / 2.0


@dataclass
class DistilledSet:
    """Admitted instances with their inferred Bayes labels.

    indices point back into the source dataset; admit_posteriors holds the
    posterior value that cleared the threshold.
    """

    indices: np.ndarray
    features: np.ndarray
    noisy_labels: np.ndarray
    bayes_labels: np.ndarray
    admit_posteriors: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        self.bayes_labels = np.asarray(self.bayes_labels, dtype=np.int64)
        self.admit_posteriors = np.asarray(self.admit_posteriors, dtype=np.float64)
        m = self.indices.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != m:
            raise InputError("features must be (m, d)")
        for name in ("noisy_labels", "bayes_labels", "admit_posteriors"):
            if getattr(self, name).shape != (m,):
                raise InputError(f"{name} must have shape (m,)")

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass
class DistillQuality:
    """precision is None when nothing was admitted."""

    precision: float | None
    coverage: float
    noisy_agreement: float | None


def train_plain_ce(features: np.ndarray, labels: np.ndarray, n_classes: int,
                   hidden_sizes: tuple, epochs: int, batch_size: int, lr: float,
                   momentum: float, seed: int, optimizer: str = "sgd",
                   weight_decay: float = 0.0,
                   init: nn.NetworkParams | None = None) -> nn.NetworkParams:
    """Minibatch cross-entropy training; deterministic under the seed."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise InputError("features must be a non-empty (n, d) matrix")
    if labels.shape != (features.shape[0],):
        raise InputError("labels must have shape (n,)")
    ss = np.random.SeedSequence(seed)
    init_ss, shuffle_ss = ss.spawn(2)
    dims = [features.shape[1], *hidden_sizes, n_classes]
    params = init.copy() if init is not None else nn.init_params(dims, np.random.default_rng(init_ss))
    if optimizer == "sgd":
        state = nn.OptimizerState.sgd(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    elif optimizer == "adam":
        state = nn.OptimizerState.adam(params, lr=lr, weight_decay=weight_decay)
    else:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    targets = nn.one_hot(labels, n_classes)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    for _ in range(epochs):
        for idx in nn.epoch_batches(features.shape[0], batch_size, shuffle_rng):
            batch = nn.Batch(features[idx], targets[idx])
            grads = nn.grad_params(params, batch)
            params, state = nn.optimizer_step(params, grads, state)
    return params


def warmup_train(noisy: LabeledDataset, cfg: DistillConfig) -> nn.NetworkParams:
    """Fit the noisy-posterior estimator on (x, noisy label) pairs."""
    if noisy.noisy_labels is None:
        raise InputError("dataset has no noisy labels")
    return train_plain_ce(
        noisy.features, noisy.noisy_labels, noisy.n_classes,
        hidden_sizes=tuple(cfg.hidden_sizes), epochs=cfg.warmup_epochs,
        batch_size=cfg.batch_size, lr=cfg.lr, momentum=cfg.momentum, seed=cfg.seed,
        optimizer=cfg.optimizer,
    )


def collect_distilled(noisy: LabeledDataset, estimator, cfg: DistillConfig) -> DistilledSet:
    """Admit instances whose estimated noisy-posterior max strictly clears the threshold.

    `estimator` is either warm-up NetworkParams or a precomputed (n, C)
    posterior matrix. Ties in the argmax resolve to the lowest class index.
    """
    if noisy.noisy_labels is None:
        raise InputError("dataset has no noisy labels")
    if isinstance(estimator, nn.NetworkParams):
        posteriors = nn.forward_probs(estimator, noisy.features)
    else:
        posteriors = np.asarray(estimator, dtype=np.float64)
    if posteriors.shape != (len(noisy), noisy.n_classes):
        raise InputError("posteriors must have shape (n, C)")
    top = posteriors.max(axis=1)
    admitted = np.flatnonzero(top > cfg.threshold)
    return DistilledSet(
        indices=admitted,
        features=noisy.features[admitted],
        noisy_labels=noisy.noisy_labels[admitted],
        bayes_labels=posteriors[admitted].argmax(axis=1),
        admit_posteriors=top[admitted],
        n_classes=noisy.n_classes,
    )


def distill_quality(distilled: DistilledSet, source: LabeledDataset) -> DistillQuality:
    """Precision against oracle Bayes labels, coverage, and noisy-label agreement."""
    if len(source) == 0:
        raise InputError("empty source dataset")
    coverage = len(distilled) / len(source)
    if len(distilled) == 0:
        return DistillQuality(precision=None, coverage=coverage, noisy_agreement=None)
    truth = source.bayes_labels[distilled.indices]
    precision = float(np.mean(distilled.bayes_labels == truth))
    agreement = float(np.mean(distilled.bayes_labels == distilled.noisy_labels))
    return DistillQuality(precision=precision, coverage=coverage, noisy_agreement=agreement)


def save_distilled_csv(ds: DistilledSet, path, digest: str | None = None) -> None:
    d = ds.features.shape[1]
    with open(path, "w", newline="") as fh:
        if digest is not None:
            fh.write(f"# config_digest={digest}\n")
        fh.write(f"# n_classes={ds.n_classes}\n")
        writer = csv.writer(fh)
        writer.writerow(["src_index"] + [f"x{j}" for j in range(d)]
                        + ["y_tilde", "y_star_hat", "admit_posterior"])
        for i in range(len(ds)):
            writer.writerow(
                [str(int(ds.indices[i]))]
                + [FLOAT_FMT % v for v in ds.features[i]]
                + [str(int(ds.noisy_labels[i])), str(int(ds.bayes_labels[i])),
                   FLOAT_FMT % ds.admit_posteriors[i]]
            )


def load_distilled_csv(path) -> DistilledSet:
    from .data import _read_csv_with_comments

    meta, (header_line, header), body = _read_csv_with_comments(path)
    if header[0] != "src_index":
        raise ParseError("missing required column", line=header_line, column="src_index")
    d = 0
    while 1 + d < len(header) and header[1 + d] == f"x{d}":
        d += 1
    tail = header[1 + d:]
    if d == 0 or tail != ["y_tilde", "y_star_hat", "admit_posterior"]:
        raise ParseError("header does not match the distilled-set schema", line=header_line)
    n = len(body)
    indices = np.empty(n, dtype=np.int64)
    features = np.empty((n, d))
    noisy = np.empty(n, dtype=np.int64)
    bayes = np.empty(n, dtype=np.int64)
    admit = np.empty(n)
    for r, (lineno, cells) in enumerate(body):
        if len(cells) != len(header):
            raise ParseError(f"row has {len(cells)} cells, expected {len(header)}", line=lineno)
        try:
            indices[r] = int(cells[0])
            features[r] = [float(c) for c in cells[1:1 + d]]
            noisy[r] = int(cells[1 + d])
            bayes[r] = int(cells[2 + d])
            admit[r] = float(cells[3 + d])
        except ValueError as err:
            raise ParseError(f"unparseable cell: {err}", line=lineno) from err
    C = int(meta["n_classes"]) if "n_classes" in meta else (
        int(max(noisy.max(), bayes.max())) + 1 if n else 1)
    return DistilledSet(indices=indices, features=features, noisy_labels=noisy,
                        bayes_labels=bayes, admit_posteriors=admit, n_classes=C)
