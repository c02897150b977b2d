"""Instance-dependent transition-matrix network.

A plain MLP maps x to C*C logits, reshaped to (C, C) with a softmax per row,
so every predicted matrix is row-stochastic by construction. Training
minimizes the cross-entropy between the noisy label and the matrix row
selected by the inferred Bayes label of each distilled example. The module
also provides exact posterior inversion and the additive-slack revision used
for fine-tuning.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .distill import DistilledSet
from .exceptions import ConfigError, InputError, ParseError, PipelineError, SingularMatrixError

CONDITION_LIMIT = 1e8
REVISION_FLOOR = 1e-12
FLOAT_FMT = "%.17g"


@dataclass
class TransitionTrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"
    hidden_sizes: tuple = (32, 32)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size > 0, lr > 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def matrix_head_classes(theta: nn.NetworkParams) -> int:
    """Number of classes implied by a C*C output head."""
    width = theta.n_outputs
    C = int(round(np.sqrt(width)))
    if C * C != width or C < 1:
        raise ConfigError(f"output width {width} is not a square; not a matrix head")
    return C


def transition_matrices(theta: nn.NetworkParams, X) -> np.ndarray:
    """Predicted (n, C, C) stack; every row softmaxed, hence row-stochastic."""
    C = matrix_head_classes(theta)
    logits = nn.forward_logits(theta, X)
    return nn.softmax(logits.reshape(-1, C, C))


def transition_forward(theta: nn.NetworkParams, x) -> np.ndarray:
    """Predicted matrix at a single point."""
    return transition_matrices(theta, np.asarray(x, dtype=np.float64)[None, :])[0]


def _selected_rows(theta: nn.NetworkParams, features, bayes_labels) -> np.ndarray:
    mats = transition_matrices(theta, features)
    return mats[np.arange(mats.shape[0]), np.asarray(bayes_labels, dtype=np.int64)]


def transition_risk(theta: nn.NetworkParams, distilled: DistilledSet) -> float:
    """Mean cross-entropy of the noisy label under the Bayes-label-selected row."""
    if len(distilled) == 0:
        raise InputError("empty distilled set")
    rows = _selected_rows(theta, distilled.features, distilled.bayes_labels)
    batch = nn.Batch(distilled.features, nn.one_hot(distilled.noisy_labels, distilled.n_classes))
    return nn.cross_entropy(rows, batch)


def grad_transition_risk(theta: nn.NetworkParams, distilled: DistilledSet) -> nn.Gradients:
    """Analytic gradient of transition_risk; only the selected row carries signal."""
    C = distilled.n_classes
    m = len(distilled)
    logits, acts = nn.forward_cache(theta, distilled.features)
    probs = nn.softmax(logits.reshape(m, C, C))
    sel = np.arange(m)
    rows = probs[sel, distilled.bayes_labels]
    targets = nn.one_hot(distilled.noisy_labels, C)
    clamped = np.clip(rows, nn.LOG_FLOOR, 1.0)
    active = (rows >= nn.LOG_FLOOR).astype(np.float64)
    drows = -(targets / clamped) * active / m
    dlogits_rows = nn.softmax_vjp(rows, drows)
    dlogits = np.zeros((m, C, C))
    dlogits[sel, distilled.bayes_labels] = dlogits_rows
    return nn.backprop_logits(theta, acts, dlogits.reshape(m, C * C))


def train_transition(distilled: DistilledSet, cfg: TransitionTrainConfig) -> nn.NetworkParams:
    """Minibatch training of the matrix head on the distilled set."""
    if len(distilled) == 0:
        raise PipelineError(
            "empty distilled set: no instance cleared the admission threshold; "
            "lower rho_max or improve the warm-up fit",
            stage="train-transition",
        )
    present = np.unique(distilled.bayes_labels)
    missing = sorted(set(range(distilled.n_classes)) - set(present.tolist()))
    if missing:
        warnings.warn(
            f"distilled set contains no examples for classes {missing}; "
            "their matrix rows stay near uniform",
            stacklevel=2,
        )
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss = ss.spawn(2)
    dims = [distilled.features.shape[1], *cfg.hidden_sizes, distilled.n_classes ** 2]
    theta = nn.init_params(dims, np.random.default_rng(init_ss))
    if cfg.optimizer == "adam":
        state = nn.OptimizerState.adam(theta, lr=cfg.lr)
    else:
        state = nn.OptimizerState.sgd(theta, lr=cfg.lr, momentum=cfg.momentum)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    for _ in range(cfg.epochs):
        for idx in nn.epoch_batches(len(distilled), cfg.batch_size, shuffle_rng):
            sub = DistilledSet(
                indices=distilled.indices[idx],
                features=distilled.features[idx],
                noisy_labels=distilled.noisy_labels[idx],
                bayes_labels=distilled.bayes_labels[idx],
                admit_posteriors=distilled.admit_posteriors[idx],
                n_classes=distilled.n_classes,
            )
            grads = grad_transition_risk(theta, sub)
            theta, state = nn.optimizer_step(theta, grads, state)
    return theta


def invert_posterior(T: np.ndarray, noisy_posterior: np.ndarray) -> np.ndarray:
    """Solve T^T z = noisy_posterior for the clean posterior."""
    T = np.asarray(T, dtype=np.float64)
    noisy_posterior = np.asarray(noisy_posterior, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise InputError("T must be square")
    if noisy_posterior.shape != (T.shape[0],):
        raise InputError("posterior length must match T")
    condition = float(np.linalg.cond(T.T))
    if not np.isfinite(condition) or condition >= CONDITION_LIMIT:
        raise SingularMatrixError(
            f"transition matrix is numerically singular (cond={condition:.3e})",
            condition=condition,
        )
    return np.linalg.solve(T.T, noisy_posterior)


def revise_matrix(T: np.ndarray, slack: np.ndarray) -> np.ndarray:
    """Additive slack, negative entries clipped, rows renormalized.

    Works on a single (C, C) matrix or an (n, C, C) stack with shared slack.
    """
    T = np.asarray(T, dtype=np.float64)
    slack = np.asarray(slack, dtype=np.float64)
    if slack.ndim != 2 or slack.shape[0] != slack.shape[1]:
        raise InputError("slack must be (C, C)")
    if T.shape[-2:] != slack.shape:
        raise InputError("T and slack disagree on C")
    adjusted = np.maximum(T + slack, 0.0) + REVISION_FLOOR
    return adjusted / adjusted.sum(axis=-1, keepdims=True)


def save_matrices_csv(matrices: np.ndarray, path, digest: str | None = None) -> None:
    """Long-format export: one line per (instance, row, column) entry."""
    matrices = np.asarray(matrices, dtype=np.float64)
    if matrices.ndim != 3 or matrices.shape[1] != matrices.shape[2]:
        raise InputError("matrices must be (n, C, C)")
    with open(path, "w", newline="") as fh:
        if digest is not None:
            fh.write(f"# config_digest={digest}\n")
        writer = csv.writer(fh)
        writer.writerow(["index", "i", "j", "value"])
        n, C, _ = matrices.shape
        for idx in range(n):
            for i in range(C):
                for j in range(C):
                    writer.writerow([idx, i, j, FLOAT_FMT % matrices[idx, i, j]])


def load_matrices_csv(path) -> np.ndarray:
    from .data import _read_csv_with_comments

    _, (header_line, header), body = _read_csv_with_comments(path)
    if header != ["index", "i", "j", "value"]:
        raise ParseError("header does not match the matrix-export schema", line=header_line)
    if not body:
        return np.zeros((0, 0, 0))
    entries = []
    for lineno, cells in body:
        if len(cells) != 4:
            raise ParseError(f"row has {len(cells)} cells, expected 4", line=lineno)
        try:
            entries.append((int(cells[0]), int(cells[1]), int(cells[2]), float(cells[3])))
        except ValueError as err:
            raise ParseError(f"unparseable cell: {err}", line=lineno) from err
    n = max(e[0] for e in entries) + 1
    C = max(e[1] for e in entries) + 1
    out = np.zeros((n, C, C))
    for idx, i, j, value in entries:
        out[idx, i, j] = value
    return out
