"""Forward-corrected classifier training.

The classifier's softmax output is mixed through frozen per-instance
transition matrices and trained against the noisy labels; with identity
matrices the risk reduces bitwise to plain cross-entropy. A held-out slice of
the noisy training data (seeded split) provides corrected-risk model
selection over per-epoch checkpoints, and an optional fine-tuning stage
jointly adjusts the classifier and a global additive slack on the matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset
from .exceptions import ConfigError, InputError, NumericError
from .transition import revise_matrix, transition_matrices

FLOAT_FMT = "%.17g"


@dataclass
class TrainRunConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    validation_fraction: float = 0.1
    hidden_sizes: tuple = (32, 32)
    revision_epochs: int = 0
    revision_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size > 0, lr > 0 required")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.revision_epochs < 0 or self.revision_lr <= 0:
            raise ConfigError("revision_epochs >= 0 and revision_lr > 0 required")


@dataclass
class Checkpoint:
    epoch: int
    params: nn.NetworkParams
    train_risk: float
    val_risk: float
    val_plain_ce: float
    test_accuracy: float | None = None


def _resolve_matrices(transition, X: np.ndarray) -> np.ndarray:
    if isinstance(transition, nn.NetworkParams):
        return transition_matrices(transition, X)
    mats = np.asarray(transition, dtype=np.float64)
    if mats.ndim == 2:
        mats = np.broadcast_to(mats, (X.shape[0],) + mats.shape)
    return mats


def forward_corrected_risk(w: nn.NetworkParams, batch: nn.Batch, transition) -> float:
    """Cross-entropy of the noisy targets under the mixed probabilities.

    `transition` may be a matrix-head network, a constant (C, C) matrix, or a
    precomputed (n, C, C) stack. Identity matrices reproduce plain
    cross-entropy exactly: the mixing step adds exact zeros only.
    """
    mats = _resolve_matrices(transition, batch.inputs)
    probs = nn.forward_probs(w, batch.inputs)
    mixed = nn.corrected_probs(probs, mats)
    return nn.cross_entropy(mixed, batch)


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled split; the tail `fraction` becomes validation."""
    if not (0.0 < fraction < 1.0):
        raise ConfigError("fraction must lie in (0, 1)")
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise InputError(f"cannot hold out {n_val} of {n} rows")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17])).permutation(n)
    return np.sort(order[:-n_val]), np.sort(order[-n_val:])


def _accuracy_vs(params: nn.NetworkParams, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(nn.forward_probs(params, features).argmax(axis=1) == labels))


def train_classifier(noisy: LabeledDataset, theta, cfg: TrainRunConfig,
                     test: LabeledDataset | None = None,
                     init: nn.NetworkParams | None = None) -> list[Checkpoint]:
    """Minibatch descent on the corrected risk with theta frozen.

    `theta` is a matrix-head network, a constant (C, C) matrix, or an
    (n, C, C) stack. Returns one checkpoint per epoch including the
    initialization (epoch 0), each carrying corrected train/validation risks,
    the uncorrected validation cross-entropy, and test accuracy against Bayes
    labels when a test set with oracle labels is supplied. theta is never
    modified.
    """
    if noisy.noisy_labels is None:
        raise InputError("dataset has no noisy labels")
    n = len(noisy)
    train_idx, val_idx = split_validation(n, cfg.validation_fraction, cfg.seed)
    X, y = noisy.features, noisy.noisy_labels
    targets = nn.one_hot(y, noisy.n_classes)
    # theta is frozen: resolve every matrix once up front.
    mats = _resolve_matrices(theta, X)
    train_batch = nn.Batch(X[train_idx], targets[train_idx])
    val_batch = nn.Batch(X[val_idx], targets[val_idx])

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss = ss.spawn(2)
    dims = [noisy.n_features, *cfg.hidden_sizes, noisy.n_classes]
    params = init.copy() if init is not None else nn.init_params(dims, np.random.default_rng(init_ss))
    if params.n_inputs != noisy.n_features or params.n_outputs != noisy.n_classes:
        raise ConfigError("initial parameters do not match the dataset dimensions")
    if cfg.optimizer == "adam":
        state = nn.OptimizerState.adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        state = nn.OptimizerState.sgd(params, lr=cfg.lr, momentum=cfg.momentum,
                                      weight_decay=cfg.weight_decay)

    def snapshot(epoch: int, p: nn.NetworkParams) -> Checkpoint:
        mixed_train = nn.corrected_probs(nn.forward_probs(p, train_batch.inputs), mats[train_idx])
        mixed_val = nn.corrected_probs(nn.forward_probs(p, val_batch.inputs), mats[val_idx])
        acc = None
        if test is not None:
            acc = _accuracy_vs(p, test.features, test.bayes_labels)
        return Checkpoint(
            epoch=epoch,
            params=p.copy(),
            train_risk=nn.cross_entropy(mixed_train, train_batch),
            val_risk=nn.cross_entropy(mixed_val, val_batch),
            val_plain_ce=nn.cross_entropy(nn.forward_probs(p, val_batch.inputs), val_batch),
            test_accuracy=acc,
        )

    checkpoints = [snapshot(0, params)]
    shuffle_rng = np.random.default_rng(shuffle_ss)
    for epoch in range(1, cfg.epochs + 1):
        for b, idx in enumerate(nn.epoch_batches(train_idx.shape[0], cfg.batch_size, shuffle_rng)):
            rows = train_idx[idx]
            batch = nn.Batch(X[rows], targets[rows])
            try:
                grads = nn.grad_params(params, batch, transition=mats[rows])
            except NumericError as err:
                raise NumericError(f"epoch {epoch} batch {b}: {err}", layer=err.layer) from err
            params, state = nn.optimizer_step(params, grads, state)
        checkpoints.append(snapshot(epoch, params))
    return checkpoints


def select_model(checkpoints: list[Checkpoint], noisy_val: LabeledDataset,
                 theta) -> nn.NetworkParams:
    """Checkpoint minimizing corrected risk on the validation set; earliest wins ties."""
    if not checkpoints:
        raise InputError("no checkpoints to select from")
    if noisy_val.noisy_labels is None:
        raise InputError("validation set has no noisy labels")
    batch = nn.Batch(noisy_val.features, nn.one_hot(noisy_val.noisy_labels, noisy_val.n_classes))
    mats = _resolve_matrices(theta, noisy_val.features)
    risks = [forward_corrected_risk(c.params, batch, mats) for c in checkpoints]
    return checkpoints[int(np.argmin(risks))].params.copy()


def grad_revision_slack(w: nn.NetworkParams, batch: nn.Batch, base_mats: np.ndarray,
                        slack: np.ndarray) -> np.ndarray:
    """Analytic d(corrected risk)/d(slack) through clip-and-renormalize."""
    slack = np.asarray(slack, dtype=np.float64)
    adjusted = np.maximum(base_mats + slack, 0.0) + 1e-12
    sums = adjusted.sum(axis=2, keepdims=True)
    revised = adjusted / sums
    probs = nn.forward_probs(w, batch.inputs)
    mixed = nn.corrected_probs(probs, revised)
    clamped = np.clip(mixed, nn.LOG_FLOOR, 1.0)
    active = (mixed >= nn.LOG_FLOOR).astype(np.float64)
    dmixed = -(batch.weights[:, None] / len(batch)) * batch.targets / clamped * active
    drev = probs[:, :, None] * dmixed[:, None, :]
    inner = (drev * revised).sum(axis=2, keepdims=True)
    dadj = (drev - inner) / sums
    dadj = dadj * (base_mats + slack > 0.0)
    return dadj.sum(axis=0)


@dataclass
class RevisionResult:
    params: nn.NetworkParams
    slack: np.ndarray
    diverged: bool
    val_risks: list[float] = field(default_factory=list)


def finetune_revision(w: nn.NetworkParams, slack: np.ndarray, theta,
                      noisy_val: LabeledDataset, cfg: TrainRunConfig,
                      update_slack: bool = True) -> RevisionResult:
    """Joint descent of classifier and slack on the revised corrected risk.

    Starts from zero slack, clips slack entries to [-1, 1] after each step,
    and reverts to the inputs when the epoch risk rises five times in a row.
    """
    slack = np.asarray(slack, dtype=np.float64)
    if np.any(slack != 0.0):
        raise InputError("revision starts from zero slack")
    if slack.shape != (noisy_val.n_classes, noisy_val.n_classes):
        raise InputError("slack must be (C, C)")
    if noisy_val.noisy_labels is None:
        raise InputError("validation set has no noisy labels")
    X = noisy_val.features
    targets = nn.one_hot(noisy_val.noisy_labels, noisy_val.n_classes)
    base_mats = _resolve_matrices(theta, X)
    full_batch = nn.Batch(X, targets)

    def full_risk(p: nn.NetworkParams, s: np.ndarray) -> float:
        mixed = nn.corrected_probs(nn.forward_probs(p, X), revise_matrix(base_mats, s))
        return nn.cross_entropy(mixed, full_batch)

    params = w.copy()
    cur_slack = slack.copy()
    state = nn.OptimizerState.adam(params, lr=cfg.revision_lr, weight_decay=cfg.weight_decay)
    slack_m = np.zeros_like(cur_slack)
    slack_v = np.zeros_like(cur_slack)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF17E]))
    risks = [full_risk(params, cur_slack)]
    rising = 0
    step = 0
    for _ in range(cfg.revision_epochs):
        for idx in nn.epoch_batches(X.shape[0], cfg.batch_size, shuffle_rng):
            batch = nn.Batch(X[idx], targets[idx])
            revised = revise_matrix(base_mats[idx], cur_slack)
            grads = nn.grad_params(params, batch, transition=revised)
            params, state = nn.optimizer_step(params, grads, state)
            if update_slack:
                gs = grad_revision_slack(params, batch, base_mats[idx], cur_slack)
                step += 1
                slack_m = beta1 * slack_m + (1 - beta1) * gs
                slack_v = beta2 * slack_v + (1 - beta2) * gs ** 2
                mhat = slack_m / (1 - beta1 ** step)
                vhat = slack_v / (1 - beta2 ** step)
                cur_slack = np.clip(cur_slack - cfg.revision_lr * mhat / (np.sqrt(vhat) + eps),
                                    -1.0, 1.0)
        risks.append(full_risk(params, cur_slack))
        if risks[-1] > risks[-2]:
            rising += 1
            if rising >= 5:
                return RevisionResult(params=w.copy(), slack=np.zeros_like(cur_slack),
                                      diverged=True, val_risks=risks)
        else:
            rising = 0
    return RevisionResult(params=params, slack=cur_slack, diverged=False, val_risks=risks)


def save_training_log_csv(checkpoints: list[Checkpoint], path, digest: str | None = None) -> None:
    """Schema: epoch,train_r2,val_r2[,test_acc_vs_bayes]; test column only when measured."""
    has_test = any(c.test_accuracy is not None for c in checkpoints)
    with open(path, "w", newline="") as fh:
        if digest is not None:
            fh.write(f"# config_digest={digest}\n")
        writer = csv.writer(fh)
        header = ["epoch", "train_r2", "val_r2"]
        if has_test:
            header.append("test_acc_vs_bayes")
        writer.writerow(header)
        for c in checkpoints:
            row = [str(c.epoch), FLOAT_FMT % c.train_risk, FLOAT_FMT % c.val_risk]
            if has_test:
                row.append(FLOAT_FMT % c.test_accuracy)
            writer.writerow(row)
