"""Forward-corrected classifier tests: exact identity behavior, hand-checked
mixed losses, gradients through the correction, model selection, and slack
revision including its divergence bailout."""

import csv
import math

import numpy as np
import pytest

from btlab import nn
from btlab.classifier import (Checkpoint, TrainRunConfig, finetune_revision,
                              forward_corrected_risk, grad_revision_slack,
                              save_training_log_csv, select_model,
                              split_validation, train_classifier)
from btlab.data import GaussianMixtureSpec, LabeledDataset, NoiseGenConfig, \
    generate_mixture, inject_idn_noise
from btlab.exceptions import ConfigError, InputError

from helpers import (flatten_grads, flatten_params, fd_gradient, max_rel_error,
                     random_simplex_rows, random_stochastic_stack)


def noisy_blobs(n=60, seed=0):
    spec = GaussianMixtureSpec(means=[[-2.0], [2.0]], variances=[[1.0], [1.0]],
                               priors=[0.5, 0.5])
    return inject_idn_noise(generate_mixture(spec, n, seed), NoiseGenConfig(noise_rate=0.3))


def bias_net(logits, n_features=1):
    logits = np.asarray(logits, dtype=np.float64)
    return nn.NetworkParams([np.zeros((logits.size, n_features))], [logits])


# ------------------------------------------------------------- mixed risk


def test_identity_correction_reproduces_plain_cross_entropy_bitwise():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(1, 4))
        C = int(rng.integers(2, 5))
        n = int(rng.integers(1, 20))
        w = nn.init_params([d, int(rng.integers(2, 8)), C],
                           np.random.default_rng(int(rng.integers(2 ** 32))))
        X = rng.standard_normal((n, d))
        batch = nn.Batch(X, random_simplex_rows(rng, n, C))
        identity = np.broadcast_to(np.eye(C), (n, C, C))
        corrected = forward_corrected_risk(w, batch, identity)
        plain = nn.cross_entropy(nn.forward_probs(w, X), batch)
        assert corrected == plain


def test_mixed_risk_hand_value():
    w = bias_net([math.log(0.6), math.log(0.4)])
    T = np.array([[0.9, 0.1], [0.2, 0.8]])
    batch = nn.Batch(np.zeros((1, 1)), nn.one_hot(np.array([0]), 2))
    risk = forward_corrected_risk(w, batch, T)
    assert abs(risk - (-math.log(0.6 * 0.9 + 0.4 * 0.2))) < 1e-12


def test_absorbing_columns_give_zero_risk():
    w = bias_net([0.3, -0.7])
    T = np.array([[1.0, 0.0], [1.0, 0.0]])
    batch = nn.Batch(np.zeros((4, 1)), nn.one_hot(np.zeros(4, dtype=int), 2))
    assert forward_corrected_risk(w, batch, T) < 1e-12


def test_constant_matrix_broadcasts_like_stack():
    rng = np.random.default_rng(2)
    w = nn.init_params([2, 4, 3], seed=3)
    X = rng.standard_normal((6, 2))
    batch = nn.Batch(X, random_simplex_rows(rng, 6, 3))
    T = random_stochastic_stack(rng, 1, 3)[0]
    stacked = np.broadcast_to(T, (6, 3, 3))
    assert forward_corrected_risk(w, batch, T) == forward_corrected_risk(w, batch, stacked)


def test_revision_slack_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        C = int(rng.integers(2, 4))
        n = int(rng.integers(2, 6))
        w = nn.init_params([2, 4, C], np.random.default_rng(int(rng.integers(2 ** 32))))
        X = rng.standard_normal((n, 2))
        batch = nn.Batch(X, nn.one_hot(rng.integers(0, C, size=n), C))
        base = random_stochastic_stack(rng, n, C, floor=0.05)
        slack = np.zeros((C, C))
        analytic = grad_revision_slack(w, batch, base, slack)

        from btlab.transition import revise_matrix

        numeric = np.empty_like(slack)
        eps = 1e-5
        for i in range(C):
            for j in range(C):
                up, down = slack.copy(), slack.copy()
                up[i, j] += eps
                down[i, j] -= eps
                hi = forward_corrected_risk(w, batch, revise_matrix(base, up))
                lo = forward_corrected_risk(w, batch, revise_matrix(base, down))
                numeric[i, j] = (hi - lo) / (2.0 * eps)
        worst = max(worst, max_rel_error(analytic.reshape(-1), numeric.reshape(-1)))
    assert worst < 1e-4


# ---------------------------------------------------------------- training


def test_training_freezes_theta():
    noisy = noisy_blobs()
    theta = nn.init_params([1, 4, 4], seed=5)
    before = [w.copy() for w in theta.weights] + [b.copy() for b in theta.biases]
    cfg = TrainRunConfig(epochs=2, batch_size=16, lr=1e-3, hidden_sizes=(4,), seed=6)
    train_classifier(noisy, theta, cfg)
    after = list(theta.weights) + list(theta.biases)
    for b, a in zip(before, after):
        assert np.array_equal(b, a)


def test_training_produces_one_checkpoint_per_epoch_plus_init():
    noisy = noisy_blobs()
    theta = np.eye(2)
    cfg = TrainRunConfig(epochs=3, batch_size=16, lr=1e-3, hidden_sizes=(4,), seed=7)
    checkpoints = train_classifier(noisy, theta, cfg)
    assert [c.epoch for c in checkpoints] == [0, 1, 2, 3]
    assert all(c.test_accuracy is None for c in checkpoints)
    zero = train_classifier(noisy, theta, TrainRunConfig(epochs=0, batch_size=16,
                                                         lr=1e-3, hidden_sizes=(4,), seed=7))
    assert len(zero) == 1 and zero[0].epoch == 0
    for w1, w2 in zip(zero[0].params.weights, checkpoints[0].params.weights):
        assert np.array_equal(w1, w2)


def test_training_accepts_every_theta_form_and_records_test_accuracy():
    noisy = noisy_blobs(n=80, seed=1)
    test = generate_mixture(GaussianMixtureSpec(means=[[-2.0], [2.0]],
                                                variances=[[1.0], [1.0]],
                                                priors=[0.5, 0.5]), 50, seed=2)
    cfg = TrainRunConfig(epochs=1, batch_size=16, lr=1e-3, hidden_sizes=(4,), seed=8)
    for theta in (nn.init_params([1, 4, 4], seed=9),
                  np.eye(2),
                  np.broadcast_to(np.eye(2), (80, 2, 2))):
        checkpoints = train_classifier(noisy, theta, cfg, test=test)
        assert all(0.0 <= c.test_accuracy <= 1.0 for c in checkpoints)


def test_training_is_bit_reproducible():
    noisy = noisy_blobs(n=80, seed=3)
    cfg = TrainRunConfig(epochs=2, batch_size=16, lr=1e-3, hidden_sizes=(4,), seed=10)
    a = train_classifier(noisy, np.eye(2), cfg)[-1].params
    b = train_classifier(noisy, np.eye(2), cfg)[-1].params
    assert np.array_equal(flatten_params(a), flatten_params(b))


def test_training_validates_inputs():
    noisy = noisy_blobs()
    clean = LabeledDataset(features=noisy.features, clean_labels=noisy.clean_labels,
                           bayes_labels=noisy.bayes_labels, n_classes=2)
    cfg = TrainRunConfig(epochs=1, batch_size=16, lr=1e-3, hidden_sizes=(4,), seed=11)
    with pytest.raises(InputError):
        train_classifier(clean, np.eye(2), cfg)
    bad_init = nn.init_params([3, 4, 2], seed=12)
    with pytest.raises(ConfigError):
        train_classifier(noisy, np.eye(2), cfg, init=bad_init)
    with pytest.raises(ConfigError):
        TrainRunConfig(optimizer="lbfgs")
    with pytest.raises(ConfigError):
        TrainRunConfig(validation_fraction=1.0)


# ----------------------------------------------------------------- split


def test_split_validation_properties():
    train_idx, val_idx = split_validation(100, 0.1, seed=0)
    assert len(val_idx) == 10 and len(train_idx) == 90
    assert np.array_equal(np.sort(np.concatenate([train_idx, val_idx])), np.arange(100))
    again = split_validation(100, 0.1, seed=0)
    assert np.array_equal(train_idx, again[0]) and np.array_equal(val_idx, again[1])
    other = split_validation(100, 0.1, seed=1)
    assert not np.array_equal(val_idx, other[1])
    assert len(split_validation(10, 0.05, seed=0)[1]) == 1
    with pytest.raises(ConfigError):
        split_validation(10, 0.0, seed=0)
    with pytest.raises(InputError):
        split_validation(3, 0.9, seed=0)


# -------------------------------------------------------------- selection


def test_select_model_recomputes_risk_and_ignores_stored_fields():
    X = np.concatenate([np.full((4, 1), -2.0), np.full((4, 1), 2.0)])
    labels = np.array([0] * 4 + [1] * 4)
    val = LabeledDataset(features=X, clean_labels=labels, bayes_labels=labels,
                         n_classes=2, noisy_labels=labels)
    good = nn.NetworkParams([np.array([[-2.0], [2.0]])], [np.zeros(2)])
    bad = nn.NetworkParams([np.array([[2.0], [-2.0]])], [np.zeros(2)])
    # Stored risks lie on purpose: selection must recompute from the data.
    checkpoints = [Checkpoint(0, bad, 0.0, 0.0, 0.0),
                   Checkpoint(1, good, 9.9, 9.9, 9.9),
                   Checkpoint(2, bad, 0.0, 0.0, 0.0)]
    chosen = select_model(checkpoints, val, np.eye(2))
    assert np.array_equal(chosen.weights[0], good.weights[0])
    with pytest.raises(InputError):
        select_model([], val, np.eye(2))


def test_select_model_subsets_per_instance_theta():
    noisy = noisy_blobs(n=40, seed=4)
    _, val_idx = split_validation(len(noisy), 0.25, seed=0)
    val = noisy.subset(val_idx)
    mats = np.broadcast_to(np.eye(2), (len(val), 2, 2))
    cp = Checkpoint(0, nn.init_params([1, 2], seed=13), 0.0, 0.0, 0.0)
    chosen = select_model([cp], val, mats)
    assert np.array_equal(chosen.weights[0], cp.params.weights[0])


# --------------------------------------------------------------- revision


def test_revision_zero_epochs_is_identity():
    noisy = noisy_blobs(n=40, seed=5)
    w = nn.init_params([1, 4, 2], seed=14)
    cfg = TrainRunConfig(epochs=1, batch_size=16, lr=1e-3, hidden_sizes=(4,),
                         revision_epochs=0, revision_lr=0.01, seed=15)
    res = finetune_revision(w, np.zeros((2, 2)), np.eye(2), noisy, cfg)
    assert np.array_equal(flatten_params(res.params), flatten_params(w))
    assert np.all(res.slack == 0.0)
    assert res.diverged is False
    assert len(res.val_risks) == 1


def test_revision_requires_zero_initial_slack():
    noisy = noisy_blobs(n=40, seed=6)
    w = nn.init_params([1, 4, 2], seed=16)
    cfg = TrainRunConfig(revision_epochs=1, seed=17)
    with pytest.raises(InputError):
        finetune_revision(w, np.full((2, 2), 0.1), np.eye(2), noisy, cfg)
    with pytest.raises(InputError):
        finetune_revision(w, np.zeros((3, 3)), np.eye(2), noisy, cfg)


def test_revision_descends_on_validation_risk():
    noisy = noisy_blobs(n=60, seed=0)
    w = nn.init_params([1, 8, 2], seed=1)
    theta = np.array([[0.7, 0.3], [0.3, 0.7]])
    cfg = TrainRunConfig(epochs=1, batch_size=16, lr=1e-3, hidden_sizes=(8,),
                         revision_epochs=5, revision_lr=0.05, seed=3)
    res = finetune_revision(w, np.zeros((2, 2)), theta, noisy, cfg)
    assert res.diverged is False
    assert res.val_risks[-1] < res.val_risks[0]
    assert np.all(np.abs(res.slack) <= 1.0)


def test_revision_with_frozen_slack_keeps_it_zero():
    noisy = noisy_blobs(n=60, seed=0)
    w = nn.init_params([1, 8, 2], seed=1)
    cfg = TrainRunConfig(epochs=1, batch_size=16, lr=1e-3, hidden_sizes=(8,),
                         revision_epochs=3, revision_lr=0.01, seed=3)
    res = finetune_revision(w, np.zeros((2, 2)), np.eye(2), noisy, cfg,
                            update_slack=False)
    assert np.all(res.slack == 0.0)
    assert len(res.val_risks) == 4


def test_revision_divergence_reverts_and_flags():
    noisy = noisy_blobs(n=60, seed=0)
    w = nn.init_params([1, 8, 2], seed=3)
    theta = np.array([[0.7, 0.3], [0.3, 0.7]])
    cfg = TrainRunConfig(epochs=1, batch_size=16, lr=1e-3, hidden_sizes=(8,),
                         revision_epochs=20, revision_lr=1.0, seed=1)
    res = finetune_revision(w, np.zeros((2, 2)), theta, noisy, cfg)
    assert res.diverged is True
    assert np.array_equal(flatten_params(res.params), flatten_params(w))
    assert np.all(res.slack == 0.0)
    tail = res.val_risks[-6:]
    assert all(b > a for a, b in zip(tail, tail[1:]))


# ------------------------------------------------------------ training log


def test_training_log_schema_with_and_without_test_column(tmp_path):
    noisy = noisy_blobs(n=50, seed=7)
    test = generate_mixture(GaussianMixtureSpec(means=[[-2.0], [2.0]],
                                                variances=[[1.0], [1.0]],
                                                priors=[0.5, 0.5]), 30, seed=8)
    cfg = TrainRunConfig(epochs=2, batch_size=16, lr=1e-3, hidden_sizes=(4,), seed=18)
    with_test = train_classifier(noisy, np.eye(2), cfg, test=test)
    path = tmp_path / "log.csv"
    save_training_log_csv(with_test, path, digest="feed00000001")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_digest=feed00000001"
    assert lines[1] == "epoch,train_r2,val_r2,test_acc_vs_bayes"
    rows = list(csv.reader(lines[2:]))
    assert len(rows) == len(with_test)
    for row, cp in zip(rows, with_test):
        assert int(row[0]) == cp.epoch
        assert float(row[1]) == cp.train_risk
        assert float(row[2]) == cp.val_risk
        assert float(row[3]) == cp.test_accuracy

    without = train_classifier(noisy, np.eye(2), cfg)
    save_training_log_csv(without, path)
    assert path.read_text().splitlines()[0] == "epoch,train_r2,val_r2"
