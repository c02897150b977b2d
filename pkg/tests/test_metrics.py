"""Evaluation metric tests: accuracy oracles from closed-form posterior
networks, row-wise matrix error selection, count-based class matrices, and
the aggregated report plumbing."""

import json

import numpy as np
import pytest

from btlab import nn
from btlab.config import ExperimentConfig
from btlab.data import GaussianMixtureSpec, NoiseGenConfig, generate_mixture, \
    inject_idn_noise
from btlab.distill import DistilledSet
from btlab.exceptions import InputError
from btlab.metrics import (MetricsReport, accuracy_vs_bayes, accuracy_vs_clean,
                           aggregate_metrics, bayes_accuracy_vs_clean,
                           estimate_class_transition, row_l1_errors,
                           run_comparison, save_comparison_csv,
                           save_report_json, transition_row_l1)

from helpers import random_stochastic_stack


def spherical_spec(means, priors=None):
    means = np.asarray(means, dtype=np.float64)
    C = means.shape[0]
    priors = [1.0 / C] * C if priors is None else priors
    return GaussianMixtureSpec(means=means, variances=np.ones_like(means),
                               priors=priors)


def exact_posterior_net(spec):
    # For unit spherical components the log-posterior is linear in x:
    # score_k = mu_k . x - |mu_k|^2 / 2 + log prior_k.
    mu = np.asarray(spec.means, dtype=np.float64)
    b = -0.5 * np.sum(mu * mu, axis=1) + np.log(np.asarray(spec.priors))
    return nn.NetworkParams([mu.copy()], [b])


def make_distilled(bayes, noisy):
    bayes = np.asarray(bayes, dtype=np.int64)
    noisy = np.asarray(noisy, dtype=np.int64)
    n = bayes.shape[0]
    C = int(max(bayes.max(), noisy.max())) + 1
    return DistilledSet(indices=np.arange(n), features=np.zeros((n, 1)),
                        noisy_labels=noisy, bayes_labels=bayes,
                        admit_posteriors=np.full(n, 0.9), n_classes=C)


# -------------------------------------------------------------- accuracy


def test_exact_posterior_network_matches_bayes_everywhere():
    spec = spherical_spec([[-2.0, 0.0], [0.0, 1.5], [2.0, 0.0]],
                          priors=[0.25, 0.5, 0.25])
    data = generate_mixture(spec, 5000, seed=0)
    net = exact_posterior_net(spec)
    assert accuracy_vs_bayes(net, data) == 1.0
    assert accuracy_vs_clean(net, data) == bayes_accuracy_vs_clean(data)


def test_uniform_network_ties_resolve_to_class_zero():
    spec = spherical_spec([[-2.0], [2.0]])
    data = generate_mixture(spec, 2000, seed=1)
    net = nn.NetworkParams([np.zeros((2, 1))], [np.zeros(2)])
    expected = np.mean(data.bayes_labels == 0)
    assert accuracy_vs_bayes(net, data) == expected


def test_bayes_accuracy_hand_value():
    spec = spherical_spec([[-2.0], [2.0]])
    data = generate_mixture(spec, 3, seed=2)
    crafted = type(data)(features=data.features,
                         clean_labels=np.array([0, 0, 1]),
                         bayes_labels=np.array([0, 1, 1]), n_classes=2)
    assert bayes_accuracy_vs_clean(crafted) == pytest.approx(2.0 / 3.0)


# ------------------------------------------------------------- row error


def test_row_errors_zero_when_prediction_reproduces_generating_rows():
    spec = spherical_spec([[-2.0], [2.0]])
    noisy = inject_idn_noise(generate_mixture(spec, 300, seed=3),
                             NoiseGenConfig(noise_rate=0.2))
    n = len(noisy)
    # Every row of the predicted matrix equals the stored generating row,
    # so whichever row the Bayes label selects, the error is zero.
    mats = np.repeat(noisy.transition_rows[:, None, :], 2, axis=1)
    assert np.all(row_l1_errors(mats, noisy) == 0.0)


def test_row_errors_select_row_of_bayes_label():
    spec = spherical_spec([[-2.0], [2.0]])
    noisy = inject_idn_noise(generate_mixture(spec, 200, seed=4),
                             NoiseGenConfig(noise_rate=0.2))
    n = len(noisy)
    predicted = np.broadcast_to(np.eye(2), (n, 2, 2))
    expected = np.abs(np.eye(2)[noisy.bayes_labels] - noisy.transition_rows).sum(axis=1)
    assert np.allclose(row_l1_errors(predicted, noisy), expected, atol=1e-12)
    constant = row_l1_errors(np.eye(2), noisy)
    assert np.array_equal(constant, row_l1_errors(predicted, noisy))


def test_row_errors_bounds_and_extremes():
    rng = np.random.default_rng(5)
    spec = spherical_spec([[-2.0], [2.0]])
    noisy = inject_idn_noise(generate_mixture(spec, 500, seed=6),
                             NoiseGenConfig(noise_rate=0.25))
    predicted = random_stochastic_stack(rng, len(noisy), 2)
    errors = row_l1_errors(predicted, noisy)
    assert np.all(errors >= 0.0) and np.all(errors <= 2.0)

    C = 10
    uniform = np.full((1, C, C), 1.0 / C)
    onehot_row = np.zeros((1, C))
    onehot_row[0, 0] = 1.0
    spec10 = spherical_spec(np.eye(C))
    base = generate_mixture(spec10, 1, seed=7)
    crafted = type(base)(features=base.features,
                         clean_labels=np.zeros(1, dtype=int),
                         bayes_labels=np.zeros(1, dtype=int), n_classes=C,
                         noisy_labels=np.zeros(1, dtype=int),
                         transition_rows=onehot_row)
    assert row_l1_errors(uniform, crafted)[0] == pytest.approx(2.0 * (C - 1) / C)


def test_row_errors_require_stored_rows():
    data = generate_mixture(spherical_spec([[-2.0], [2.0]]), 10, seed=7)
    with pytest.raises(InputError):
        row_l1_errors(np.eye(2), data)


def test_row_error_subsets():
    spec = spherical_spec([[-2.0], [2.0]])
    noisy = inject_idn_noise(generate_mixture(spec, 100, seed=8),
                             NoiseGenConfig(noise_rate=0.2))
    n = len(noisy)
    mats = np.repeat(noisy.transition_rows[:, None, :], 2, axis=1)
    bad = np.asarray([0, 3, 7])
    for i in bad:
        mats[i] = random_stochastic_stack(np.random.default_rng(i), 1, 2)[0]
    per_row = row_l1_errors(mats, noisy)
    assert transition_row_l1(mats, noisy, "all") == pytest.approx(per_row.mean())
    assert transition_row_l1(mats, noisy, "distilled", bad) == \
        pytest.approx(per_row[bad].mean())
    assert transition_row_l1(mats, noisy, "heldout", bad) == \
        pytest.approx(np.delete(per_row, bad).mean())
    assert transition_row_l1(mats, noisy, "heldout", np.arange(n)) is None
    with pytest.raises(InputError):
        transition_row_l1(mats, noisy, "bogus", bad)
    with pytest.raises(InputError):
        transition_row_l1(mats, noisy, "distilled")


# ---------------------------------------------------- class-level matrix


def test_class_transition_single_example_smoothing():
    est = estimate_class_transition(make_distilled([0], [1]), 2, alpha=1.0)
    assert np.allclose(est, [[1.0 / 3.0, 2.0 / 3.0], [0.5, 0.5]], atol=1e-12)


def test_class_transition_matches_empirical_frequencies():
    rng = np.random.default_rng(9)
    T = np.array([[0.8, 0.2], [0.3, 0.7]])
    bayes = rng.integers(0, 2, size=20000)
    noisy = np.array([rng.choice(2, p=T[b]) for b in bayes])
    est = estimate_class_transition(make_distilled(bayes, noisy), 2, alpha=1.0)
    assert np.allclose(est, T, atol=0.02)
    assert np.allclose(est.sum(axis=1), 1.0, atol=1e-12)


# ------------------------------------------------------------- reporting


def test_aggregate_metrics_mean_sd_and_skips():
    per_seed = [{"seed": 0, "acc": 0.9, "flag": True, "note": "x", "extra": 1.0,
                 "method": {"risk": 0.4}},
                {"seed": 1, "acc": 0.7, "flag": False, "note": "y",
                 "method": {"risk": 0.6}}]
    agg = aggregate_metrics(per_seed)
    assert agg["acc"]["mean"] == pytest.approx(0.8)
    assert agg["acc"]["sd"] == pytest.approx(np.std([0.9, 0.7], ddof=1))
    assert agg["acc"]["n"] == 2
    assert agg["method.risk"]["mean"] == pytest.approx(0.5)
    assert agg["extra"] == {"mean": 1.0, "sd": 0.0, "n": 1}
    assert "flag" not in agg and "note" not in agg and "seed" not in agg


def test_report_json_roundtrip_and_determinism(tmp_path):
    report = MetricsReport(config_digest="abc123def456", seeds=[0],
                           per_seed=[{"seed": 0, "acc": 0.5}],
                           aggregate={"acc": {"mean": 0.5, "sd": 0.0, "n": 1}},
                           failures=[])
    text = report.to_json()
    assert text == report.to_json()
    assert text.endswith("\n")
    parsed = json.loads(text)
    assert parsed["config_digest"] == "abc123def456"
    path = tmp_path / "metrics.json"
    save_report_json(report, path)
    assert path.read_text() == text
    again = MetricsReport.from_json(text)
    assert again.to_json() == text


TINY = {
    "mixture": {"means": [[-2.0], [2.0]], "variances": [[1.0], [1.0]],
                "priors": [0.5, 0.5]},
    "n_train": 200,
    "n_test": 150,
    "noise": {"noise_rate": 0.3, "rate_sd": 0.1, "rate_bound": 0.6},
    "distill": {"rho_max": 0.3, "warmup_epochs": 2},
    "transition": {"epochs": 2},
    "classifier": {"epochs": 2, "validation_fraction": 0.2},
    "network": {"hidden_sizes": [8]},
    "batch_size": 32,
    "seeds": [0, 1],
}


def test_run_comparison_structure_and_repeatability():
    config = ExperimentConfig.from_dict(TINY)
    report = run_comparison(config)
    assert report.config_digest == config.digest()
    assert report.seeds == [0, 1]
    assert [entry["seed"] for entry in report.per_seed] == [0, 1]
    for entry in report.per_seed:
        assert 0.0 <= entry["bayes_accuracy_vs_clean"] <= 1.0
        method = entry["method"]
        for key in ("test_accuracy_vs_bayes", "test_accuracy_vs_clean",
                    "row_l1_all", "row_l1_distilled", "row_l1_heldout",
                    "distill_precision", "distill_coverage",
                    "distill_noisy_agreement"):
            assert key in method, key
        assert set(entry["baselines"]) == {"ce", "class_dependent"}
        assert "test_accuracy_vs_bayes" in entry["baselines"]["ce"]
        assert "row_l1_heldout" in entry["baselines"]["class_dependent"]
    assert "method.test_accuracy_vs_bayes" in report.aggregate
    assert "baselines.ce.test_accuracy_vs_bayes" in report.aggregate
    assert report.failures == []
    again = run_comparison(config)
    assert again.to_json() == report.to_json()


def test_comparison_csv_format(tmp_path):
    config = ExperimentConfig.from_dict(TINY)
    report = run_comparison(config)
    path = tmp_path / "comparison.csv"
    save_comparison_csv(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == f"# config_digest={config.digest()}"
    assert lines[1] == "scope,metric,value"
    assert len(lines) > 2
    scopes = set()
    for line in lines[2:]:
        scope, metric, value = line.split(",")
        scopes.add(scope)
        if value not in ("", "true", "false"):
            float(value)
    assert scopes == {"seed_0", "seed_1", "mean", "sd"}
