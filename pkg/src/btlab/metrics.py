"""Oracle-grounded evaluation and baseline comparisons.

All headline numbers are measured against generator-side oracles: accuracy
against Bayes labels, accuracy against clean labels, and the l1 distance
between the predicted transition row selected by the Bayes label and the row
that actually generated the noisy label. Baselines share the corrected-risk
training code: plain cross-entropy is forward correction with the identity
matrix, and the class-dependent baseline uses one Laplace-smoothed global
matrix estimated from the distilled set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .classifier import select_model, split_validation, train_classifier, finetune_revision
from .config import ExperimentConfig, derive_seed
from .data import LabeledDataset, generate_mixture, inject_idn_noise
from .distill import DistilledSet, collect_distilled, distill_quality, warmup_train
from .exceptions import InputError, PipelineError
from .transition import train_transition, transition_matrices

FLOAT_FMT = "%.17g"


def accuracy_vs_bayes(w: nn.NetworkParams, test: LabeledDataset) -> float:
    """Fraction of test rows where the classifier argmax hits the Bayes label."""
    pred = nn.forward_probs(w, test.features).argmax(axis=1)
    return float(np.mean(pred == test.bayes_labels))


def accuracy_vs_clean(w: nn.NetworkParams, test: LabeledDataset) -> float:
    pred = nn.forward_probs(w, test.features).argmax(axis=1)
    return float(np.mean(pred == test.clean_labels))


def bayes_accuracy_vs_clean(test: LabeledDataset) -> float:
    """Accuracy of the analytic Bayes classifier against the drawn clean labels."""
    return float(np.mean(test.bayes_labels == test.clean_labels))


def row_l1_errors(predictor, data: LabeledDataset) -> np.ndarray:
    """Per-instance l1 between the predicted Bayes-label row and the generating row."""
    if data.transition_rows is None:
        raise InputError("dataset has no stored generating rows")
    if isinstance(predictor, nn.NetworkParams):
        mats = transition_matrices(predictor, data.features)
    else:
        predictor = np.asarray(predictor, dtype=np.float64)
        if predictor.ndim == 2:
            mats = np.broadcast_to(predictor, (len(data),) + predictor.shape)
        else:
            mats = predictor
    rows = mats[np.arange(len(data)), data.bayes_labels]
    return np.abs(rows - data.transition_rows).sum(axis=1)


def transition_row_l1(predictor, data: LabeledDataset, subset: str = "all",
                      distilled_indices=None) -> float | None:
    """Mean row l1 over all, distilled, or held-out (non-distilled) instances."""
    errors = row_l1_errors(predictor, data)
    if subset == "all":
        mask = np.ones(len(data), dtype=bool)
    elif subset in ("distilled", "heldout"):
        if distilled_indices is None:
            raise InputError(f"subset {subset!r} needs distilled_indices")
        mask = np.zeros(len(data), dtype=bool)
        mask[np.asarray(distilled_indices, dtype=np.int64)] = True
        if subset == "heldout":
            mask = ~mask
    else:
        raise InputError(f"unknown subset {subset!r}")
    if not mask.any():
        return None
    return float(errors[mask].mean())


def estimate_class_transition(distilled: DistilledSet, n_classes: int,
                              alpha: float = 1.0) -> np.ndarray:
    """Global flip-frequency matrix from the distilled set, Laplace-smoothed."""
    counts = np.zeros((n_classes, n_classes))
    np.add.at(counts, (distilled.bayes_labels, distilled.noisy_labels), 1.0)
    return (counts + alpha) / (counts.sum(axis=1, keepdims=True) + alpha * n_classes)


@dataclass
class MetricsReport:
    config_digest: str
    seeds: list[int]
    per_seed: list[dict]
    aggregate: dict
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "seeds": self.seeds,
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        return cls(config_digest=payload["config_digest"], seeds=payload["seeds"],
                   per_seed=payload["per_seed"], aggregate=payload["aggregate"],
                   failures=payload.get("failures", []))


def _flatten(prefix: str, tree: dict, out: dict) -> None:
    for key, value in tree.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            _flatten(path, value, out)
        else:
            out[path] = value


def aggregate_metrics(per_seed: list[dict]) -> dict:
    """mean and sd (ddof=1) per numeric metric path, skipping missing values."""
    flats = []
    for entry in per_seed:
        flat = {}
        _flatten("", {k: v for k, v in entry.items() if k != "seed"}, flat)
        flats.append(flat)
    keys = sorted({k for flat in flats for k in flat})
    out = {}
    for key in keys:
        values = [flat[key] for flat in flats
                  if key in flat and isinstance(flat[key], (int, float))
                  and not isinstance(flat[key], bool)]
        if not values:
            continue
        mean = float(np.mean(values))
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        out[key] = {"mean": mean, "sd": sd, "n": len(values)}
    return out


@dataclass
class SeedArtifacts:
    """Everything one seeded pipeline run produces."""

    seed: int
    train_clean: LabeledDataset
    test: LabeledDataset
    noisy: LabeledDataset
    warmup: nn.NetworkParams
    distilled: DistilledSet
    theta: nn.NetworkParams
    checkpoints: list
    selected: nn.NetworkParams
    revised: nn.NetworkParams | None = None
    slack: np.ndarray | None = None
    revision_diverged: bool | None = None


def run_seed(config: ExperimentConfig, seed: int) -> SeedArtifacts:
    """Execute the full pipeline for one seed, in memory."""
    mixture = config.mixture
    train_clean = generate_mixture(mixture, config.n_train, derive_seed(seed, "train-data"))
    test = generate_mixture(mixture, config.n_test, derive_seed(seed, "test-data"))
    noisy = inject_idn_noise(train_clean, config.noise_config(seed))
    dcfg = config.distill_config(seed)
    warmup = warmup_train(noisy, dcfg)
    distilled = collect_distilled(noisy, warmup, dcfg)
    theta = train_transition(distilled, config.transition_config(seed))
    ccfg = config.classifier_config(seed)
    checkpoints = train_classifier(noisy, theta, ccfg, test=test)
    _, val_idx = split_validation(len(noisy), ccfg.validation_fraction, ccfg.seed)
    noisy_val = noisy.subset(val_idx)
    selected = select_model(checkpoints, noisy_val, theta)
    revised = slack = diverged = None
    if ccfg.revision_epochs > 0:
        C = noisy.n_classes
        result = finetune_revision(selected, np.zeros((C, C)), theta, noisy_val, ccfg)
        revised, slack, diverged = result.params, result.slack, result.diverged
    return SeedArtifacts(seed=seed, train_clean=train_clean, test=test, noisy=noisy,
                         warmup=warmup, distilled=distilled, theta=theta,
                         checkpoints=checkpoints, selected=selected, revised=revised,
                         slack=slack, revision_diverged=diverged)


def _train_baseline(noisy: LabeledDataset, transition, cfg, seed: int, stage: str):
    base_cfg = type(cfg)(**{**cfg.__dict__, "seed": derive_seed(seed, stage),
                            "revision_epochs": 0})
    checkpoints = train_classifier(noisy, transition, base_cfg)
    _, val_idx = split_validation(len(noisy), base_cfg.validation_fraction, base_cfg.seed)
    return select_model(checkpoints, noisy.subset(val_idx), transition)


def evaluate_seed(config: ExperimentConfig, seed: int, noisy: LabeledDataset,
                  test: LabeledDataset, distilled: DistilledSet,
                  theta: nn.NetworkParams, selected: nn.NetworkParams,
                  revised: nn.NetworkParams | None = None,
                  revision_diverged: bool | None = None) -> dict:
    """Method metrics plus identically budgeted baselines for one seed."""
    C = noisy.n_classes
    quality = distill_quality(distilled, noisy)
    ccfg = config.classifier_config(seed)

    method = {
        "test_accuracy_vs_bayes": accuracy_vs_bayes(selected, test),
        "test_accuracy_vs_clean": accuracy_vs_clean(selected, test),
        "row_l1_all": transition_row_l1(theta, noisy, "all"),
        "row_l1_distilled": transition_row_l1(theta, noisy, "distilled", distilled.indices),
        "row_l1_heldout": transition_row_l1(theta, noisy, "heldout", distilled.indices),
        "distill_precision": quality.precision,
        "distill_coverage": quality.coverage,
        "distill_noisy_agreement": quality.noisy_agreement,
    }
    if revised is not None:
        method["test_accuracy_vs_bayes_revised"] = accuracy_vs_bayes(revised, test)
        method["test_accuracy_vs_clean_revised"] = accuracy_vs_clean(revised, test)
        method["revision_diverged"] = bool(revision_diverged)

    ce_params = _train_baseline(noisy, np.eye(C), ccfg, seed, "baseline-ce")
    class_T = estimate_class_transition(distilled, C, alpha=1.0)
    cd_params = _train_baseline(noisy, class_T, ccfg, seed, "baseline-classdep")
    baselines = {
        "ce": {
            "test_accuracy_vs_bayes": accuracy_vs_bayes(ce_params, test),
            "test_accuracy_vs_clean": accuracy_vs_clean(ce_params, test),
        },
        "class_dependent": {
            "test_accuracy_vs_bayes": accuracy_vs_bayes(cd_params, test),
            "test_accuracy_vs_clean": accuracy_vs_clean(cd_params, test),
            "row_l1_all": transition_row_l1(class_T, noisy, "all"),
            "row_l1_heldout": transition_row_l1(class_T, noisy, "heldout", distilled.indices),
        },
    }
    return {
        "seed": seed,
        "bayes_accuracy_vs_clean": bayes_accuracy_vs_clean(test),
        "method": method,
        "baselines": baselines,
    }


def run_comparison(config: ExperimentConfig) -> MetricsReport:
    """Full pipeline plus baselines over every configured seed."""
    per_seed = []
    failures = []
    for seed in config.seeds:
        try:
            art = run_seed(config, seed)
            per_seed.append(evaluate_seed(
                config, seed, art.noisy, art.test, art.distilled, art.theta,
                art.selected, art.revised, art.revision_diverged,
            ))
        except PipelineError as err:
            failures.append({"seed": seed, "stage": err.stage or "unknown", "error": str(err)})
    return MetricsReport(
        config_digest=config.digest(),
        seeds=config.seeds,
        per_seed=per_seed,
        aggregate=aggregate_metrics(per_seed),
        failures=failures,
    )


def save_report_json(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json())


def load_report_json(path) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.from_json(fh.read())


def save_comparison_csv(report: MetricsReport, path) -> None:
    """Long format: one line per (scope, metric); scope is a seed, mean, or sd."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={report.config_digest}\n")
        writer = csv.writer(fh)
        writer.writerow(["scope", "metric", "value"])
        for entry in report.per_seed:
            flat = {}
            _flatten("", {k: v for k, v in entry.items() if k != "seed"}, flat)
            for key in sorted(flat):
                value = flat[key]
                if value is None:
                    rendered = ""
                elif isinstance(value, bool):
                    rendered = str(value).lower()
                else:
                    rendered = FLOAT_FMT % value
                writer.writerow([f"seed_{entry['seed']}", key, rendered])
        for key in sorted(report.aggregate):
            writer.writerow(["mean", key, FLOAT_FMT % report.aggregate[key]["mean"]])
            writer.writerow(["sd", key, FLOAT_FMT % report.aggregate[key]["sd"]])
