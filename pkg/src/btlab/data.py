"""Synthetic benchmark data: Gaussian mixtures with analytic posteriors and
bounded instance-dependent label noise.

The noise generator draws a per-instance flip rate q_i from a truncated
normal, builds one transition row for the clean label (diagonal exactly
1 - q_i, remaining mass q_i spread by a softmax of a class-specific random
projection of x_i), and samples the noisy label from that row. Per-instance
RNG streams keyed by (seed, row index) make the draws independent of row
order. Because the projections and flip rates are recoverable, the full
generating transition matrix and the exact noisy posterior are available as
oracles for tests and evaluation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigError, InputError, ParseError
from .nn import softmax

FLOAT_FMT = "%.17g"


@dataclass
class GaussianMixtureSpec:
    """Class-conditional diagonal Gaussians: means (C, d), variances (C, d), priors (C,)."""

    means: np.ndarray
    variances: np.ndarray
    priors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if self.means.ndim != 2:
            raise ConfigError("means must be (C, d)")
        if self.variances.shape != self.means.shape:
            raise ConfigError("variances must match means in shape")
        if self.priors.shape != (self.means.shape[0],):
            raise ConfigError("priors must be (C,)")
        if np.any(self.variances <= 0):
            raise ConfigError("variances must be strictly positive")
        if np.any(self.priors <= 0):
            raise ConfigError("degenerate mixture: every class needs positive prior")
        if abs(self.priors.sum() - 1.0) > 1e-9:
            raise ConfigError("priors must sum to 1")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def n_features(self) -> int:
        return self.means.shape[1]


@dataclass
class NoiseGenConfig:
    """Bounded instance-dependent noise settings.

    noise_rate is the truncated-normal center, rate_sd its scale, rate_bound
    the hard upper flip-rate bound. The three seeds drive the per-class
    projections, the per-instance rate draws, and the per-instance flips.
    """

    noise_rate: float
    rate_sd: float = 0.1
    rate_bound: float = 0.6
    projection_seed: int = 0
    rate_seed: int = 1
    flip_seed: int = 2

    def __post_init__(self):
        if not (0.0 <= self.noise_rate <= self.rate_bound < 1.0):
            raise ConfigError("need 0 <= noise_rate <= rate_bound < 1")
        if self.rate_sd <= 0:
            raise ConfigError("rate_sd must be positive")


@dataclass
class LabeledDataset:
    """Feature matrix plus up to four label channels and oracle columns.

    clean_labels and bayes_labels always exist for synthetic data; the noisy
    channel, per-instance flip rates, generating transition rows, and clean
    posteriors are optional but, when present, cover every row.
    """

    features: np.ndarray
    clean_labels: np.ndarray
    bayes_labels: np.ndarray
    n_classes: int
    noisy_labels: np.ndarray | None = None
    flip_rates: np.ndarray | None = None
    transition_rows: np.ndarray | None = None
    posteriors: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
        self.bayes_labels = np.asarray(self.bayes_labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise InputError("features must be (n, d)")
        if self.clean_labels.shape != (n,) or self.bayes_labels.shape != (n,):
            raise InputError("label channels must have shape (n,)")
        for name in ("clean_labels", "bayes_labels", "noisy_labels"):
            lab = getattr(self, name)
            if lab is None:
                continue
            lab = np.asarray(lab, dtype=np.int64)
            setattr(self, name, lab)
            if lab.shape != (n,):
                raise InputError(f"{name} must have shape (n,)")
            if lab.size and (lab.min() < 0 or lab.max() >= self.n_classes):
                raise InputError(f"{name} outside [0, {self.n_classes})")
        if self.flip_rates is not None:
            self.flip_rates = np.asarray(self.flip_rates, dtype=np.float64)
            if self.flip_rates.shape != (n,):
                raise InputError("flip_rates must have shape (n,)")
        for name in ("transition_rows", "posteriors"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            setattr(self, name, arr)
            if arr.shape != (n, self.n_classes):
                raise InputError(f"{name} must have shape (n, C)")
            if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
                raise InputError(f"{name} rows must sum to 1")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return LabeledDataset(
            features=self.features[idx],
            clean_labels=self.clean_labels[idx],
            bayes_labels=self.bayes_labels[idx],
            n_classes=self.n_classes,
            noisy_labels=pick(self.noisy_labels),
            flip_rates=pick(self.flip_rates),
            transition_rows=pick(self.transition_rows),
            posteriors=pick(self.posteriors),
        )


def _log_gaussian_diag(X: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    diff = X - mean
    return -0.5 * (np.log(2.0 * np.pi * var).sum() + (diff * diff / var).sum(axis=1))


def mixture_posteriors(spec: GaussianMixtureSpec, X) -> np.ndarray:
    """Exact class posteriors of the mixture at each row of X; rows sum to 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_features:
        raise InputError("X must be (n, d) matching the mixture")
    if not np.all(np.isfinite(X)):
        raise InputError("non-finite features")
    logp = np.stack(
        [np.log(spec.priors[c]) + _log_gaussian_diag(X, spec.means[c], spec.variances[c])
         for c in range(spec.n_classes)],
        axis=1,
    )
    shifted = logp - logp.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def oracle_clean_posterior(spec: GaussianMixtureSpec, x) -> np.ndarray:
    """Posterior at a single point."""
    return mixture_posteriors(spec, np.asarray(x, dtype=np.float64)[None, :])[0]


def generate_mixture(spec: GaussianMixtureSpec, n: int, seed: int) -> LabeledDataset:
    """Draw n labeled points; stores exact posteriors and argmax Bayes labels."""
    if n <= 0:
        raise ConfigError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.choice(spec.n_classes, size=n, p=spec.priors)
    noise = rng.standard_normal((n, spec.n_features))
    X = spec.means[labels] + np.sqrt(spec.variances[labels]) * noise
    post = mixture_posteriors(spec, X)
    return LabeledDataset(
        features=X,
        clean_labels=labels,
        bayes_labels=post.argmax(axis=1),
        n_classes=spec.n_classes,
        posteriors=post,
    )


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def sample_truncated_normal(mean: float, sd: float, lo: float, hi: float,
                            rng: np.random.Generator) -> float:
    """Rejection sampling from N(mean, sd^2) restricted to [lo, hi]."""
    if not (lo < hi) or sd <= 0:
        raise ConfigError("need lo < hi and sd > 0")
    mass = _phi((hi - mean) / sd) - _phi((lo - mean) / sd)
    if mass < 1e-6:
        raise ConfigError(f"interval [{lo}, {hi}] carries negligible mass ({mass:.2e})")
    while True:
        draw = mean + sd * rng.standard_normal()
        if lo <= draw <= hi:
            return float(draw)


def class_projections(cfg: NoiseGenConfig, n_classes: int, n_features: int) -> np.ndarray:
    """Standard-normal projection stack, one (d, C) matrix per clean class."""
    rng = np.random.default_rng(cfg.projection_seed)
    return rng.standard_normal((n_classes, n_features, n_classes))


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    # One stream per (seed, row) pair: draws cannot depend on row order.
    return np.random.default_rng([seed, index])


def _transition_row(x: np.ndarray, label: int, q: float, proj: np.ndarray) -> np.ndarray:
    scores = x @ proj[label]
    scores[label] = -np.inf
    row = q * softmax(scores)
    row[label] = 1.0 - q
    return row


def inject_idn_noise(clean: LabeledDataset, cfg: NoiseGenConfig) -> LabeledDataset:
    """Returns a copy of `clean` with noisy labels, flip rates, and generating rows."""
    if clean.n_classes < 2:
        raise ConfigError("need at least two classes to inject label noise")
    if not np.all(np.isfinite(clean.features)):
        raise InputError("non-finite features")
    n, d = clean.features.shape
    C = clean.n_classes
    proj = class_projections(cfg, C, d)
    noisy = np.empty(n, dtype=np.int64)
    rates = np.empty(n)
    rows = np.empty((n, C))
    for i in range(n):
        q = sample_truncated_normal(cfg.noise_rate, cfg.rate_sd, 0.0, cfg.rate_bound,
                                    _instance_rng(cfg.rate_seed, i))
        row = _transition_row(clean.features[i], int(clean.clean_labels[i]), q, proj)
        u = _instance_rng(cfg.flip_seed, i).random()
        noisy[i] = min(int(np.searchsorted(np.cumsum(row), u, side="right")), C - 1)
        rates[i] = q
        rows[i] = row
    return replace(clean, noisy_labels=noisy, flip_rates=rates, transition_rows=rows)


def generating_transition_matrices(ds: LabeledDataset, cfg: NoiseGenConfig) -> np.ndarray:
    """All C rows of the generating matrix per instance, from stored flip rates."""
    if ds.flip_rates is None:
        raise InputError("dataset has no stored flip rates; inject noise first")
    n, d = ds.features.shape
    C = ds.n_classes
    proj = class_projections(cfg, C, d)
    out = np.empty((n, C, C))
    for i in range(n):
        for c in range(C):
            out[i, c] = _transition_row(ds.features[i], c, float(ds.flip_rates[i]), proj)
    return out


def oracle_noisy_posteriors(ds: LabeledDataset, cfg: NoiseGenConfig) -> np.ndarray:
    """Exact noisy-label posteriors: clean posterior pushed through the generating matrix."""
    if ds.posteriors is None:
        raise InputError("dataset has no stored clean posteriors")
    mats = generating_transition_matrices(ds, cfg)
    return np.einsum("nc,ncj->nj", ds.posteriors, mats)


def _fmt(value: float) -> str:
    return FLOAT_FMT % value


def dataset_columns(ds: LabeledDataset) -> list[str]:
    d, C = ds.n_features, ds.n_classes
    cols = [f"x{j}" for j in range(d)] + ["y", "y_star"]
    if ds.noisy_labels is not None:
        cols.append("y_tilde")
    if ds.flip_rates is not None:
        cols.append("q")
    if ds.transition_rows is not None:
        cols += [f"t_row_{j}" for j in range(C)]
    if ds.posteriors is not None:
        cols += [f"post_{j}" for j in range(C)]
    return cols


def save_dataset_csv(ds: LabeledDataset, path, digest: str | None = None) -> None:
    """Writes floats with 17 significant digits so load() is bit-identical."""
    with open(path, "w", newline="") as fh:
        if digest is not None:
            fh.write(f"# config_digest={digest}\n")
        fh.write(f"# n_classes={ds.n_classes}\n")
        writer = csv.writer(fh)
        writer.writerow(dataset_columns(ds))
        for i in range(len(ds)):
            row = [_fmt(v) for v in ds.features[i]]
            row += [str(int(ds.clean_labels[i])), str(int(ds.bayes_labels[i]))]
            if ds.noisy_labels is not None:
                row.append(str(int(ds.noisy_labels[i])))
            if ds.flip_rates is not None:
                row.append(_fmt(ds.flip_rates[i]))
            if ds.transition_rows is not None:
                row += [_fmt(v) for v in ds.transition_rows[i]]
            if ds.posteriors is not None:
                row += [_fmt(v) for v in ds.posteriors[i]]
            writer.writerow(row)


def _read_csv_with_comments(path):
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                text = line[1:].strip()
                if "=" in text:
                    key, _, value = text.partition("=")
                    meta[key.strip()] = value.strip()
                continue
            rows.append((lineno, line.rstrip("\n")))
    if not rows:
        raise ParseError("empty file", line=0)
    parsed = [(lineno, next(csv.reader([text]))) for lineno, text in rows if text != ""]
    return meta, parsed[0], parsed[1:]


def load_dataset_csv(path) -> LabeledDataset:
    meta, (header_line, header), body = _read_csv_with_comments(path)
    idx = 0
    d = 0
    while idx < len(header) and header[idx] == f"x{d}":
        idx += 1
        d += 1
    if d == 0:
        raise ParseError("expected leading x0..x{d-1} columns", line=header_line, column="x0")
    def expect(name: str) -> bool:
        nonlocal idx
        if idx < len(header) and header[idx] == name:
            idx += 1
            return True
        return False
    if not expect("y"):
        raise ParseError("missing required column", line=header_line, column="y")
    if not expect("y_star"):
        raise ParseError("missing required column", line=header_line, column="y_star")
    has_noisy = expect("y_tilde")
    has_rates = expect("q")
    t_cols = 0
    while expect(f"t_row_{t_cols}"):
        t_cols += 1
    p_cols = 0
    while expect(f"post_{p_cols}"):
        p_cols += 1
    if idx != len(header):
        raise ParseError("unexpected column", line=header_line, column=header[idx])
    if t_cols and p_cols and t_cols != p_cols:
        raise ParseError("t_row_* and post_* widths disagree", line=header_line)
    C = t_cols or p_cols
    if "n_classes" in meta:
        declared = int(meta["n_classes"])
        if C and declared != C:
            raise ParseError(f"n_classes={declared} disagrees with column groups", line=header_line)
        C = declared

    n = len(body)
    width = len(header)
    features = np.empty((n, d))
    clean = np.empty(n, dtype=np.int64)
    bayes = np.empty(n, dtype=np.int64)
    noisy = np.empty(n, dtype=np.int64) if has_noisy else None
    rates = np.empty(n) if has_rates else None
    t_rows = np.empty((n, t_cols)) if t_cols else None
    posts = np.empty((n, p_cols)) if p_cols else None
    for r, (lineno, cells) in enumerate(body):
        if len(cells) != width:
            raise ParseError(f"row has {len(cells)} cells, expected {width}", line=lineno)
        try:
            j = 0
            features[r] = [float(c) for c in cells[:d]]
            j = d
            clean[r] = int(cells[j]); j += 1
            bayes[r] = int(cells[j]); j += 1
            if has_noisy:
                noisy[r] = int(cells[j]); j += 1
            if has_rates:
                rates[r] = float(cells[j]); j += 1
            if t_cols:
                t_rows[r] = [float(c) for c in cells[j:j + t_cols]]
                j += t_cols
            if p_cols:
                posts[r] = [float(c) for c in cells[j:j + p_cols]]
        except ValueError as err:
            raise ParseError(f"unparseable cell: {err}", line=lineno) from err
    if not C:
        labels = [clean, bayes] + ([noisy] if noisy is not None else [])
        C = int(max(l.max() for l in labels)) + 1 if n else 1
    return LabeledDataset(
        features=features, clean_labels=clean, bayes_labels=bayes, n_classes=C,
        noisy_labels=noisy, flip_rates=rates, transition_rows=t_rows, posteriors=posts,
    )
