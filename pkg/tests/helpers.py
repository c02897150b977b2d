"""Shared test utilities: parameter flattening and central finite differences."""

import numpy as np

from btlab import nn


def flatten_params(params: nn.NetworkParams) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.reshape(-1))
        parts.append(b)
    return np.concatenate(parts)


def assign_params(params: nn.NetworkParams, vec: np.ndarray) -> nn.NetworkParams:
    out = params.copy()
    pos = 0
    for k in range(out.n_layers):
        w = out.weights[k]
        out.weights[k] = vec[pos:pos + w.size].reshape(w.shape).copy()
        pos += w.size
        b = out.biases[k]
        out.biases[k] = vec[pos:pos + b.size].copy()
        pos += b.size
    return out


def flatten_grads(grads: nn.Gradients) -> np.ndarray:
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(w.reshape(-1))
        parts.append(b)
    return np.concatenate(parts)


def fd_gradient(loss_fn, params: nn.NetworkParams, eps: float = 1e-5) -> np.ndarray:
    """Central differences of loss_fn over every scalar parameter."""
    base = flatten_params(params)
    grad = np.empty(base.size)
    for j in range(base.size):
        up = base.copy()
        down = base.copy()
        up[j] += eps
        down[j] -= eps
        grad[j] = (loss_fn(assign_params(params, up))
                   - loss_fn(assign_params(params, down))) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # Central differences cannot resolve derivatives below roughly
    # ulp(loss) / (2 eps) ~ 1e-11, so entries where both gradients are
    # tiny measure pure roundoff; the denominator floor sits well above
    # that resolution limit while keeping any term-scale defect visible.
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_simplex_rows(rng: np.random.Generator, n: int, n_cols: int) -> np.ndarray:
    raw = rng.gamma(1.5, size=(n, n_cols)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


def random_stochastic_stack(rng: np.random.Generator, n: int, n_classes: int,
                            floor: float = 0.0) -> np.ndarray:
    """Random (n, C, C) row-stochastic matrices, optionally bounded away from 0."""
    raw = rng.gamma(1.5, size=(n, n_classes, n_classes)) + 1e-3
    mats = raw / raw.sum(axis=2, keepdims=True)
    if floor > 0.0:
        mats = (1.0 - n_classes * floor) * mats + floor
    return mats
