"""Feed-forward network core: parameters, losses, exact gradients, optimizers.

Everything is float64 numpy and purely functional: training loops that fix
their seeds are bit-reproducible on a given platform. Networks are ReLU MLPs
with an identity output layer; probabilities come from a row-wise softmax.
Log arguments are clamped to [1e-12, 1] so empty-support targets produce a
large finite loss instead of -inf, and gradients are taken through the clamp
so they match finite differences of the implemented loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, InputError, NumericError

LOG_FLOOR = 1e-12
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "identity")


def _as_float64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass
class NetworkParams:
    """Dense-layer weights (out x in), biases (out,), and activation tags."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ConfigError("weights and biases must be non-empty lists of equal length")
        self.weights = [_as_float64(w) for w in self.weights]
        self.biases = [_as_float64(b) for b in self.biases]
        if not self.activations:
            self.activations = ["relu"] * (len(self.weights) - 1) + ["identity"]
        if len(self.activations) != len(self.weights):
            raise ConfigError("need one activation tag per layer")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ConfigError(f"layer {k}: weight must be (out, in) and bias (out,)")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ConfigError(f"layer {k}: input width {w.shape[1]} does not match previous output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigError(f"layer {k}: non-finite parameter")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_dims(self) -> list[int]:
        return [self.n_inputs] + [w.shape[0] for w in self.weights]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


@dataclass
class Gradients:
    """Per-layer gradients congruent with a NetworkParams instance."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def check_congruent(self, params: NetworkParams) -> None:
        ok = len(self.weights) == len(params.weights) and all(
            gw.shape == w.shape and gb.shape == b.shape
            for gw, gb, w, b in zip(self.weights, self.biases, params.weights, params.biases)
        )
        if not ok:
            raise ConfigError("gradient shapes do not match parameters")

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([factor * w for w in self.weights], [factor * b for b in self.biases])


def zeros_like_params(params: NetworkParams) -> Gradients:
    return Gradients(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def init_params(layer_dims: list[int], seed, activations: list[str] | None = None) -> NetworkParams:
    """Glorot-uniform weights, zero biases, deterministic under the seed."""
    if len(layer_dims) < 2 or any(int(d) <= 0 for d in layer_dims):
        raise ConfigError("layer_dims needs at least [n_in, n_out] with positive widths")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases, activations or [])


@dataclass
class Batch:
    """Inputs (n, d), probability-row targets (n, C), optional weights (n,)."""

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = _as_float64(self.inputs)
        self.targets = _as_float64(self.targets)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise InputError("inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise InputError("inputs and targets disagree on n")
        if self.inputs.shape[0] == 0:
            raise InputError("empty batch")
        if not np.all(np.isfinite(self.inputs)):
            raise InputError("non-finite inputs")
        if np.any(self.targets < 0) or np.any(np.abs(self.targets.sum(axis=1) - 1.0) > 1e-9):
            raise InputError("target rows must be non-negative and sum to 1")
        if self.weights is None:
            self.weights = np.ones(self.inputs.shape[0])
        else:
            self.weights = _as_float64(self.weights)
            if self.weights.shape != (self.inputs.shape[0],):
                raise InputError("weights must have shape (n,)")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise InputError("labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def forward_cache(params: NetworkParams, inputs) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (logits, post-activation list including the input layer)."""
    inputs = _as_float64(inputs)
    if inputs.ndim != 2:
        raise InputError("inputs must be 2-D")
    if inputs.shape[1] != params.n_inputs:
        raise ConfigError(f"input width {inputs.shape[1]} does not match network ({params.n_inputs})")
    if not np.all(np.isfinite(inputs)):
        raise InputError("non-finite inputs")
    acts = [inputs]
    a = inputs
    for k, (w, b, tag) in enumerate(zip(params.weights, params.biases, params.activations)):
        z = a @ w.T + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation at layer {k}", layer=k)
        a = np.maximum(z, 0.0) if tag == "relu" else z
        acts.append(a)
    return acts[-1], acts


def forward_logits(params: NetworkParams, inputs) -> np.ndarray:
    return forward_cache(params, inputs)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = _as_float64(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_probs(params: NetworkParams, inputs) -> np.ndarray:
    """Softmax outputs; rows sum to 1 within float rounding."""
    return softmax(forward_logits(params, inputs))


def cross_entropy(probs: np.ndarray, batch: Batch) -> float:
    """Weighted mean over the batch of -sum_j target_j * log(clamped prob_j)."""
    probs = _as_float64(probs)
    if probs.shape != batch.targets.shape:
        raise InputError("probs and targets shapes differ")
    logp = np.log(np.clip(probs, LOG_FLOOR, 1.0))
    per_example = -(batch.targets * logp).sum(axis=1)
    return float((batch.weights * per_example).sum() / len(batch))


def corrected_probs(probs: np.ndarray, transition: np.ndarray) -> np.ndarray:
    """Mix output probabilities through per-instance matrices: m_j = sum_i p_i T_ij."""
    probs = _as_float64(probs)
    transition = _as_float64(transition)
    if transition.ndim != 3 or transition.shape[:2] != (probs.shape[0], probs.shape[1]):
        raise InputError("transition must have shape (n, C, C)")
    return np.einsum("ni,nij->nj", probs, transition)


def softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = (probs * dprobs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def backprop_logits(params: NetworkParams, acts: list[np.ndarray], dlogits: np.ndarray) -> Gradients:
    """Dense backward pass from a gradient w.r.t. the final logits."""
    grads = zeros_like_params(params)
    delta = dlogits
    for k in reversed(range(params.n_layers)):
        grads.weights[k] = delta.T @ acts[k]
        grads.biases[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ params.weights[k]
            if params.activations[k - 1] == "relu":
                delta = delta * (acts[k] > 0)
    return grads


def _dloss_dprobs(mixed: np.ndarray, batch: Batch) -> np.ndarray:
    # Gradient of the clamped log: zero where the floor is active.
    clamped = np.clip(mixed, LOG_FLOOR, 1.0)
    active = (mixed >= LOG_FLOOR).astype(np.float64)
    scale = batch.weights[:, None] / len(batch)
    return -scale * batch.targets / clamped * active


def grad_params(params: NetworkParams, batch: Batch, transition: np.ndarray | None = None) -> Gradients:
    """Analytic gradient of cross_entropy on softmax outputs.

    With `transition` set to per-instance (n, C, C) matrices the loss is the
    forward-corrected cross-entropy on the mixed probabilities; gradients flow
    through the matrix product into the network.
    """
    logits, acts = forward_cache(params, batch.inputs)
    probs = softmax(logits)
    if transition is None:
        dprobs = _dloss_dprobs(probs, batch)
    else:
        mixed = corrected_probs(probs, transition)
        dmixed = _dloss_dprobs(mixed, batch)
        dprobs = np.einsum("nj,nij->ni", dmixed, transition)
    dlogits = softmax_vjp(probs, dprobs)
    return backprop_logits(params, acts, dlogits)


@dataclass
class OptimizerState:
    """SGD-with-momentum or Adam state; step() is functional."""

    kind: str
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    velocity: Gradients | None = None
    first_moment: Gradients | None = None
    second_moment: Gradients | None = None
    step_count: int = 0

    @classmethod
    def sgd(cls, params: NetworkParams, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        return cls(kind="sgd", lr=lr, momentum=momentum, weight_decay=weight_decay,
                   velocity=zeros_like_params(params))

    @classmethod
    def adam(cls, params: NetworkParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        return cls(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
                   first_moment=zeros_like_params(params), second_moment=zeros_like_params(params))


def _iter_arrays(params: NetworkParams, grads: Gradients):
    for k in range(params.n_layers):
        yield ("w", k, params.weights[k], grads.weights[k])
        yield ("b", k, params.biases[k], grads.biases[k])


def optimizer_step(params: NetworkParams, grads: Gradients, state: OptimizerState):
    """One update; returns (new_params, new_state) leaving the inputs untouched."""
    grads.check_congruent(params)
    new = params.copy()
    if state.kind == "sgd":
        vel = Gradients([v.copy() for v in state.velocity.weights],
                        [v.copy() for v in state.velocity.biases])
        for tag, k, p, g in _iter_arrays(new, grads):
            g_eff = g + state.weight_decay * p
            store = vel.weights if tag == "w" else vel.biases
            store[k] = state.momentum * store[k] + g_eff
            p -= state.lr * store[k]
        new_state = OptimizerState(kind="sgd", lr=state.lr, momentum=state.momentum,
                                   weight_decay=state.weight_decay, velocity=vel,
                                   step_count=state.step_count + 1)
        return new, new_state
    if state.kind == "adam":
        m = Gradients([v.copy() for v in state.first_moment.weights],
                      [v.copy() for v in state.first_moment.biases])
        v = Gradients([w.copy() for w in state.second_moment.weights],
                      [w.copy() for w in state.second_moment.biases])
        t = state.step_count + 1
        bc1 = 1.0 - state.beta1 ** t
        bc2 = 1.0 - state.beta2 ** t
        for tag, k, p, g in _iter_arrays(new, grads):
            g_eff = g + state.weight_decay * p
            ms = m.weights if tag == "w" else m.biases
            vs = v.weights if tag == "w" else v.biases
            ms[k] = state.beta1 * ms[k] + (1.0 - state.beta1) * g_eff
            vs[k] = state.beta2 * vs[k] + (1.0 - state.beta2) * g_eff ** 2
            p -= state.lr * (ms[k] / bc1) / (np.sqrt(vs[k] / bc2) + state.eps)
        new_state = OptimizerState(kind="adam", lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                                   eps=state.eps, weight_decay=state.weight_decay,
                                   first_moment=m, second_moment=v, step_count=t)
        return new, new_state
    raise ConfigError(f"unknown optimizer kind {state.kind!r}")


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index chunks covering all n rows; the last chunk may be short."""
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def save_checkpoint(params: NetworkParams, path, extra: dict | None = None) -> None:
    """Versioned JSON with row-major weights; round-trips float64 exactly."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "layer_dims": params.layer_dims,
        "activations": list(params.activations),
        "weights": [w.reshape(-1).tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    if extra:
        for key in extra:
            if key in payload:
                raise ConfigError(f"extra checkpoint key {key!r} collides with the schema")
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> NetworkParams:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')!r}")
    dims = payload["layer_dims"]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        flat = np.asarray(payload["weights"][k], dtype=np.float64)
        if flat.size != fan_in * fan_out:
            raise ConfigError(f"layer {k}: weight payload does not match layer_dims")
        weights.append(flat.reshape(fan_out, fan_in))
        biases.append(np.asarray(payload["biases"][k], dtype=np.float64))
    return NetworkParams(weights, biases, list(payload["activations"]))
