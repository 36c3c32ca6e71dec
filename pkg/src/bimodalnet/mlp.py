"""Uni-modal sigmoid towers and their exact backward pass.

A tower is a stack of sigmoid layers

    h_l = sigmoid(W_l^T v_l + b_l),   v_l = h_{l-1},   h_0 = x,

with ``weights[l]`` of shape ``(K_l, K_{l+1})``. The last post-activation is
the tower's feature vector ``v_L``, consumed either by a fusion/bilinear head
or by a standalone softmax output layer.

All forward/backward code accepts a single input (1-D) or a batch of row
vectors (2-D) through the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError

DEFAULT_INIT_SCALE = 0.05

HIDDEN_FEATURES = "hidden-features"
STANDALONE_SOFTMAX = "standalone-softmax"
OUTPUT_MODES = (HIDDEN_FEATURES, STANDALONE_SOFTMAX)


def sigmoid(u) -> np.ndarray:
    """Componentwise 1 / (1 + exp(-u)), stable for |u| well past 700."""
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def sigmoid_prime(u) -> np.ndarray:
    """sigma'(u) = sigma(u) * (1 - sigma(u)), evaluated from the pre-activation."""
    s = sigmoid(u)
    return s * (1.0 - s)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-logit subtraction (1-D input gives 1-D output)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MlpTower:
    """Sigmoid stack with layer dims ``K_0 .. K_L`` (``K_0`` = input dim)."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_mode: str = HIDDEN_FEATURES

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output_mode {self.output_mode!r}")
        dims = self.layer_dims
        if len(dims) < 2:
            raise ValueError("a tower needs an input dim and at least one layer")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("weights/biases count does not match layer_dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l], dims[l + 1]) or b.shape != (dims[l + 1],):
                raise ShapeError(
                    f"layer {l}: expected W {(dims[l], dims[l + 1])} b {(dims[l + 1],)}, "
                    f"got W {w.shape} b {b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def copy(self) -> "MlpTower":
        return MlpTower(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_mode,
        )


@dataclass
class ForwardTrace:
    """Input plus per-layer pre-activations ``u_l`` and post-activations ``h_l``."""

    x: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def features(self) -> np.ndarray:
        return self.post[-1]


@dataclass
class TowerGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    delta_input: np.ndarray


def init_tower(layer_dims, seed, scale: float = DEFAULT_INIT_SCALE,
               output_mode: str = HIDDEN_FEATURES) -> MlpTower:
    """Seeded uniform [-scale, scale] weights, zero biases.

    Identical (layer_dims, seed, scale) give a bit-identical tower.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError("layer_dims must list the input dim and at least one layer")
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer dims must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    weights = [rng.uniform(-scale, scale, size=(dims[l], dims[l + 1]))
               for l in range(len(dims) - 1)]
    biases = [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)]
    return MlpTower(dims, weights, biases, output_mode)


def forward(tower: MlpTower, x) -> ForwardTrace:
    """Run the tower, keeping every pre/post-activation for the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != tower.input_dim:
        raise ShapeError(
            f"input dim {x.shape[-1]} does not match tower input {tower.input_dim}"
        )
    pre, post = [], []
    h = x
    for w, b in zip(tower.weights, tower.biases):
        u = h @ w + b
        h = sigmoid(u)
        pre.append(u)
        post.append(h)
    return ForwardTrace(x, pre, post)


def backward(tower: MlpTower, trace: ForwardTrace, delta_top) -> TowerGradients:
    """Gradients of a scalar objective E from delta_top = dE/d(features).

    Follows the ascent convention: the returned arrays are dE/dW_l, dE/db_l
    and dE/dx. The delta recursion applies sigma'(u_l) before projecting
    through W_l; this placement is pinned by the finite-difference suite.
    For a batched trace, gradients are summed over rows, so pre-scale
    delta_top by 1/B to get batch means.
    """
    delta = np.asarray(delta_top, dtype=np.float64)
    if delta.shape != trace.post[-1].shape:
        raise ShapeError(
            f"delta_top shape {delta.shape} does not match features {trace.post[-1].shape}"
        )
    n = tower.num_layers
    grad_w: list[np.ndarray] = [np.empty(0)] * n
    grad_b: list[np.ndarray] = [np.empty(0)] * n
    for l in reversed(range(n)):
        s = sigmoid_prime(trace.pre[l]) * delta  # dE/du_l
        h_prev = trace.x if l == 0 else trace.post[l - 1]
        if s.ndim == 1:
            grad_w[l] = np.outer(h_prev, s)
            grad_b[l] = s.copy()
        else:
            grad_w[l] = h_prev.T @ s
            grad_b[l] = s.sum(axis=0)
        delta = s @ tower.weights[l].T
    return TowerGradients(grad_w, grad_b, delta)


@dataclass
class SoftmaxLayer:
    """Linear softmax output layer: p = softmax(W^T f + b)."""

    weights: np.ndarray  # (K, C)
    bias: np.ndarray     # (C,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"softmax layer shapes disagree: W {self.weights.shape} b {self.bias.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "SoftmaxLayer":
        return SoftmaxLayer(self.weights.copy(), self.bias.copy())

    def probabilities(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.shape[-1] != self.input_dim:
            raise ShapeError(
                f"feature dim {f.shape[-1]} does not match layer input {self.input_dim}"
            )
        return softmax(f @ self.weights + self.bias)

    def gradients(self, features, delta):
        """dE/dW, dE/db and dE/d(features) from delta = dE/d(logits), batch rows."""
        grad_w = features.T @ delta
        grad_b = delta.sum(axis=0)
        delta_features = delta @ self.weights.T
        return grad_w, grad_b, delta_features


def init_softmax_layer(input_dim: int, num_classes: int, seed,
                       scale: float = DEFAULT_INIT_SCALE) -> SoftmaxLayer:
    rng = np.random.default_rng(seed)
    return SoftmaxLayer(
        rng.uniform(-scale, scale, size=(input_dim, num_classes)),
        np.zeros(num_classes),
    )


def target_delta(probs: np.ndarray, targets: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Softmax/cross-entropy error signal (t - p) * scale, batch rows."""
    delta = -probs
    delta[np.arange(probs.shape[0]), targets] += 1.0
    if scale != 1.0:
        delta *= scale
    return delta


class UnimodalClassifier:
    """One sigmoid tower plus a softmax output layer, reading a single modality."""

    kind = "unimodal"

    def __init__(self, tower: MlpTower, out: SoftmaxLayer, modality: int = 1,
                 seed: int = 0, arch: str = ""):
        if out.input_dim != tower.feature_dim:
            raise ShapeError(
                f"output layer input {out.input_dim} does not match tower "
                f"feature dim {tower.feature_dim}"
            )
        if modality not in (1, 2):
            raise ValueError(f"modality must be 1 or 2, got {modality}")
        self.tower = tower
        self.out = out
        self.modality = modality
        self.seed = seed
        self.arch = arch

    @property
    def num_classes(self) -> int:
        return self.out.num_classes

    def _input(self, x1, x2):
        return np.asarray(x1 if self.modality == 1 else x2, dtype=np.float64)

    def posterior_batch(self, x1, x2) -> np.ndarray:
        trace = forward(self.tower, self._input(x1, x2))
        return self.out.probabilities(trace.features)

    def posterior(self, x1, x2) -> np.ndarray:
        return self.posterior_batch(
            np.atleast_2d(np.asarray(x1, dtype=np.float64)),
            np.atleast_2d(np.asarray(x2, dtype=np.float64)),
        )[0]

    def params(self) -> dict[str, np.ndarray]:
        named: dict[str, np.ndarray] = {}
        for l, (w, b) in enumerate(zip(self.tower.weights, self.tower.biases)):
            named[f"tower.W{l}"] = w
            named[f"tower.b{l}"] = b
        named["out.W"] = self.out.weights
        named["out.b"] = self.out.bias
        return named

    def trainable_params(self) -> dict[str, np.ndarray]:
        return self.params()

    def project_names(self) -> tuple[str, ...]:
        return ()

    def loglik_and_grads(self, x1, x2, targets):
        """Mean log-likelihood over the batch and its gradient per parameter."""
        x = self._input(x1, x2)
        targets = np.asarray(targets)
        trace = forward(self.tower, x)
        probs = self.out.probabilities(trace.features)
        n = probs.shape[0]
        loglik = float(np.log(np.maximum(probs[np.arange(n), targets], 1e-300)).mean())
        delta = target_delta(probs, targets, 1.0 / n)
        grad_w, grad_b, delta_features = self.out.gradients(trace.features, delta)
        tg = backward(self.tower, trace, delta_features)
        grads = {f"tower.W{l}": g for l, g in enumerate(tg.weights)}
        grads.update({f"tower.b{l}": g for l, g in enumerate(tg.biases)})
        grads["out.W"] = grad_w
        grads["out.b"] = grad_b
        return loglik, grads
