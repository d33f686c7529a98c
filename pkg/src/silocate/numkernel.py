"""Dense-network numeric kernel in float64.

Layers, activations, losses and hand-written backpropagation. Everything
works on plain numpy arrays so that parameter buffers stay directly
readable and writable (the federation layer averages them in place).

Inputs may be a single vector of shape ``(d,)`` or a batch of row vectors
of shape ``(n, d)``; outputs follow the input's rank.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"
    SIGMOID = "sigmoid"


@dataclass
class LayerParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weight.copy(), self.bias.copy(), self.activation)


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray


GradientSet = list  # list[LayerGrad], one per layer


@dataclass
class LayerCache:
    inputs: np.ndarray  # (n, in)
    pre: np.ndarray  # (n, out)
    post: np.ndarray  # (n, out)


@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}"
            )
        if not np.all(np.isfinite(self.log_var)):
            raise ValueError("log_var entries must be finite")


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def _activate(kind: Activation, pre: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(pre, 0.0)
    if kind is Activation.SIGMOID:
        return sigmoid(pre)
    return pre


def _activation_grad(kind: Activation, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (pre > 0).astype(np.float64)
    if kind is Activation.SIGMOID:
        return post * (1.0 - post)
    return np.ones_like(pre)


def layer_forward(layer: LayerParams, inputs: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    """Apply one layer to a batch ``(n, in)``."""
    if inputs.ndim != 2 or inputs.shape[1] != layer.n_in:
        raise ShapeError(f"expected input width {layer.n_in}, got shape {inputs.shape}")
    pre = inputs @ layer.weight.T + layer.bias
    post = _activate(layer.activation, pre)
    return post, LayerCache(inputs, pre, post)


def layer_backward(
    layer: LayerParams, cache: LayerCache, out_grad: np.ndarray
) -> tuple[LayerGrad, np.ndarray]:
    if out_grad.shape != cache.post.shape:
        raise ShapeError(
            f"output grad shape {out_grad.shape} does not match cached output {cache.post.shape}"
        )
    dpre = out_grad * _activation_grad(layer.activation, cache.pre, cache.post)
    grad = LayerGrad(dpre.T @ cache.inputs, dpre.sum(axis=0))
    return grad, dpre @ layer.weight


def mlp_forward(
    layers: Sequence[LayerParams], inputs
) -> tuple[np.ndarray, list[LayerCache]]:
    """Run ``inputs`` through ``layers``; returns the output and a cache for backprop."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    caches = []
    for i, layer in enumerate(layers):
        if a.shape[1] != layer.n_in:
            raise ShapeError(
                f"layer {i}: expected input width {layer.n_in}, got {a.shape[1]}"
            )
        a, cache = layer_forward(layer, a)
        caches.append(cache)
    return (a[0] if single else a), caches


def mlp_backward(
    layers: Sequence[LayerParams], caches: Sequence[LayerCache], output_grad
) -> tuple[GradientSet, np.ndarray]:
    """Backpropagate ``output_grad`` through ``layers`` using the forward ``caches``."""
    if len(caches) != len(layers):
        raise ShapeError(f"{len(layers)} layers but {len(caches)} cached activations")
    g = np.asarray(output_grad, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    grads: list[LayerGrad] = [None] * len(layers)  # type: ignore[list-item]
    for i in reversed(range(len(layers))):
        if caches[i].post.shape != g.shape:
            raise ShapeError(
                f"layer {i}: gradient shape {g.shape} vs cached output {caches[i].post.shape}"
            )
        grads[i], g = layer_backward(layers[i], caches[i], g)
    return grads, (g[0] if single else g)


def _check_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ValueError("loss of an empty vector is undefined")


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(pred, target)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def bce_loss(pred_prob, target) -> tuple[float, np.ndarray]:
    """Binary cross-entropy with probabilities clamped to ``[eps, 1-eps]``.

    The returned gradient is with respect to the unclamped probabilities, so
    it is zero wherever the clamp is active.
    """
    pred = np.asarray(pred_prob, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(pred, target)
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("BCE targets must be 0 or 1")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    inside = (pred > BCE_EPS) & (pred < 1.0 - BCE_EPS)
    grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0) / pred.size
    return float(np.mean(loss)), grad


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> float:
    """KL(q || p) for diagonal Gaussians, summed over dimensions."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    var_q = np.exp(q.log_var)
    var_p = np.exp(p.log_var)
    terms = 0.5 * (p.log_var - q.log_var + (var_q + (q.mean - p.mean) ** 2) / var_p - 1.0)
    # each term is >= 0 analytically; clip rounding noise near zero
    return float(max(np.sum(terms), 0.0))


def kl_diag_gaussian_grad(
    q_mean: np.ndarray, q_log_var: np.ndarray, p_mean: np.ndarray, p_log_var: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Elementwise KL(q||p) terms and their gradients w.r.t. q's mean and log-variance.

    ``p`` is treated as a constant.
    """
    var_q = np.exp(q_log_var)
    inv_var_p = np.exp(-p_log_var)
    diff = q_mean - p_mean
    terms = 0.5 * (p_log_var - q_log_var + (var_q + diff**2) * inv_var_p - 1.0)
    return terms, diff * inv_var_p, 0.5 * (var_q * inv_var_p - 1.0)


def sgd_update(
    params: Sequence[LayerParams], grads: GradientSet, eta: float
) -> list[LayerParams]:
    """Return new layers with ``w - eta * grad`` applied to every buffer."""
    if eta < 0:
        raise ValueError(f"learning rate must be non-negative, got {eta}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} layers but {len(grads)} gradients")
    out = []
    for i, (layer, g) in enumerate(zip(params, grads)):
        if g.weight.shape != layer.weight.shape or g.bias.shape != layer.bias.shape:
            raise ShapeError(f"layer {i}: gradient shape does not match parameters")
        out.append(
            LayerParams(layer.weight - eta * g.weight, layer.bias - eta * g.bias, layer.activation)
        )
    return out


def finite_diff_gradcheck(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-6,
    atol: float = 1e-9,
) -> float:
    """Max relative error between ``analytic`` and a central-difference gradient.

    ``loss_fn`` maps a flat parameter vector to a scalar. Relative error per
    coordinate is ``|a - n| / max(1e-12, |a| + |n|)``; coordinates whose
    absolute disagreement is below ``atol`` (the rounding floor of a central
    difference) count as exact.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise ShapeError(f"analytic grad shape {analytic.shape} != params {params.shape}")
    numeric = np.empty_like(params)
    work = params.copy()
    for i in range(params.size):
        orig = work.flat[i]
        work.flat[i] = orig + step
        up = loss_fn(work)
        work.flat[i] = orig - step
        down = loss_fn(work)
        work.flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite loss while perturbing coordinate {i}")
        numeric.flat[i] = (up - down) / (2.0 * step)
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    rel = np.abs(analytic - numeric) / denom
    rel = np.where(np.abs(analytic - numeric) <= atol, 0.0, rel)
    return float(rel.max(initial=0.0))


def flatten_layers(layers: Sequence[LayerParams]) -> np.ndarray:
    parts = []
    for layer in layers:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias)
    return np.concatenate(parts) if parts else np.zeros(0)


def flatten_grads(grads: GradientSet) -> np.ndarray:
    parts = []
    for g in grads:
        parts.append(g.weight.ravel())
        parts.append(g.bias)
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_into(layers: Sequence[LayerParams], vector: np.ndarray) -> None:
    """Overwrite the buffers of ``layers`` in place from a flat vector."""
    expected = sum(layer.weight.size + layer.bias.size for layer in layers)
    if vector.shape != (expected,):
        raise ShapeError(f"expected flat vector of length {expected}, got {vector.shape}")
    offset = 0
    for layer in layers:
        n = layer.weight.size
        layer.weight[...] = vector[offset : offset + n].reshape(layer.weight.shape)
        offset += n
        m = layer.bias.size
        layer.bias[...] = vector[offset : offset + m]
        offset += m
