"""Plain ReLU multilayer perceptron machinery on flat parameter vectors.

Shared by the geometric network core and the hypernetwork.  Layers are the
affine maps between consecutive widths; ReLU is applied after every affine
map except the last.  The flat layout is layer-major: weights row-major,
then the bias, for each layer in order.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .rng import stream


def mlp_param_count(widths) -> int:
    return int(sum(widths[j + 1] * (1 + widths[j]) for j in range(len(widths) - 1)))


def unpack_mlp(theta: np.ndarray, widths):
    """Flat slice -> [(A_0, b_0), ...]; views into theta, no copies."""
    theta = np.asarray(theta)
    if theta.shape != (mlp_param_count(widths),):
        raise DimensionError(
            f"parameter length {theta.shape} does not match widths {list(widths)}"
        )
    layers = []
    off = 0
    for j in range(len(widths) - 1):
        n_in, n_out = widths[j], widths[j + 1]
        a = theta[off : off + n_out * n_in].reshape(n_out, n_in)
        off += n_out * n_in
        b = theta[off : off + n_out]
        off += n_out
        layers.append((a, b))
    return layers


def pack_mlp(layers) -> np.ndarray:
    parts = []
    for a, b in layers:
        parts.append(np.asarray(a, float).reshape(-1))
        parts.append(np.asarray(b, float).reshape(-1))
    return np.concatenate(parts)


def init_mlp(widths, seed: int) -> np.ndarray:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    gen = stream(seed, "mlp-init")
    parts = []
    for j in range(len(widths) - 1):
        n_in, n_out = widths[j], widths[j + 1]
        bound = np.sqrt(6.0 / (n_in + n_out))
        parts.append(bound * (2.0 * gen.random(n_out * n_in) - 1.0))
        parts.append(np.zeros(n_out))
    return np.concatenate(parts)


def mlp_forward(layers, x: np.ndarray, want_cache: bool = False):
    """Forward pass on inputs (B, d_in); returns outputs (B, d_out).

    With want_cache, also returns per-layer (input, pre-activation) pairs
    for the backward pass.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    cache = []
    n_layers = len(layers)
    for j, (a, b) in enumerate(layers):
        z = h @ a.T + b
        if want_cache:
            cache.append((h, z))
        h = np.maximum(z, 0.0) if j < n_layers - 1 else z
    return (h, cache) if want_cache else h


def mlp_backward(layers, cache, grad_out: np.ndarray):
    """Backward pass for the (batch-summed) output cotangent grad_out (B, d_out).

    Returns (flat gradient over layer parameters, gradient wrt the input).
    """
    g = np.asarray(grad_out, dtype=np.float64)
    grads = [None] * len(layers)
    for j in range(len(layers) - 1, -1, -1):
        a, _ = layers[j]
        h_in, z = cache[j]
        if j < len(layers) - 1:
            g = g * (z > 0.0)  # undo the ReLU that followed this layer
        grads[j] = (g.T @ h_in, g.sum(axis=0))
        g = g @ a
    return pack_mlp(grads), g
