"""Small-tensor numerical core: convolution, pooling, activation, training step.

Two code paths exist on purpose.

* Inference (``conv2d_valid``, ``pool2``, ``forward``) runs in float32 and
  accumulates every output pixel in the same fixed order (input map, kernel
  row, kernel column) no matter how large the input is.  A response computed
  on a whole pyramid level is therefore bit-identical to the one computed on
  the cropped window, which the patchwork and dense-scan paths rely on.
* Training (``forward_batch``, ``backward_batch``, ``sgd_step``) runs in
  float64 on batches through im2col + BLAS and keeps the caches needed for
  backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .modelspec import ConvLayerWeights, ConvSpec, NetworkSpec, output_shape, receptive_field

SCALE = 1.7159
SLOPE = 2.0 / 3.0
QUARTIC = 1.41645


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def as_plane(image, dtype=np.float32) -> np.ndarray:
    """Validate and return a 2-D finite raster (rows = height)."""
    plane = np.asarray(image, dtype=dtype)
    if plane.ndim != 2:
        raise DimensionError(f"expected a 2-D plane, got shape {plane.shape}")
    if not np.all(np.isfinite(plane)):
        raise ValueError("plane contains non-finite intensities")
    return plane


# ------------------------------------------------------------- activation


def approx_tanh(y):
    """sgn(y) * (1 - 1 / (1 + |y| + y^2 + 1.41645 y^4)).

    Evaluated as sgn(y) * n / (1 + n) with n = |y| + y^2 + 1.41645 y^4,
    which equals the expression above without cancellation near zero.
    """
    y = np.asarray(y)
    # beyond 1e8 the ratio is exactly 1 in float32 and float64; the clamp keeps n finite
    a = np.minimum(np.abs(y), y.dtype.type(1e8) if y.dtype.kind == "f" else 1e8)
    a2 = a * a
    n = a + a2 + QUARTIC * (a2 * a2)
    r = n / (1 + n)
    return np.sign(y) * r


def activation(x):
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.dtype(np.float64)
    return dtype.type(SCALE) * approx_tanh(x.astype(dtype, copy=False) * dtype.type(SLOPE))


def activation_derivative(x):
    """d/dx of ``activation``; even in x and continuous at 0."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x) * SLOPE
    with np.errstate(over="ignore", invalid="ignore"):
        a2 = a * a
        d = 1 + a + a2 + QUARTIC * (a2 * a2)
        num = 1 + 2 * a + 4 * QUARTIC * a2 * a
        g = (num / d) / d
    g = np.where(a > 1e30, 0.0, g)
    return SCALE * SLOPE * g


# --------------------------------------------------------------- inference


def conv2d_valid(stack: np.ndarray, weights: ConvLayerWeights) -> np.ndarray:
    """Valid cross-correlation, stride 1, plus bias.  No activation.

    ``stack`` is (..., in_maps, H, W); the result is (..., out_maps, H-kh+1, W-kw+1).
    """
    x = np.asarray(stack, dtype=np.float32)
    k = np.asarray(weights.kernels, dtype=np.float32)
    b = np.asarray(weights.biases, dtype=np.float32)
    n_out, n_in, kh, kw = k.shape
    if x.ndim < 3 or x.shape[-3] != n_in:
        raise DimensionError(f"layer expects {n_in} input maps, got shape {x.shape}")
    h, w = x.shape[-2:]
    oh, ow = h - kh + 1, w - kw + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"input {w}x{h} smaller than kernel {kw}x{kh}")
    lead = x.shape[:-3]
    out = np.empty(lead + (n_out, oh, ow), np.float32)
    tmp = np.empty_like(out)
    first = True
    for c in range(n_in):
        plane = x[..., c:c + 1, :, :]
        for i in range(kh):
            for j in range(kw):
                np.multiply(k[:, c, i, j, None, None], plane[..., i:i + oh, j:j + ow], out=out if first else tmp)
                if not first:
                    out += tmp
                first = False
    out += b[:, None, None]
    return out


def pool2(stack: np.ndarray, mode: str = "max") -> np.ndarray:
    """Non-overlapping 2x2 pooling, stride 2, odd trailing row/column dropped."""
    x = np.asarray(stack)
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"cannot pool a {w}x{h} map")
    h2, w2 = h // 2, w // 2
    a = x[..., 0:2 * h2:2, 0:2 * w2:2]
    b = x[..., 0:2 * h2:2, 1:2 * w2:2]
    c = x[..., 1:2 * h2:2, 0:2 * w2:2]
    d = x[..., 1:2 * h2:2, 1:2 * w2:2]
    if mode == "max":
        return np.maximum(np.maximum(a, b), np.maximum(c, d))
    if mode == "mean":
        return ((a + b) + (c + d)) * x.dtype.type(0.25)
    raise ValueError(f"unknown pool mode {mode!r}")


def forward(image: np.ndarray, spec: NetworkSpec, weights) -> np.ndarray:
    """Run a network on one plane (H, W) or a batch (N, H, W); float32.

    Returns the final feature stack, (1, h, w) or (N, 1, h, w).
    """
    x = np.asarray(image, dtype=np.float32)
    if x.ndim not in (2, 3):
        raise DimensionError(f"expected (H, W) or (N, H, W), got {x.shape}")
    rw, rh = receptive_field(spec)
    if x.shape[-1] < rw or x.shape[-2] < rh:
        raise DimensionError(
            f"input {x.shape[-1]}x{x.shape[-2]} smaller than receptive field {rw}x{rh}"
        )
    x = x[..., None, :, :]
    wi = iter(weights)
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            x = activation(conv2d_valid(x, next(wi)))
        else:
            x = pool2(x, spec.pool_mode)
    return x


def response_map(image: np.ndarray, spec: NetworkSpec, weights) -> np.ndarray:
    """Single-map shortcut: the (h, w) response plane of ``forward``."""
    return forward(image, spec, weights)[..., 0, :, :]


# ---------------------------------------------------------------- training


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, C, H, W) -> (N, C, oh, ow, kh, kw) view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def _conv_batch(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    cols = _im2col(x, k.shape[2], k.shape[3])
    out = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3]))  # (N, oh, ow, O)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _pool_batch(x: np.ndarray, mode: str):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    if mode == "max":
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, idx
    return blocks.mean(axis=(3, 5)), None


def _unpool_batch(grad: np.ndarray, idx, shape, mode: str) -> np.ndarray:
    n, c, h, w = shape
    h2, w2 = grad.shape[2:]
    full = np.zeros(shape, grad.dtype)
    if mode == "max":
        flat = np.zeros((n, c, h2, w2, 4), grad.dtype)
        np.put_along_axis(flat, idx[..., None], grad[..., None], axis=-1)
        block = flat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    else:
        block = np.broadcast_to(grad[:, :, :, None, :, None] / 4.0, (n, c, h2, 2, w2, 2))
    full[:, :, :2 * h2, :2 * w2] = block.reshape(n, c, 2 * h2, 2 * w2)
    return full


def forward_batch(batch: np.ndarray, spec: NetworkSpec, weights):
    """float64 forward on (N, H, W); returns (outputs (N, 1, h, w), cache)."""
    x = np.asarray(batch, dtype=np.float64)[:, None, :, :]
    cache = []
    wi = iter(weights)
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            w = next(wi)
            pre = _conv_batch(x, np.asarray(w.kernels, np.float64), np.asarray(w.biases, np.float64))
            cache.append(("conv", x, pre))
            x = activation(pre)
        else:
            out, idx = _pool_batch(x, spec.pool_mode)
            cache.append(("pool", x.shape, idx))
            x = out
    return x, cache


def backward_batch(grad_out: np.ndarray, spec: NetworkSpec, weights, cache) -> list[ConvLayerWeights]:
    """Gradients of a scalar loss wrt every kernel and bias, given dL/d(output)."""
    grads = []
    conv_weights = list(weights)
    wi = len(conv_weights)
    g = grad_out
    for entry in reversed(cache):
        if entry[0] == "conv":
            _, x_in, pre = entry
            wi -= 1
            k = np.asarray(conv_weights[wi].kernels, np.float64)
            g = g * activation_derivative(pre)
            cols = _im2col(x_in, k.shape[2], k.shape[3])
            dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
            db = g.sum(axis=(0, 2, 3))
            grads.append(ConvLayerWeights(dk, db))
            if entry is not cache[0]:
                kh, kw = k.shape[2:]
                padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                pcols = _im2col(padded, kh, kw)  # (N, O, H, W, kh, kw)
                flipped = k[:, :, ::-1, ::-1]
                g = np.tensordot(pcols, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        else:
            _, shape, idx = entry
            g = _unpool_batch(g, idx, shape, spec.pool_mode)
    grads.reverse()
    return grads


def mse_loss(batch, targets, spec, weights):
    """Mean squared error between every final response cell and its ±1 target."""
    out, cache = forward_batch(batch, spec, weights)
    t = np.asarray(targets, np.float64).reshape(-1, 1, 1, 1)
    diff = out - t
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / diff.size, cache


@dataclass
class SGDState:
    """Momentum buffers matching a weight list."""

    velocity: list[ConvLayerWeights]

    @classmethod
    def zeros_like(cls, weights) -> "SGDState":
        return cls([ConvLayerWeights(np.zeros_like(w.kernels, np.float64),
                                     np.zeros_like(w.biases, np.float64)) for w in weights])


def gradients(batch, targets, spec, weights):
    loss, grad_out, cache = mse_loss(batch, targets, spec, weights)
    return loss, backward_batch(grad_out, spec, weights, cache)


def sgd_step(batch, targets, spec: NetworkSpec, weights, lr: float, momentum: float = 0.9,
             state: SGDState | None = None):
    """One momentum-SGD step on the MSE loss.

    Returns ``(new_weights, loss_before_update, state)``.  Every sample must be
    exactly the network's receptive field and every target must be +1 or -1.
    """
    batch = np.asarray(batch, np.float64)
    rw, rh = receptive_field(spec)
    if batch.ndim != 3 or batch.shape[1:] != (rh, rw):
        raise DimensionError(f"samples must be {rw}x{rh}, got batch shape {batch.shape}")
    targets = np.asarray(targets, np.float64)
    if targets.shape != (batch.shape[0],) or not np.all(np.abs(targets) == 1):
        raise ValueError("targets must be one +1/-1 label per sample")
    if state is None:
        state = SGDState.zeros_like(weights)
    loss, grads = gradients(batch, targets, spec, weights)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g.kernels)) for g in grads):
        raise TrainingError(f"non-finite loss {loss}")
    new_w, new_v = [], []
    for w, v, g in zip(weights, state.velocity, grads):
        vk = momentum * v.kernels - lr * g.kernels
        vb = momentum * v.biases - lr * g.biases
        new_v.append(ConvLayerWeights(vk, vb))
        new_w.append(ConvLayerWeights(np.asarray(w.kernels, np.float64) + vk,
                                      np.asarray(w.biases, np.float64) + vb))
    if not all(np.all(np.isfinite(w.kernels)) and np.all(np.isfinite(w.biases)) for w in new_w):
        raise TrainingError("weights diverged to non-finite values")
    return new_w, loss, SGDState(new_v)


def predict_batch(batch, spec, weights, chunk: int = 2048) -> np.ndarray:
    """float32 inference over many RF-sized samples; one response per sample."""
    outs = []
    batch = np.asarray(batch, np.float32)
    for s in range(0, len(batch), chunk):
        outs.append(forward(batch[s:s + chunk], spec, weights)[:, 0, 0, 0])
    return np.concatenate(outs) if outs else np.zeros(0, np.float32)


def check_forward_shape(spec: NetworkSpec, width: int, height: int) -> tuple[int, int]:
    w, h = output_shape(spec, width, height)
    if w < 1 or h < 1:
        raise DimensionError(f"input {width}x{height} too small for network")
    return w, h
