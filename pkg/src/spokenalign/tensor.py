"""Dense layer kernels with forward/backward passes, SGD with momentum and a
finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects. Spatial layers take a single
``C x H x W`` input or a batch ``N x C x H x W``; fully connected layers take
``D`` or ``N x D``. Parameter gradients of batched calls are summed over the
batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")


def _as_batch(x, rank):
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def _unbatch(x, single):
    return x[0] if single else x


def gaussian_init(rng, shape, fan_in, dtype=np.float64):
    """Zero-mean Gaussian weights with standard deviation 1/sqrt(fan_in)."""
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


# -- convolution -------------------------------------------------------------

def conv_output_size(size, filt, pad, stride):
    return (size + 2 * pad - filt) // stride + 1


def _conv_check(x, filters, bias, pad_h, pad_w, stride_h, stride_w):
    if filters.ndim != 4:
        raise ShapeError(f"filters must be C_out x C_in x FH x FW, got {filters.shape}")
    c_out, c_in, fh, fw = filters.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if stride_h < 1 or stride_w < 1:
        raise ShapeError("strides must be >= 1")
    if pad_h < 0 or pad_w < 0:
        raise ShapeError("padding must be >= 0")
    if fh > x.shape[2] + 2 * pad_h or fw > x.shape[3] + 2 * pad_w:
        raise ShapeError(f"filter {fh}x{fw} larger than padded input {x.shape[2:]}")


def _windows(xp, fh, fw, stride_h, stride_w):
    # N x C x H' x W' x FH x FW view
    return sliding_window_view(xp, (fh, fw), axis=(2, 3))[:, :, ::stride_h, ::stride_w]


def conv2d(x, filters, bias, pad_h=0, pad_w=0, stride_h=1, stride_w=1):
    """2-D cross-correlation (no kernel flip) with zero padding."""
    xb, single = _as_batch(x, 3)
    _conv_check(xb, filters, bias, pad_h, pad_w, stride_h, stride_w)
    _, _, fh, fw = filters.shape
    xp = np.pad(xb, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    cols = _windows(xp, fh, fw, stride_h, stride_w)
    out = np.tensordot(cols, filters, axes=([1, 4, 5], [1, 2, 3]))  # N H' W' C_out
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return _unbatch(np.ascontiguousarray(out), single)


def conv2d_backward(grad_out, x, filters, pad_h=0, pad_w=0, stride_h=1, stride_w=1):
    xb, single = _as_batch(x, 3)
    gb, _ = _as_batch(grad_out, 3)
    _conv_check(xb, filters, np.zeros(filters.shape[0], filters.dtype), pad_h, pad_w, stride_h, stride_w)
    n, c_in, h, w = xb.shape
    c_out, _, fh, fw = filters.shape
    ho = conv_output_size(h, fh, pad_h, stride_h)
    wo = conv_output_size(w, fw, pad_w, stride_w)
    if gb.shape != (n, c_out, ho, wo):
        raise ShapeError(f"upstream gradient {gb.shape} does not match output {(n, c_out, ho, wo)}")

    xp = np.pad(xb, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    cols = _windows(xp, fh, fw, stride_h, stride_w)
    d_filters = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))
    d_bias = gb.sum(axis=(0, 2, 3))

    # N x H' x W' x C_in x FH x FW
    d_cols = np.tensordot(gb, filters, axes=([1], [0]))
    d_xp = np.zeros_like(xp)
    h_span = stride_h * (ho - 1) + 1
    w_span = stride_w * (wo - 1) + 1
    for a in range(fh):
        for b in range(fw):
            d_xp[:, :, a:a + h_span:stride_h, b:b + w_span:stride_w] += (
                d_cols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            )
    d_x = d_xp[:, :, pad_h:pad_h + h, pad_w:pad_w + w]
    return LayerGrad(_unbatch(np.ascontiguousarray(d_x), single),
                     {"filters": d_filters, "bias": d_bias})


# -- pointwise ---------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return LayerGrad(np.where(x > 0, grad_out, 0.0))


# -- local response normalization ------------------------------------------

def _channel_window_sum(sq, n):
    # sum over a window of n channels centred on each channel, clipped at edges
    half = n // 2
    c = sq.shape[1]
    padded = np.pad(sq, ((0, 0), (half, half), (0, 0), (0, 0)))
    csum = np.cumsum(padded, axis=1)
    csum = np.concatenate([np.zeros_like(csum[:, :1]), csum], axis=1)
    return csum[:, n:n + c] - csum[:, :c]


def _lrn_scale(xb, n, alpha, beta, k):
    if n < 1 or n % 2 == 0:
        raise ParameterError(f"LRN width must be a positive odd number, got {n}")
    return k + (alpha / n) * _channel_window_sum(xb * xb, n)


def lrn(x, n=5, alpha=1e-4, beta=0.75, k=1.0):
    """Across-channel LRN: a / (k + alpha/n * sum of squares in window)^beta."""
    xb, single = _as_batch(x, 3)
    scale = _lrn_scale(xb, n, alpha, beta, k)
    return _unbatch(xb * scale ** (-beta), single)


def lrn_backward(grad_out, x, n=5, alpha=1e-4, beta=0.75, k=1.0):
    xb, single = _as_batch(x, 3)
    gb, _ = _as_batch(grad_out, 3)
    if gb.shape != xb.shape:
        raise ShapeError(f"upstream gradient {gb.shape} does not match input {xb.shape}")
    scale = _lrn_scale(xb, n, alpha, beta, k)
    out = xb * scale ** (-beta)
    # the window relation is symmetric, so the same windowed sum gathers contributions
    ratio = _channel_window_sum(gb * out / scale, n)
    d_x = gb * scale ** (-beta) - (2.0 * alpha * beta / n) * xb * ratio
    return LayerGrad(_unbatch(d_x, single))


# -- max pooling -------------------------------------------------------------

def maxpool(x, pool_h, pool_w, stride_h=1, stride_w=1):
    """Max pooling without padding.

    Returns the pooled tensor and the flat in-window argmax (row-major), which
    picks the lowest index on ties.
    """
    xb, single = _as_batch(x, 3)
    if pool_h > xb.shape[2] or pool_w > xb.shape[3]:
        raise ShapeError(f"pool window {pool_h}x{pool_w} exceeds input {xb.shape[2:]}")
    if stride_h < 1 or stride_w < 1:
        raise ShapeError("strides must be >= 1")
    win = _windows(xb, pool_h, pool_w, stride_h, stride_w)
    flat = win.reshape(win.shape[:4] + (pool_h * pool_w,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return _unbatch(out, single), _unbatch(arg, single)


def maxpool_backward(grad_out, argmax, input_shape, pool_h, pool_w, stride_h=1, stride_w=1):
    gb, single = _as_batch(grad_out, 3)
    ab, _ = _as_batch(argmax, 3)
    if ab.shape != gb.shape:
        raise ShapeError(f"upstream gradient {gb.shape} does not match pooled output {ab.shape}")
    shape = tuple(input_shape)
    if single:
        shape = (1,) + shape
    d_x = np.zeros(shape, dtype=gb.dtype)
    ho, wo = gb.shape[2:]
    h_span = stride_h * (ho - 1) + 1
    w_span = stride_w * (wo - 1) + 1
    for a in range(pool_h):
        for b in range(pool_w):
            routed = np.where(ab == a * pool_w + b, gb, 0.0)
            d_x[:, :, a:a + h_span:stride_h, b:b + w_span:stride_w] += routed
    return LayerGrad(_unbatch(d_x, single))


# -- fully connected ---------------------------------------------------------

def fully_connected(x, weight, bias):
    x = np.asarray(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"fully connected shapes disagree: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight.T + bias


def fc_backward(grad_out, x, weight):
    xb, single = _as_batch(x, 1)
    gb, _ = _as_batch(grad_out, 1)
    if gb.shape != (xb.shape[0], weight.shape[0]) or xb.shape[1] != weight.shape[1]:
        raise ShapeError(f"fc backward shapes disagree: grad {gb.shape}, input {xb.shape}, weight {weight.shape}")
    return LayerGrad(_unbatch(gb @ weight, single),
                     {"weight": gb.T @ xb, "bias": gb.sum(axis=0)})


# -- dropout -----------------------------------------------------------------

def dropout(x, rate=0.5, mode="train", rng_seed=0):
    """Inverted dropout; returns ``(output, mask)`` where mask holds the
    per-element multiplier (0 or 1/(1-rate))."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return LayerGrad(grad_out * mask)


# -- softmax cross-entropy -----------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, label):
    """Cross-entropy of a softmax. Batched logits (N x K) give the mean loss."""
    logits = np.asarray(logits)
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise ParameterError(f"label {label} out of range for {k} classes")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    if logits.ndim == 1:
        return float(-log_probs[labels[0]]), probs
    return float(-log_probs[np.arange(len(labels)), labels].mean()), probs


def softmax_xent_backward(probs, label):
    grad = probs.copy()
    if probs.ndim == 1:
        grad[label] -= 1.0
        return LayerGrad(grad)
    labels = np.asarray(label)
    grad[np.arange(len(labels)), labels] -= 1.0
    return LayerGrad(grad / len(labels))


# -- optimizer ---------------------------------------------------------------

def sgd_momentum_step(params, grads, state):
    """One heavy-ball step, in place: v <- mu*v - lr*g ; theta <- theta + v."""
    for name, value in params.items():
        if name not in grads:
            raise ParameterError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {value.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(value)
        elif v.shape != value.shape:
            raise ShapeError(f"velocity for {name!r} has shape {v.shape}, parameter {value.shape}")
        v = state.momentum * v - state.learning_rate * g
        state.velocity[name] = v
        value += v
    return params, state


# -- gradient checking -------------------------------------------------------

def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(loss_and_grads, params, epsilon=1e-5, coords=None, reference=None):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_and_grads(params)`` returns ``(scalar loss, {name: gradient})``.
    ``coords`` optionally maps a parameter name to a boolean mask of the
    coordinates to probe; unlisted parameters are probed everywhere.
    ``reference(params)``, when given, supplies the function values used for
    the differences instead of ``loss_and_grads``; returning exact values (for
    example ``fractions.Fraction``) removes rounding noise from the numerator.
    """
    params = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    _, analytic = loss_and_grads(params)
    value_of = reference if reference is not None else (lambda p: loss_and_grads(p)[0])
    worst = 0.0
    for name, value in params.items():
        mask = None if coords is None else coords.get(name)
        flat = value.reshape(-1)
        grad = np.asarray(analytic[name]).reshape(-1)
        indices = range(flat.size) if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
        for i in indices:
            orig = flat[i]
            hi, lo = orig + epsilon, orig - epsilon
            flat[i] = hi
            plus = value_of(params)
            flat[i] = lo
            minus = value_of(params)
            flat[i] = orig
            # hi - lo is the step actually taken after rounding
            numeric = float((plus - minus) / (float(hi) - float(lo)))
            worst = max(worst, float(relative_error(grad[i], numeric)))
    return worst
