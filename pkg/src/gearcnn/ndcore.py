"""Layer kernels with analytic backward passes.

Every kernel is a ``*_forward`` / ``*_backward`` pair operating on plain
numpy arrays. Rank-3 tensors are laid out ``[batch, channels, length]``.
Forward functions return ``(output, cache)``; the cache holds exactly what the
matching backward call needs and nothing else. Kernels preserve the dtype of
their inputs, so float64 inputs give float64 gradients for finite-difference
checks while training runs in float32.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, DegenerateBatchError, LabelError, NumericalError, ShapeError

# finite-value assertions after each kernel; off by default because they cost a pass over memory
DEBUG_CHECKS = bool(os.environ.get("GEARCNN_DEBUG"))


def _check_finite(name, arr):
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name}: non-finite values in output")


def check_tensor3(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"{name} must be rank 3 [batch, channels, length], got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


def conv_output_length(length, kernel, stride=1, padding=0):
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    out = (length + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"kernel {kernel} with padding {padding} does not fit length {length}"
        )
    return out


def pool_output_length(length, k, stride):
    if length < k:
        raise ConfigurationError(f"pool window {k} larger than length {length}")
    return (length - k) // stride + 1


# --------------------------------------------------------------------------- conv1d


def conv1d_forward(x, weight, stride=1, padding=0):
    """Bias-free 1-D cross-correlation with zero padding.

    ``x`` is ``[B, Cin, L]`` and ``weight`` is ``[Cout, Cin, K]``; the result is
    ``[B, Cout, Lout]`` with ``Lout = (L + 2*padding - K) // stride + 1``.
    """
    x = check_tensor3(x)
    weight = np.asarray(weight)
    if weight.ndim != 3:
        raise ShapeError(f"conv weight must be [Cout, Cin, K], got {weight.shape}")
    batch, cin, length = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv weight expects {wcin} input channels, input has {cin}")
    lout = conv_output_length(length, k, stride, padding)

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, k, axis=2)[:, :, : (lout - 1) * stride + 1 : stride]
    # [B, Lout, Cin*K] so one matmul does the whole layer
    cols = windows.transpose(0, 2, 1, 3).reshape(batch * lout, cin * k)
    out = cols @ weight.reshape(cout, cin * k).T
    out = np.ascontiguousarray(out.reshape(batch, lout, cout).transpose(0, 2, 1))
    _check_finite("conv1d", out)
    cache = (cols, weight, x.shape, stride, padding)
    return out, cache


def conv1d_backward(dout, cache):
    """Return ``(grad_input, grad_weight)``."""
    cols, weight, in_shape, stride, padding = cache
    batch, cin, length = in_shape
    cout, _, k = weight.shape
    lout = dout.shape[2]
    if dout.shape != (batch, cout, lout):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match conv output")

    d2 = dout.transpose(0, 2, 1).reshape(batch * lout, cout)
    dweight = (d2.T @ cols).reshape(cout, cin, k)
    dcols = (d2 @ weight.reshape(cout, cin * k)).reshape(batch, lout, cin, k)

    dxp = np.zeros((batch, cin, length + 2 * padding), dtype=dout.dtype)
    span = (lout - 1) * stride + 1
    for j in range(k):
        dxp[:, :, j : j + span : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    dx = dxp[:, :, padding : padding + length] if padding else dxp
    return np.ascontiguousarray(dx), dweight


# --------------------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    The arrays are held by reference; a train-phase forward updates
    ``running_mean`` and ``running_var`` in place.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        n = np.shape(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if np.shape(getattr(self, name)) != n:
                raise ShapeError(f"batch-norm {name} has shape {np.shape(getattr(self, name))}, expected {n}")
        if not self.eps > 0:
            raise ConfigurationError("batch-norm eps must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError("batch-norm momentum must lie in [0, 1]")

    @classmethod
    def fresh(cls, channels, dtype=np.float32, **kwargs):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kwargs,
        )


def batchnorm1d_forward(x, state, train):
    x = check_tensor3(x)
    batch, channels, length = x.shape
    if state.gamma.shape != (channels,):
        raise ShapeError(f"batch-norm has {state.gamma.shape[0]} channels, input has {channels}")
    gamma = state.gamma.reshape(1, -1, 1)
    beta = state.beta.reshape(1, -1, 1)

    if not train:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        scale = (state.gamma * inv_std).astype(x.dtype, copy=False)
        shift = (state.beta - state.running_mean * scale).astype(x.dtype, copy=False)
        out = x * scale.reshape(1, -1, 1) + shift.reshape(1, -1, 1)
        _check_finite("batchnorm1d", out)
        return out, None

    if batch * length < 2:
        raise DegenerateBatchError(
            f"train-phase batch norm needs at least 2 values per channel, got {batch * length}"
        )
    mean = x.mean(axis=(0, 2))
    centered = x - mean.reshape(1, -1, 1)
    var = (centered * centered).mean(axis=(0, 2))
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype, copy=False)
    xhat = centered * inv_std.reshape(1, -1, 1)
    out = xhat * gamma + beta

    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * var
    _check_finite("batchnorm1d", out)
    return out, (xhat, inv_std, state.gamma)


def batchnorm1d_backward(dout, cache):
    """Train-phase gradient. Returns ``(grad_input, grad_gamma, grad_beta)``."""
    if cache is None:
        raise ConfigurationError("batch-norm backward requires a train-phase cache")
    xhat, inv_std, gamma = cache
    if dout.shape != xhat.shape:
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match {xhat.shape}")
    n = xhat.shape[0] * xhat.shape[2]
    dbeta = dout.sum(axis=(0, 2))
    dgamma = (dout * xhat).sum(axis=(0, 2))
    # closed form of d/dx through mean and variance of the batch
    coef = (gamma * inv_std / n).reshape(1, -1, 1)
    dx = coef * (n * dout - dbeta.reshape(1, -1, 1) - xhat * dgamma.reshape(1, -1, 1))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------- relu


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, 0).astype(dout.dtype, copy=False)


# --------------------------------------------------------------------------- max pool


def maxpool1d_forward(x, k, stride):
    """Max over valid windows. Ties resolve to the earliest index."""
    x = check_tensor3(x)
    batch, channels, length = x.shape
    lout = pool_output_length(length, k, stride)
    windows = sliding_window_view(x, k, axis=2)[:, :, : (lout - 1) * stride + 1 : stride]
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
    return np.ascontiguousarray(out), (arg, x.shape, k, stride)


def maxpool1d_backward(dout, cache):
    arg, in_shape, k, stride = cache
    if dout.shape != arg.shape:
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match pool output {arg.shape}")
    dx = np.zeros(in_shape, dtype=dout.dtype)
    span = (arg.shape[2] - 1) * stride + 1
    for j in range(k):
        dx[:, :, j : j + span : stride] += np.where(arg == j, dout, 0)
    return dx


# --------------------------------------------------------------------------- global average pool


def global_avg_pool_forward(x):
    x = check_tensor3(x)
    return x.mean(axis=2), x.shape


def global_avg_pool_backward(dout, in_shape):
    length = in_shape[2]
    return np.broadcast_to((dout / length)[:, :, None], in_shape).copy()


# --------------------------------------------------------------------------- linear


def linear_forward(x, weight, bias):
    x = np.asarray(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear layer: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(dout, cache):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


# --------------------------------------------------------------------------- loss


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probs, dlogits)`` where ``dlogits`` is the gradient of the
    mean loss, i.e. ``(probs - onehot) / B``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    batch, n_classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)

    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z - logsumexp[:, None]
    probs = np.exp(logp)
    rows = np.arange(batch)
    loss = -logp[rows, labels].mean()
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1
    dlogits /= batch
    return loss, probs, dlogits


# --------------------------------------------------------------------------- gradient checking


def max_relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f, theta, h=None):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``theta``.

    ``theta`` is perturbed in place and restored. The step defaults to
    ``1e-3 * max(1, |theta_i|)``.
    """
    grad = np.zeros_like(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = 1e-3 * max(1.0, abs(orig)) if h is None else h
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def check_gradients(loss_fn, analytic, inputs, h=None):
    """Compare analytic gradients with central differences.

    ``inputs`` maps names to float64 arrays that ``loss_fn()`` reads; ``analytic``
    maps the same names to their gradients. Returns the max relative error over
    all entries.
    """
    worst = 0.0
    for name, theta in inputs.items():
        numeric = numeric_gradient(loss_fn, theta, h)
        worst = max(worst, max_relative_error(analytic[name], numeric))
    return worst


def _spread_values(rng, shape, gap):
    # distinct values at least `gap` apart so max-pool argmax is stable under perturbation
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap + rng.uniform(0, gap / 4, n)
    return rng.permutation(vals).reshape(shape)


def _away_from_zero(rng, shape, margin):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def grad_check(kernel, seed=0, h=None, zero_upstream=False):
    """Finite-difference check of one kernel on a random float64 problem.

    ``kernel`` is one of :data:`KERNELS`. The scalar under test is
    ``sum(upstream * output)`` for a random upstream gradient. Returns the max
    relative error over all differentiable inputs.
    """
    rng = np.random.default_rng(seed)

    def upstream(shape):
        return np.zeros(shape) if zero_upstream else rng.standard_normal(shape)

    if kernel == "conv1d":
        x = rng.standard_normal((2, 3, 10))
        w = rng.standard_normal((4, 3, 3))
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        out, cache = conv1d_forward(x, w, stride, padding)
        g = upstream(out.shape)
        dx, dw = conv1d_backward(g, cache)
        f = lambda: float(np.sum(g * conv1d_forward(x, w, stride, padding)[0]))
        return check_gradients(f, {"x": dx, "w": dw}, {"x": x, "w": w}, h)

    if kernel == "conv1d_wide":
        x = rng.standard_normal((2, 3, 60))
        w = rng.standard_normal((4, 3, 24)) * 0.2
        out, cache = conv1d_forward(x, w, 2, 0)
        g = upstream(out.shape)
        dx, dw = conv1d_backward(g, cache)
        f = lambda: float(np.sum(g * conv1d_forward(x, w, 2, 0)[0]))
        return check_gradients(f, {"x": dx, "w": dw}, {"x": x, "w": w}, h)

    if kernel == "batchnorm1d":
        x = rng.standard_normal((4, 2, 6)) * rng.uniform(0.5, 2) + rng.uniform(-1, 1)
        state = BatchNormState.fresh(2, np.float64)
        state.gamma[:] = rng.uniform(0.5, 1.5, 2)
        state.beta[:] = rng.standard_normal(2)
        out, cache = batchnorm1d_forward(x, state, train=True)
        g = upstream(out.shape)
        dx, dgamma, dbeta = batchnorm1d_backward(g, cache)
        f = lambda: float(np.sum(g * batchnorm1d_forward(x, state, train=True)[0]))
        return check_gradients(
            f,
            {"x": dx, "gamma": dgamma, "beta": dbeta},
            {"x": x, "gamma": state.gamma, "beta": state.beta},
            h,
        )

    if kernel == "relu":
        x = _away_from_zero(rng, (2, 3, 10), 0.05)
        out, mask = relu_forward(x)
        g = upstream(out.shape)
        dx = relu_backward(g, mask)
        f = lambda: float(np.sum(g * relu_forward(x)[0]))
        return check_gradients(f, {"x": dx}, {"x": x}, h)

    if kernel == "maxpool1d":
        x = _spread_values(rng, (2, 3, 12), 0.05)
        out, cache = maxpool1d_forward(x, 3, 3)
        g = upstream(out.shape)
        dx = maxpool1d_backward(g, cache)
        f = lambda: float(np.sum(g * maxpool1d_forward(x, 3, 3)[0]))
        return check_gradients(f, {"x": dx}, {"x": x}, h)

    if kernel == "global_avg_pool":
        x = rng.standard_normal((2, 3, 7))
        out, shape = global_avg_pool_forward(x)
        g = upstream(out.shape)
        dx = global_avg_pool_backward(g, shape)
        f = lambda: float(np.sum(g * global_avg_pool_forward(x)[0]))
        return check_gradients(f, {"x": dx}, {"x": x}, h)

    if kernel == "linear":
        x = rng.standard_normal((3, 6))
        w = rng.standard_normal((4, 6))
        b = rng.standard_normal(4)
        out, cache = linear_forward(x, w, b)
        g = upstream(out.shape)
        dx, dw, db = linear_backward(g, cache)
        f = lambda: float(np.sum(g * linear_forward(x, w, b)[0]))
        return check_gradients(f, {"x": dx, "w": dw, "b": db}, {"x": x, "w": w, "b": b}, h)

    if kernel == "softmax_xent":
        logits = rng.standard_normal((4, 5)) * 2
        labels = rng.integers(0, 5, 4)
        _, _, dlogits = softmax_xent(logits, labels)
        if zero_upstream:
            dlogits = np.zeros_like(dlogits)
            f = lambda: 0.0
        else:
            f = lambda: float(softmax_xent(logits, labels)[0])
        return check_gradients(f, {"logits": dlogits}, {"logits": logits}, h)

    raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


KERNELS = (
    "conv1d",
    "conv1d_wide",
    "batchnorm1d",
    "relu",
    "maxpool1d",
    "global_avg_pool",
    "linear",
    "softmax_xent",
)
