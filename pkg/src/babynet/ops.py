"""Differentiable neural-network primitives built on :mod:`babynet.tensor`."""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_result

Triple = tuple[int, int, int]

_branch_log: list[np.ndarray] | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the ReLU branch masks of every forward pass inside the block."""
    global _branch_log
    prev = _branch_log
    _branch_log = log = []
    try:
        yield log
    finally:
        _branch_log = prev


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t  # type: ignore[return-value]


def conv3d_output_shape(in_shape, kernel, stride, padding) -> Triple:
    """Spatial output size ``floor((X + 2p - k) / s) + 1`` per axis."""
    out = []
    for x, k, s, p in zip(in_shape, kernel, stride, padding):
        if s < 1:
            raise ValueError(f"stride must be >= 1, got {s}")
        if x + 2 * p < k:
            raise ShapeError(f"kernel {k} does not fit padded extent {x + 2 * p}")
        out.append((x + 2 * p - k) // s + 1)
    return tuple(out)  # type: ignore[return-value]


def _check_conv(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input {x.shape} has C_in={x.shape[1]}, "
            f"weight {w.shape} expects C_in={w.shape[1]}"
        )


def _pad(x: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return x
    pt, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _windows(xp: np.ndarray, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """Strided view of shape [N, C, T', H', W', kT, kH, kW]."""
    v = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    st, sh, sw = stride
    to, ho, wo = out
    return v[:, :, : st * (to - 1) + 1 : st, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation of ``x[N,C_in,T,H,W]`` with ``weight[C_out,C_in,kT,kH,kW]``.

    Forward and weight gradient run as one matrix product over unfolded
    windows; the input gradient folds the window gradients back with one
    strided accumulation per kernel offset.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv(x.data, weight.data)
    stride, padding = _triple(stride), _triple(padding)
    kernel = weight.shape[2:]
    out_sp = conv3d_output_shape(x.shape[2:], kernel, stride, padding)
    xp = _pad(x.data, padding)
    cols = _windows(xp, kernel, stride, out_sp)
    # [C_out, C_in, k..] . [N, C_in, T', H', W', k..] -> [C_out, N, T', H', W']
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3, 4], [1, 5, 6, 7]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = gx = gb = None
        if weight.requires_grad:
            c = _windows(xp, kernel, stride, out_sp)
            gw = np.tensordot(g, c, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            # [C_in, k.., N, T', H', W']
            gcols = np.tensordot(weight.data, g, axes=([0], [1]))
            gxp = np.zeros(xp.shape, dtype=np.result_type(xp, g))
            st, sh, sw = stride
            to, ho, wo = out_sp
            for a, b, c_ in itertools.product(*(range(k) for k in kernel)):
                gxp[:, :, a : a + st * to : st, b : b + sh * ho : sh, c_ : c_ + sw * wo : sw] += (
                    gcols[:, a, b, c_].transpose(1, 0, 2, 3, 4)
                )
            pt, ph, pw = padding
            gx = gxp[:, :, pt : pt + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, bw, "conv3d")


def conv3d_direct(x, weight, bias=None, stride=1, padding=0) -> np.ndarray:
    """Forward-only reference convolution: shift-and-accumulate per kernel tap.

    Accumulates in float64 and shares no code with :func:`conv3d`; used to
    cross-check the fast path.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    _check_conv(x, w)
    stride, padding = _triple(stride), _triple(padding)
    kernel = w.shape[2:]
    to, ho, wo = conv3d_output_shape(x.shape[2:], kernel, stride, padding)
    xp = _pad(x, padding)
    st, sh, sw = stride
    out = np.zeros((x.shape[0], w.shape[0], to, ho, wo))
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for c in range(kernel[2]):
                patch = xp[:, :, a : a + st * to : st, b : b + sh * ho : sh, c : c + sw * wo : sw]
                for o in range(w.shape[0]):
                    for i in range(w.shape[1]):
                        out[:, o] += w[o, i, a, b, c] * patch[:, i]
    if bias is not None:
        b_ = bias.data if isinstance(bias, Tensor) else bias
        out += np.asarray(b_, dtype=np.float64).reshape(1, -1, 1, 1, 1)
    return out.astype(DTYPE)


@dataclass
class BatchNormState:
    """Per-channel running statistics for :func:`batchnorm3d`."""

    num_channels: int
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)
    num_updates: int = 0

    def __post_init__(self):
        self.running_mean = np.zeros(self.num_channels, dtype=DTYPE)
        self.running_var = np.ones(self.num_channels, dtype=DTYPE)

    @property
    def initialized(self) -> bool:
        return self.num_updates > 0

    def set(self, mean, var) -> None:
        self.running_mean = np.asarray(mean, dtype=DTYPE).reshape(self.num_channels).copy()
        self.running_var = np.asarray(var, dtype=DTYPE).reshape(self.num_channels).copy()
        self.num_updates = max(self.num_updates, 1)


class UninitializedStatisticsError(RuntimeError):
    pass


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, T, H, W).

    In training mode the biased batch variance normalizes the input and the
    running variance is updated with the unbiased estimate:
    ``running = (1 - momentum) * running + momentum * batch``.
    """
    if x.ndim != 5 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"batchnorm3d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = (0, 2, 3, 4)
    bshape = (1, -1, 1, 1, 1)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if training:
        n = x.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(-1) * (n / (n - 1) if n > 1 else 1.0)
        state.running_mean = ((1 - momentum) * state.running_mean + momentum * mu.reshape(-1)).astype(DTYPE)
        state.running_var = ((1 - momentum) * state.running_var + momentum * unbiased).astype(DTYPE)
        state.num_updates += 1

        def bw(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = None
            if x.requires_grad:
                dxhat = g * g_
                gx = (inv / n) * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            return gx, gg, gb

    else:
        if not state.initialized:
            raise UninitializedStatisticsError(
                "batchnorm3d in eval mode before any running-statistics update"
            )
        inv = 1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv

        def bw(g):
            gx = g * g_ * inv if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * g_ + b_
    return make_result(out, (x, gamma, beta), bw, "batchnorm3d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(mask)

    def bw(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0), (x,), bw, "relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[N,F] @ weight[O,F]^T + bias[O]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, parents, bw, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over (T, H, W): ``[N,C,T,H,W] -> [N,C]``."""
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool expects 5-D input, got {x.shape}")
    count = x.shape[2] * x.shape[3] * x.shape[4]

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None, None] / count, x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3, 4)), (x,), bw, "global_avg_pool")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; gradient ``2 (pred - target) / N``."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return make_result(np.mean(diff * diff), (pred, target), bw, "mse_loss")
