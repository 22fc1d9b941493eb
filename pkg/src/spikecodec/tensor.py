"""Dense float64 kernels with explicit vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every forward
operation here has a matching ``*_backward`` function that takes the forward
inputs and the upstream gradient and returns gradients for each input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

__all__ = [
    "ShapeError",
    "ConvParams",
    "BatchNormParams",
    "same_padding",
    "pad2d",
    "conv2d",
    "conv2d_backward",
    "dense",
    "dense_backward",
    "batchnorm",
    "batchnorm_backward",
    "global_pool",
    "global_pool_backward",
    "sigmoid",
    "sigmoid_backward",
    "relu",
    "relu_backward",
    "pointwise",
    "pointwise_backward",
    "hadamard",
    "hadamard_backward",
    "he_normal",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _pair(v):
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def same_padding(kh: int, kw: int | None = None) -> tuple[int, int, int, int]:
    """Padding (top, bottom, left, right) that keeps H x W at stride 1.

    Even kernels pad one extra row/column on the bottom/right.
    """
    kw = kh if kw is None else kw
    return (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2


def _pad4(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return p, p, p, p
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    if len(padding) != 4:
        raise ShapeError(f"padding must have 1, 2 or 4 entries, got {padding}")
    return padding


@dataclass
class ConvParams:
    kernel: np.ndarray  # [C_out, C_in, kh, kw]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        self.kernel = np.ascontiguousarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be 4-D, got shape {self.kernel.shape}")
        self.stride = _pair(self.stride)
        self.padding = _pad4(self.padding)
        if min(self.stride) < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if min(self.padding) < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        top, bottom, left, right = self.padding
        kh, kw = self.kernel.shape[2:]
        sh, sw = self.stride
        hp, wp = h + top + bottom, w + left + right
        if hp < kh or wp < kw:
            raise ShapeError(f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
        return (hp - kh) // sh + 1, (wp - kw) // sw + 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def identity(cls, channels: int, **kw) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kw,
        )

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")


def pad2d(x: np.ndarray, padding) -> np.ndarray:
    top, bottom, left, right = _pad4(padding)
    if not (top or bottom or left or right):
        return np.ascontiguousarray(x, dtype=np.float64)
    width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(np.asarray(x, dtype=np.float64), width)


_COL_BUDGET = 1 << 23  # float64 elements per im2col chunk (64 MiB)


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    """[N, C, Hp, Wp] -> [N*ho*wo, C*kh*kw] patch matrix (row-major over n, y, x)."""
    return _kernels.im2col(np.ascontiguousarray(xp), kh, kw, sh, sw, ho, wo)


def _chunks(n, per_item):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    return [(i, min(i + step, n)) for i in range(0, n, step)]


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlation of ``x`` [B, C_in, H, W] with ``params.kernel``, no bias."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W], got {x.shape}")
    if x.shape[1] != params.kernel.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {params.kernel.shape[1]}"
        )
    ho, wo = params.output_hw(*x.shape[2:])
    xp = pad2d(x, params.padding)
    co, ci, kh, kw = params.kernel.shape
    sh, sw = params.stride
    wmat = params.kernel.reshape(co, ci * kh * kw).T
    out = np.empty((x.shape[0], co, ho, wo))
    for a, b in _chunks(x.shape[0], ho * wo * ci * kh * kw):
        cols = _im2col(xp[a:b], kh, kw, sh, sw, ho, wo)
        out[a:b] = (cols @ wmat).reshape(b - a, ho, wo, co).transpose(0, 3, 1, 2)
    return out


def conv2d_backward(
    grad: np.ndarray, x: np.ndarray, params: ConvParams, need_input: bool = True
) -> tuple[np.ndarray | None, np.ndarray]:
    """Return ``(d_input, d_kernel)`` for upstream ``grad`` [B, C_out, H', W']."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    ho, wo = params.output_hw(*x.shape[2:])
    if grad.shape != (x.shape[0], params.kernel.shape[0], ho, wo):
        raise ShapeError(f"upstream grad shape {grad.shape} does not match conv output")
    top, bottom, left, right = params.padding
    co, ci, kh, kw = params.kernel.shape
    sh, sw = params.stride
    xp = pad2d(x, params.padding)
    hp, wp = xp.shape[2:]
    wmat = params.kernel.reshape(co, ci * kh * kw)
    dk = np.zeros((co, ci * kh * kw))
    dxp = np.zeros(xp.shape) if need_input else None
    for a, b in _chunks(x.shape[0], ho * wo * ci * kh * kw):
        gmat = np.ascontiguousarray(grad[a:b].transpose(0, 2, 3, 1)).reshape(-1, co)
        cols = _im2col(xp[a:b], kh, kw, sh, sw, ho, wo)
        dk += gmat.T @ cols
        if need_input:
            part = np.zeros((b - a,) + xp.shape[1:])
            _kernels.col2im_add(part, gmat @ wmat, kh, kw, sh, sw, ho, wo)
            dxp[a:b] = part
    dk = dk.reshape(params.kernel.shape)
    if not need_input:
        return None, dk
    dx = dxp[:, :, top : hp - bottom, left : wp - right]
    return np.ascontiguousarray(dx), dk


def dense(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``x`` [B, D_in] times ``weight`` [D_out, D_in] transposed, no bias."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by weight {weight.shape}")
    return _kernels.dense_fwd(x, weight)


def dense_backward(grad, x, weight):
    """Return ``(d_input, d_weight)``."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    if grad.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"dense backward: grad {grad.shape} vs output {(x.shape[0], weight.shape[0])}")
    return _kernels.dense_bwd(grad, x, weight)


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """Per-channel normalisation over every axis except axis 1.

    In train mode the batch statistics are used and the running statistics
    are updated in place (unbiased variance, as most frameworks do).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != params.gamma.shape[0]:
        raise ShapeError(f"batchnorm: {x.shape[1]} channels vs {params.gamma.shape[0]} params")
    if params.mode == "train":
        axes = _bn_axes(x)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        m = params.momentum
        params.running_mean *= 1 - m
        params.running_mean += m * mean
        params.running_var *= 1 - m
        params.running_var += m * var * (n / (n - 1) if n > 1 else 1.0)
    else:
        mean, var = params.running_mean, params.running_var
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv, x.ndim)
    return xhat * _bn_view(params.gamma, x.ndim) + _bn_view(params.beta, x.ndim)


def batchnorm_backward(grad, x, params: BatchNormParams):
    """Return ``(d_input, d_gamma, d_beta)``; batch statistics are recomputed from ``x``."""
    x = np.asarray(x, dtype=np.float64)
    axes = _bn_axes(x)
    nd = x.ndim
    if params.mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = params.running_mean, params.running_var
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - _bn_view(mean, nd)) * _bn_view(inv, nd)
    dbeta = grad.sum(axis=axes)
    dgamma = (grad * xhat).sum(axis=axes)
    dxhat = grad * _bn_view(params.gamma, nd)
    if params.mode == "eval":
        return dxhat * _bn_view(inv, nd), dgamma, dbeta
    n = x.size // x.shape[1]
    dx = (
        _bn_view(inv / n, nd)
        * (n * dxhat - _bn_view(dxhat.sum(axis=axes), nd) - xhat * _bn_view((dxhat * xhat).sum(axis=axes), nd))
    )
    return dx, dgamma, dbeta


def global_pool(x: np.ndarray, kind: str = "avg") -> np.ndarray:
    """Reduce the last three axes by mean or max."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[:-3] + (-1,))
    if kind == "avg":
        return flat.mean(axis=-1)
    if kind == "max":
        return flat.max(axis=-1)
    raise ValueError(f"unknown pool kind {kind!r}")


def global_pool_backward(grad, x, kind: str = "avg"):
    # max routes the gradient to the first maximal element
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-3]
    n = int(np.prod(x.shape[-3:]))
    if kind == "avg":
        out = np.broadcast_to((grad / n)[..., None], lead + (n,))
        return np.ascontiguousarray(out).reshape(x.shape)
    if kind == "max":
        flat = x.reshape(lead + (n,))
        idx = flat.argmax(axis=-1)
        out = np.zeros_like(flat)
        np.put_along_axis(out, idx[..., None], np.asarray(grad)[..., None], axis=-1)
        return out.reshape(x.shape)
    raise ValueError(f"unknown pool kind {kind!r}")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(grad, x):
    s = sigmoid(x)
    return grad * s * (1.0 - s)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad, x):
    return grad * (np.asarray(x) > 0)


def pointwise(x, kind: str):
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def pointwise_backward(grad, x, kind: str):
    if kind == "sigmoid":
        return sigmoid_backward(grad, x)
    if kind == "relu":
        return relu_backward(grad, x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def _lead_align(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def _broadcast_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    nd = max(a.ndim, b.ndim)
    a2, b2 = _lead_align(a, nd), _lead_align(b, nd)
    for da, db in zip(a2.shape, b2.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} do not broadcast")
    return a2, b2


def hadamard(a, b) -> np.ndarray:
    """Elementwise product; the lower-rank operand aligns to the *leading* axes.

    So a [T] vector multiplies a [T, C, H, W] tensor per time step, and any
    size-1 axis stretches.
    """
    a2, b2 = _broadcast_pair(a, b)
    return a2 * b2


def _reduce_to(g, shape):
    nd = g.ndim
    target = shape + (1,) * (nd - len(shape))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, target)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def hadamard_backward(grad, a, b):
    """Return ``(d_a, d_b)`` reduced back to each operand's shape."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a2, b2 = _broadcast_pair(a, b)
    return _reduce_to(grad * b2, a.shape), _reduce_to(grad * a2, b.shape)


def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
