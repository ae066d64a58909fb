"""Layers over ``(N, C, H, W)`` numpy arrays with hand-written backward passes.

Every layer caches what it needs in ``forward`` and returns the input
gradient from ``backward``; parameter gradients land in ``self.grads``
under the same keys as ``self.params``. Layers compute in the dtype of
their input (float32 for training, float64 for gradient checks);
reductions accumulate in float64.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ContractError


def check_tensor4(x: np.ndarray, name: str = "input") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ContractError(f"{name} must be a 4-axis (N, C, H, W) array, got shape {np.shape(x)}")


class Module:
    """Base class: parameters, gradients, buffers and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        """Yield ``(qualified name, param, grad)`` in a fixed order."""
        for prefix, mod in self.named_modules():
            for key, p in mod.params.items():
                yield (f"{prefix}.{key}" if prefix else key), p, mod.grads[key]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for key, b in mod.buffers.items():
                yield (f"{prefix}.{key}" if prefix else key), b

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def astype(self, dtype) -> "Module":
        for _, mod in self.named_modules():
            for key in mod.params:
                mod.params[key] = mod.params[key].astype(dtype)
                mod.grads[key] = np.zeros_like(mod.params[key])
        return self

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __call__(self, x):
        return self.forward(x)


# --------------------------------------------------------------------------
# window helpers
# --------------------------------------------------------------------------


def _out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Strided view ``(N, C, k, k, Ho, Wo)`` over a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def _scatter_windows(dxp: np.ndarray, dwin: np.ndarray, stride: int, dilation: int) -> None:
    """Adjoint of ``_windows``: accumulate ``(N, C, k, k, Ho, Wo)`` into ``dxp``."""
    k, ho, wo = dwin.shape[2], dwin.shape[4], dwin.shape[5]
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += dwin[
                :, :, i, j
            ]


def im2col(x: np.ndarray, k: int, stride: int, pad: int, dilation: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho = _out_size(h, k, stride, pad, dilation)
    wo = _out_size(w, k, stride, pad, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, k, stride, dilation, ho, wo)
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    dwin = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    _scatter_windows(dxp, dwin, stride, dilation)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


class Conv2d(Module):
    """Cross-correlation with square kernel, stride, zero padding and dilation."""

    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, dilation=1, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self._add_param("weight", kaiming_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k))
        if bias:
            self._add_param("bias", np.zeros(out_ch, dtype=np.float32))

    def forward(self, x):
        check_tensor4(x)
        if x.shape[1] != self.in_ch:
            raise ContractError(
                f"conv2d expects {self.in_ch} input channels, got input {x.shape} "
                f"for weight {self.params['weight'].shape}"
            )
        n, _, h, w = x.shape
        if _out_size(h, self.k, self.stride, self.padding, self.dilation) < 1 or _out_size(
            w, self.k, self.stride, self.padding, self.dilation
        ) < 1:
            raise ContractError(f"conv2d output would be empty for input {x.shape}")
        cols, ho, wo = im2col(x, self.k, self.stride, self.padding, self.dilation)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        out = cols @ wmat.T
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (x.shape, cols, ho, wo)
        return out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        shape, cols, ho, wo = self._cache
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        self.grads["weight"] += (d2.T @ cols).reshape(self.params["weight"].shape)
        if "bias" in self.params:
            self.grads["bias"] += d2.sum(axis=0, dtype=np.float64).astype(self.grads["bias"].dtype)
        dcols = d2 @ self.params["weight"].reshape(self.out_ch, -1)
        return col2im(dcols, shape, self.k, self.stride, self.padding, self.dilation, ho, wo)


class ConvTranspose2d(Module):
    """Stride-2 transposed convolution that exactly doubles H and W.

    Weight layout is ``(in_ch, out_ch, k, k)``; the forward pass is the
    adjoint (input gradient) of the matching strided ``Conv2d``.
    """

    _PADDING = {2: 0, 4: 1}

    def __init__(self, in_ch, out_ch, k=4, stride=2, bias=True, rng=None):
        super().__init__()
        if stride != 2 or k not in self._PADDING:
            raise ContractError(f"transposed conv needs stride 2 and k in (2, 4), got k={k} stride={stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.padding = self._PADDING[k]
        # fan-in seen by each output pixel: in_ch * (k / stride)^2
        fan_in = in_ch * (k // stride) ** 2
        self._add_param("weight", kaiming_uniform(rng, (in_ch, out_ch, k, k), fan_in))
        if bias:
            self._add_param("bias", np.zeros(out_ch, dtype=np.float32))

    def forward(self, x):
        check_tensor4(x)
        if x.shape[1] != self.in_ch:
            raise ContractError(
                f"conv_transpose2d expects {self.in_ch} input channels, got input {x.shape} "
                f"for weight {self.params['weight'].shape}"
            )
        n, _, h, w = x.shape
        x2 = x.transpose(0, 2, 3, 1).reshape(-1, self.in_ch)
        cols = x2 @ self.params["weight"].reshape(self.in_ch, -1)
        out_shape = (n, self.out_ch, 2 * h, 2 * w)
        out = col2im(cols, out_shape, self.k, self.stride, self.padding, 1, h, w)
        if "bias" in self.params:
            out = out + self.params["bias"].reshape(1, -1, 1, 1)
        self._cache = (x2, out_shape)
        return np.ascontiguousarray(out)

    def backward(self, dout):
        x2, out_shape = self._cache
        n, _, h2, w2 = out_shape
        dcols, h, w = im2col(dout, self.k, self.stride, self.padding, 1)
        self.grads["weight"] += (x2.T @ dcols).reshape(self.params["weight"].shape)
        if "bias" in self.params:
            self.grads["bias"] += dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(self.grads["bias"].dtype)
        dx2 = dcols @ self.params["weight"].reshape(self.in_ch, -1).T
        return dx2.reshape(n, h, w, self.in_ch).transpose(0, 3, 1, 2)


# --------------------------------------------------------------------------
# pooling and normalization
# --------------------------------------------------------------------------


class AvgPool2d(Module):
    """Average pooling; zero padding is excluded from each window's divisor."""

    def __init__(self, k, stride=None, padding=0):
        super().__init__()
        self.k, self.stride, self.padding = k, stride or k, padding

    def forward(self, x):
        check_tensor4(x)
        n, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.padding
        ho, wo = _out_size(h, k, s, p, 1), _out_size(w, k, s, p, 1)
        if ho < 1 or wo < 1 or k > h + 2 * p or k > w + 2 * p:
            raise ContractError(f"pool kernel {k} too large for input {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        sums = _windows(xp, k, s, 1, ho, wo).sum(axis=(2, 3), dtype=np.float64)
        ones = np.pad(np.ones((1, 1, h, w)), ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ones((1, 1, h, w))
        counts = _windows(ones, k, s, 1, ho, wo).sum(axis=(2, 3))
        self._cache = (x.shape, counts, ho, wo)
        return (sums / counts).astype(x.dtype)

    def backward(self, dout):
        shape, counts, ho, wo = self._cache
        n, c, h, w = shape
        k, s, p = self.k, self.stride, self.padding
        g = (dout / counts).astype(dout.dtype)
        dwin = np.broadcast_to(g[:, :, None, None], (n, c, k, k, ho, wo))
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        _scatter_windows(dxp, dwin, s, 1)
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class BatchNorm2d(Module):
    def __init__(self, ch, momentum=0.1, eps=1e-5):
        super().__init__()
        self.ch, self.momentum, self.eps = ch, momentum, eps
        self._add_param("gamma", np.ones(ch, dtype=np.float32))
        self._add_param("beta", np.zeros(ch, dtype=np.float32))
        self.buffers["running_mean"] = np.zeros(ch, dtype=np.float64)
        self.buffers["running_var"] = np.ones(ch, dtype=np.float64)

    def forward(self, x):
        check_tensor4(x)
        if x.shape[1] != self.ch:
            raise ContractError(f"batch_norm2d expects {self.ch} channels, got {x.shape}")
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        beta = self.params["beta"].reshape(1, -1, 1, 1)
        if not self.training:
            mean = self.buffers["running_mean"].reshape(1, -1, 1, 1)
            var = self.buffers["running_var"].reshape(1, -1, 1, 1)
            inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat = (x - mean.astype(x.dtype)) * inv
            self._cache = (xhat, inv, False)
            return xhat * gamma + beta
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ContractError(f"batch_norm2d in train mode needs N*H*W >= 2, got {x.shape}")
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = ((x - mean.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3), dtype=np.float64)
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm *= 1 - self.momentum
        rm += self.momentum * mean
        rv *= 1 - self.momentum
        rv += self.momentum * var * m / (m - 1)
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype).reshape(1, -1, 1, 1)
        xhat = (x - mean.astype(x.dtype).reshape(1, -1, 1, 1)) * inv
        self._cache = (xhat, inv, True)
        return xhat * gamma + beta

    def backward(self, dout):
        xhat, inv, batch_stats = self._cache
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        self.grads["gamma"] += (dout * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(self.grads["gamma"].dtype)
        self.grads["beta"] += dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(self.grads["beta"].dtype)
        dxhat = dout * gamma
        if not batch_stats:
            return dxhat * inv
        mean_d = dxhat.mean(axis=(0, 2, 3), dtype=np.float64).astype(dout.dtype).reshape(1, -1, 1, 1)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), dtype=np.float64).astype(dout.dtype).reshape(1, -1, 1, 1)
        return inv * (dxhat - mean_d - xhat * mean_dx)


# --------------------------------------------------------------------------
# pointwise
# --------------------------------------------------------------------------


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Sigmoid(Module):
    def forward(self, x):
        out = sigmoid(x)
        self._out = out
        return out

    def backward(self, dout):
        return dout * self._out * (1 - self._out)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def channel_softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over axis 1 of an ``(N, C, H, W)`` array."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Softmax(Module):
    def forward(self, x):
        check_tensor4(x)
        self._out = channel_softmax(x)
        return self._out

    def backward(self, dout):
        y = self._out
        return y * (dout - (dout * y).sum(axis=1, keepdims=True))


def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 4 and b.shape[0] == 1 and b.shape[2:] == (1, 1) and b.shape[1] == a.shape[1]:
        return
    raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(g.dtype)


class Add(Module):
    """Elementwise ``a + b``; ``b`` may be a per-channel ``(1, C, 1, 1)`` array."""

    def forward(self, a, b):
        _check_binary(a, b, "add")
        self._shape_b = b.shape
        return a + b

    def backward(self, dout):
        return dout, _reduce_to(dout, self._shape_b)

    def __call__(self, a, b):
        return self.forward(a, b)


class Mul(Module):
    """Elementwise ``a * b``; ``b`` may be a per-channel ``(1, C, 1, 1)`` array."""

    def forward(self, a, b):
        _check_binary(a, b, "mul")
        self._a, self._b = a, b
        return a * b

    def backward(self, dout):
        return dout * self._b, _reduce_to(dout * self._a, self._b.shape)

    def __call__(self, a, b):
        return self.forward(a, b)
