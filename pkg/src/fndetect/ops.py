"""Convolution, normalization and resampling operators on ``(n, c, h, w)`` tensors.

Convolution is cross-correlation (no kernel flip) with zero padding.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Tensor, _make, _sigmoid, as_tensor, concat, relu, sigmoid, silu

_AXES = ("batch", "channel", "height", "width")


@dataclass
class ConvWeights:
    """Kernel of shape ``(c_out, c_in // groups, k, k)`` plus optional bias."""

    kernel: Tensor
    bias: Tensor = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        self.kernel = as_tensor(self.kernel)
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
        if self.kernel.ndim != 4:
            raise DimensionError("kernel must be rank 4", axis="kernel")
        c_out, _, kh, kw = self.kernel.shape
        if kh != kw or kh < 1:
            raise ConfigError(f"kernel must be square with k >= 1, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ConfigError("stride >= 1, padding >= 0 and groups >= 1 required")
        if c_out % self.groups:
            raise ConfigError(f"groups={self.groups} does not divide c_out={c_out}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise DimensionError(f"bias shape {self.bias.shape} != ({c_out},)", axis="channel")

    @property
    def k(self):
        return self.kernel.shape[2]

    @property
    def c_out(self):
        return self.kernel.shape[0]

    @property
    def c_in(self):
        return self.kernel.shape[1] * self.groups


@dataclass
class BatchNormParams:
    """Learnable affine ``gamma``/``beta`` plus running statistics.

    ``momentum`` follows the convention ``running = (1 - m) * running + m * batch``.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.03
    training: bool = True

    def __post_init__(self):
        self.gamma = as_tensor(self.gamma)
        self.beta = as_tensor(self.beta)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be nonnegative")

    @classmethod
    def identity(cls, c, **kw):
        return cls(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), **kw)

    @property
    def channels(self):
        return self.gamma.shape[0]


# -- operation counting ----------------------------------------------------

@dataclass
class OpRecord:
    op: str
    c_in: int
    c_out: int
    k: int
    stride: int
    groups: int
    h_out: int
    w_out: int
    macs: int


@dataclass
class OpCounter:
    records: list = field(default_factory=list)

    @property
    def macs(self):
        return sum(r.macs for r in self.records)


_counters = []


@contextmanager
def count_ops():
    """Collect an :class:`OpRecord` for every convolution executed inside the block.

    MACs are counted per image (batch size divided out).
    """
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(op, c_in, c_out, k, stride, groups, h_out, w_out):
    if not _counters:
        return
    macs = h_out * w_out * k * k * (c_in // groups) * c_out
    rec = OpRecord(op, c_in, c_out, k, stride, groups, h_out, w_out, macs)
    for c in _counters:
        c.records.append(rec)


# -- convolution kernels ---------------------------------------------------

def _check4(x, what="input"):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}", axis="rank")


def _out_size(size, k, s, p, axis):
    span = size + 2 * p - k
    if span < 0:
        raise DimensionError(f"{axis} {size} too small for kernel {k} with padding {p}", axis=axis)
    return span // s + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp, k, s, ho, wo):
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _conv_fwd(x, kernel, s, p, groups):
    n, c, h, w = x.shape
    o, cg, k, _ = kernel.shape
    ho = _out_size(h, k, s, p, "height")
    wo = _out_size(w, k, s, p, "width")
    xp = _pad(x, p)
    win = _windows(xp, k, s, ho, wo)  # n, c, ho, wo, k, k
    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ kernel.reshape(o, -1).T
        out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), cols
    if cg == 1 and o == c:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += win[..., i, j] * kernel[:, 0, i, j][None, :, None, None]
        return out, None
    wg = win.reshape(n, groups, cg, ho, wo, k, k)
    kg = kernel.reshape(groups, o // groups, cg, k, k)
    out = np.einsum("ngchwij,gocij->ngohw", wg, kg, optimize=True)
    return np.ascontiguousarray(out.reshape(n, o, ho, wo)), None


def _conv_bwd(g, x, kernel, s, p, groups, cols):
    n, c, h, w = x.shape
    o, cg, k, _ = kernel.shape
    _, _, ho, wo = g.shape
    xp = _pad(x, p)
    gxp = np.zeros_like(xp)
    if groups == 1:
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gm.T @ cols).reshape(kernel.shape)
        gcols = (gm @ kernel.reshape(o, -1)).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[..., i, j]
    else:
        win = _windows(xp, k, s, ho, wo)
        if cg == 1 and o == c:
            gk = np.empty_like(kernel)
            for i in range(k):
                for j in range(k):
                    gk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, win[..., i, j])
                    gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                        g * kernel[:, 0, i, j][None, :, None, None]
                    )
        else:
            wg = win.reshape(n, groups, cg, ho, wo, k, k)
            kg = kernel.reshape(groups, o // groups, cg, k, k)
            gg = g.reshape(n, groups, o // groups, ho, wo)
            gk = np.einsum("ngohw,ngchwij->gocij", gg, wg, optimize=True).reshape(kernel.shape)
            gwin = np.einsum("ngohw,gocij->ngchwij", gg, kg, optimize=True).reshape(n, c, ho, wo, k, k)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gwin[..., i, j]
    gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
    return np.ascontiguousarray(gx), gk


def _check_conv(x, w):
    _check4(x)
    if x.shape[1] != w.c_in:
        raise DimensionError(
            f"input has {x.shape[1]} channels, weights expect {w.c_in} "
            f"({w.groups} groups x {w.kernel.shape[1]})",
            axis="channel",
        )


def conv2d(x, w, _op="conv"):
    """Grouped 2-D cross-correlation; ``h_out = (h + 2p - k) // s + 1``."""
    x = as_tensor(x)
    _check_conv(x, w)
    kernel = w.kernel
    out, cols = _conv_fwd(x.data, kernel.data, w.stride, w.padding, w.groups)
    _record(_op, w.c_in, w.c_out, w.k, w.stride, w.groups, out.shape[2], out.shape[3])
    if w.bias is not None:
        out += w.bias.data[None, :, None, None]
    parents = (x, kernel) if w.bias is None else (x, kernel, w.bias)

    def bw(g):
        gx, gk = _conv_bwd(g, x.data, kernel.data, w.stride, w.padding, w.groups, cols)
        if w.bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _make(out, parents, bw)


def dwconv2d(x, w):
    """Depthwise convolution: one ``k x k`` filter per channel."""
    x = as_tensor(x)
    _check4(x)
    c = x.shape[1]
    if not (w.groups == c == w.c_out and w.kernel.shape[1] == 1):
        raise ConfigError(
            f"depthwise conv needs groups == c_in == c_out, got groups={w.groups}, "
            f"c_in={c}, c_out={w.c_out}"
        )
    return conv2d(x, w, _op="dwconv")


def pwconv2d(x, w):
    """Pointwise (1x1) convolution: channel mixing only."""
    if w.k != 1 or w.stride != 1 or w.padding != 0:
        raise ConfigError(f"pointwise conv needs k=1, s=1, p=0 (got k={w.k}, s={w.stride}, p={w.padding})")
    return conv2d(x, w, _op="pwconv")


def pconv2d(x, w, cp):
    """Partial convolution over the leading ``cp`` channels; the rest pass through untouched."""
    x = as_tensor(x)
    _check4(x)
    c = x.shape[1]
    if not 1 <= cp <= c:
        raise ConfigError(f"partial channel count {cp} outside [1, {c}]")
    if w.c_in != cp or w.c_out != cp or w.groups != 1:
        raise ConfigError(f"partial conv weights must map {cp} -> {cp} channels")
    k, p = w.k, w.padding
    if w.stride != 1 or k % 2 == 0 or p != (k - 1) // 2:
        raise ConfigError("partial conv must preserve spatial size (odd k, p=(k-1)/2, s=1)")
    head = np.ascontiguousarray(x.data[:, :cp])
    conv, cols = _conv_fwd(head, w.kernel.data, 1, p, 1)
    _record("pconv", cp, cp, k, 1, 1, conv.shape[2], conv.shape[3])
    out = x.data.copy()
    out[:, :cp] = conv
    if w.bias is not None:
        out[:, :cp] += w.bias.data[None, :, None, None]
    parents = (x, w.kernel) if w.bias is None else (x, w.kernel, w.bias)

    def bw(g):
        gx = g.copy()
        ghead = np.ascontiguousarray(g[:, :cp])
        gh, gk = _conv_bwd(ghead, head, w.kernel.data, 1, p, 1, cols)
        gx[:, :cp] = gh
        if w.bias is None:
            return gx, gk
        return gx, gk, ghead.sum(axis=(0, 2, 3))

    return _make(out, parents, bw)


# -- normalization ---------------------------------------------------------

def batchnorm(x, p, training=None):
    """Per-channel batch normalization.

    Training mode normalizes with biased batch statistics and folds the
    unbiased variance into the running estimate; inference mode uses the
    running statistics.
    """
    x = as_tensor(x)
    _check4(x)
    c = x.shape[1]
    if p.channels != c:
        raise DimensionError(f"batchnorm has {p.channels} channels, input has {c}", axis="channel")
    if training is None:
        training = p.training
    gamma, beta = p.gamma, p.beta
    shape = (1, c, 1, 1)
    if not training:
        scale = gamma.data / np.sqrt(p.running_var + p.eps)
        shift = beta.data - p.running_mean * scale
        out = x.data * scale.reshape(shape).astype(x.dtype) + shift.reshape(shape).astype(x.dtype)

        def bw_eval(g):
            xhat = (x.data - p.running_mean.reshape(shape)) / np.sqrt(p.running_var.reshape(shape) + p.eps)
            return (g * scale.reshape(shape),
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

        return _make(out.astype(x.dtype), (x, gamma, beta), bw_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    mom = p.momentum
    unbiased = var.reshape(c) * (m / max(m - 1, 1))
    p.running_mean = (1.0 - mom) * p.running_mean + mom * mu.reshape(c)
    p.running_var = (1.0 - mom) * p.running_var + mom * unbiased

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        gx = inv / m * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def fuse_conv_bn(w, p):
    """Fold inference-mode batchnorm into the preceding convolution."""
    if p.training:
        raise ConfigError("conv-BN fusion needs batchnorm in inference mode")
    if p.channels != w.c_out:
        raise DimensionError("batchnorm channels differ from conv output channels", axis="channel")
    std = np.sqrt(p.running_var + p.eps)
    scale = p.gamma.data.astype(np.float64) / std
    bias = np.zeros(w.c_out) if w.bias is None else w.bias.data.astype(np.float64)
    kernel = w.kernel.data * scale[:, None, None, None]
    fused_bias = (bias - p.running_mean) * scale + p.beta.data
    return ConvWeights(Tensor(kernel), Tensor(fused_bias), w.stride, w.padding, w.groups)


# -- activations and plumbing ----------------------------------------------

_ACTIVATIONS = {"relu": relu, "silu": silu, "sigmoid": sigmoid, "identity": lambda x: x}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}") from None
    return fn(as_tensor(x))


def maxpool2d(x, k, s=None, p=0):
    """Max pooling with implicit -inf padding; ties route gradient to the first maximum."""
    x = as_tensor(x)
    _check4(x)
    s = k if s is None else s
    n, c, h, w = x.shape
    ho = _out_size(h, k, s, p, "height")
    wo = _out_size(w, k, s, p, "width")
    xp = x.data if p == 0 else np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = _windows(xp, k, s, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            sel = np.where(arg == idx, g, 0.0)
            gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += sel
        return (np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w]),)

    return _make(np.ascontiguousarray(out), (x,), bw)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    _check4(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def concat_channels(xs):
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise DimensionError("concat needs at least one tensor", axis="channel")
    for t in xs:
        _check4(t)
    ref = xs[0].shape
    for t in xs[1:]:
        for ax in (0, 2, 3):
            if t.shape[ax] != ref[ax]:
                raise DimensionError(
                    f"concat {_AXES[ax]} mismatch: {t.shape[ax]} vs {ref[ax]}", axis=_AXES[ax]
                )
    if len(xs) == 1:
        return xs[0]
    return concat(xs, axis=1)


def sigmoid_np(x):
    return _sigmoid(np.asarray(x, dtype=np.float64))
