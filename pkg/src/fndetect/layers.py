"""Parameterized building blocks.

Every block can describe itself as a list of :class:`~fndetect.cost.LayerSpec`
via ``plan(prefix, h, w)``, which the cost ledger consumes. The plan is
written from the block's declared sizes, not from its allocated arrays, so
comparing the two is a real check.
"""

import numpy as np

from . import ops
from .cost import LayerSpec
from .errors import ConfigError
from .tensor import Tensor, as_tensor, clamp_min, matmul, parameter, reshape, softmax, transpose


class Module:
    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_buffers(self):
        """``(name, BatchNormParams, attribute)`` for every running statistic."""
        for name, m in self.named_modules():
            bn = getattr(m, "params", None)
            if isinstance(bn, ops.BatchNormParams):
                yield f"{name}.running_mean", bn, "running_mean"
                yield f"{name}.running_var", bn, "running_var"

    def num_params(self):
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
            bn = getattr(m, "params", None)
            if isinstance(bn, ops.BatchNormParams):
                bn.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def plan(self, prefix, h, w):
        raise NotImplementedError


def _kaiming(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    def __init__(self, c_in, c_out, k=1, s=1, p=None, groups=1, bias=False, rng=None):
        rng = rng or np.random.default_rng(0)
        if c_in % groups or c_out % groups:
            raise ConfigError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        self.c_in, self.c_out, self.k, self.s, self.groups = c_in, c_out, k, s, groups
        self.p = k // 2 if p is None else p
        self.weight = parameter(_kaiming(rng, (c_out, c_in // groups, k, k)))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    @property
    def conv_weights(self):
        return ops.ConvWeights(self.weight, self.bias, self.s, self.p, self.groups)

    def forward(self, x):
        w = self.conv_weights
        if self.k == 1 and self.s == 1 and self.p == 0 and self.groups == 1:
            return ops.pwconv2d(x, w)
        return ops.conv2d(x, w)

    def out_hw(self, h, w):
        return (h + 2 * self.p - self.k) // self.s + 1, (w + 2 * self.p - self.k) // self.s + 1

    def plan(self, prefix, h, w):
        ho, wo = self.out_hw(h, w)
        op = "pwconv" if self.k == 1 and self.groups == 1 else "conv"
        spec = LayerSpec(prefix, op, self.c_in, self.c_out, self.k, self.s, self.groups, ho, wo,
                         extra_params=self.c_out if self.bias is not None else 0)
        return [spec], ho, wo


class BatchNorm(Module):
    def __init__(self, c, momentum=0.03, eps=1e-5):
        self.c = c
        self.params = ops.BatchNormParams(
            parameter(np.ones(c)), parameter(np.zeros(c)), np.zeros(c), np.ones(c),
            eps=eps, momentum=momentum,
        )
        # expose learnables to named_parameters()
        self.gamma = self.params.gamma
        self.beta = self.params.beta

    def forward(self, x):
        return ops.batchnorm(x, self.params, training=self.training)

    def plan(self, prefix, h, w):
        return [LayerSpec(prefix, "bn", c_in=self.c, c_out=self.c, h=h, w=w)], h, w


class ConvBN(Module):
    """Convolution without bias, batchnorm, activation."""

    def __init__(self, c_in, c_out, k=1, s=1, p=None, act="silu", rng=None):
        self.conv = Conv(c_in, c_out, k, s, p, rng=rng)
        self.bn = BatchNorm(c_out)
        self.act = act
        self.fused = None

    def forward(self, x):
        if self.fused is not None:
            y = ops.conv2d(x, self.fused)
        else:
            y = self.bn(self.conv(x))
        return ops.activation(y, self.act)

    def fuse(self):
        """Fold the batchnorm into the convolution (inference only)."""
        self.fused = ops.fuse_conv_bn(self.conv.conv_weights, self.bn.params)
        return self

    def plan(self, prefix, h, w):
        a, h, w = self.conv.plan(prefix + ".conv", h, w)
        b, h, w = self.bn.plan(prefix + ".bn", h, w)
        return a + b, h, w


class PConv(Module):
    def __init__(self, c, cp, k=3, rng=None):
        if not 1 <= cp <= c:
            raise ConfigError(f"partial channels {cp} outside [1, {c}]")
        self.c, self.cp, self.k = c, cp, k
        self.weight = parameter(_kaiming(rng or np.random.default_rng(0), (cp, cp, k, k)))

    def forward(self, x):
        return ops.pconv2d(x, ops.ConvWeights(self.weight, None, 1, self.k // 2), self.cp)

    def plan(self, prefix, h, w):
        return [LayerSpec(prefix, "pconv", self.c, self.c, self.k, 1, 1, h, w, cp=self.cp)], h, w


def partial_channels(c, ratio):
    cp = c * ratio
    if abs(cp - round(cp)) > 1e-9 or round(cp) < 1:
        raise ConfigError(f"pconv ratio {ratio} on {c} channels does not give a positive integer")
    return int(round(cp))


class FasterNetBlock(Module):
    """PConv, then PWConv (2x expand) + BN + act, then PWConv back, plus residual."""

    def __init__(self, c, ratio=0.25, expand=2, act="relu", rng=None):
        rng = rng or np.random.default_rng(0)
        self.pconv = PConv(c, partial_channels(c, ratio), 3, rng=rng)
        self.pw1 = ConvBN(c, c * expand, 1, act=act, rng=rng)
        self.pw2 = Conv(c * expand, c, 1, rng=rng)

    def forward(self, x):
        return x + self.pw2(self.pw1(self.pconv(x)))

    def plan(self, prefix, h, w):
        specs = []
        for name, m in (("pconv", self.pconv), ("pw1", self.pw1), ("pw2", self.pw2)):
            s, h, w = m.plan(f"{prefix}.{name}", h, w)
            specs += s
        return specs, h, w


class SPPF(Module):
    """Three serial same-size max pools, concatenated with the input, fused by a 1x1 conv."""

    def __init__(self, c, pool_k=5, rng=None):
        self.c, self.pool_k = c, pool_k
        self.cv = ConvBN(4 * c, c, 1, rng=rng)

    def pooled(self, x):
        k = self.pool_k
        feats = [as_tensor(x)]
        for _ in range(3):
            feats.append(ops.maxpool2d(feats[-1], k, 1, k // 2))
        return feats

    def forward(self, x):
        return self.cv(ops.concat_channels(self.pooled(x)))

    def plan(self, prefix, h, w):
        return self.cv.plan(prefix + ".cv", h, w)


class PSA(Module):
    """Attention on half the channels.

    The second half goes through single-head spatial self-attention and a
    pointwise feed-forward pair, each with a residual; halves are re-joined
    and mixed by a 1x1 conv.
    """

    def __init__(self, c, rng=None):
        if c % 2:
            raise ConfigError(f"PSA needs an even channel count, got {c}")
        rng = rng or np.random.default_rng(0)
        self.c = c
        half = c // 2
        self.half = half
        self.key_dim = max(half // 2, 1)
        self.q = Conv(half, self.key_dim, 1, bias=True, rng=rng)
        self.k = Conv(half, self.key_dim, 1, bias=True, rng=rng)
        self.v = Conv(half, half, 1, bias=True, rng=rng)
        self.proj = ConvBN(half, half, 1, act="identity", rng=rng)
        self.ffn1 = ConvBN(half, 2 * half, 1, rng=rng)
        self.ffn2 = ConvBN(2 * half, half, 1, act="identity", rng=rng)
        self.out = ConvBN(c, c, 1, rng=rng)
        self.last_attention = None

    def attend(self, b):
        n, _, h, w = b.shape
        hw = h * w
        q = transpose(reshape(self.q(b), (n, self.key_dim, hw)), (0, 2, 1))
        k = reshape(self.k(b), (n, self.key_dim, hw))
        v = reshape(self.v(b), (n, self.half, hw))
        attn = softmax(matmul(q, k) * (1.0 / np.sqrt(self.key_dim)), axis=-1)
        self.last_attention = attn.data
        out = matmul(v, transpose(attn, (0, 2, 1)))
        return self.proj(reshape(out, (n, self.half, h, w)))

    def forward(self, x):
        x = as_tensor(x)
        a = x[:, : self.half]
        b = x[:, self.half :]
        b = b + self.attend(b)
        b = b + self.ffn2(self.ffn1(b))
        return self.out(ops.concat_channels([a, b]))

    def plan(self, prefix, h, w):
        specs = []
        for name in ("q", "k", "v", "proj", "ffn1", "ffn2", "out"):
            s, _, _ = getattr(self, name).plan(f"{prefix}.{name}", h, w)
            specs += s
        return specs, h, w


class RepConv(Module):
    """Parallel 3x3 conv-BN and 1x1 conv-BN branches, summed, then activated.

    :meth:`fuse` collapses both branches into one biased 3x3 convolution.
    """

    def __init__(self, c_in, c_out, act="silu", rng=None):
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.conv3 = ConvBN(c_in, c_out, 3, act="identity", rng=rng)
        self.conv1 = ConvBN(c_in, c_out, 1, act="identity", rng=rng)
        self.act = act
        self.fused = None

    def forward(self, x):
        if self.fused is not None:
            return ops.activation(ops.conv2d(x, self.fused), self.act)
        return ops.activation(self.conv3(x) + self.conv1(x), self.act)

    def fuse(self):
        w3 = ops.fuse_conv_bn(self.conv3.conv.conv_weights, self.conv3.bn.params)
        w1 = ops.fuse_conv_bn(self.conv1.conv.conv_weights, self.conv1.bn.params)
        kernel = w3.kernel.data.copy()
        kernel[:, :, 1, 1] += w1.kernel.data[:, :, 0, 0]
        bias = w3.bias.data + w1.bias.data
        self.fused = ops.ConvWeights(Tensor(kernel), Tensor(bias), 1, 1, 1)
        return self

    def plan(self, prefix, h, w):
        a, _, _ = self.conv3.plan(prefix + ".conv3", h, w)
        b, _, _ = self.conv1.plan(prefix + ".conv1", h, w)
        return a + b, h, w


class BasicBlockReverse(Module):
    """1x1 conv-BN-act, then a RepConv 3x3, with a residual add."""

    def __init__(self, c, rng=None):
        self.conv1 = ConvBN(c, c, 1, rng=rng)
        self.conv2 = RepConv(c, c, rng=rng)

    def forward(self, x):
        return x + self.conv2(self.conv1(x))

    def plan(self, prefix, h, w):
        a, _, _ = self.conv1.plan(prefix + ".conv1", h, w)
        b, _, _ = self.conv2.plan(prefix + ".conv2", h, w)
        return a + b, h, w


class CSPStage(Module):
    """Split-transform-merge fusion block.

    Two 1x1 convs split the input. The second stream runs through
    ``n_blocks`` residual blocks; the first stream, the second stream and
    every block output are concatenated and fused by a final 1x1 conv.
    """

    def __init__(self, c_in, c_out, n_blocks=1, rng=None):
        if c_out % 2:
            raise ConfigError(f"CSPStage output channels {c_out} do not split evenly")
        rng = rng or np.random.default_rng(0)
        hidden = c_out // 2
        self.c_in, self.c_out, self.hidden = c_in, c_out, hidden
        self.conv1 = ConvBN(c_in, hidden, 1, rng=rng)
        self.conv2 = ConvBN(c_in, hidden, 1, rng=rng)
        self.blocks = [BasicBlockReverse(hidden, rng=rng) for _ in range(n_blocks)]
        self.conv3 = ConvBN(hidden * (n_blocks + 2), c_out, 1, rng=rng)

    def forward(self, x):
        y2 = self.conv2(x)
        outs = [self.conv1(x), y2]
        for block in self.blocks:
            y2 = block(y2)
            outs.append(y2)
        return self.conv3(ops.concat_channels(outs))

    def plan(self, prefix, h, w):
        specs = []
        for name, m in [("conv1", self.conv1), ("conv2", self.conv2)] + [
            (f"blocks.{i}", b) for i, b in enumerate(self.blocks)
        ] + [("conv3", self.conv3)]:
            s, _, _ = m.plan(f"{prefix}.{name}", h, w)
            specs += s
        return specs, h, w


class Bottleneck(Module):
    def __init__(self, c, shortcut=False, rng=None):
        self.cv1 = ConvBN(c, c, 3, rng=rng)
        self.cv2 = ConvBN(c, c, 3, rng=rng)
        self.shortcut = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.shortcut else y

    def plan(self, prefix, h, w):
        a, _, _ = self.cv1.plan(prefix + ".cv1", h, w)
        b, _, _ = self.cv2.plan(prefix + ".cv2", h, w)
        return a + b, h, w


class C2f(Module):
    """YOLOv8-style fusion block, kept as the ablation baseline for CSPStage."""

    def __init__(self, c_in, c_out, n_blocks=1, rng=None):
        if c_out % 2:
            raise ConfigError(f"C2f output channels {c_out} do not split evenly")
        rng = rng or np.random.default_rng(0)
        hidden = c_out // 2
        self.hidden = hidden
        self.cv1 = ConvBN(c_in, 2 * hidden, 1, rng=rng)
        self.blocks = [Bottleneck(hidden, rng=rng) for _ in range(n_blocks)]
        self.cv2 = ConvBN((2 + n_blocks) * hidden, c_out, 1, rng=rng)

    def forward(self, x):
        y = self.cv1(x)
        outs = [y[:, : self.hidden], y[:, self.hidden :]]
        for block in self.blocks:
            outs.append(block(outs[-1]))
        return self.cv2(ops.concat_channels(outs))

    def plan(self, prefix, h, w):
        specs = []
        mods = [("cv1", self.cv1)] + [(f"blocks.{i}", b) for i, b in enumerate(self.blocks)] + [("cv2", self.cv2)]
        for name, m in mods:
            s, _, _ = m.plan(f"{prefix}.{name}", h, w)
            specs += s
        return specs, h, w


class WeightedFusion(Module):
    """Fast normalized fusion: ``sum(relu(w_i) * x_i) / (sum(relu(w_i)) + eps)``."""

    def __init__(self, n_inputs, eps=1e-4):
        self.weight = parameter(np.ones(n_inputs))
        self.eps = eps

    def forward(self, xs):
        w = clamp_min(self.weight, 0.0)
        total = w.sum() + self.eps
        out = None
        for i, x in enumerate(xs):
            term = x * reshape(w[i : i + 1], (1, 1, 1, 1))
            out = term if out is None else out + term
        return out / reshape(total, (1, 1, 1, 1))

    def plan(self, prefix, h, w):
        return [LayerSpec(prefix, "param", extra_params=self.weight.size)], h, w

