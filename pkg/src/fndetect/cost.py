"""Analytic FLOPs / memory-access / parameter accounting.

One multiply-accumulate counts as one FLOP. Memory access is counted in
elements (input feature map + output feature map + weights). Bias and
batchnorm scalars are counted as parameters but not as FLOPs.
"""

from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class ConvCost:
    flops: int
    mem_access: int
    params: int
    h: int
    w: int
    c: int
    c_out: int
    cp: int
    k: int
    stride: int = 1
    # the h*w*2c approximation that drops the weight term
    mem_access_approx: int = 0

    def __post_init__(self):
        if min(self.flops, self.mem_access, self.params) < 0:
            raise ConfigError("costs must be nonnegative")
        if self.cp > self.c:
            raise ConfigError(f"cp={self.cp} exceeds c={self.c}")


def _positive(**dims):
    for name, v in dims.items():
        if int(v) != v or v < 1:
            raise ConfigError(f"{name} must be a positive integer, got {v}")


def cost_conv(h, w, k, c_in, c_out):
    _positive(h=h, w=w, k=k, c_in=c_in, c_out=c_out)
    return ConvCost(
        flops=h * w * k * k * c_in * c_out,
        mem_access=h * w * (c_in + c_out) + k * k * c_in * c_out,
        params=k * k * c_in * c_out,
        h=h, w=w, c=c_in, c_out=c_out, cp=c_in, k=k,
        mem_access_approx=h * w * (c_in + c_out),
    )


def cost_dwconv(h, w, k, c):
    _positive(h=h, w=w, k=k, c=c)
    return ConvCost(
        flops=h * w * k * k * c,
        mem_access=h * w * 2 * c + k * k * c,
        params=k * k * c,
        h=h, w=w, c=c, c_out=c, cp=c, k=k,
        mem_access_approx=h * w * 2 * c,
    )


def cost_pconv(h, w, k, cp, c=None):
    """Cost of convolving ``cp`` of ``c`` channels (``c`` defaults to ``cp``)."""
    c = cp if c is None else c
    _positive(h=h, w=w, k=k, cp=cp, c=c)
    return ConvCost(
        flops=h * w * k * k * cp * cp,
        mem_access=h * w * 2 * cp + k * k * cp * cp,
        params=k * k * cp * cp,
        h=h, w=w, c=c, c_out=c, cp=cp, k=k,
        mem_access_approx=h * w * 2 * cp,
    )


@dataclass(frozen=True)
class LayerSpec:
    """One countable layer of a built graph.

    ``op`` is one of conv, dwconv, pwconv, pconv, bn, param. For convolutions
    ``h``/``w`` are the output spatial dims. ``extra_params`` covers bias
    vectors; ``op="param"`` rows carry free parameters such as fusion weights.
    """

    name: str
    op: str
    c_in: int = 0
    c_out: int = 0
    k: int = 1
    stride: int = 1
    groups: int = 1
    h: int = 0
    w: int = 0
    cp: int = 0
    extra_params: int = 0


@dataclass
class LayerCost:
    name: str
    op: str
    flops: int
    mem_access: int
    params: int


@dataclass
class CostReport:
    layers: list = field(default_factory=list)

    @property
    def flops(self):
        return sum(r.flops for r in self.layers)

    @property
    def mem_access(self):
        return sum(r.mem_access for r in self.layers)

    @property
    def params(self):
        return sum(r.params for r in self.layers)

    def rows(self):
        return [(r.name, r.op, r.flops, r.mem_access, r.params) for r in self.layers]


def layer_cost(spec):
    op = spec.op
    if op in ("conv", "pwconv"):
        if spec.groups == 1:
            c = cost_conv(spec.h, spec.w, spec.k, spec.c_in, spec.c_out)
            flops, mem, params = c.flops, c.mem_access, c.params
        else:
            g = spec.groups
            flops = spec.h * spec.w * spec.k ** 2 * (spec.c_in // g) * spec.c_out
            params = spec.k ** 2 * (spec.c_in // g) * spec.c_out
            mem = spec.h * spec.w * (spec.c_in + spec.c_out) + params
    elif op == "dwconv":
        c = cost_dwconv(spec.h, spec.w, spec.k, spec.c_in)
        flops, mem, params = c.flops, c.mem_access, c.params
    elif op == "pconv":
        c = cost_pconv(spec.h, spec.w, spec.k, spec.cp, spec.c_in)
        flops, mem, params = c.flops, c.mem_access, c.params
    elif op == "bn":
        flops, mem, params = 0, 0, 2 * spec.c_out
    elif op == "param":
        flops, mem, params = 0, 0, 0
    else:
        raise ConfigError(f"unknown layer op {op!r}")
    return LayerCost(spec.name, op, flops, mem, params + spec.extra_params)


def graph_cost(config_or_specs):
    """Sum per-layer costs over a graph.

    Accepts a :class:`~fndetect.model.GraphConfig` (its layer plan is
    expanded) or an explicit iterable of :class:`LayerSpec`.
    """
    if config_or_specs is None:
        return CostReport()
    if hasattr(config_or_specs, "stage_widths"):
        from .model import layer_plan

        specs = layer_plan(config_or_specs)
    else:
        specs = config_or_specs
    return CostReport([layer_cost(s) for s in specs])
