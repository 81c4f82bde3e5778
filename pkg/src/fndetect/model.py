"""Detector graph: FasterNet backbone, SPPF + PSA, pyramid neck, dual heads."""

import re
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import ops
from .cost import LayerSpec
from .errors import ConfigError, ParseError
from .layers import (
    C2f, PSA, SPPF, Conv, ConvBN, CSPStage, FasterNetBlock, Module, WeightedFusion,
    partial_channels,
)
from .tensor import Tensor, as_tensor, softplus

STRIDES = (4, 8, 16, 32)
NECK_KINDS = ("pan", "bifpn")
FUSIONS = ("concat", "weighted")
BLOCKS = ("csp", "c2f")


@dataclass
class GraphConfig:
    """Declarative architecture description.

    The defaults are the desk-scale detector. Toggles beyond the core fields
    select the ablation variants: ``use_p2`` adds the stride-4 scale,
    ``neck`` picks PANet or BiFPN connectivity, ``fusion`` picks concat or
    learned weighted fusion, ``block`` picks CSPStage or C2f.
    """

    stage_widths: tuple = (16, 32, 64, 128)
    stage_depths: tuple = (1, 1, 2, 1)
    pconv_ratio: float = 0.25
    num_classes: int = 1
    head_channels: int = 32
    input_size: tuple = (64, 64)
    strides: tuple = STRIDES
    use_sppf: bool = True
    use_psa: bool = True
    use_p2: bool = True
    neck: str = "bifpn"
    fusion: str = "concat"
    block: str = "csp"
    neck_depth: int = 1
    sppf_pool: int = 5
    fasternet_act: str = "relu"
    cls_prior: float = 0.01

    def __post_init__(self):
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.strides = tuple(int(v) for v in self.strides)
        self.validate()

    def validate(self):
        if len(self.stage_widths) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("need exactly four stage widths and depths")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError(f"stage widths must be nondecreasing: {self.stage_widths}")
        if any(d < 0 for d in self.stage_depths):
            raise ConfigError("stage depths must be nonnegative")
        if not 0.0 < self.pconv_ratio <= 1.0:
            raise ConfigError(f"pconv_ratio must lie in (0, 1], got {self.pconv_ratio}")
        for c in self.stage_widths:
            partial_channels(c, self.pconv_ratio)
        if self.num_classes < 1 or self.head_channels < 1:
            raise ConfigError("num_classes and head_channels must be positive")
        if self.strides != STRIDES:
            raise ConfigError(f"strides are fixed at {STRIDES}")
        h, w = self.input_size
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise ConfigError(f"input size {self.input_size} must be a positive multiple of 32")
        if self.neck not in NECK_KINDS:
            raise ConfigError(f"neck must be one of {NECK_KINDS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}")
        if self.block not in BLOCKS:
            raise ConfigError(f"block must be one of {BLOCKS}")
        if self.fusion == "weighted" and self.neck != "bifpn":
            raise ConfigError("weighted fusion is only defined for the bifpn neck")

    @property
    def levels(self):
        """Backbone stage indices that feed detection scales (0 = stride 4)."""
        return (0, 1, 2, 3) if self.use_p2 else (1, 2, 3)

    @property
    def active_strides(self):
        return tuple(self.strides[i] for i in self.levels)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, path=None):
        kw = {}
        types = {f.name: f.default for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {raw!r}", path, lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ParseError(f"unknown config key {key!r}", path, lineno)
            default = types[key]
            try:
                if isinstance(default, tuple):
                    kw[key] = tuple(int(v) for v in value.split(",") if v.strip())
                elif isinstance(default, bool):
                    if value.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(value)
                    kw[key] = value.lower() in ("true", "1")
                elif isinstance(default, int):
                    kw[key] = int(value)
                elif isinstance(default, float):
                    kw[key] = _parse_number(value)
                else:
                    kw[key] = value
            except ValueError:
                raise ParseError(f"bad value for {key}: {value!r}", path, lineno) from None
        return cls(**kw)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read(), path)


def _parse_number(value):
    if "/" in value:
        num, den = value.split("/", 1)
        return float(num) / float(den)
    return float(value)


# Ablation ladder, in order. The last row swaps the concat BiFPN connections for
# learned weighted fusion.
ABLATIONS = {
    "m1_fasternet": dict(use_sppf=False, use_psa=False, use_p2=False, neck="pan", block="c2f"),
    "m2_sppf": dict(use_sppf=True, use_psa=False, use_p2=False, neck="pan", block="c2f"),
    "m3_psa": dict(use_sppf=True, use_psa=True, use_p2=False, neck="pan", block="c2f"),
    "m4_p2": dict(use_sppf=True, use_psa=True, use_p2=True, neck="pan", block="c2f"),
    "m5_bifpn_paths": dict(use_sppf=True, use_psa=True, use_p2=True, neck="bifpn", block="c2f"),
    "m6_cspstage": dict(use_sppf=True, use_psa=True, use_p2=True, neck="bifpn", block="csp"),
    "m7_weighted_bifpn": dict(use_sppf=True, use_psa=True, use_p2=True, neck="bifpn",
                              fusion="weighted", block="csp"),
}


def ablation_config(name, base=None):
    base = base or GraphConfig()
    try:
        return replace(base, **ABLATIONS[name])
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}; choose from {list(ABLATIONS)}") from None


# -- backbone -----------------------------------------------------------------

class Backbone(Module):
    """Patch-embedding conv (k=4, s=4), four FasterNet stages joined by
    merging convs (k=2, s=2), then optional SPPF and PSA on the last stage."""

    def __init__(self, cfg, rng):
        w = cfg.stage_widths
        self.embed = ConvBN(3, w[0], 4, 4, 0, act="identity", rng=rng)
        self.merges = [ConvBN(w[i - 1], w[i], 2, 2, 0, act="identity", rng=rng) for i in range(1, 4)]
        self.stages = [
            [FasterNetBlock(w[i], cfg.pconv_ratio, act=cfg.fasternet_act, rng=rng) for _ in range(cfg.stage_depths[i])]
            for i in range(4)
        ]
        self.blocks = [b for stage in self.stages for b in stage]
        self.sppf = SPPF(w[3], cfg.sppf_pool, rng=rng) if cfg.use_sppf else None
        self.psa = PSA(w[3], rng=rng) if cfg.use_psa else None

    def children(self):
        yield "embed", self.embed
        for i, m in enumerate(self.merges):
            yield f"merges.{i}", m
        for i, stage in enumerate(self.stages):
            for j, b in enumerate(stage):
                yield f"stages.{i}.{j}", b
        if self.sppf is not None:
            yield "sppf", self.sppf
        if self.psa is not None:
            yield "psa", self.psa

    def forward(self, x):
        taps = []
        y = self.embed(x)
        for i in range(4):
            if i:
                y = self.merges[i - 1](y)
            for block in self.stages[i]:
                y = block(y)
            if i == 3:
                if self.sppf is not None:
                    y = self.sppf(y)
                if self.psa is not None:
                    y = self.psa(y)
            taps.append(y)
        return taps

    def plan(self, prefix, h, w):
        specs = []
        s, h, w = self.embed.plan(prefix + "embed", h, w)
        specs += s
        for i in range(4):
            if i:
                s, h, w = self.merges[i - 1].plan(f"{prefix}merges.{i - 1}", h, w)
                specs += s
            for j, b in enumerate(self.stages[i]):
                s, h, w = b.plan(f"{prefix}stages.{i}.{j}", h, w)
                specs += s
        if self.sppf is not None:
            specs += self.sppf.plan(prefix + "sppf", h, w)[0]
        if self.psa is not None:
            specs += self.psa.plan(prefix + "psa", h, w)[0]
        return specs, h, w


# -- neck ---------------------------------------------------------------------

class Upsample(Module):
    """Optional 1x1 projection followed by nearest 2x upsampling."""

    def __init__(self, c_in, c_out=None, rng=None):
        self.proj = ConvBN(c_in, c_out, 1, rng=rng) if c_out is not None and c_out != c_in else None

    def forward(self, x):
        if self.proj is not None:
            x = self.proj(x)
        return ops.upsample2x(x)

    def plan(self, prefix, h, w):
        specs = []
        if self.proj is not None:
            specs, h, w = self.proj.plan(prefix + ".proj", h, w)
        return specs, 2 * h, 2 * w


class Downsample(Module):
    """Stride-2 3x3 max pool followed by a 1x1 projection (BiFPN-style resampling)."""

    def __init__(self, c_in, c_out, rng=None):
        self.proj = ConvBN(c_in, c_out, 1, rng=rng) if c_out != c_in else None

    def forward(self, x):
        x = ops.maxpool2d(x, 3, 2, 1)
        return self.proj(x) if self.proj is not None else x

    def plan(self, prefix, h, w):
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        if self.proj is None:
            return [], h, w
        return self.proj.plan(prefix + ".proj", h, w)


@dataclass
class FusionNode:
    """One neck node: which features it fuses and where its output lives."""

    name: str
    level: int
    inputs: list = field(default_factory=list)


class Neck(Module):
    """Top-down then bottom-up pyramid.

    PANet connectivity keeps the single-input nodes at the top of the
    top-down path and the bottom of the bottom-up path. BiFPN connectivity
    removes those nodes and adds a same-level edge from each backbone tap to
    the bottom-up node at that level. Fusion is a channel concat (or, for the
    weighted variant, normalized learned weights) followed by a fusion block.

    Input names: ``in{l}`` backbone taps, ``td{l}`` top-down outputs,
    ``out{l}`` final outputs, ``up(x)`` / ``down(x)`` resampled features.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.levels = list(cfg.levels)
        widths = cfg.stage_widths
        self.widths = {lvl: widths[lvl] for lvl in self.levels}
        self.nodes = self.topology(cfg)
        self.blocks = []
        self.fusers = []
        self.resamplers = {}
        weighted = cfg.fusion == "weighted"
        block_cls = CSPStage if cfg.block == "csp" else C2f
        for node in self.nodes:
            c_out = self.widths[node.level]
            c_in = 0
            for src in node.inputs:
                c_src = self._source_channels(src, node.level, weighted)
                c_in = c_out if weighted else c_in + c_src
            self.blocks.append(block_cls(c_in, c_out, cfg.neck_depth, rng=rng))
            self.fusers.append(WeightedFusion(len(node.inputs)) if weighted and len(node.inputs) > 1 else None)
        for node in self.nodes:
            for src in node.inputs:
                if src.startswith(("up(", "down(")) and src not in self.resamplers:
                    self.resamplers[src] = self._make_resampler(src, node.level, weighted, rng)

    @staticmethod
    def topology(cfg):
        levels = list(cfg.levels)
        top, bottom = levels[-1], levels[0]
        nodes = []
        td_name = {top: f"in{top}"}
        if cfg.neck == "pan":
            nodes.append(FusionNode(f"td{top}", top, [f"in{top}"]))
            td_name[top] = f"td{top}"
        for lvl in reversed(levels[:-1]):
            nodes.append(FusionNode(f"td{lvl}", lvl, [f"up({td_name[lvl + 1]})", f"in{lvl}"]))
            td_name[lvl] = f"td{lvl}"
        out_name = {}
        if cfg.neck == "pan":
            nodes.append(FusionNode(f"out{bottom}", bottom, [td_name[bottom]]))
            out_name[bottom] = f"out{bottom}"
        else:
            out_name[bottom] = td_name[bottom]
        for lvl in levels[1:]:
            inputs = [f"down({out_name[lvl - 1]})"]
            if lvl == top:
                inputs.append(td_name[top] if cfg.neck == "pan" else f"in{top}")
            else:
                inputs.append(td_name[lvl])
                if cfg.neck == "bifpn":
                    inputs.append(f"in{lvl}")
            nodes.append(FusionNode(f"out{lvl}", lvl, inputs))
            out_name[lvl] = f"out{lvl}"
        return nodes

    def output_names(self):
        names = {}
        for node in self.nodes:
            if node.name.startswith("out"):
                names[node.level] = node.name
        for lvl in self.levels:
            names.setdefault(lvl, f"td{lvl}")
        return [names[lvl] for lvl in self.levels]

    def _source_level(self, src):
        inner = src[src.index("(") + 1 : -1] if "(" in src else src
        return int(re.search(r"\d+", inner).group()), inner

    def _source_channels(self, src, level, weighted):
        if src.startswith("down("):
            src_level, _ = self._source_level(src)
            return self.widths[level] if weighted else self.widths[src_level]
        if src.startswith("up("):
            src_level, _ = self._source_level(src)
            return self.widths[level] if weighted else self.widths[src_level]
        return self.widths[level]

    def _make_resampler(self, src, level, weighted, rng):
        src_level, _ = self._source_level(src)
        c_src = self.widths[src_level]
        if src.startswith("down("):
            if weighted:
                return Downsample(c_src, self.widths[level], rng=rng)
            return ConvBN(c_src, c_src, 3, 2, rng=rng)
        return Upsample(c_src, self.widths[level] if weighted else None, rng=rng)

    def children(self):
        for i, b in enumerate(self.blocks):
            yield f"{self.nodes[i].name}.block", b
        for i, f in enumerate(self.fusers):
            if f is not None:
                yield f"{self.nodes[i].name}.fuse", f
        for name, m in self.resamplers.items():
            yield name, m

    def forward(self, taps):
        feats = {f"in{lvl}": taps[lvl] for lvl in self.levels}
        for node, block, fuser in zip(self.nodes, self.blocks, self.fusers):
            xs = []
            for src in node.inputs:
                if src in self.resamplers:
                    _, inner = self._source_level(src)
                    key = src
                    if key not in feats:
                        feats[key] = self.resamplers[src](feats[inner])
                    xs.append(feats[key])
                else:
                    xs.append(feats[src])
            fused = fuser(xs) if fuser is not None else ops.concat_channels(xs)
            feats[node.name] = block(fused)
        return [feats[n] for n in self.output_names()]

    def plan(self, prefix, h, w):
        sizes = {lvl: (h // STRIDES[lvl], w // STRIDES[lvl]) for lvl in self.levels}
        specs = []
        for node, block, fuser in zip(self.nodes, self.blocks, self.fusers):
            hh, ww = sizes[node.level]
            for src in node.inputs:
                if src in self.resamplers:
                    src_level, _ = self._source_level(src)
                    sh, sw = sizes[src_level]
                    s, _, _ = self.resamplers[src].plan(prefix + src, sh, sw)
                    specs += s
            if fuser is not None:
                specs += fuser.plan(f"{prefix}{node.name}.fuse", hh, ww)[0]
            specs += block.plan(f"{prefix}{node.name}.block", hh, ww)[0]
        # resamplers shared by several nodes would be double counted above
        seen, unique = set(), []
        for s in specs:
            if s.name not in seen:
                seen.add(s.name)
                unique.append(s)
        return unique, h, w


# -- heads ----------------------------------------------------------------------

class Head(Module):
    """Two 3x3 conv-BN-SiLU layers, then 1x1 classification and box outputs."""

    def __init__(self, c_in, hidden, num_classes, cls_prior=0.01, rng=None):
        self.stem1 = ConvBN(c_in, hidden, 3, rng=rng)
        self.stem2 = ConvBN(hidden, hidden, 3, rng=rng)
        self.cls = Conv(hidden, num_classes, 1, bias=True, rng=rng)
        self.box = Conv(hidden, 4, 1, bias=True, rng=rng)
        self.cls.bias.data[:] = -np.log((1.0 - cls_prior) / cls_prior)
        self.box.bias.data[:] = 1.0

    def forward(self, x):
        y = self.stem2(self.stem1(x))
        return self.cls(y), self.box(y)

    def plan(self, prefix, h, w):
        specs = []
        for name in ("stem1", "stem2", "cls", "box"):
            specs += getattr(self, name).plan(f"{prefix}.{name}", h, w)[0]
        return specs, h, w


@dataclass
class HeadOutputs:
    """Raw per-scale head tensors.

    ``o2m`` / ``o2o`` are lists of ``(cls_logits, box_raw)`` pairs, one per
    stride; ``o2m`` is ``None`` on the inference path.
    """

    strides: tuple
    o2o: list
    o2m: list = None

    def branch(self, name):
        out = self.o2o if name == "o2o" else self.o2m
        if out is None:
            raise ValueError(f"branch {name} was not evaluated")
        return out


class Detector(Module):
    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or GraphConfig()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.cfg, rng)
        self.neck = Neck(self.cfg, rng)
        c = self.cfg
        self.heads_o2m = [Head(c.stage_widths[l], c.head_channels, c.num_classes, c.cls_prior, rng=rng) for l in c.levels]
        self.heads_o2o = [Head(c.stage_widths[l], c.head_channels, c.num_classes, c.cls_prior, rng=rng) for l in c.levels]

    @property
    def strides(self):
        return self.cfg.active_strides

    def features(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 3:
            from .errors import DimensionError

            raise DimensionError(f"expected (n, 3, h, w) input, got {x.shape}", axis="channel")
        if x.shape[2] % 32 or x.shape[3] % 32:
            from .errors import DimensionError

            raise DimensionError(f"spatial size {x.shape[2:]} not divisible by 32", axis="height")
        return self.neck(self.backbone(x))

    def forward(self, x, branches=("o2m", "o2o")):
        """Run the network. Pass ``branches=("o2o",)`` for the deploy path."""
        pyramid = self.features(x)
        o2o = [h(f) for h, f in zip(self.heads_o2o, pyramid)] if "o2o" in branches else None
        o2m = [h(f) for h, f in zip(self.heads_o2m, pyramid)] if "o2m" in branches else None
        return HeadOutputs(self.strides, o2o, o2m)

    def predict(self, x):
        return self.forward(x, branches=("o2o",))

    def drop_o2m(self):
        """Remove the one-to-many heads, as done for deployment."""
        self.heads_o2m = []
        return self

    def fuse(self):
        """Fold batchnorm and RepConv branches for inference."""
        from .layers import ConvBN as _ConvBN, RepConv

        self.eval()
        for _, m in self.named_modules():
            if isinstance(m, RepConv):
                m.fuse()
        for _, m in self.named_modules():
            if isinstance(m, _ConvBN) and m.fused is None:
                m.fuse()
        return self

    def plan(self, prefix="", h=None, w=None):
        if h is None:
            h, w = self.cfg.input_size
        specs = self.backbone.plan(prefix + "backbone.", h, w)[0]
        specs += self.neck.plan(prefix + "neck.", h, w)[0]
        for branch, heads in (("o2m", self.heads_o2m), ("o2o", self.heads_o2o)):
            for lvl, head in zip(self.cfg.levels, heads):
                s = STRIDES[lvl]
                specs += head.plan(f"{prefix}heads_{branch}.{lvl}", h // s, w // s)[0]
        return specs


def layer_plan(cfg):
    """Per-layer :class:`LayerSpec` list for the graph built from ``cfg``."""
    return Detector(cfg).plan()


# -- anchors and decoding -------------------------------------------------------

def anchor_grid(strides, h, w):
    """Cell-centre anchor points in input pixels.

    Returns ``(points (A, 2), stride_per_anchor (A,))`` in the flattening
    order used everywhere else: scale by scale, row-major within a scale.
    """
    pts, strd = [], []
    for s in strides:
        hs, ws = h // s, w // s
        ys, xs = np.meshgrid(np.arange(hs), np.arange(ws), indexing="ij")
        pts.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
        strd.append(np.full(hs * ws, s, dtype=np.float64))
    return np.concatenate(pts).astype(np.float64), np.concatenate(strd)


def flatten_branch(pairs):
    """Stack per-scale ``(n, C, h, w)`` / ``(n, 4, h, w)`` maps into ``(n, A, C)`` / ``(n, A, 4)``."""
    from .tensor import concat, reshape, transpose

    cls_parts, box_parts = [], []
    for cls, box in pairs:
        n, c, h, w = cls.shape
        cls_parts.append(transpose(reshape(cls, (n, c, h * w)), (0, 2, 1)))
        box_parts.append(transpose(reshape(box, (n, 4, h * w)), (0, 2, 1)))
    return concat(cls_parts, axis=1), concat(box_parts, axis=1)


def decode_boxes(box_raw, points, strides):
    """ltrb distances ``stride * softplus(raw)`` around anchor points -> xyxy.

    Works on :class:`Tensor` (differentiable) of shape ``(..., A, 4)``.
    """
    from .tensor import concat

    dist = softplus(box_raw) * Tensor(strides[:, None])
    px = Tensor(points[:, 0:1])
    py = Tensor(points[:, 1:2])
    x1 = px - dist[..., 0:1]
    y1 = py - dist[..., 1:2]
    x2 = px + dist[..., 2:3]
    y2 = py + dist[..., 3:4]
    return concat([x1, y1, x2, y2], axis=-1)


def decode_boxes_np(box_raw, points, strides):
    box_raw = np.asarray(box_raw, dtype=np.float64)
    dist = (np.maximum(box_raw, 0) + np.log1p(np.exp(-np.abs(box_raw)))) * strides[:, None]
    return np.concatenate([points - dist[..., :2], points + dist[..., 2:]], axis=-1)
