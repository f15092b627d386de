"""Host networks as declarative layer graphs.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` nodes. Nodes
refer to their inputs by name, so residual additions are explicit. The graph
supports static parameter/FLOP accounting without allocating any weights;
:func:`he_init` materializes and initializes the learnable state, after which
the graph can be executed with :meth:`ModelGraph.forward`.
"""
from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ad
from .autograd import Parameter, Tape, Var
from .tensor import ConvSpec
from .units import (
    RELU,
    ActivationKind,
    AtacUnit,
    BatchNorm,
    NiNBlock,
    activate,
    he_normal,
    make_unit,
    unit_param_count,
)

MICRO_MODULES = ("none", "nin", "local_senet")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | bn | act | add | maxpool | gap | linear | nin | local_se
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict, compare=True)
    site: int | None = None
    stage: str = ""
    block: int | None = None


@dataclass(frozen=True)
class SiteInfo:
    site: int
    name: str
    stage: str
    block: int | None
    channels: int
    kind: ActivationKind


@dataclass(frozen=True)
class ReplacementPolicy:
    """Select activation sites from the output end backwards, by ratio or explicit indices."""

    ratio: float | None = None
    sites: frozenset[int] | None = None

    def __post_init__(self):
        if (self.ratio is None) == (self.sites is None):
            raise ValueError("give exactly one of ratio or sites")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"replacement ratio {self.ratio} outside [0, 1]")
        if self.sites is not None:
            object.__setattr__(self, "sites", frozenset(int(s) for s in self.sites))

    def select(self, n_sites: int) -> list[int]:
        if self.sites is not None:
            bad = sorted(s for s in self.sites if not 0 <= s < n_sites)
            if bad:
                raise ValueError(f"site indices {bad} outside [0, {n_sites})")
            return sorted(self.sites)
        # tolerance keeps e.g. 0.3 * 10 from rounding up to 4
        k = math.ceil(self.ratio * n_sites - 1e-9)
        return list(range(n_sites - k, n_sites))


# ---------------------------------------------------------------------------
# executable modules behind graph nodes


class Conv:
    def __init__(self, spec: ConvSpec, name: str):
        self.spec = spec
        self.weight = Parameter(np.zeros(spec.weight_shape), f"{name}.weight")
        self.bias = Parameter(np.zeros(spec.out_channels), f"{name}.bias", decay=False) if spec.has_bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def reset_parameters(self, rng):
        self.weight.value[...] = he_normal(rng, self.weight.shape)
        if self.bias is not None:
            self.bias.value[...] = 0.0

    def __call__(self, x: Var) -> Var:
        t = x.tape
        return ad.conv2d(x, t.watch(self.weight), self.spec, None if self.bias is None else t.watch(self.bias))


class Linear:
    def __init__(self, in_features: int, out_features: int, name: str):
        self.weight = Parameter(np.zeros((out_features, in_features)), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias", decay=False)

    def parameters(self):
        return [self.weight, self.bias]

    def reset_parameters(self, rng):
        self.weight.value[...] = he_normal(rng, self.weight.shape)
        self.bias.value[...] = 0.0

    def __call__(self, x: Var) -> Var:
        return ad.linear(x, x.tape.watch(self.weight), x.tape.watch(self.bias))


class ActivationSite:
    def __init__(self, kind: ActivationKind, channels: int, name: str):
        self.kind = kind
        self.unit = make_unit(kind, channels, name)

    def parameters(self):
        return self.unit.parameters() if self.unit else []

    def buffers(self):
        return self.unit.buffers() if self.unit else {}

    def train(self, mode=True):
        if self.unit:
            self.unit.train(mode)

    def reset_parameters(self, rng):
        if self.unit:
            self.unit.reset_parameters(rng)

    def __call__(self, x: Var) -> Var:
        return activate(x, self.kind, self.unit)


def _make_module(node: LayerSpec):
    a = node.attrs
    if node.kind == "conv":
        return Conv(a["spec"], node.name)
    if node.kind == "bn":
        return BatchNorm(a["channels"], node.name)
    if node.kind == "act":
        return ActivationSite(a["activation"], a["channels"], node.name)
    if node.kind == "linear":
        return Linear(a["in_features"], a["out_features"], node.name)
    if node.kind == "nin":
        return NiNBlock(a["channels"], a["r"], node.name)
    if node.kind == "local_se":
        return AtacUnit(a["channels"], 1, node.name)
    return None


# ---------------------------------------------------------------------------
# the graph


class ModelGraph:
    def __init__(self, name: str, nodes, input_shape, num_classes: int, meta=None):
        self.name = name
        self.nodes: list[LayerSpec] = list(nodes)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.meta = dict(meta or {})
        self.modules: dict[str, object] | None = None
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names) or "data" in names:
            raise ValueError("node names must be unique and must not be 'data'")
        seen = {"data"}
        for n in self.nodes:
            missing = [i for i in n.inputs if i not in seen]
            if missing:
                raise ValueError(f"node {n.name} reads {missing} before they are defined")
            seen.add(n.name)

    def __len__(self):
        return len(self.nodes)

    def node(self, name: str) -> LayerSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    # -- learnable state ---------------------------------------------------

    @property
    def initialized(self) -> bool:
        return self.modules is not None

    def materialize(self):
        self.modules = {n.name: m for n in self.nodes if (m := _make_module(n)) is not None}

    def _require_modules(self):
        if self.modules is None:
            raise RuntimeError(f"graph {self.name} has no parameters yet; call he_init first")
        return self.modules

    def parameters(self) -> list[Parameter]:
        return [p for m in self._require_modules().values() for p in m.parameters()]

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        return OrderedDict((p.name, p) for p in self.parameters())

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for m in self._require_modules().values():
            if hasattr(m, "buffers"):
                out.update(m.buffers())
        return out

    def train(self, mode: bool = True):
        for m in self._require_modules().values():
            if hasattr(m, "train"):
                m.train(mode)

    def eval(self):
        self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- execution ---------------------------------------------------------

    def forward(self, x, tape: Tape | None = None, training: bool = False) -> Var:
        """Run the graph on ``x`` [N, C, H, W]; returns the logits as a :class:`Var`."""
        modules = self._require_modules()
        tape = tape if tape is not None else Tape(enabled=False)
        self.train(training)
        vals = {"data": x if isinstance(x, Var) else tape.constant(x)}
        for node in self.nodes:
            ins = [vals[i] for i in node.inputs]
            k = node.kind
            if k == "add":
                out = ad.add(ins[0], ins[1])
            elif k == "maxpool":
                a = node.attrs
                out = ad.max_pool2d(ins[0], a["kernel"], a["stride"], a["padding"])
            elif k == "gap":
                g = ad.global_avg_pool(ins[0])
                out = ad.reshape(g, (g.shape[0], g.shape[1]))
            else:
                out = modules[node.name](ins[0])
            vals[node.name] = out
        return vals[self.nodes[-1].name]

    __call__ = forward

    def predict_logits(self, x, batch_size: int = 256) -> np.ndarray:
        outs = [self.forward(x[i : i + batch_size]).value for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    # -- structure ---------------------------------------------------------

    def shapes(self, input_shape=None) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every node."""
        shp = {"data": tuple(input_shape or self.input_shape)}
        for n in self.nodes:
            src = shp[n.inputs[0]]
            a = n.attrs
            if n.kind == "conv":
                spec = a["spec"]
                if src[0] != spec.in_channels:
                    raise ValueError(f"{n.name}: channel mismatch {src[0]} vs {spec.in_channels}")
                shp[n.name] = (spec.out_channels, *spec.output_hw(src[1], src[2]))
            elif n.kind == "maxpool":
                spec = ConvSpec(src[0], src[0], a["kernel"], a["kernel"], a["stride"], a["padding"])
                shp[n.name] = (src[0], *spec.output_hw(src[1], src[2]))
            elif n.kind == "gap":
                shp[n.name] = (src[0],)
            elif n.kind == "linear":
                shp[n.name] = (a["out_features"],)
            elif n.kind == "add":
                if shp[n.inputs[1]] != src:
                    raise ValueError(f"{n.name}: cannot add {src} and {shp[n.inputs[1]]}")
                shp[n.name] = src
            else:
                shp[n.name] = src
        return shp

    def manifest(self) -> str:
        """Human-readable description: one layer per line."""
        shp = self.shapes()
        c, h, w = self.input_shape
        lines = [f"# graph {self.name} input={c}x{h}x{w} classes={self.num_classes}"]
        for i, n in enumerate(self.nodes):
            out = "x".join(str(d) for d in shp[n.name])
            desc = _describe_attrs(n)
            site = f" site={n.site}" if n.site is not None else ""
            lines.append(f"{i} {n.kind} {n.name} in={','.join(n.inputs)} out={out}{site}{desc}")
        return "\n".join(lines) + "\n"


def _describe_attrs(n: LayerSpec) -> str:
    a = n.attrs
    if n.kind == "conv":
        s = a["spec"]
        return f" c={s.in_channels}->{s.out_channels} k={s.kernel_h}x{s.kernel_w} s={s.stride} p={s.padding} bias={int(s.has_bias)}"
    if n.kind == "act":
        return f" kind={a['activation']}"
    if n.kind in ("nin", "local_se"):
        return f" r={a['r']}"
    if n.kind == "maxpool":
        return f" k={a['kernel']} s={a['stride']} p={a['padding']}"
    if n.kind == "linear":
        return f" d={a['in_features']}->{a['out_features']}"
    return ""


class _Builder:
    def __init__(self):
        self.nodes: list[LayerSpec] = []
        self.n_sites = 0
        self.stage = ""
        self.block = None

    def add(self, kind, name, inputs, **attrs) -> str:
        site = None
        if kind == "act":
            site = self.n_sites
            self.n_sites += 1
        if isinstance(inputs, str):
            inputs = (inputs,)
        self.nodes.append(LayerSpec(name, kind, tuple(inputs), attrs, site, self.stage, self.block))
        return name

    def conv(self, name, x, cin, cout, k, stride=1, padding=0, bias=False):
        return self.add("conv", name, x, spec=ConvSpec(cin, cout, k, k, stride, padding, bias))

    def bn(self, name, x, c):
        return self.add("bn", name, x, channels=c)

    def act(self, name, x, c, kind):
        kind.check_channels(c, name)
        return self.add("act", name, x, activation=kind, channels=c)


# ---------------------------------------------------------------------------
# host networks


def build_resnet20v2(
    b: int = 3,
    num_classes: int = 10,
    activation: ActivationKind | str = RELU,
    micro_module: str = "none",
    r: int = 2,
    input_hw: int = 32,
) -> ModelGraph:
    """Pre-activation CIFAR ResNet with ``b`` basic blocks per stage (b=3 is ResNet-20).

    ``micro_module`` adds the ablation modules: ``nin`` inserts a NiN block after
    every activation site, ``local_senet`` gates each residual branch output
    with an r=1 local channel attention unit.
    """
    if not isinstance(b, (int, np.integer)) or b < 1:
        raise ValueError(f"blocks per stage must be a positive integer, got {b!r}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if micro_module not in MICRO_MODULES:
        raise ValueError(f"micro_module must be one of {MICRO_MODULES}, got {micro_module!r}")
    kind = ActivationKind.parse(activation) if isinstance(activation, str) else activation
    if input_hw % 4:
        raise ValueError(f"input size {input_hw} must be divisible by 4")

    g = _Builder()

    def act(name, x, c):
        out = g.act(name, x, c, kind)
        if micro_module == "nin":
            out = g.add("nin", f"{name}.nin", out, channels=c, r=r)
        return out

    g.stage = "conv1"
    x = g.conv("conv1", "data", 3, 16, 3, 1, 1)
    cin = 16
    for s, c in enumerate((16, 32, 64), start=1):
        g.stage = f"stage{s}"
        for j in range(b):
            g.block = j
            p = f"stage{s}.block{j}"
            stride = 2 if (s > 1 and j == 0) else 1
            a1 = act(f"{p}.act1", g.bn(f"{p}.bn1", x, cin), cin)
            h = g.conv(f"{p}.conv1", a1, cin, c, 3, stride, 1)
            h = act(f"{p}.act2", g.bn(f"{p}.bn2", h, c), c)
            h = g.conv(f"{p}.conv2", h, c, c, 3, 1, 1)
            if micro_module == "local_senet":
                h = g.add("local_se", f"{p}.local_se", h, channels=c, r=1)
            shortcut = x
            if stride != 1 or cin != c:
                shortcut = g.conv(f"{p}.downsample", a1, cin, c, 1, stride, 0)
            x = g.add("add", f"{p}.add", (h, shortcut))
            cin = c
        g.block = None
    g.stage = "head"
    x = act("head.act", g.bn("head.bn", x, cin), cin)
    x = g.add("gap", "head.pool", x)
    g.add("linear", "head.fc", x, in_features=cin, out_features=num_classes)
    meta = {"b": b, "activation": str(kind), "micro_module": micro_module, "r": r}
    return ModelGraph(f"resnet20v2_b{b}", g.nodes, (3, input_hw, input_hw), num_classes, meta)


def build_resnet50v1b(
    num_classes: int = 1000,
    atac_last_two_stages: bool = False,
    r: int = 2,
    input_hw: int = 224,
    stride_in_3x3: bool = True,
) -> ModelGraph:
    """Bottleneck ResNet-50. With the flag set, the two residual-branch activations
    of every block in stages 3 and 4 become ATAC(r) units; the post-addition ReLU stays.

    ``stride_in_3x3=False`` gives the original v1 layout (downsampling stride in the first 1x1 conv).
    """
    atac = ActivationKind("atac", r=r)
    g = _Builder()
    g.stage = "stem"
    x = g.conv("stem.conv", "data", 3, 64, 7, 2, 3)
    x = g.act("stem.act", g.bn("stem.bn", x, 64), 64, RELU)
    x = g.add("maxpool", "stem.pool", x, kernel=3, stride=2, padding=1)
    cin = 64
    for s, (w, n) in enumerate(((64, 3), (128, 4), (256, 6), (512, 3)), start=1):
        g.stage = f"stage{s}"
        kind = atac if (atac_last_two_stages and s >= 3) else RELU
        for j in range(n):
            g.block = j
            p = f"stage{s}.block{j}"
            stride = 2 if (s > 1 and j == 0) else 1
            s1, s3 = (1, stride) if stride_in_3x3 else (stride, 1)
            h = g.conv(f"{p}.conv1", x, cin, w, 1, s1, 0)
            h = g.act(f"{p}.act1", g.bn(f"{p}.bn1", h, w), w, kind)
            h = g.conv(f"{p}.conv2", h, w, w, 3, s3, 1)
            h = g.act(f"{p}.act2", g.bn(f"{p}.bn2", h, w), w, kind)
            h = g.bn(f"{p}.bn3", g.conv(f"{p}.conv3", h, w, 4 * w, 1), 4 * w)
            shortcut = x
            if stride != 1 or cin != 4 * w:
                shortcut = g.bn(f"{p}.down_bn", g.conv(f"{p}.downsample", x, cin, 4 * w, 1, stride, 0), 4 * w)
            x = g.act(f"{p}.act3", g.add("add", f"{p}.add", (h, shortcut)), 4 * w, RELU)
            cin = 4 * w
        g.block = None
    g.stage = "head"
    x = g.add("gap", "head.pool", x)
    g.add("linear", "head.fc", x, in_features=cin, out_features=num_classes)
    name = ("atac_" if atac_last_two_stages else "") + ("resnet50v1b" if stride_in_3x3 else "resnet50v1")
    meta = {"atac_last_two_stages": atac_last_two_stages, "r": r, "stride_in_3x3": stride_in_3x3}
    return ModelGraph(name, g.nodes, (3, input_hw, input_hw), num_classes, meta)


# ---------------------------------------------------------------------------
# sites and rewriting


def enumerate_activation_sites(g: ModelGraph) -> list[SiteInfo]:
    sites = [
        SiteInfo(n.site, n.name, n.stage, n.block, n.attrs["channels"], n.attrs["activation"])
        for n in g.nodes
        if n.kind == "act"
    ]
    return sorted(sites, key=lambda s: s.site)


def apply_replacement(g: ModelGraph, policy: ReplacementPolicy, r: int = 2, seed: int = 0) -> ModelGraph:
    """Return a copy of ``g`` whose selected activation sites are ATAC(r) units.

    Untouched nodes keep copies of their current state; new units are He-initialized
    from ``seed``. Sites that already hold ATAC(r) are left alone, so the rewrite is idempotent.
    """
    atac = ActivationKind("atac", r=r)
    sites = enumerate_activation_sites(g)
    chosen = {sites[i].name for i in policy.select(len(sites))}
    for s in sites:
        if s.name in chosen:
            atac.check_channels(s.channels, f"site {s.site} ({s.name})")
    nodes, changed = [], []
    for n in g.nodes:
        if n.name in chosen and n.attrs["activation"] != atac:
            n = replace(n, attrs={**n.attrs, "activation": atac})
            changed.append(n)
        nodes.append(n)
    out = ModelGraph(g.name, nodes, g.input_shape, g.num_classes, g.meta)
    if g.initialized:
        out.modules = copy.deepcopy(g.modules)
        rng = np.random.default_rng(seed)
        for n in changed:
            m = _make_module(n)
            m.reset_parameters(rng)
            out.modules[n.name] = m
    return out


# ---------------------------------------------------------------------------
# accounting


def node_param_count(n: LayerSpec) -> int:
    a = n.attrs
    if n.kind == "conv":
        s = a["spec"]
        return s.out_channels * s.in_channels * s.kernel_h * s.kernel_w + (s.out_channels if s.has_bias else 0)
    if n.kind == "bn":
        return 2 * a["channels"]
    if n.kind == "act":
        kind = a["activation"]
        return unit_param_count(a["channels"], kind.r) if kind.has_unit else 0
    if n.kind == "linear":
        return a["out_features"] * (a["in_features"] + 1)
    if n.kind in ("nin", "local_se"):
        return unit_param_count(a["channels"], a["r"])
    return 0


def count_params(g: ModelGraph) -> int:
    """Learnable element count (conv/FC weights and biases, BN affines); running statistics excluded."""
    return sum(node_param_count(n) for n in g.nodes)


def _bottleneck_flops(c: int, r: int, hw: int, tail: str) -> int:
    hidden = c // r
    convs = 2 * c * hidden * hw
    inner = 2 * hidden * hw  # BN + ReLU on the reduced map
    out = c * hw  # BN on the expanded map
    if tail == "gate":  # sigmoid + multiplication with the input
        out += 2 * c * hw
    else:  # trailing ReLU
        out += c * hw
    return convs + inner + out


def node_flops(n: LayerSpec, in_shape, out_shape) -> int:
    """MAC-convention cost of one node for a single sample."""
    a = n.attrs
    numel = int(np.prod(out_shape))
    if n.kind == "conv":
        s = a["spec"]
        hw = out_shape[1] * out_shape[2]
        return s.out_channels * s.in_channels * s.kernel_h * s.kernel_w * hw + (numel if s.has_bias else 0)
    if n.kind == "linear":
        return a["in_features"] * a["out_features"]
    if n.kind in ("bn", "add"):
        return numel
    if n.kind == "maxpool":
        return numel * a["kernel"] ** 2
    if n.kind == "gap":
        return int(np.prod(in_shape))
    c, h, w = in_shape
    if n.kind == "act":
        kind = a["activation"]
        if kind.name == "atac":
            return _bottleneck_flops(c, kind.r, h * w, "gate")
        if kind.name == "se_activation":
            # GAP, bottleneck on a 1x1 map, then the broadcast multiplication
            return c * h * w + _bottleneck_flops(c, kind.r, 1, "gate") - 2 * c + c * h * w + c
        return numel
    if n.kind == "nin":
        return _bottleneck_flops(c, a["r"], h * w, "relu")
    if n.kind == "local_se":
        return _bottleneck_flops(c, 1, h * w, "gate")
    raise ValueError(f"no cost rule for node kind {n.kind}")


def count_flops(g: ModelGraph, input_shape=None) -> int:
    return sum(flops_by_node(g, input_shape).values())


def flops_by_node(g: ModelGraph, input_shape=None) -> "OrderedDict[str, int]":
    shp = g.shapes(input_shape)
    return OrderedDict((n.name, node_flops(n, shp[n.inputs[0]], shp[n.name])) for n in g.nodes)


def stage_breakdown(g: ModelGraph, input_shape=None) -> "OrderedDict[str, tuple[int, int]]":
    """(params, flops) per stage label, in network order."""
    flops = flops_by_node(g, input_shape)
    out: OrderedDict[str, list[int]] = OrderedDict()
    for n in g.nodes:
        acc = out.setdefault(n.stage, [0, 0])
        acc[0] += node_param_count(n)
        acc[1] += flops[n.name]
    return OrderedDict((k, (v[0], v[1])) for k, v in out.items())


# ---------------------------------------------------------------------------
# initialization


def he_init(g: ModelGraph, seed: int = 0) -> ModelGraph:
    """Allocate parameters and draw conv/FC weights from N(0, 2/fan_in); BN starts at (1, 0)."""
    if not g.initialized:
        g.materialize()
    rng = np.random.default_rng(seed)
    for n in g.nodes:
        m = g.modules.get(n.name)
        if m is not None:
            m.reset_parameters(rng)
            for buf_name, buf in getattr(m, "buffers", dict)().items():
                buf[...] = 1.0 if buf_name.endswith("running_var") else 0.0
            for p in m.parameters():
                p.zero_grad()
                p.momentum[...] = 0.0
    return g
