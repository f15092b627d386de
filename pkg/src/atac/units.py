"""Activation functions, batch normalization and the attention micro-modules.

Every unit works on :class:`~atac.autograd.Var` values so it can be
differentiated. The module-level functions (``activate``, ``atac_gate``, ...)
also accept plain arrays and then return plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ad
from .autograd import Parameter, Tape, Var
from .tensor import ConvSpec, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_SCALAR_KINDS = ("relu", "leaky_relu", "selu", "swish")
_UNIT_KINDS = ("atac", "se_activation")


@dataclass(frozen=True)
class ActivationKind:
    """Which non-linearity sits at an activation site.

    ``alpha`` is the negative slope of leaky ReLU; ``r`` the channel reduction
    ratio of the attention-based kinds.
    """

    name: str
    alpha: float | None = None
    r: int | None = None

    def __post_init__(self):
        if self.name not in _SCALAR_KINDS + _UNIT_KINDS:
            raise ValueError(f"unknown activation kind {self.name!r}")
        if self.name == "leaky_relu" and self.alpha is None:
            object.__setattr__(self, "alpha", 0.1)
        if self.name in _UNIT_KINDS:
            if self.r is None:
                object.__setattr__(self, "r", 2)
            if self.r < 1:
                raise ValueError(f"reduction ratio must be >= 1, got {self.r}")

    @classmethod
    def parse(cls, text: str) -> "ActivationKind":
        """Parse ``relu``, ``selu``, ``swish``, ``leaky_relu[:alpha]``, ``atac[:r]``, ``se_activation[:r]``."""
        if isinstance(text, ActivationKind):
            return text
        name, _, arg = text.strip().lower().partition(":")
        name = name.replace("-", "_")
        if name == "leaky_relu":
            return cls(name, alpha=float(arg) if arg else None)
        if name in _UNIT_KINDS:
            return cls(name, r=int(arg) if arg else None)
        if arg:
            raise ValueError(f"activation {name!r} takes no argument")
        return cls(name)

    @property
    def has_unit(self) -> bool:
        return self.name in _UNIT_KINDS

    def check_channels(self, channels: int, where: str = ""):
        if self.has_unit and channels % self.r:
            loc = f" at {where}" if where else ""
            raise ValueError(f"reduction ratio r={self.r} does not divide channel width {channels}{loc}")

    def __str__(self):
        if self.name == "leaky_relu":
            return f"leaky_relu:{self.alpha:g}"
        if self.has_unit:
            return f"{self.name}:{self.r}"
        return self.name


RELU = ActivationKind("relu")


def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _as_var(x, tape: Tape | None = None):
    """Wrap an array on a non-recording tape; returns (var, unwrap flag)."""
    if isinstance(x, Var):
        return x, False
    return (tape or Tape(enabled=False)).constant(x), True


class BatchNorm:
    def __init__(self, channels: int, name: str = "bn", eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma", decay=False)
        self.beta = Parameter(np.zeros(channels), f"{name}.beta", decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.training = True

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def train(self, mode: bool = True):
        self.training = mode

    def reset_parameters(self, rng=None):
        self.gamma.value[...] = 1.0
        self.beta.value[...] = 0.0

    def __call__(self, x: Var) -> Var:
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        gamma, beta = x.tape.watch(self.gamma), x.tape.watch(self.beta)
        if not self.training:
            return ad.batch_norm_eval(x, gamma, beta, self.running_mean, self.running_var, self.eps)
        out, mean, var = ad.batch_norm_train(x, gamma, beta, self.eps)
        self.running_mean *= self.momentum
        self.running_mean += (1.0 - self.momentum) * mean
        self.running_var *= self.momentum
        self.running_var += (1.0 - self.momentum) * var
        return out


def batchnorm_forward(x, bn: BatchNorm):
    v, unwrap = _as_var(x)
    out = bn(v)
    return out.value if unwrap else out


class PointwiseConv:
    """Bias-free 1x1 convolution; each one is followed by BatchNorm."""

    def __init__(self, in_channels: int, out_channels: int, name: str):
        self.spec = ConvSpec.pointwise(in_channels, out_channels)
        self.weight = Parameter(np.zeros(self.spec.weight_shape), f"{name}.weight")

    def __call__(self, x: Var) -> Var:
        return ad.conv2d(x, x.tape.watch(self.weight), self.spec)


class _Bottleneck:
    """PWConv(C -> C/r) -> BN -> ReLU -> PWConv(C/r -> C) -> BN, shared by ATAC, SEActivation, NiN and LocalSENet."""

    def __init__(self, channels: int, r: int, name: str):
        if r < 1 or channels % r:
            raise ValueError(f"{name}: reduction ratio r={r} does not divide channel width {channels}")
        self.channels = channels
        self.r = r
        self.name = name
        hidden = channels // r
        self.pw1 = PointwiseConv(channels, hidden, f"{name}.pw1")
        self.bn1 = BatchNorm(hidden, f"{name}.bn1")
        self.pw2 = PointwiseConv(hidden, channels, f"{name}.pw2")
        self.bn2 = BatchNorm(channels, f"{name}.bn2")

    def parameters(self) -> list[Parameter]:
        return [self.pw1.weight, *self.bn1.parameters(), self.pw2.weight, *self.bn2.parameters()]

    def buffers(self) -> dict[str, np.ndarray]:
        return {**self.bn1.buffers(), **self.bn2.buffers()}

    def train(self, mode: bool = True):
        self.bn1.train(mode)
        self.bn2.train(mode)

    def reset_parameters(self, rng: np.random.Generator):
        for pw in (self.pw1, self.pw2):
            pw.weight.value[...] = he_normal(rng, pw.weight.shape)
        self.bn1.reset_parameters()
        self.bn2.reset_parameters()

    @property
    def conv_weight_count(self) -> int:
        return self.pw1.weight.size + self.pw2.weight.size

    def _check(self, x: Var):
        if x.value.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected [N, {self.channels}, H, W] input, got {x.shape}")

    def context(self, x: Var) -> Var:
        """Pre-sigmoid bottleneck response."""
        self._check(x)
        return self.bn2(self.pw2(ad.relu(self.bn1(self.pw1(x)))))


class AtacUnit(_Bottleneck):
    """Attentional activation: a point-wise sigmoid gate computed from the cross-channel context at each position."""

    def gate(self, x: Var) -> Var:
        return ad.sigmoid(self.context(x))

    def __call__(self, x: Var) -> Var:
        return ad.mul(AtacUnit.gate(self, x), x)


class SEActivationUnit(AtacUnit):
    """Same bottleneck as ATAC, but fed by global average pooling: one gate per channel."""

    def gate(self, x: Var) -> Var:
        self._check(x)
        return ad.sigmoid(self.context(ad.global_avg_pool(x)))

    def __call__(self, x: Var) -> Var:
        # explicit class lookup so the functional API can run an AtacUnit's weights in SE mode
        return ad.broadcast_mul(x, SEActivationUnit.gate(self, x))


class NiNBlock(_Bottleneck):
    """Feed-forward point-wise block with the ATAC parameter budget; ReLU output, no gating."""

    def __call__(self, x: Var) -> Var:
        return ad.relu(self.context(x))


def activate(x, kind: ActivationKind | str, unit: AtacUnit | None = None):
    """Apply ``kind`` to ``x``. Attention kinds need the learnable ``unit``."""
    kind = ActivationKind.parse(kind) if isinstance(kind, str) else kind
    if not isinstance(kind, ActivationKind):
        raise ValueError(f"unknown activation kind {kind!r}")
    v, unwrap = _as_var(x)
    if kind.name == "relu":
        out = ad.relu(v)
    elif kind.name == "leaky_relu":
        out = ad.leaky_relu(v, kind.alpha)
    elif kind.name == "selu":
        out = ad.selu(v)
    elif kind.name == "swish":
        out = ad.swish(v)
    else:
        if unit is None:
            raise ValueError(f"activation {kind} needs a learnable unit")
        out = unit(v)
    return out.value if unwrap else out


def atac_gate(x, unit: AtacUnit):
    v, unwrap = _as_var(x)
    out = AtacUnit.gate(unit, v)
    return out.value if unwrap else out


def atac_forward(x, unit: AtacUnit):
    v, unwrap = _as_var(x)
    out = AtacUnit.__call__(unit, v)
    return out.value if unwrap else out


def se_activation_gate(x, unit: AtacUnit):
    v, unwrap = _as_var(x)
    out = SEActivationUnit.gate(unit, v)
    return out.value if unwrap else out


def se_activation_forward(x, unit: AtacUnit):
    v, unwrap = _as_var(x)
    out = SEActivationUnit.__call__(unit, v)
    return out.value if unwrap else out


def local_senet_refine(residual, unit: AtacUnit):
    """Gate a residual-branch output with the local channel attention (r must be 1)."""
    if unit.r != 1:
        raise ValueError(f"LocalSENet uses r=1, got r={unit.r}")
    return atac_forward(residual, unit)


def nin_block_forward(x, block: NiNBlock):
    v, unwrap = _as_var(x)
    out = NiNBlock.__call__(block, v)
    return out.value if unwrap else out


def make_unit(kind: ActivationKind, channels: int, name: str) -> AtacUnit | None:
    if kind.name == "atac":
        return AtacUnit(channels, kind.r, name)
    if kind.name == "se_activation":
        return SEActivationUnit(channels, kind.r, name)
    return None


def unit_param_count(channels: int, r: int) -> int:
    """Learnable elements of one bottleneck unit: 2C^2/r conv weights plus BN affines."""
    return 2 * channels * channels // r + 2 * (channels // r) + 2 * channels
