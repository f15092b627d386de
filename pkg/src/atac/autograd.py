"""Tape-based reverse-mode differentiation over the :mod:`atac.tensor` kernels.

A :class:`Tape` is created per forward pass. Operations on :class:`Var` values
append one node each; :func:`backward` replays them in reverse order and adds
the resulting gradients into every reachable trainable :class:`Parameter`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError

# Names of deliberately broken backward rules, used by the verification suite
# to prove that gradcheck catches mistakes.
KNOWN_FAULTS = ("sigmoid_backward_sign",)
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    if name not in KNOWN_FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {', '.join(KNOWN_FAULTS)}")
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


class Parameter:
    """A learnable tensor with its accumulated gradient and a momentum slot."""

    def __init__(self, value, name: str = "", trainable: bool = True, decay: bool = True):
        self.value = np.array(value, dtype=T.DTYPE)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)
        self.name = name
        self.trainable = trainable
        # weight decay applies only to conv/FC weights
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Var:
    """A value produced during one forward pass."""

    __slots__ = ("value", "tape", "requires_grad", "param")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool = False, param: Parameter | None = None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __mul__(self, other):
        return mul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Var
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of primitive applications for a single forward pass.

    With ``enabled=False`` nothing is recorded, which is what evaluation and
    finite-difference probes use.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: list[_Node] = []
        self._watched: dict[int, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        """Drop recorded nodes. Vars point back at their tape, so without this the
        activations of a finished pass live on until the cyclic garbage collector runs."""
        self.nodes.clear()
        self._watched.clear()

    def constant(self, x) -> Var:
        return Var(T.as_tensor(x), self, False)

    def watch(self, p: Parameter) -> Var:
        v = self._watched.get(id(p))
        if v is None:
            v = Var(p.value, self, self.enabled and p.trainable, p)
            self._watched[id(p)] = v
        return v

    def record(self, value: np.ndarray, inputs: Sequence[Var], backward: Callable) -> Var:
        needs = self.enabled and any(v.requires_grad for v in inputs)
        out = Var(value, self, needs)
        if needs:
            self.nodes.append(_Node(out, tuple(inputs), backward))
        return out


def backward(tape: Tape, loss: Var) -> None:
    """Accumulate d(loss)/d(p) into ``p.grad`` for every trainable parameter reachable from ``loss``."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not produced under this tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Var] = {}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
            if inp.param is not None:
                leaves[key] = inp
    for key, var in leaves.items():
        var.param.grad += adj[key]
    if loss.param is not None and loss.requires_grad:
        loss.param.grad += 1.0


# ---------------------------------------------------------------------------
# differentiable primitives


def _lift(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def mul(a: Var, b) -> Var:
    b = _lift(b, a.tape)
    out = T.elementwise_mul(a.value, b.value)
    av, bv = a.value, b.value
    return a.tape.record(out, (a, b), lambda g: (g * bv, g * av))


def add(a: Var, b) -> Var:
    b = _lift(b, a.tape)
    out = T.add(a.value, b.value)
    return a.tape.record(out, (a, b), lambda g: (g, g))


def sum_all(x: Var) -> Var:
    shape = x.shape
    return x.tape.record(np.array(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def weighted_sum(x: Var, weights) -> Var:
    """sum(x * weights) with constant ``weights``; handy for scalarizing test programs."""
    return sum_all(mul(x, weights))


def reshape(x: Var, shape) -> Var:
    old = x.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def conv2d(x: Var, w: Var, spec: ConvSpec, b: Var | None = None) -> Var:
    xv, wv = x.value, w.value
    out = T.conv2d(xv, wv, spec, None if b is None else b.value)
    inputs = (x, w) if b is None else (x, w, b)

    def grad(g):
        n, _, h, wd = xv.shape
        k = spec.out_channels
        g2 = g.reshape(n, k, -1)
        if spec.is_pointwise:
            x2 = xv.reshape(n, spec.in_channels, h * wd)
            gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
            gx = np.matmul(wv[:, :, 0, 0].T, g2).reshape(xv.shape) if x.requires_grad else None
        else:
            w2 = wv.reshape(k, -1)
            cols = T.im2col(xv, spec)
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
            gx = T.col2im(np.matmul(w2.T, g2), spec, xv.shape) if x.requires_grad else None
        gb = (g.sum(axis=(0, 2, 3)),) if b is not None else ()
        return (gx, gw) + gb

    return x.tape.record(out, inputs, grad)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    xv, wv = x.value, w.value
    out = T.linear(xv, wv, None if b is None else b.value)
    inputs = (x, w) if b is None else (x, w, b)

    def grad(g):
        gb = (g.sum(axis=0),) if b is not None else ()
        return (g @ wv, g.T @ xv) + gb

    return x.tape.record(out, inputs, grad)


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape.record(x.value * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Var, alpha: float) -> Var:
    slope = np.where(x.value > 0, 1.0, alpha)
    return x.tape.record(x.value * slope, (x,), lambda g: (g * slope,))


SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


def selu(x: Var) -> Var:
    xv = x.value
    pos = xv > 0
    e = np.exp(np.minimum(xv, 0.0))
    out = SELU_SCALE * np.where(pos, xv, SELU_ALPHA * (e - 1.0))
    d = SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * e)
    return x.tape.record(out, (x,), lambda g: (g * d,))


def sigmoid(x: Var) -> Var:
    s = T.sigmoid(x.value)

    def grad(g):
        d = s * (1.0 - s)
        if "sigmoid_backward_sign" in _FAULTS:
            d = -d
        return (g * d,)

    return x.tape.record(s, (x,), grad)


def swish(x: Var) -> Var:
    xv = x.value
    s = T.sigmoid(xv)
    d = s * (1.0 + xv * (1.0 - s))
    return x.tape.record(xv * s, (x,), lambda g: (g * d,))


def global_avg_pool(x: Var) -> Var:
    n, c, h, w = x.shape
    return x.tape.record(T.global_avg_pool(x.value), (x,), lambda g: (np.broadcast_to(g / (h * w), (n, c, h, w)).copy(),))


def broadcast_mul(x: Var, gate: Var) -> Var:
    xv, gv = x.value, gate.value
    out = T.broadcast_mul(xv, gv)
    return x.tape.record(out, (x, gate), lambda g: (g * gv, (g * xv).sum(axis=(2, 3), keepdims=True)))


def max_pool2d(x: Var, kernel: int, stride: int, padding: int = 0) -> Var:
    xv = x.value
    out = T.max_pool2d(xv, kernel, stride, padding)
    n, c, h, w = xv.shape

    def grad(g):
        xp = np.pad(xv, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2), constant_values=-np.inf)
        gxp = np.zeros_like(xp)
        ho, wo = out.shape[2], out.shape[3]
        taken = np.zeros(out.shape, dtype=bool)
        # first maximal element in each window receives the gradient
        for i in range(kernel):
            for j in range(kernel):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                hit = (xp[sl] == out) & ~taken
                gxp[sl] += g * hit
                taken |= hit
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return x.tape.record(out, (x,), grad)


def batch_norm_train(x: Var, gamma: Var, beta: Var, eps: float):
    """Normalize with batch statistics over (N, H, W). Returns (out, batch_mean, batch_var)."""
    xv = x.value
    axes = (0, 2, 3) if xv.ndim == 4 else (0,)
    m = xv.size // xv.shape[1]
    mean = xv.mean(axis=axes, keepdims=True)
    var = xv.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv_std
    shape = (1, -1) + (1,) * (xv.ndim - 2)
    gv = gamma.value.reshape(shape)
    out = xhat * gv + beta.value.reshape(shape)

    def grad(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_xhat = g * gv
        gx = inv_std / m * (m * g_xhat - g_xhat.sum(axis=axes, keepdims=True) - xhat * (g_xhat * xhat).sum(axis=axes, keepdims=True))
        return gx, g_gamma, g_beta

    return x.tape.record(out, (x, gamma, beta), grad), mean.ravel(), var.ravel()


def batch_norm_eval(x: Var, gamma: Var, beta: Var, mean: np.ndarray, var: np.ndarray, eps: float) -> Var:
    xv = x.value
    axes = (0, 2, 3) if xv.ndim == 4 else (0,)
    shape = (1, -1) + (1,) * (xv.ndim - 2)
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(shape)
    xhat = (xv - mean.reshape(shape)) * inv_std
    gv = gamma.value.reshape(shape)
    out = xhat * gv + beta.value.reshape(shape)
    return x.tape.record(out, (x, gamma, beta), lambda g: (g * gv * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)))


def softmax_cross_entropy(logits: Var, labels) -> Var:
    lv = logits.value
    logp = T.log_softmax(lv)
    labels = T.check_labels(labels, lv.shape[1])
    if labels.shape[0] != lv.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {lv.shape[0]} logit rows")
    n = lv.shape[0]
    rows = np.arange(n)
    loss = np.array(-logp[rows, labels].mean())

    def grad(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return logits.tape.record(loss, (logits,), grad)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _coord(flat_index, shape) -> str:
    return ",".join(str(int(k)) for k in np.unravel_index(flat_index, shape))


@dataclass
class GradcheckReport:
    max_error: dict[str, float] = field(default_factory=dict)  # relative, over coords with |grad| >= 1e-6
    max_abs_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        lines = [
            f"{name}: max rel err {err:.3e}, max abs err {self.max_abs_error[name]:.3e} over {self.checked[name]} coords"
            for name, err in self.max_error.items()
        ]
        lines += [f"FAIL {f}" for f in self.failures]
        return "\n".join(lines)


def gradcheck(
    f: Callable[[Tape], Var],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 32,
    atol: float = 1e-8,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients of the scalar program ``f`` against central differences.

    ``f`` receives a fresh :class:`Tape` on every call and must be deterministic.
    A coordinate passes when the absolute difference is below ``atol`` or the
    relative difference is below ``tol``. Parameter gradients are restored on exit.
    """
    rng = np.random.default_rng(seed)
    saved = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = f(tape)
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad[...] = g

    def value() -> float:
        return float(f(Tape(enabled=False)).value)

    report = GradcheckReport()
    for k, (p, ga) in enumerate(zip(params, analytic)):
        name = p.name or f"param{k}"
        coords = rng.choice(p.size, size=min(n_coords, p.size), replace=False)
        worst = worst_abs = 0.0
        flat = p.value.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = ga.flat[i]
            if not (np.isfinite(num) and np.isfinite(ana)):
                report.failures.append(f"{name}[{_coord(i, p.shape)}]: non-finite value (numeric={num}, tape={ana})")
                continue
            diff = abs(num - ana)
            rel = diff / max(abs(num), abs(ana), atol)
            worst_abs = max(worst_abs, diff)
            if max(abs(num), abs(ana)) >= 1e-6:
                worst = max(worst, rel)
            if diff > atol and rel > tol:
                report.failures.append(
                    f"{name}[{_coord(i, p.shape)}]: tape {ana:.8e} vs numeric {num:.8e} (rel {rel:.2e})"
                )
        report.max_error[name] = worst
        report.max_abs_error[name] = worst_abs
        report.checked[name] = len(coords)
    return report
