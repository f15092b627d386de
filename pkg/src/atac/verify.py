"""Invariant suite run by ``atac verify``."""
from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import autograd as ad
from .autograd import Parameter, gradcheck
from .data import DataError, encode_cifar10, encode_cifar100, parse_cifar10, parse_cifar100
from .tensor import ConvSpec
from .units import AtacUnit, NiNBlock, SEActivationUnit, activate, atac_gate, se_activation_gate
from .zoo import ReplacementPolicy, apply_replacement, build_resnet20v2, he_init


@dataclass
class CheckResult:
    name: str
    module: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# fixtures shared with the test-suite


def random_unit(cls, channels: int, r: int, seed: int, name: str = "unit", eval_mode: bool = True):
    """A unit with He-initialized convs and randomized BN affines/statistics."""
    rng = np.random.default_rng(seed)
    unit = cls(channels, r, name)
    unit.reset_parameters(rng)
    for bn in (unit.bn1, unit.bn2):
        bn.gamma.value[...] = rng.uniform(0.5, 1.5, bn.channels)
        bn.beta.value[...] = rng.normal(0, 0.2, bn.channels)
        bn.running_mean[...] = rng.normal(0, 0.2, bn.channels)
        bn.running_var[...] = rng.uniform(0.5, 2.0, bn.channels)
    unit.train(not eval_mode)
    return unit


def swish_identity_unit(shift: float = 100.0) -> AtacUnit:
    """C=1, r=1 ATAC unit whose pre-sigmoid response equals its input.

    Both PWConvs are the scalar 1 and both BNs are evaluation-mode identities
    (gamma cancels the eps term). BN1 shifts by ``shift`` so the inner ReLU stays
    on its linear branch for inputs above ``-shift``; BN2 removes the shift.
    """
    unit = AtacUnit(1, 1, "swish_identity")
    unit.pw1.weight.value[...] = 1.0
    unit.pw2.weight.value[...] = 1.0
    for bn, beta in ((unit.bn1, shift), (unit.bn2, -shift)):
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 1.0
        bn.gamma.value[...] = np.sqrt(1.0 + bn.eps)
        bn.beta.value[...] = beta
    unit.train(False)
    return unit


def locality_trial(unit: AtacUnit, x: np.ndarray, rng) -> tuple[bool, bool, int]:
    """Perturb each spatial position of ``x`` in turn.

    Returns (ATAC gate never changed away from the perturbed position,
    SE gate changed at every position, number of perturbations that moved the
    ATAC gate at the perturbed position itself).
    """
    n, c, h, w = x.shape
    base_local = atac_gate(x, unit)
    base_global = np.broadcast_to(se_activation_gate(x, unit), x.shape)
    local_ok, global_ok, moved = True, True, 0
    for i in range(h):
        for j in range(w):
            xp = x.copy()
            xp[:, :, i, j] += rng.normal(0.0, 1.0, size=(n, c))
            changed = np.any(atac_gate(xp, unit) != base_local, axis=1)  # [N, H, W]
            outside = changed.copy()
            outside[:, i, j] = False
            local_ok &= not outside.any()
            moved += int(changed[:, i, j].all())
            g = np.broadcast_to(se_activation_gate(xp, unit), x.shape)
            global_ok &= bool(np.all(np.any(g != base_global, axis=1)))
    return local_ok, global_ok, moved


# ---------------------------------------------------------------------------
# gradient programs: each returns (program, parameters)


def _input(rng, shape, name="x", away_from=None):
    x = rng.normal(size=shape)
    if away_from is not None:
        x = np.sign(x) * (np.abs(x) + away_from)
    return Parameter(x, name)


def _unit_program(cls, c, r, rng, train_mode=True):
    unit = random_unit(cls, c, r, int(rng.integers(1 << 30)), name=cls.__name__, eval_mode=not train_mode)
    x = _input(rng, (2, c, 4, 4))
    wts = rng.normal(size=(2, c, 4, 4))

    def f(tape):
        return ad.weighted_sum(unit(tape.watch(x)), wts)

    return f, [x, *unit.parameters()]


def gradient_programs(seed: int = 0) -> dict[str, Callable]:
    rng = np.random.default_rng(seed)
    progs: dict[str, Callable] = {}

    def conv():
        spec = ConvSpec(3, 4, 3, 3, 2, 1, True)
        x = _input(rng, (2, 3, 7, 7))
        w = Parameter(rng.normal(size=spec.weight_shape), "conv.weight")
        b = Parameter(rng.normal(size=4), "conv.bias")
        wts = rng.normal(size=(2, 4, 4, 4))
        return (lambda t: ad.weighted_sum(ad.conv2d(t.watch(x), t.watch(w), spec, t.watch(b)), wts)), [x, w, b]

    def pwconv():
        spec = ConvSpec.pointwise(6, 3)
        x = _input(rng, (2, 6, 3, 3))
        w = Parameter(rng.normal(size=spec.weight_shape), "pw.weight")
        wts = rng.normal(size=(2, 3, 3, 3))
        return (lambda t: ad.weighted_sum(ad.conv2d(t.watch(x), t.watch(w), spec), wts)), [x, w]

    def batchnorm():
        from .units import BatchNorm

        bn = BatchNorm(5, "bn")
        bn.gamma.value[...] = rng.uniform(0.5, 1.5, 5)
        bn.beta.value[...] = rng.normal(size=5)
        x = _input(rng, (3, 5, 3, 3))
        wts = rng.normal(size=(3, 5, 3, 3))
        return (lambda t: ad.weighted_sum(bn(t.watch(x)), wts)), [x, bn.gamma, bn.beta]

    def linear():
        x = _input(rng, (4, 6))
        w = Parameter(rng.normal(size=(3, 6)), "fc.weight")
        b = Parameter(rng.normal(size=3), "fc.bias")
        wts = rng.normal(size=(4, 3))
        return (lambda t: ad.weighted_sum(ad.linear(t.watch(x), t.watch(w), t.watch(b)), wts)), [x, w, b]

    def softmax_ce():
        z = _input(rng, (5, 7), "logits")
        y = rng.integers(0, 7, size=5)
        return (lambda t: ad.softmax_cross_entropy(t.watch(z), y)), [z]

    def scalar(kind):
        def make():
            x = _input(rng, (2, 3, 4, 4), away_from=0.1)
            wts = rng.normal(size=(2, 3, 4, 4))
            return (lambda t: ad.weighted_sum(activate(t.watch(x), kind), wts)), [x]

        return make

    def resnet():
        g = build_resnet20v2(1, 10, "relu", input_hw=8)
        g = he_init(apply_replacement(g, ReplacementPolicy(ratio=1.0), 2), seed)
        x = _input(rng, (2, 3, 8, 8))
        y = rng.integers(0, 10, size=2)
        return (lambda t: ad.softmax_cross_entropy(g.forward(t.watch(x), t, training=True), y)), [x, *g.parameters()]

    progs["conv2d"] = conv
    progs["pointwise_conv"] = pwconv
    progs["batchnorm_train"] = batchnorm
    progs["linear"] = linear
    progs["softmax_cross_entropy"] = softmax_ce
    for kind in ("relu", "leaky_relu", "selu", "swish"):
        progs[kind] = scalar(kind)
    progs["atac"] = lambda: _unit_program(AtacUnit, 8, 2, rng)
    progs["atac_eval"] = lambda: _unit_program(AtacUnit, 8, 2, rng, train_mode=False)
    progs["se_activation"] = lambda: _unit_program(SEActivationUnit, 8, 2, rng)
    progs["local_senet"] = lambda: _unit_program(AtacUnit, 8, 1, rng)
    progs["nin"] = lambda: _unit_program(NiNBlock, 8, 2, rng)
    progs["atac_resnet20_b1"] = resnet
    return progs


# ---------------------------------------------------------------------------
# the checks


def _timed(name, module, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, module, ok, detail, time.perf_counter() - t0)


_GRAD_MODULE = {
    "conv2d": "tensor_core",
    "pointwise_conv": "tensor_core",
    "linear": "tensor_core",
    "softmax_cross_entropy": "tensor_core",
    "atac_resnet20_b1": "model_zoo",
}


def check_gradients(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    out = []
    for unit, make in gradient_programs(seed).items():
        def run(make=make):
            f, params = make()
            rep = gradcheck(f, params, tol=tol, seed=seed)
            worst = max(rep.max_error.values(), default=0.0)
            worst_abs = max(rep.max_abs_error.values(), default=0.0)
            return rep.passed, f"max rel err {worst:.2e}, max abs err {worst_abs:.2e}" + ("" if rep.passed else "; " + rep.failures[0])

        out.append(_timed(f"gradcheck {unit}", _GRAD_MODULE.get(unit, "nn_units"), run))
    return out


def check_locality(trials: int = 20, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        unit = random_unit(AtacUnit, 8, 2, seed)
        local, glob, moved = True, True, 0
        for _ in range(trials):
            lo, gl, mv = locality_trial(unit, rng.normal(size=(2, 8, 4, 4)), rng)
            local &= lo
            glob &= gl
            moved += mv
        ok = local and glob and moved > 0
        return ok, f"atac local={local} (gate moved at {moved}/{16 * trials} perturbed positions), se global={glob}"

    return _timed("gate locality", "nn_units", run)


def check_swish_reduction(n: int = 10_000, seed: int = 0) -> CheckResult:
    def run():
        x = np.random.default_rng(seed).uniform(-10, 10, size=(n, 1, 1, 1))
        from .units import atac_forward

        err = float(np.max(np.abs(atac_forward(x, swish_identity_unit()) - activate(x, "swish"))))
        return err <= 1e-9, f"max abs err {err:.2e}"

    return _timed("swish reduction", "nn_units", run)


def check_parity() -> CheckResult:
    def run():
        bad = []
        for c in (16, 32, 64):
            atac, se, nin = AtacUnit(c, 2, "a"), SEActivationUnit(c, 2, "s"), NiNBlock(c, 2, "n")
            totals = {sum(p.size for p in u.parameters()) for u in (atac, se, nin)}
            convs = {u.conv_weight_count for u in (atac, se, nin)}
            if len(totals) != 1 or len(convs) != 1:
                bad.append(f"C={c}: ATAC/SE/NiN counts differ")
            if AtacUnit(c, 1, "l").conv_weight_count != 2 * atac.conv_weight_count:
                bad.append(f"C={c}: LocalSENet(r=1) != 2 x ATAC(r=2)")
        return not bad, "; ".join(bad) or "ATAC = SEActivation = NiN; LocalSENet(r=1) = 2 x ATAC(r=2)"

    return _timed("equal-budget parity", "nn_units", run)


def check_overhead_ratio() -> CheckResult:
    def run():
        bad = []
        for c in (16, 32, 64):
            for r in (1, 2, 4):
                ratio = Fraction(AtacUnit(c, r, "a").conv_weight_count, 9 * c * c)
                if ratio != Fraction(2, 9 * r):
                    bad.append(f"C={c} r={r}: {ratio}")
        return not bad, "; ".join(bad) or "2/(9r) exact for C in {16,32,64}, r in {1,2,4}"

    return _timed("overhead ratio", "nn_units", run)


def check_cifar_roundtrip(seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        ims = rng.integers(0, 256, size=(5, 3, 32, 32), dtype=np.uint8)
        raw10 = encode_cifar10(ims, rng.integers(0, 10, 5))
        raw100 = encode_cifar100(ims, rng.integers(0, 100, 5), rng.integers(0, 20, 5))
        ok = encode_cifar10(*parse_cifar10(raw10)) == raw10
        im, fine, coarse = parse_cifar100(raw100, return_coarse=True)
        ok &= encode_cifar100(im, fine, coarse) == raw100
        rejected = 0
        for parse, bad in ((parse_cifar10, raw10 + b"\0"), (parse_cifar10, b"\x0a" + raw10[1:]), (parse_cifar100, raw100[:-1])):
            try:
                parse(bad)
            except DataError:
                rejected += 1
        return ok and rejected == 3, f"round trip {'ok' if ok else 'BROKEN'}, {rejected}/3 malformed inputs rejected"

    return _timed("cifar round trip", "data_pipeline", run)


def run_all(seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    results = []
    if fault:
        with ad.inject_fault(fault):
            results += check_gradients(seed)
    else:
        results += check_gradients(seed)
    results += [check_locality(seed=seed), check_swish_reduction(seed=seed), check_parity(), check_overhead_ratio(), check_cifar_roundtrip(seed)]
    return results
