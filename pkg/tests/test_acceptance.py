"""Acceptance suite: one PASS/FAIL line per headline criterion.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are printed at
the end of the session (or run this file directly with python).

The two CIFAR-10 training criteria need the CIFAR-10 binary batches
(data_batch_1.bin ... test_batch.bin). Point ``ATAC_CIFAR10_DIR`` at them; an
optional ``SHA256SUMS`` file in that directory is verified. Runs are written
under ``ATAC_ACCEPTANCE_RUNS`` (default: a temporary directory).
"""
import csv
import dataclasses
import functools
import json
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from atac.cli import main, sweep_replacement
from atac.data import CIFAR_FILES, encode_cifar10, encode_cifar100, parse_cifar10, parse_cifar100, sha256_file, write_checksums
from atac.train import TrainConfig
from atac.verify import check_gradients, check_locality, check_overhead_ratio, check_parity, check_swish_reduction
from atac.zoo import ReplacementPolicy, apply_replacement, build_resnet20v2, count_params

RESULTS: list[str] = []

# tolerances and protocol constants
RESNET50_PARAMS, RESNET50_PARAMS_TOL = 25.6e6, 0.1e6
ATAC50_PARAMS, ATAC50_PARAMS_TOL = 28.0e6, 0.2e6
RESNET50_FLOPS, ATAC50_FLOPS, FLOPS_REL_TOL = 3.86e9, 4.4e9, 0.05
GRADCHECK_TOL, GRADCHECK_BUDGET_SEC = 1e-4, 300.0
SWISH_TOL, SWISH_SAMPLES = 1e-9, 10_000
LOCALITY_TRIALS = 20
DESK = dict(train_subset=10_000, test_subset=2_000, blocks=1, epochs=40, seeds=(0, 1, 2))
DESK_MIN_ACC, DESK_MARGIN = 0.55, 0.005
SWEEP_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)


def report(name: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def account(model):
    import contextlib
    import io

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        assert main(["account", model, "--json"]) == 0
    return json.loads(buf.getvalue())


def test_parameter_accounting():
    base, atac = account("resnet50"), account("atac-resnet50")
    checks = [
        abs(base["params"] - RESNET50_PARAMS) <= RESNET50_PARAMS_TOL,
        abs(atac["params"] - ATAC50_PARAMS) <= ATAC50_PARAMS_TOL,
        abs(base["flops"] / RESNET50_FLOPS - 1) <= FLOPS_REL_TOL,
        abs(atac["flops"] / ATAC50_FLOPS - 1) <= FLOPS_REL_TOL,
    ]
    detail = (
        f"ResNet-50 {base['params'] / 1e6:.3f}M / {base['flops'] / 1e9:.3f}G (want 25.6M±0.1M, 3.86G±5%); "
        f"ATAC-ResNet-50 {atac['params'] / 1e6:.3f}M / {atac['flops'] / 1e9:.3f}G (want 28.0M±0.2M, 4.4G±5%)"
    )
    assert report("parameter accounting", all(checks), detail), detail


def test_overhead_ratio():
    r = check_overhead_ratio()
    assert report("overhead ratio 2/(9r)", r.passed, r.detail), r.detail


def test_locality_oracle():
    r = check_locality(trials=LOCALITY_TRIALS)
    assert report("locality oracle (2x8x4x4, 16 positions x 20 trials)", r.passed, r.detail), r.detail


def test_swish_reduction():
    r = check_swish_reduction(n=SWISH_SAMPLES)
    assert report(f"swish reduction (tol {SWISH_TOL:g}, {SWISH_SAMPLES} scalars)", r.passed, r.detail), r.detail


def test_gradient_correctness():
    t0 = time.perf_counter()
    results = check_gradients(tol=GRADCHECK_TOL)
    elapsed = time.perf_counter() - t0
    failed = [f"{r.name} ({r.detail})" for r in results if not r.passed]
    ok = not failed and elapsed <= GRADCHECK_BUDGET_SEC
    detail = f"{len(results) - len(failed)}/{len(results)} programs pass at rel tol {GRADCHECK_TOL:g} in {elapsed:.1f}s"
    if failed:
        detail += "; failing: " + ", ".join(failed)
    assert report("gradient correctness", ok, detail), detail


def test_equal_budget_parity():
    r = check_parity()
    assert report("equal-budget parity", r.passed, r.detail), r.detail


# --- desk-scale CIFAR-10 training ------------------------------------------


def cifar_dir():
    d = os.environ.get("ATAC_CIFAR10_DIR")
    if not d:
        return None, "ATAC_CIFAR10_DIR is not set"
    missing = [f for files in CIFAR_FILES["cifar10"].values() for f in files if not (Path(d) / f).is_file()]
    if missing:
        return None, f"{d} lacks {', '.join(missing)}"
    return Path(d), ""


def desk_config(data_dir: Path) -> TrainConfig:
    sums = data_dir / "SHA256SUMS"
    return TrainConfig(
        base_lr=0.2,
        epochs=DESK["epochs"],
        weight_decay=1e-4,
        batch_size=128,
        momentum=0.9,
        lr_decay_factor=0.1,
        lr_decay_epochs=(30, 35),
        dataset="cifar10",
        data_dir=str(data_dir),
        checksum_file=str(sums) if sums.is_file() else "",
        train_subset=DESK["train_subset"],
        test_subset=DESK["test_subset"],
        augment=True,
        blocks=DESK["blocks"],
        activation="relu",
    )


@functools.lru_cache(maxsize=1)
def desk_sweep():
    """All (ratio, seed) runs; ratio 0 is the ReLU network and ratio 1 the fully ATAC one."""
    data_dir, why = cifar_dir()
    if data_dir is None:
        return None, why
    out = Path(os.environ.get("ATAC_ACCEPTANCE_RUNS") or tempfile.mkdtemp(prefix="atac-acceptance-"))
    sweep_replacement(desk_config(data_dir), SWEEP_RATIOS, DESK["seeds"], out)
    with open(out / "runs.csv") as f:
        runs = list(csv.DictReader(f))
    return runs, str(out)


def mean_acc(runs, ratio):
    return float(np.mean([float(r["test_acc"]) for r in runs if float(r["ratio"]) == ratio]))


def test_desk_scale_training_trend():
    name = "desk-scale training trend (CIFAR-10 10k/2k, b=1, 40 epochs, 3 seeds)"
    runs, where = desk_sweep()
    if runs is None:
        detail = f"not measured: CIFAR-10 binaries unavailable ({where})"
        report(name, False, detail)
        pytest.fail(detail)
    relu = [float(r["test_acc"]) for r in runs if float(r["ratio"]) == 0.0]
    atac = [float(r["test_acc"]) for r in runs if float(r["ratio"]) == 1.0]
    ok = min(relu + atac) >= DESK_MIN_ACC and np.mean(atac) >= np.mean(relu) - DESK_MARGIN
    detail = f"ReLU {np.round(relu, 4).tolist()} mean {np.mean(relu):.4f}; ATAC {np.round(atac, 4).tolist()} mean {np.mean(atac):.4f} (runs in {where})"
    assert report(name, ok, detail), detail


def test_replacement_sweep_trend():
    name = "replacement-sweep trend"
    g = build_resnet20v2(DESK["blocks"])
    params = [count_params(apply_replacement(g, ReplacementPolicy(ratio=r))) for r in SWEEP_RATIOS]
    increasing = all(a < b for a, b in zip(params, params[1:]))
    runs, where = desk_sweep()
    if runs is None:
        detail = f"params {params} strictly increasing={increasing}; accuracy not measured: CIFAR-10 binaries unavailable ({where})"
        report(name, False, detail)
        pytest.fail(detail)
    accs = {r: mean_acc(runs, r) for r in SWEEP_RATIOS}
    ok = increasing and accs[1.0] >= accs[0.0]
    detail = f"params {params}; 3-seed mean acc " + ", ".join(f"rho={r:g}: {a:.4f}" for r, a in accs.items())
    assert report(name, ok, detail), detail


# --- determinism and data integrity ----------------------------------------

DETERMINISM_CFG = """\
dataset = synthetic
image_size = 8
synthetic_n = 200
synthetic_test_n = 100
blocks = 1
activation = atac:2
epochs = 3
lr_decay_epochs = 2
base_lr = 0.1
batch_size = 40
augment = true
seed = 7
"""


def test_determinism(tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text(DETERMINISM_CFG)
    codes = [main(["train", str(cfg), "--run-dir", str(tmp_path / name)]) for name in ("a", "b")]
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = codes == [0, 0] and a == b and len(a.splitlines()) == 4
    detail = f"two cmd_train runs -> metrics.csv {'bitwise identical' if a == b else 'DIFFER'} ({len(a)} bytes)"
    assert report("determinism", ok, detail), detail


def _cifar_fixture(d: Path, rng, dataset: str, n=12) -> Path:
    d.mkdir()
    for files in CIFAR_FILES[dataset].values():
        for name in files:
            ims = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
            if dataset == "cifar10":
                raw = encode_cifar10(ims, rng.integers(0, 10, n))
            else:
                raw = encode_cifar100(ims, rng.integers(0, 100, n), rng.integers(0, 20, n))
            (d / name).write_bytes(raw)
    write_checksums(d / "SHA256SUMS", {p.name: sha256_file(p) for p in d.glob("*.bin")})
    cfg = d / "run.cfg"
    cfg.write_text(f"dataset = {dataset}\ndata_dir = .\nchecksum_file = SHA256SUMS\nblocks = 1\nepochs = 1\nlr_decay_epochs =\n")
    return cfg


def _quiet_main(argv):
    import contextlib
    import io

    with contextlib.redirect_stderr(io.StringIO()), contextlib.redirect_stdout(io.StringIO()):
        return main(argv)


def test_data_integrity(tmp_path):
    rng = np.random.default_rng(0)
    notes, ok = [], True
    for dataset in ("cifar10", "cifar100"):
        cfg = _cifar_fixture(tmp_path / dataset, rng, dataset)
        for p in sorted((tmp_path / dataset).glob("*.bin")):
            raw = p.read_bytes()
            if dataset == "cifar10":
                same = encode_cifar10(*parse_cifar10(raw)) == raw
            else:
                same = encode_cifar100(*parse_cifar100(raw, return_coarse=True)) == raw
            ok &= same
        target = tmp_path / dataset / ("data_batch_1.bin" if dataset == "cifar10" else "train.bin")
        good = target.read_bytes()
        damage = {
            "truncated": good[:-1],
            "bad label": bytes([200]) + good[1:],
            "checksum": good[::-1],
        }
        for what, raw in damage.items():
            target.write_bytes(raw)
            if what != "checksum":
                write_checksums(tmp_path / dataset / "SHA256SUMS", {p.name: sha256_file(p) for p in (tmp_path / dataset).glob("*.bin")})
            code = _quiet_main(["train", str(cfg), "--run-dir", str(tmp_path / f"{dataset}-{what}")])
            ok &= code == 3
            notes.append(f"{dataset} {what} -> exit {code}")
            target.write_bytes(good)
            write_checksums(tmp_path / dataset / "SHA256SUMS", {p.name: sha256_file(p) for p in (tmp_path / dataset).glob("*.bin")})
        target.unlink()
        code = _quiet_main(["train", str(cfg), "--run-dir", str(tmp_path / f"{dataset}-missing")])
        ok &= code == 3
        notes.append(f"{dataset} missing file -> exit {code}")
    detail = "fixtures round-trip bitwise; " + ", ".join(notes)
    assert report("data integrity", ok, detail), detail


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
