"""Command-line entry point: ``atac train | sweep-replacement | account | verify | eval``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort,
5 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autograd import KNOWN_FAULTS
from .data import (
    NUM_CLASSES,
    ChecksumError,
    DataError,
    LabeledBatch,
    compute_meta,
    dataset_files,
    load_cifar,
    normalize,
    read_checksums,
    synthetic_dataset,
    verify_files,
)
from .train import (
    CheckpointError,
    ConfigError,
    NumericAbort,
    TrainConfig,
    build_model,
    checkpoint_load,
    evaluate,
    read_checkpoint_header,
    train,
    write_metrics_csv,
)
from .units import ActivationKind
from .zoo import (
    ReplacementPolicy,
    apply_replacement,
    build_resnet20v2,
    build_resnet50v1b,
    count_flops,
    count_params,
    enumerate_activation_sites,
    stage_breakdown,
)

log = logging.getLogger("atac")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

# paths inside a config file are resolved relative to the file itself
_PATH_KEYS = ("data_dir", "checksum_file")


# ---------------------------------------------------------------------------
# config files


def _convert(name: str, field: dataclasses.Field, raw: str):
    default = field.default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {raw!r}: {exc}") from None


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config(text: str, base_dir: Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from ``key = value`` lines (``#`` starts a comment).

    Unknown or repeated keys are errors. ``overrides`` (already-typed values)
    win over the file.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, f"unknown config key (line {lineno})")
        if key in values:
            raise ConfigError(key, f"repeated on line {lineno}")
        values[key] = _convert(key, _FIELDS[key], raw)
        if key in _PATH_KEYS and values[key] and base_dir is not None:
            values[key] = str((base_dir / values[key]).resolve())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**values)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, path.parent, overrides)


def format_config(cfg: TrainConfig) -> str:
    """Echo every field, defaults included, in the config-file syntax."""
    lines = []
    for name, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(map(str, value))
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# runs


def prepare_data(cfg: TrainConfig) -> tuple[LabeledBatch, LabeledBatch, dict[str, str]]:
    """(train, test, file digests) for ``cfg``; CIFAR files are checksum-verified first."""
    if cfg.dataset == "synthetic":
        train_data, test_data = synthetic_dataset(
            cfg.resolved_num_classes, cfg.synthetic_n, cfg.seed, cfg.image_size, cfg.synthetic_test_n, cfg.synthetic_noise
        )
        return train_data, test_data, {}
    checksums = read_checksums(cfg.checksum_file) if cfg.checksum_file else None
    files = dataset_files(cfg.dataset, cfg.data_dir)
    digests = verify_files(files["train"] + files["test"], checksums)
    if checksums is None:
        log.warning("no checksum_file configured; recording digests without verification")
    limit_train = cfg.train_subset or None
    limit_test = cfg.test_subset or None
    xtr, ytr = load_cifar(cfg.dataset, cfg.data_dir, "train", limit=limit_train)
    xte, yte = load_cifar(cfg.dataset, cfg.data_dir, "test", limit=limit_test)
    meta = compute_meta(cfg.dataset, xtr, NUM_CLASSES[cfg.dataset], len(xte))
    train_data = normalize(LabeledBatch(xtr, ytr), meta)
    test_data = normalize(LabeledBatch(xte, yte), meta)
    return train_data, test_data, digests


def run_manifest(cfg: TrainConfig, graph, digests: dict[str, str], run_dir: Path) -> dict:
    return {
        "config": cfg.to_dict(),
        "code_version": __version__,
        "dataset_checksums": digests,
        "derived": {
            "activation_sites": len(enumerate_activation_sites(graph)),
            "replaced_sites": sum(s.kind.has_unit for s in enumerate_activation_sites(graph)),
            "params": count_params(graph),
            "flops": count_flops(graph),
        },
        "outputs": {
            "run_dir": str(run_dir),
            "config": "config.txt",
            "metrics": "metrics.csv",
            "timing": "timing.csv",
            "checkpoints": "checkpoint_epoch*.ckpt",
        },
    }


def run_training(cfg: TrainConfig, run_dir, data=None):
    """Train one configuration into ``run_dir``; returns (TrainResult, manifest).

    ``data`` may carry a pre-loaded (train, test, digests) triple so a sweep reads
    the dataset once.
    """
    run_dir = Path(run_dir)
    train_data, test_data, digests = data if data is not None else prepare_data(cfg)
    graph = build_model(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = run_manifest(cfg, graph, digests, run_dir)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (run_dir / "config.txt").write_text(format_config(cfg))
    rows = []

    def flush(row):
        rows.append(row)
        write_metrics_csv(rows, run_dir / "metrics.csv", cfg.log_wall_time)
        with open(run_dir / "timing.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "wall_time_sec"])
            w.writerows([r.epoch, f"{r.wall_time_sec:.3f}"] for r in rows)

    result = train(cfg, graph, train_data, test_data, run_dir=run_dir, on_epoch=flush)
    return result, manifest


def sweep_replacement(cfg: TrainConfig, ratios, seeds, out_dir) -> list[dict]:
    """One run per (ratio, seed); writes runs.csv and summary.csv (seed-mean accuracy)."""
    out_dir = Path(out_dir)
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError("ratios", f"{r} outside [0, 1]")
    if cfg.activation != "relu":
        raise ConfigError("activation", "a replacement sweep starts from the relu host network")
    cache = {}
    runs = []
    for ratio in ratios:
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, replacement_ratio=ratio, seed=seed)
            if seed not in cache:
                cache[seed] = prepare_data(run_cfg)
            name = f"ratio{ratio:g}_seed{seed}"
            result, manifest = run_training(run_cfg, out_dir / name, cache[seed])
            last = result.rows[-1]
            runs.append(
                {
                    "ratio": ratio,
                    "seed": seed,
                    "replaced_sites": manifest["derived"]["replaced_sites"],
                    "params": manifest["derived"]["params"],
                    "test_acc": last.test_acc,
                    "run_dir": name,
                }
            )
    with open(out_dir / "runs.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(runs[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(runs)
    summary = []
    for ratio in ratios:
        mine = [r for r in runs if r["ratio"] == ratio]
        summary.append(
            {
                "ratio": ratio,
                "replaced_sites": mine[0]["replaced_sites"],
                "params": mine[0]["params"],
                "test_acc": float(np.mean([r["test_acc"] for r in mine])),
            }
        )
    with open(out_dir / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["ratio", "replaced_sites", "params", "test_acc"], lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    return summary


# ---------------------------------------------------------------------------
# accounting


def account_model(model: str, blocks=3, activation="relu", replacement_ratio=0.0, r=2, classes=None):
    if model == "resnet20":
        kind = ActivationKind.parse(activation)
        g = build_resnet20v2(blocks, classes or 10, kind, "none", r)
        if replacement_ratio:
            g = apply_replacement(g, ReplacementPolicy(ratio=replacement_ratio), r)
    elif model == "resnet50":
        g = build_resnet50v1b(classes or 1000, stride_in_3x3=False)
    elif model == "resnet50v1b":
        g = build_resnet50v1b(classes or 1000)
    elif model == "atac-resnet50":
        g = build_resnet50v1b(classes or 1000, atac_last_two_stages=True, r=r)
    elif model == "atac-resnet50v1":
        g = build_resnet50v1b(classes or 1000, atac_last_two_stages=True, r=r, stride_in_3x3=False)
    else:
        raise ConfigError("model", f"unknown model {model!r}")
    return g


def account_report(g) -> dict:
    stages = stage_breakdown(g)
    return {
        "model": g.name,
        "input_shape": list(g.input_shape),
        "params": count_params(g),
        "flops": count_flops(g),
        "activation_sites": len(enumerate_activation_sites(g)),
        "stages": {k: {"params": p, "flops": f} for k, (p, f) in stages.items()},
    }


def _format_account(rep: dict) -> str:
    lines = [
        f"model {rep['model']}  input {'x'.join(map(str, rep['input_shape']))}",
        f"params {rep['params']:,} ({rep['params'] / 1e6:.3f}M)",
        f"flops  {rep['flops']:,} ({rep['flops'] / 1e9:.3f}G multiply-accumulates)",
        f"activation sites {rep['activation_sites']}",
        f"{'stage':<10}{'params':>14}{'flops':>18}",
    ]
    for k, v in rep["stages"].items():
        lines.append(f"{k:<10}{v['params']:>14,}{v['flops']:>18,}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser):
    group = p.add_argument_group("config overrides (mirror the config keys)")
    for name, f in _FIELDS.items():
        flag = "--" + name.replace("_", "-")
        group.add_argument(flag, dest=name, default=None, metavar=name.upper(), help=f"default {f.default!r}")


def _overrides(args) -> dict:
    out = {}
    for name, f in _FIELDS.items():
        raw = getattr(args, name, None)
        if raw is not None:
            out[name] = _convert(name, f, raw)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="atac", description="Attentional-activation ResNets: training, sweeps, accounting, checks.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config", help="flat key = value config file")
    p.add_argument("--run-dir", default=None, help="output directory (default: runs/<config stem>)")
    _add_config_flags(p)

    p = sub.add_parser("sweep-replacement", help="train the host network at several replacement ratios")
    p.add_argument("config")
    p.add_argument("--ratios", default="0,0.25,0.5,0.75,1", help="comma-separated ratios in [0, 1]")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: the config seed)")
    p.add_argument("--out-dir", default=None)
    _add_config_flags(p)

    p = sub.add_parser("account", help="static parameter and FLOP counts")
    p.add_argument("model", help="resnet20 | resnet50 | resnet50v1b | atac-resnet50 | atac-resnet50v1")
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--activation", default="relu")
    p.add_argument("--replacement-ratio", type=float, default=0.0)
    p.add_argument("--r", type=int, default=2, help="channel reduction ratio of ATAC units")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", default=None, choices=KNOWN_FAULTS, help="deliberately break a backward rule")
    p.add_argument("--config", default=None, help="also validate this config file")

    p = sub.add_parser("eval", help="accuracy of a checkpoint on the configured test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_config_flags(p)
    return ap


def _ratios(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError("ratios", f"cannot parse {text!r}") from None


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    run_dir = Path(args.run_dir or Path("runs") / Path(args.config).stem)
    result, manifest = run_training(cfg, run_dir)
    last = result.rows[-1]
    print(f"trained {len(result.rows)} epochs into {run_dir}: train_acc {last.train_acc:.4f} test_acc {last.test_acc:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    ratios = _ratios(args.ratios)
    if not ratios:
        raise ConfigError("ratios", "empty list")
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    except ValueError:
        raise ConfigError("seeds", f"cannot parse {args.seeds!r}") from None
    out = Path(args.out_dir or Path("runs") / f"{Path(args.config).stem}_sweep")
    for row in sweep_replacement(cfg, ratios, seeds, out):
        print(f"ratio {row['ratio']:<5g} sites {row['replaced_sites']:<3} params {row['params']:<9} test_acc {row['test_acc']:.4f}")
    return EXIT_OK


def cmd_account(args) -> int:
    try:
        g = account_model(args.model, args.blocks, args.activation, args.replacement_ratio, args.r, args.classes)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("model", str(exc)) from None
    rep = account_report(g)
    print(json.dumps(rep, indent=2) if args.json else _format_account(rep))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    if args.config:
        load_config(args.config)
    results = run_all(args.seed, args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  [{r.module}] {r.name}: {r.detail} ({r.seconds:.2f}s)")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    header, _ = read_checkpoint_header(args.checkpoint)
    _, test_data, _ = prepare_data(cfg)
    graph = build_model(cfg)
    checkpoint_load(graph, args.checkpoint)
    acc, loss = evaluate(graph, test_data)
    print(f"checkpoint epoch {header.get('epoch')}: test_acc {acc:.4f} loss {loss:.4f} on {len(test_data)} images")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep-replacement": cmd_sweep,
    "account": cmd_account,
    "verify": cmd_verify,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ChecksumError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
