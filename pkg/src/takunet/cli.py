"""
``takunet`` command line.

    takunet <command> [--config PATH] [--data DIR] [--out PATH] [--seed N]
            [--precision f16|f32|f64] [--input HxW] [--classes K] [--iters N]
            [--no-timing] [--checkpoint PATH] [key=value ...]

The config file is the source of truth; flags and ``key=value`` pairs
override it. Exit status is 0 on success, 2 for usage errors and 1 for
runtime failures. Every artifact is written to a temp file and renamed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from .analysis import (
    TARGET_PARAMS,
    analysis_summary,
    count_flops,
    count_params,
    derive_channel_config,
    discrepancy_report,
)
from .bench import bench_activations, bench_model, format_activation_table
from .checkpoint import atomic_write_bytes, checkpoint_bytes, load_checkpoint
from .config import ArchConfig, TrainConfig, config_hash, load_config_file, split_config, to_kv_text
from .data import batch_iterator, index_dataset, read_manifest, write_manifest
from .metrics import dumps_report, evaluate, report
from .model import build_model
from .trainer import fit

COMMANDS = ("train", "eval", "analyze", "bench", "bench-act", "derive-channels", "split")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="takunet", description="TakuNet training, evaluation and analysis")
    p.add_argument("--version", action="version", version=f"takunet {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", help="dataset root (aider or aiderv2 layout) or a split manifest CSV")
    p.add_argument("--out", help="output file (a directory for train)")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f16", "f32", "f64"))
    p.add_argument("--input", help="input size as HxW")
    p.add_argument("--classes", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from artifacts")
    p.add_argument("--checkpoint", help="checkpoint to evaluate or benchmark")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def _parse_hw(text: str) -> Tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise UsageError(f"--input expects HxW, got {text!r}")
    try:
        h, w = (int(v) for v in parts)
    except ValueError:
        raise UsageError(f"--input expects HxW, got {text!r}") from None
    return h, w


def _settings(args) -> Dict[str, str]:
    values: Dict[str, str] = load_config_file(args.config) if args.config else {}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        values[k] = v
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.precision is not None:
        values["precision"] = args.precision
    if args.input is not None:
        h, w = _parse_hw(args.input)
        values["input_size"] = f"{h},{w}"
    if args.classes is not None:
        values["num_classes"] = str(args.classes)
    return values


def _configs(args) -> Tuple[ArchConfig, TrainConfig]:
    try:
        return split_config(_settings(args))
    except KeyError as exc:
        raise UsageError(str(exc.args[0] if exc.args else exc)) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _header(command: str, arch: ArchConfig, train: TrainConfig) -> str:
    return f"# takunet {__version__} command={command} seed={train.seed} config_hash={config_hash(arch, train)}"


def _emit(args, text: str) -> None:
    if args.out:
        atomic_write_bytes(args.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def _dataset(path: str, seed: int):
    if path is None:
        raise UsageError("--data is required for this command")
    if os.path.isfile(path):
        return read_manifest(path)
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset path not found: {path}")
    mode = "aiderv2" if os.path.isdir(os.path.join(path, "train")) else "aider"
    return index_dataset(path, mode=mode, seed=seed)


# -- commands -----------------------------------------------------------------------

def cmd_analyze(args, arch, train) -> None:
    model = build_model(arch)
    summary = analysis_summary(model)
    doc = report(summary, config=arch)
    doc["model"]["size_bytes_f16"] = summary["size_bytes_f16"]
    doc["model"]["size_bytes_f32"] = summary["size_bytes_f32"]
    flops = count_flops(model).by_layer()
    doc["layers"] = [
        {"name": r.name, "kind": r.kind, "out_shape": list(r.out_shape), "params": r.params, "flops": flops[r.name]}
        for r in model.trace((1, 3) + arch.input_size)
    ]
    _emit(args, json.dumps(doc, indent=2) + "\n")


def cmd_derive(args, arch, train) -> None:
    res = derive_channel_config(
        stem_channels=arch.stem_channels, stage_depths=arch.stage_depths,
        final_width=arch.stage_out_channels[-1],
    )
    lines = [
        f"chains examined: {res.chains_examined}, configurations within FLOP tolerance: {res.configs_examined}",
        f"exact parameter matches: {len(res.exact)}",
        "nearest candidates (widths | stem/block/downsampler/refiner bias, per-channel GRN | params@5 params@4 | FLOPs 240/224):",
    ]
    for c in res.near_misses(10):
        bits = "".join("1" if b else "0" for b in c.bits)
        fl = " ".join(f"{v / 1e6:.3f}M" for v in c.flops.values())
        lines.append(f"  {c.stage_out_channels} | {bits} | {c.params[5]} {c.params[4]} | {fl}")
    chosen = res.config()
    lines.append("")
    lines.append("chosen configuration:")
    lines.append(to_kv_text(chosen).rstrip("\n"))
    lines.append("")
    lines.append(discrepancy_report(build_model(chosen), TARGET_PARAMS[5]))
    if not args.no_timing:
        lines.append(f"search time: {res.seconds:.2f} s")
    _emit(args, "\n".join(lines) + "\n")


def cmd_split(args, arch, train) -> None:
    index = _dataset(args.data, train.seed)
    _emit(args, write_manifest(index))


def cmd_train(args, arch, train) -> None:
    index = _dataset(args.data, train.seed)
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    result = fit(arch, index, train, timing=not args.no_timing)
    model = result.best_model()
    extra = {"best_epoch": str(result.best_epoch), "best_fold": str(result.best_fold), "seed": str(train.seed)}
    atomic_write_bytes(os.path.join(out, "metrics.jsonl"), result.log_text().encode("utf-8"))
    atomic_write_bytes(os.path.join(out, "checkpoint.tkck"), checkpoint_bytes(model, result.best_epoch, None, extra))
    print(f"best val macro-F1 {result.best_f1:.4f} (fold {result.best_fold}, epoch {result.best_epoch}); "
          f"artifacts in {out}", file=sys.stderr)


def _model_for(args, arch):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint, precision=args.precision)
    return build_model(arch)


def cmd_eval(args, arch, train) -> None:
    model = _model_for(args, arch)
    index = _dataset(args.data, train.seed)
    split = "test" if index.split("test") else "val"
    metrics = evaluate(model, batch_iterator(index, split, train.batch_size, None, None, model.cfg.input_size,
                                             0, model.precision.dtype), model.cfg.num_classes)
    _emit(args, dumps_report(report(analysis_summary(model), metrics, None, config=model.cfg)))


def cmd_bench(args, arch, train) -> None:
    model = _model_for(args, arch)
    lat = bench_model(model, iters=args.iters or 100)
    doc = report(analysis_summary(model), None, lat, config=model.cfg)
    doc["latency"]["warmup_iters"] = lat.warmup_iters
    doc["latency"]["timed_iters"] = lat.timed_iters
    _emit(args, dumps_report(doc))


def cmd_bench_act(args, arch, train) -> None:
    rows = bench_activations(iters=args.iters or 100)
    _emit(args, format_activation_table(rows) + "\n")


HANDLERS = {
    "analyze": cmd_analyze,
    "derive-channels": cmd_derive,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "bench-act": cmd_bench_act,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        arch, train = _configs(args)
        if args.iters is not None and args.iters < 1:
            raise UsageError("--iters must be positive")
    except UsageError as exc:
        print(f"takunet: error: {exc}", file=sys.stderr)
        return 2
    print(_header(args.command, arch, train), file=sys.stderr)
    try:
        HANDLERS[args.command](args, arch, train)
    except UsageError as exc:
        print(f"takunet: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a structured message
        print(f"takunet: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
