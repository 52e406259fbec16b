"""Command-line entry point: ``smof train | export | report | eval``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .accounting import CONVENTION, cost_report, reduction_report
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config, parse_dataset_arg
from .data import DatasetError
from .surgery import ExportError, export
from .train import evaluate, run_training

log = logging.getLogger("smof")


def _input_shape(net, override=None):
    if override:
        return tuple(int(x) for x in override.split("x"))
    shape = net.arch.get("input_shape")
    if not shape:
        raise ValueError("checkpoint has no recorded input shape; pass --input-shape CxHxW")
    return tuple(shape)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    result = run_training(cfg)
    print(f"final test accuracy {result.test_acc:.4f}, FLOPs reduction {result.flops_reduction:.2f}%")
    print(f"checkpoint {result.final_checkpoint}")
    print(f"metrics {result.log_path}")
    return 0


def cmd_export(args) -> int:
    net, manifest = load_checkpoint(args.checkpoint)
    if manifest["pruned"]:
        raise ExportError(f"{args.checkpoint} is already pruned")
    shape = _input_shape(net, args.input_shape)
    pruned, report = export(net, shape, n_trials=args.trials, tol=args.tol)
    save_checkpoint(pruned, args.out, {"surgery": report.to_dict(), "source": str(args.checkpoint)})
    red_p = 100.0 * (1 - report.params_after / report.params_before)
    red_f = 100.0 * (1 - report.flops_after / report.flops_before)
    for e in report.layers:
        print(f"{e.name:<28} k {e.old_kernel}->{e.new_kernel}  pad {e.old_padding}->{e.new_padding}  "
              f"out {e.old_channels}->{e.new_channels}")
    print(f"params {report.params_before:,} -> {report.params_after:,} ({red_p:.2f}% reduction)")
    print(f"FLOPs {report.flops_before:,} -> {report.flops_after:,} ({red_f:.2f}% reduction)")
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    shape = _input_shape(net, args.input_shape)
    rep = cost_report(net, shape, args.simd_width)
    base = None
    if args.baseline:
        bnet, _ = load_checkpoint(args.baseline)
        if bnet.arch.get("name") != net.arch.get("name"):
            raise ValueError(
                f"architecture mismatch: baseline {bnet.arch.get('name')} vs {net.arch.get('name')}"
            )
        base = cost_report(bnet, shape, args.simd_width)
    print(rep.table(base))
    out = Path(args.json) if args.json else Path(args.checkpoint).with_suffix(".report.json")
    doc = rep.to_dict()
    if base is not None:
        doc["baseline"] = {"params": base.params, "flops": base.flops, "simd_aligned_flops": base.simd_aligned_flops}
        doc["reduction"] = reduction_report(base, rep)
    out.write_text(json.dumps(doc, indent=2))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    spec = parse_dataset_arg(args.dataset)
    _, test = spec.load(args.seed)
    if test.image_shape[0] != net.input_layer.channels:
        raise DatasetError(f"dataset has {test.image_shape[0]} channels, network expects {net.input_layer.channels}")
    acc, loss = evaluate(net, test)
    print(f"accuracy {acc:.4f} loss {loss:.4f} ({len(test)} samples)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smof", description="Kernel-size and channel pruning for small CNNs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run every phase of a config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", help="override run.output_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("export", help="fold masks and physically prune a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--input-shape", help="CxHxW, defaults to the shape recorded at training time")
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--tol", type=float, default=None)
    e.set_defaults(func=cmd_export)

    r = sub.add_parser("report", help="params / FLOPs table", epilog=CONVENTION)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--baseline")
    r.add_argument("--simd-width", type=int, default=1)
    r.add_argument("--input-shape")
    r.add_argument("--json", help="where to write the structured report")
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("eval", help="accuracy and loss on a dataset's test split")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--dataset", required=True, help="config file or inline key=value pairs")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, ExportError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
