"""End-to-end training runs, evaluation, and the per-epoch metrics log."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .accounting import cost_report
from .architectures import build_architecture
from .checkpoint import save_checkpoint
from .config import RunConfig
from .controller import SGD, check_model_invariants, training_iteration
from .data import Dataset, batches
from .network import Network
from .surgery import drop_channels, fold_masks, plan, shrink_kernels

log = logging.getLogger(__name__)

LOG_FIELDS = [
    "epoch", "phase", "lr", "train_loss", "data_loss", "fs_penalty", "fm_penalty",
    "test_loss", "test_acc", "params", "flops", "flops_reduction", "peeled", "pruned",
    "kernel_sizes", "channels",
]


def evaluate(model: Network, ds: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode (accuracy, mean cross-entropy)."""
    logits = model.predict(ds.images.astype(model.dtype), batch_size)
    acc = float((logits.argmax(axis=1) == ds.labels).mean())
    p = ad.softmax(logits.astype(np.float64))
    loss = float(-np.log(np.maximum(p[np.arange(len(ds)), ds.labels], 1e-300)).mean())
    return acc, loss


def structural_cost(model: Network, input_shape) -> tuple[int, int]:
    """(params, FLOPs) the network would have if exported right now."""
    if not model.masked:
        rep = cost_report(model, input_shape)
        return rep.params, rep.flops
    report = plan(model)
    pruned = drop_channels(shrink_kernels(fold_masks(model), report), report)
    rep = cost_report(pruned, input_shape)
    return rep.params, rep.flops


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class RunResult:
    model: Network
    log_path: Path
    final_checkpoint: Path
    test_acc: float
    flops_reduction: float
    rows: list[dict]


def run_training(cfg: RunConfig, train: Dataset | None = None, test: Dataset | None = None) -> RunResult:
    """Run every schedule phase; writes ``metrics.csv`` and checkpoints to ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if train is None or test is None:
        train, test = cfg.dataset.load(cfg.seed)
    input_shape = train.image_shape
    params = dict(cfg.arch_params)
    params.setdefault("in_channels", input_shape[0])
    params.setdefault("num_classes", max(train.num_classes, test.num_classes))
    model = build_architecture(cfg.arch_name, params, seed=cfg.seed, r=cfg.schedule.r, dtype=cfg.dtype)
    model.arch["input_shape"] = list(input_shape)
    base = cost_report(model, input_shape)
    opt = SGD(model, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    log_path = out / "metrics.csv"
    rows: list[dict] = []
    iteration = 0
    epoch = 0
    final = out / "final.ckpt"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for k, phase in enumerate(cfg.schedule.phases, 1):
            for e in range(phase.epochs):
                lr = phase.lr_at(e)
                totals = np.zeros(4)
                peeled = pruned = 0
                nb = 0
                for batch in batches(train, cfg.batch_size, cfg.seed, epoch, cfg.dataset):
                    res = training_iteration(
                        model, batch, phase, opt, iteration, lr, cfg.schedule,
                        cfg.penalty_mode, cfg.scaled_gradient_step,
                    )
                    check_model_invariants(model)
                    totals += (res.loss, res.data_loss, res.fs_penalty, res.fm_penalty)
                    peeled += res.peeled
                    pruned += res.pruned
                    nb += 1
                    iteration += 1
                totals /= max(nb, 1)
                acc, test_loss = evaluate(model, test, cfg.eval_batch_size)
                n_params, n_flops = structural_cost(model, input_shape)
                row = {
                    "epoch": epoch + 1,
                    "phase": k,
                    "lr": _fmt(lr),
                    "train_loss": _fmt(totals[0]),
                    "data_loss": _fmt(totals[1]),
                    "fs_penalty": _fmt(totals[2]),
                    "fm_penalty": _fmt(totals[3]),
                    "test_loss": _fmt(test_loss),
                    "test_acc": _fmt(acc),
                    "params": n_params,
                    "flops": n_flops,
                    "flops_reduction": _fmt(100.0 * (1 - n_flops / base.flops)),
                    "peeled": peeled,
                    "pruned": pruned,
                    "kernel_sizes": ";".join(f"{n}:{v}" for n, v in model.kernel_sizes().items()),
                    "channels": ";".join(f"{g}:{v}" for g, v in model.channel_counts().items()),
                }
                writer.writerow(row)
                fh.flush()
                rows.append(row)
                log.info("epoch %d phase %d loss %.4f acc %.4f flops -%.2f%%", epoch + 1, k, totals[0], acc,
                         100.0 * (1 - n_flops / base.flops))
                epoch += 1
            save_checkpoint(model, out / f"phase{k}.ckpt", {"epoch": epoch, "phase": k})
    save_checkpoint(model, final, {"epoch": epoch, "phase": len(cfg.schedule.phases)})
    last = rows[-1] if rows else {"test_acc": "nan", "flops_reduction": "0.0"}
    return RunResult(model, log_path, final, float(last["test_acc"]), float(last["flops_reduction"]), rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def parse_kv_column(cell: str) -> dict[str, int]:
    out = {}
    for part in cell.split(";"):
        if part:
            k, v = part.rsplit(":", 1)
            out[k] = int(v)
    return out
