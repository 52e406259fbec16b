"""Turn a masked, trained network into a physically smaller dense one.

The pipeline is fold -> shrink -> drop -> verify. Every step works on a
copy; the masked network passed in is never modified.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .network import BatchNorm, Conv, Input, Linear, Network


class ExportError(RuntimeError):
    pass


@dataclass
class LayerSurgery:
    name: str
    old_kernel: int
    new_kernel: int
    old_padding: int
    new_padding: int
    old_channels: int
    new_channels: int
    kept: list[int]
    group: str | None = None


@dataclass
class SurgeryReport:
    layers: list[LayerSurgery] = field(default_factory=list)
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    input_shape: tuple[int, ...] | None = None

    def layer(self, name: str) -> LayerSurgery:
        return next(l for l in self.layers if l.name == name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape) if self.input_shape else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SurgeryReport":
        d = dict(d)
        layers = [LayerSurgery(**l) for l in d.pop("layers")]
        shape = d.pop("input_shape", None)
        return cls(layers=layers, input_shape=tuple(shape) if shape else None, **d)


def plan(model: Network) -> SurgeryReport:
    """Read kernel sizes and kept channels off the masked network."""
    if not model.masked:
        raise ExportError("model is already pruned; export it only once")
    report = SurgeryReport()
    for conv in model.convs():
        K = conv.kernel_size
        k_eff = conv.skeleton.effective_kernel_size if conv.skeleton is not None else K
        fm = model.mask_of(conv)
        kept = fm.kept if fm is not None else np.arange(conv.out_channels)
        crop = (K - k_eff) // 2
        report.layers.append(
            LayerSurgery(
                name=conv.name,
                old_kernel=K,
                new_kernel=k_eff,
                old_padding=conv.padding,
                new_padding=max(conv.padding - crop, 0),
                old_channels=conv.out_channels,
                new_channels=int(len(kept)),
                kept=[int(i) for i in kept],
                group=conv.group,
            )
        )
    return report


def fold_masks(model: Network) -> Network:
    """Multiply skeletons into conv weights and masks into the gated channel.

    A mask gating a batch-norm output folds into that batch norm's scale and
    shift; otherwise it folds into the conv's output filters.
    """
    if not model.masked:
        raise ExportError("model is already pruned; export it only once")
    out = model.clone()
    for conv in out.convs():
        w = conv.weight.data
        if conv.skeleton is not None:
            w *= conv.skeleton.values.data[None, None, :, :]
        fm = out.mask_of(conv)
        if fm is not None:
            site = out.layers[out.mask_site(conv)]
            if isinstance(site, BatchNorm):
                site.gamma.data *= fm.values.data
                site.beta.data *= fm.values.data
            else:
                w *= fm.values.data[:, None, None, None]
        conv.skeleton = None
    out.masks = {}
    out.masked = False
    return out


def shrink_kernels(model: Network, report: SurgeryReport) -> Network:
    """Crop every weight to its central effective window and reduce padding to match."""
    out = model.clone()
    for entry in report.layers:
        conv = out.conv(entry.name)
        crop = (entry.old_kernel - entry.new_kernel) // 2
        if crop:
            w = conv.weight.data[:, :, crop : entry.old_kernel - crop, crop : entry.old_kernel - crop]
            conv.weight = Tensor(w.copy(), requires_grad=True, dtype=out.dtype)
        conv.padding = entry.new_padding
    return out


def drop_channels(model: Network, report: SurgeryReport) -> Network:
    """Remove pruned output channels and the matching inputs of every consumer."""
    out = model.clone()
    kept_by_conv = {e.name: np.asarray(e.kept, dtype=np.int64) for e in report.layers}
    by_group: dict[str, np.ndarray] = {}
    for e in report.layers:
        if e.group is None:
            continue
        prev = by_group.setdefault(e.group, kept_by_conv[e.name])
        if not np.array_equal(prev, kept_by_conv[e.name]):
            raise ExportError(f"group {e.group}: members disagree on kept channels")

    live: dict[str, np.ndarray | None] = {}
    for name, layer in out.layers.items():
        src = live[layer.inputs[0]] if layer.inputs else None
        if isinstance(layer, Input):
            live[name] = None
        elif isinstance(layer, Conv):
            w = layer.weight.data
            keep_out = kept_by_conv.get(name)
            if src is not None:
                w = w[:, src]
            if keep_out is not None and len(keep_out) < w.shape[0]:
                w = w[keep_out]
            else:
                keep_out = None
            layer.weight = Tensor(np.ascontiguousarray(w), requires_grad=True, dtype=out.dtype)
            live[name] = keep_out
        elif isinstance(layer, BatchNorm):
            if src is not None:
                layer.gamma = Tensor(layer.gamma.data[src], requires_grad=True, dtype=out.dtype)
                layer.beta = Tensor(layer.beta.data[src], requires_grad=True, dtype=out.dtype)
                layer.running_mean = layer.running_mean[src].copy()
                layer.running_var = layer.running_var[src].copy()
            live[name] = src
        elif isinstance(layer, Linear):
            if src is not None:
                layer.weight = Tensor(np.ascontiguousarray(layer.weight.data[:, src]), requires_grad=True, dtype=out.dtype)
            live[name] = None
        elif layer.kind == "add":
            a, b = (live[s] for s in layer.inputs)
            if not _same(a, b):
                raise ExportError(f"{name}: residual operands keep different channels")
            live[name] = a
        else:
            live[name] = src
    out._consumers = None
    return out


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def verify_equivalence(
    masked: Network,
    exported: Network,
    n_trials: int = 10,
    tol: float = 1e-5,
    input_shape: tuple[int, int, int] | None = None,
    batch_size: int = 2,
    seed: int = 0,
) -> tuple[bool, float]:
    """Compare eval-mode outputs on random inputs; returns (passed, max abs deviation)."""
    input_shape = tuple(input_shape or masked.arch.get("input_shape") or (masked.input_layer.channels, 16, 16))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        x = rng.standard_normal((batch_size, *input_shape)).astype(masked.dtype)
        a = masked.predict(x)
        b = exported.predict(x.astype(exported.dtype))
        if a.shape != b.shape:
            raise ExportError(f"output shape mismatch: {a.shape} vs {b.shape}")
        worst = max(worst, float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))))
    return worst <= tol, worst


def check_spatial(masked: Network, exported: Network, input_shape) -> None:
    """Reject exports whose padding floor changed any conv's output size."""
    before = masked.shapes(input_shape)
    after = exported.shapes(input_shape)
    for conv in masked.convs():
        if before[conv.name][1:] != after[conv.name][1:]:
            raise ExportError(
                f"{conv.name}: output size changed {before[conv.name][1:]} -> {after[conv.name][1:]}; "
                "original padding too small for the kernel crop"
            )


def export(
    model: Network,
    input_shape: tuple[int, int, int] | None = None,
    n_trials: int = 10,
    tol: float | None = None,
    verify: bool = True,
    seed: int = 0,
) -> tuple[Network, SurgeryReport]:
    """Full surgery: fold, shrink, drop, check, and report costs."""
    from .accounting import count_flops, count_params

    input_shape = tuple(input_shape or model.arch.get("input_shape") or (model.input_layer.channels, 16, 16))
    report = plan(model)
    exported = drop_channels(shrink_kernels(fold_masks(model), report), report)
    exported.arch = dict(model.arch, pruned=True)
    check_spatial(model, exported, input_shape)
    exported.check_residuals()
    if verify:
        if tol is None:
            tol = 1e-5 if np.dtype(model.dtype) == np.float32 else 1e-10
        ok, dev = verify_equivalence(model, exported, n_trials, tol, input_shape, seed=seed)
        if not ok:
            raise ExportError(f"exported network deviates from the masked one by {dev:.3g} > {tol:g}")
    report.input_shape = input_shape
    report.params_before = count_params(model)
    report.params_after = count_params(exported)
    report.flops_before = count_flops(model, input_shape)
    report.flops_after = count_flops(exported, input_shape)
    return exported, report
