"""Parameter / FLOPs counting and a SIMD channel-alignment cost model.

FLOPs convention (one number per layer, summed):

* conv:    N * C * K * K * H_out * W_out multiply-accumulates (no bias)
* linear:  in * out multiply-accumulates + out bias adds
* bn:      2 per output element (scale and shift)
* relu:    1 per output element
* add:     1 per output element
* maxpool: window area per output element
* avgpool: 1 per input element

With this rule a 224x224 ResNet18 comes to 1823.93M, about 1% under the
1842.78M commonly quoted for it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .network import Add, BatchNorm, Conv, GlobalAvgPool, Input, Linear, MaxPool, Network, ReLU

CONVENTION = (
    "FLOPs = conv/linear multiply-accumulates + linear bias adds + 2/elem batchnorm "
    "+ 1/elem relu and residual add + window/elem maxpool + 1/elem global avgpool"
)


@dataclass
class LayerCost:
    name: str
    kind: str
    N: int = 0
    C: int = 0
    K: int = 0
    padding: int = 0
    stride: int = 0
    params: int = 0
    flops: int = 0
    simd_aligned_flops: int = 0


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)
    input_shape: tuple[int, ...] = ()
    simd_width: int = 1

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def simd_aligned_flops(self) -> int:
        return sum(l.simd_aligned_flops for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "convention": CONVENTION,
            "input_shape": list(self.input_shape),
            "simd_width": self.simd_width,
            "params": self.params,
            "flops": self.flops,
            "simd_aligned_flops": self.simd_aligned_flops,
            "layers": [asdict(l) for l in self.layers],
        }

    def table(self, baseline: "CostReport | None" = None) -> str:
        lines = [f"# {CONVENTION}", f"# input {'x'.join(map(str, self.input_shape))}, simd width {self.simd_width}"]
        hdr = f"{'layer':<28}{'N':>6}{'C':>6}{'K':>4}{'pad':>5}{'stride':>7}{'params':>12}{'flops':>15}"
        aligned = self.simd_width > 1
        if aligned:
            hdr += f"{'aligned N':>11}{'aligned flops':>16}"
        lines.append(hdr)
        for l in self.layers:
            if l.kind not in ("conv", "linear"):
                continue
            row = f"{l.name:<28}{l.N:>6}{l.C:>6}{l.K:>4}{l.padding:>5}{l.stride:>7}{l.params:>12,}{l.flops:>15,}"
            if aligned:
                an = aligned_channels(l.N, self.simd_width) if l.kind == "conv" else l.N
                row += f"{an:>11}{l.simd_aligned_flops:>16,}"
            lines.append(row)
        lines.append(f"total params {self.params:,}  FLOPs {self.flops:,} ({self.flops / 1e6:.2f}M)")
        if aligned:
            lines.append(f"SIMD-aligned FLOPs {self.simd_aligned_flops:,}")
        if baseline is not None:
            red = reduction_report(baseline, self)
            parts = [f"{k} {v:.2f}%" for k, v in red.items()]
            lines.append("reduction vs baseline: " + ", ".join(parts))
        return "\n".join(lines)


def aligned_channels(n: int, simd_width: int) -> int:
    return math.ceil(n / simd_width) * simd_width


def cost_report(model: Network, input_shape, simd_width: int = 1) -> CostReport:
    if simd_width < 1:
        raise ValueError("simd width must be a positive integer")
    input_shape = tuple(input_shape)
    shapes = model.shapes(input_shape)
    report = CostReport(input_shape=input_shape, simd_width=simd_width)
    for name, layer in model.layers.items():
        out = shapes[name]
        src = shapes[layer.inputs[0]] if layer.inputs else None
        if isinstance(layer, Input):
            continue
        if isinstance(layer, Conv):
            N, C, K = layer.out_channels, layer.in_channels, layer.kernel_size
            spatial = out[1] * out[2]
            flops = N * C * K * K * spatial
            aligned = aligned_channels(N, simd_width) * C * K * K * spatial
            report.layers.append(
                LayerCost(name, "conv", N, C, K, layer.padding, layer.stride, N * C * K * K, flops, aligned)
            )
            continue
        if isinstance(layer, Linear):
            o, i = layer.weight.shape
            flops = i * o + o
            report.layers.append(LayerCost(name, "linear", o, i, 0, 0, 0, i * o + o, flops, flops))
            continue
        elems = math.prod(out)
        if isinstance(layer, BatchNorm):
            entry = LayerCost(name, "bn", N=layer.channels, params=2 * layer.channels, flops=2 * elems)
        elif isinstance(layer, (ReLU, Add)):
            entry = LayerCost(name, layer.kind, N=out[0], flops=elems)
        elif isinstance(layer, MaxPool):
            entry = LayerCost(name, "maxpool", N=out[0], K=layer.size, stride=layer.stride,
                              padding=layer.padding, flops=elems * layer.size * layer.size)
        elif isinstance(layer, GlobalAvgPool):
            entry = LayerCost(name, "gap", N=out[0], flops=math.prod(src))
        else:
            raise TypeError(f"no cost rule for {type(layer).__name__}")
        entry.simd_aligned_flops = entry.flops
        report.layers.append(entry)
    return report


def count_params(model: Network) -> int:
    """Conv N*C*K*K + linear in*out+out + 2 per batch-norm channel (running stats excluded)."""
    total = 0
    for layer in model.layers.values():
        if isinstance(layer, Conv):
            total += layer.weight.data.size
        elif isinstance(layer, Linear):
            total += layer.weight.data.size + layer.bias.data.size
        elif isinstance(layer, BatchNorm):
            total += 2 * layer.channels
    return total


def count_flops(model: Network, input_shape) -> int:
    return cost_report(model, input_shape).flops


def simd_aligned_cost(model: Network, input_shape, simd_width: int) -> int:
    """FLOPs with each conv's output channels rounded up to a multiple of ``simd_width``."""
    return cost_report(model, input_shape, simd_width).simd_aligned_flops


def reduction_report(baseline: CostReport, pruned: CostReport) -> dict[str, float]:
    """Percent reduction ``100 * (1 - pruned / baseline)`` per metric."""
    if baseline.params == 0 or baseline.flops == 0:
        raise ValueError("baseline has zero totals")
    out = {
        "params": 100.0 * (1 - pruned.params / baseline.params),
        "flops": 100.0 * (1 - pruned.flops / baseline.flops),
    }
    if baseline.simd_width > 1 and pruned.simd_width == baseline.simd_width:
        out["simd_aligned_flops"] = 100.0 * (1 - pruned.simd_aligned_flops / baseline.simd_aligned_flops)
    return out
