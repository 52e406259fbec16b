"""Layer graph with producer/consumer wiring, residual adds and mask placement."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import FilterMask, FilterSkeleton, SharedMaskGroup


@dataclass
class Layer:
    name: str
    inputs: list[str]

    kind = "layer"


@dataclass
class Input(Layer):
    channels: int = 3
    kind = "input"


@dataclass
class Conv(Layer):
    weight: Tensor = None
    stride: int = 1
    padding: int = 0
    skeleton: FilterSkeleton | None = None
    group: str | None = None
    kind = "conv"

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class BatchNorm(Layer):
    gamma: Tensor = None
    beta: Tensor = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.1
    eps: float = 1e-5
    kind = "bn"

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class ReLU(Layer):
    kind = "relu"


@dataclass
class MaxPool(Layer):
    size: int = 2
    stride: int = 2
    padding: int = 0
    kind = "maxpool"


@dataclass
class Add(Layer):
    kind = "add"


@dataclass
class GlobalAvgPool(Layer):
    kind = "gap"


@dataclass
class Linear(Layer):
    weight: Tensor = None
    bias: Tensor = None
    kind = "linear"


# channel-preserving single-input layers; channel removal propagates through them
PASS_THROUGH = ("bn", "relu", "maxpool", "gap")


@dataclass
class Network:
    """An ordered DAG of layers. The last layer's output is the network output.

    While ``masked`` is true, each conv weight is multiplied by its Filter
    Skeleton and each conv's output channels are gated by the Filter Mask of
    its group. The gate sits after the conv's batch norm when one follows, so
    a zeroed mask entry yields an exactly zero channel in every mode.
    """

    layers: dict[str, Layer]
    masks: dict[str, FilterMask] = field(default_factory=dict)
    groups: dict[str, SharedMaskGroup] = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    masked: bool = True
    dtype: type = np.float32

    def __post_init__(self):
        self._consumers: dict[str, list[str]] | None = None
        self.training = True

    # -- wiring ---------------------------------------------------------

    @property
    def input_layer(self) -> Input:
        return next(l for l in self.layers.values() if isinstance(l, Input))

    @property
    def output_name(self) -> str:
        return next(reversed(self.layers))

    def consumers(self) -> dict[str, list[str]]:
        if self._consumers is None:
            cons: dict[str, list[str]] = {n: [] for n in self.layers}
            for layer in self.layers.values():
                for src in layer.inputs:
                    cons[src].append(layer.name)
            self._consumers = cons
        return self._consumers

    def convs(self) -> list[Conv]:
        return [l for l in self.layers.values() if isinstance(l, Conv)]

    def conv(self, name: str) -> Conv:
        layer = self.layers[name]
        if not isinstance(layer, Conv):
            raise KeyError(f"{name} is not a conv layer")
        return layer

    def mask_site(self, conv: Conv) -> str:
        """Layer whose output the conv's Filter Mask multiplies."""
        cons = self.consumers()[conv.name]
        if len(cons) == 1 and isinstance(self.layers[cons[0]], BatchNorm):
            return cons[0]
        return conv.name

    def mask_sites(self) -> dict[str, str]:
        if not self.masked:
            return {}
        sites = {}
        for conv in self.convs():
            if conv.group is not None and conv.group in self.masks:
                sites[self.mask_site(conv)] = conv.group
        return sites

    def mask_of(self, conv: Conv) -> FilterMask | None:
        return self.masks.get(conv.group) if conv.group is not None else None

    # -- parameters -----------------------------------------------------

    def weight_params(self) -> list[tuple[str, Tensor]]:
        """Ordinary weights: conv, linear and batch-norm parameters."""
        out = []
        for layer in self.layers.values():
            if isinstance(layer, Conv):
                out.append((f"{layer.name}.weight", layer.weight))
            elif isinstance(layer, BatchNorm):
                out += [(f"{layer.name}.gamma", layer.gamma), (f"{layer.name}.beta", layer.beta)]
            elif isinstance(layer, Linear):
                out += [(f"{layer.name}.weight", layer.weight), (f"{layer.name}.bias", layer.bias)]
        return out

    def skeletons(self) -> list[tuple[str, FilterSkeleton]]:
        return [(c.name, c.skeleton) for c in self.convs() if c.skeleton is not None]

    def zero_grad(self) -> None:
        for _, p in self.weight_params():
            p.grad = None
        for _, fs in self.skeletons():
            fs.values.grad = None
        for fm in self.masks.values():
            fm.values.grad = None

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def clone(self) -> "Network":
        self.zero_grad()
        self._consumers = None
        return copy.deepcopy(self)

    # -- forward ----------------------------------------------------------

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        if x.dtype != self.dtype:
            raise TypeError(f"input precision {x.dtype} does not match network {np.dtype(self.dtype)}")
        sites = self.mask_sites()
        acts: dict[str, Tensor] = {}
        cons = self.consumers()
        remaining = {n: len(c) for n, c in cons.items()}
        for name, layer in self.layers.items():
            ins = [acts[s] for s in layer.inputs]
            out = self._apply(layer, ins, x)
            if name in sites:
                out = ad.channel_scale(out, self.masks[sites[name]].values)
            acts[name] = out
            for s in layer.inputs:
                remaining[s] -= 1
                if remaining[s] == 0:
                    del acts[s]
        return acts[self.output_name]

    __call__ = forward

    def _apply(self, layer: Layer, ins: list[Tensor], x: Tensor) -> Tensor:
        if isinstance(layer, Input):
            if x.shape[1] != layer.channels:
                raise ValueError(f"input has {x.shape[1]} channels, network expects {layer.channels}")
            return x
        if isinstance(layer, Conv):
            w = layer.weight
            if self.masked and layer.skeleton is not None:
                w = ad.masked_weight(w, layer.skeleton.values)
            return ad.conv2d(ins[0], w, layer.stride, layer.padding)
        if isinstance(layer, BatchNorm):
            return ad.batchnorm2d(
                ins[0], layer.gamma, layer.beta, layer.running_mean, layer.running_var,
                self.training, layer.momentum, layer.eps,
            )
        if isinstance(layer, ReLU):
            return ad.relu(ins[0])
        if isinstance(layer, MaxPool):
            return ad.maxpool2d(ins[0], layer.size, layer.stride, layer.padding)
        if isinstance(layer, Add):
            a, b = ins
            if a.shape != b.shape:
                raise ValueError(f"residual add {layer.name}: operand shapes {a.shape} vs {b.shape}")
            return ad.add(a, b)
        if isinstance(layer, GlobalAvgPool):
            return ad.global_avgpool(ins[0])
        if isinstance(layer, Linear):
            return ad.linear(ins[0], layer.weight, layer.bias)
        raise TypeError(f"unknown layer type {type(layer).__name__}")

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits as a plain array; training mode is restored afterwards."""
        was = self.training
        self.eval()
        try:
            outs = [
                self.forward(Tensor(images[i : i + batch_size], dtype=self.dtype)).data
                for i in range(0, len(images), batch_size)
            ]
        finally:
            self.train(was)
        return np.concatenate(outs, axis=0)

    # -- shape propagation (no arithmetic) --------------------------------

    def shapes(self, input_shape: tuple[int, int, int]) -> dict[str, tuple[int, ...]]:
        """Per-layer output shape (without batch dim) for a C x H x W input."""
        out: dict[str, tuple[int, ...]] = {}
        for name, layer in self.layers.items():
            ins = [out[s] for s in layer.inputs]
            if isinstance(layer, Input):
                if input_shape[0] != layer.channels:
                    raise ValueError(f"input has {input_shape[0]} channels, network expects {layer.channels}")
                out[name] = tuple(input_shape)
            elif isinstance(layer, Conv):
                c, h, w = ins[0]
                if c != layer.in_channels:
                    raise ValueError(f"{name}: expects {layer.in_channels} input channels, got {c}")
                k = layer.kernel_size
                out[name] = (
                    layer.out_channels,
                    ad.conv_output_size(h, k, layer.stride, layer.padding),
                    ad.conv_output_size(w, k, layer.stride, layer.padding),
                )
            elif isinstance(layer, MaxPool):
                c, h, w = ins[0]
                out[name] = (
                    c,
                    (h + 2 * layer.padding - layer.size) // layer.stride + 1,
                    (w + 2 * layer.padding - layer.size) // layer.stride + 1,
                )
            elif isinstance(layer, GlobalAvgPool):
                out[name] = (ins[0][0],)
            elif isinstance(layer, Linear):
                if ins[0] != (layer.weight.shape[1],):
                    raise ValueError(f"{name}: expects {layer.weight.shape[1]} features, got {ins[0]}")
                out[name] = (layer.weight.shape[0],)
            elif isinstance(layer, Add):
                if ins[0] != ins[1]:
                    raise ValueError(f"{name}: operand shapes {ins[0]} vs {ins[1]}")
                out[name] = ins[0]
            else:
                if isinstance(layer, BatchNorm) and ins[0][0] != layer.channels:
                    raise ValueError(f"{name}: expects {layer.channels} channels, got {ins[0][0]}")
                out[name] = ins[0]
        return out

    # -- state summaries ----------------------------------------------------

    def kernel_sizes(self) -> dict[str, int]:
        """Effective kernel size per conv (physical size once exported)."""
        return {
            c.name: (c.skeleton.effective_kernel_size if self.masked and c.skeleton is not None else c.kernel_size)
            for c in self.convs()
        }

    def channel_counts(self) -> dict[str, int]:
        """Unpruned output channels per mask group."""
        if self.masked:
            return {gid: int((~fm.pruned).sum()) for gid, fm in self.masks.items()}
        counts = {}
        for c in self.convs():
            if c.group is not None:
                counts[c.group] = c.out_channels
        return counts

    def check_residuals(self) -> None:
        """Every residual add must see equal live channel counts on both operands."""
        live = self.live_channels()
        for layer in self.layers.values():
            if isinstance(layer, Add):
                a, b = (live[s] for s in layer.inputs)
                if not np.array_equal(a, b):
                    raise AssertionError(f"{layer.name}: operands carry different channel sets")

    def live_channels(self) -> dict[str, np.ndarray]:
        """Indices of unpruned channels carried by each layer's output."""
        live: dict[str, np.ndarray] = {}
        for name, layer in self.layers.items():
            if isinstance(layer, Input):
                live[name] = np.arange(layer.channels)
            elif isinstance(layer, Conv):
                fm = self.mask_of(layer) if self.masked else None
                live[name] = fm.kept if fm is not None else np.arange(layer.out_channels)
            elif isinstance(layer, Linear):
                live[name] = np.arange(layer.weight.shape[0])
            elif isinstance(layer, Add):
                a, b = (live[s] for s in layer.inputs)
                live[name] = np.union1d(a, b)
            else:
                live[name] = live[layer.inputs[0]]
        return live
