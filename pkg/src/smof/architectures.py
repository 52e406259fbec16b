"""Network builders: plain conv stacks, a VGG-style net and ResNet BasicBlock nets."""
from __future__ import annotations

import re

import numpy as np

from .autodiff import Tensor
from .controller import build_shared_groups
from .network import Add, BatchNorm, Conv, GlobalAvgPool, Input, Layer, Linear, MaxPool, Network, ReLU
from .params import FilterMask, FilterSkeleton

ARCHITECTURES = ("convnet-N", "vgg-small", "resnet-tiny", "resnet18-shape")


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.layers: dict[str, Layer] = {}

    def add(self, layer: Layer) -> str:
        if layer.name in self.layers:
            raise ValueError(f"duplicate layer name {layer.name}")
        self.layers[layer.name] = layer
        return layer.name

    def input(self, channels: int) -> str:
        return self.add(Input("input", [], channels=channels))

    def conv(self, name, src, c_in, c_out, k, stride=1, padding=None) -> str:
        if k % 2 == 0:
            raise ValueError(f"{name}: even kernel size {k} is not supported")
        padding = k // 2 if padding is None else padding
        # He init, fan-out mode
        std = np.sqrt(2.0 / (c_out * k * k))
        w = Tensor(self.rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True, dtype=self.dtype)
        return self.add(Conv(name, [src], weight=w, stride=stride, padding=padding))

    def bn(self, name, src, c) -> str:
        return self.add(
            BatchNorm(
                name, [src],
                gamma=Tensor(np.ones(c), requires_grad=True, dtype=self.dtype),
                beta=Tensor(np.zeros(c), requires_grad=True, dtype=self.dtype),
                running_mean=np.zeros(c, dtype=self.dtype),
                running_var=np.ones(c, dtype=self.dtype),
            )
        )

    def conv_bn_relu(self, prefix, src, c_in, c_out, k, stride=1, relu=True) -> str:
        x = self.conv(f"{prefix}conv", src, c_in, c_out, k, stride)
        x = self.bn(f"{prefix}bn", x, c_out)
        return self.add(ReLU(f"{prefix}relu", [x])) if relu else x

    def head(self, src, c_in, num_classes) -> str:
        x = self.add(GlobalAvgPool("avgpool", [src]))
        bound = 1.0 / np.sqrt(c_in)
        w = Tensor(self.rng.uniform(-bound, bound, size=(num_classes, c_in)), requires_grad=True, dtype=self.dtype)
        b = Tensor(self.rng.uniform(-bound, bound, size=num_classes), requires_grad=True, dtype=self.dtype)
        return self.add(Linear("fc", [x], weight=w, bias=b))

    def basic_block(self, prefix, src, c_in, c_out, stride, k=3) -> str:
        x = self.conv(f"{prefix}.conv1", src, c_in, c_out, k, stride)
        x = self.bn(f"{prefix}.bn1", x, c_out)
        x = self.add(ReLU(f"{prefix}.relu1", [x]))
        x = self.conv(f"{prefix}.conv2", x, c_out, c_out, k, 1)
        x = self.bn(f"{prefix}.bn2", x, c_out)
        shortcut = src
        if stride != 1 or c_in != c_out:
            s = self.conv(f"{prefix}.downsample.conv", src, c_in, c_out, 1, stride, padding=0)
            shortcut = self.bn(f"{prefix}.downsample.bn", s, c_out)
        y = self.add(Add(f"{prefix}.add", [x, shortcut]))
        return self.add(ReLU(f"{prefix}.relu2", [y]))


def _convnet(b: _Builder, depth=4, width=16, kernel_size=3, in_channels=1, num_classes=4, pool_every=2, **_):
    x = b.input(in_channels)
    c = in_channels
    for i in range(depth):
        w = width * (2 ** (i // pool_every))
        x = b.conv_bn_relu(f"conv{i + 1}.", x, c, w, kernel_size)
        c = w
        if (i + 1) % pool_every == 0 and i + 1 < depth:
            x = b.add(MaxPool(f"pool{i + 1}", [x], size=2, stride=2))
    b.head(x, c, num_classes)


def _vgg_small(b: _Builder, depth=6, width=16, kernel_size=3, in_channels=3, num_classes=10, **_):
    return _convnet(b, depth=depth, width=width, kernel_size=kernel_size, in_channels=in_channels,
                    num_classes=num_classes, pool_every=2)


def _resnet_tiny(b: _Builder, stages=3, blocks=1, width=8, kernel_size=3, in_channels=3, num_classes=10, **_):
    x = b.input(in_channels)
    x = b.conv("conv1", x, in_channels, width, kernel_size)
    x = b.bn("bn1", x, width)
    x = b.add(ReLU("relu", [x]))
    c = width
    for s in range(1, stages + 1):
        w = width * 2 ** (s - 1)
        for k in range(blocks):
            stride = 2 if (s > 1 and k == 0) else 1
            x = b.basic_block(f"layer{s}.{k}", x, c, w, stride, kernel_size)
            c = w
    b.head(x, c, num_classes)


def _resnet18_shape(b: _Builder, in_channels=3, num_classes=1000, width=64, **_):
    x = b.input(in_channels)
    x = b.conv("conv1", x, in_channels, width, 7, stride=2, padding=3)
    x = b.bn("bn1", x, width)
    x = b.add(ReLU("relu", [x]))
    x = b.add(MaxPool("maxpool", [x], size=3, stride=2, padding=1))
    c = width
    for s in range(1, 5):
        w = width * 2 ** (s - 1)
        for k in range(2):
            stride = 2 if (s > 1 and k == 0) else 1
            x = b.basic_block(f"layer{s}.{k}", x, c, w, stride)
            c = w
    b.head(x, c, num_classes)


_BUILDERS = {
    "convnet": _convnet,
    "vgg-small": _vgg_small,
    "resnet-tiny": _resnet_tiny,
    "resnet18-shape": _resnet18_shape,
}


def build_architecture(
    name: str,
    params: dict | None = None,
    seed: int = 0,
    r: float = 1.0,
    dtype=np.float32,
) -> Network:
    """Build a masked network: a skeleton on every conv, one mask per shared group.

    ``convnet-N`` takes its depth from the name. ``r`` is the fraction of
    each mask's entries that may learn; the rest stay at 1.
    """
    params = dict(params or {})
    m = re.fullmatch(r"convnet-(\d+)", name)
    if m:
        params["depth"] = int(m.group(1))
        key = "convnet"
    elif name in _BUILDERS and name != "convnet":
        key = name
    else:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    dtype = np.dtype(dtype).type
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    b = _Builder(rng, dtype)
    _BUILDERS[key](b, **params)
    net = Network(b.layers, arch={"name": name, "params": params}, dtype=dtype)
    attach_masks(net, r=r, seed=seed)
    return net


def attach_masks(net: Network, r: float = 1.0, seed: int = 0) -> None:
    """Give every conv a fresh all-ones skeleton and every group an all-ones mask."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    net.groups = {}
    net.masks = {}
    for g in build_shared_groups(net.layers):
        width = net.conv(g.member_layer_ids[0]).out_channels
        net.groups[g.mask_id] = g
        net.masks[g.mask_id] = FilterMask.with_fraction(width, r, rng, dtype=net.dtype)
        for name in g.member_layer_ids:
            net.conv(name).group = g.mask_id
    for conv in net.convs():
        conv.skeleton = FilterSkeleton(conv.kernel_size, dtype=net.dtype)
    net.masked = True
    net.arch["r"] = r
