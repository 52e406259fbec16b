import numpy as np
import pytest

from smof.accounting import (
    aligned_channels, cost_report, count_flops, count_params, reduction_report, simd_aligned_cost,
)
from smof.architectures import build_architecture
from smof.autodiff import Tensor
from smof.network import Conv, Input, Network
from smof.surgery import export

from toynets import RESNET18_PRUNED, resnet18_pruned_state


def test_convnet_counts_match_hand_computation():
    net = build_architecture("convnet-2", {"width": 4, "kernel_size": 3, "in_channels": 1, "num_classes": 3})
    # conv1 1->4 3x3 pad 1 on 8x8, bn, relu, conv2 4->4, bn, relu, gap, fc 4->3
    conv1 = 4 * 1 * 9 * 64
    conv2 = 4 * 4 * 9 * 64
    elem = 4 * 64
    bn, relu = 2 * elem, elem
    gap = elem
    fc = 4 * 3 + 3
    assert count_flops(net, (1, 8, 8)) == conv1 + conv2 + 2 * (bn + relu) + gap + fc
    params = 4 * 9 + 16 * 9 + 2 * (2 * 4) + 4 * 3 + 3
    assert count_params(net) == params


def test_maxpool_and_add_costs():
    net = build_architecture("resnet-tiny", {"stages": 1, "width": 2, "in_channels": 1, "num_classes": 2})
    rep = cost_report(net, (1, 4, 4))
    add = next(l for l in rep.layers if l.kind == "add")
    assert add.flops == 2 * 16
    net = build_architecture("convnet-3", {"width": 2, "pool_every": 1})
    pool = next(l for l in cost_report(net, (1, 8, 8)).layers if l.kind == "maxpool")
    assert pool.flops == 2 * 4 * 4 * 4


def test_aligned_channels():
    assert [aligned_channels(n, 32) for n in (1, 32, 33, 56, 64)] == [32, 32, 64, 64, 64]
    assert aligned_channels(7, 1) == 7
    with pytest.raises(ValueError):
        cost_report(build_architecture("convnet-2"), (1, 8, 8), simd_width=0)


def _single_conv(n_out, k, c_in=64):
    w = Tensor(np.zeros((n_out, c_in, k, k), np.float32))
    layers = {"in": Input("in", [], channels=c_in), "conv": Conv("conv", ["in"], weight=w, padding=k // 2)}
    return Network(layers, masked=False)


def test_simd_alignment_hides_channel_pruning_but_not_kernel_shrinking():
    base = simd_aligned_cost(_single_conv(64, 3), (64, 8, 8), 32)
    chan = simd_aligned_cost(_single_conv(56, 3), (64, 8, 8), 32)
    kern = simd_aligned_cost(_single_conv(64, 1), (64, 8, 8), 32)
    assert 100 * (1 - chan / base) == pytest.approx(0.0, abs=0.1)
    assert 100 * (1 - kern / base) == pytest.approx(100 * 8 / 9, abs=0.1)
    # unaligned counting does see the channel cut
    assert count_flops(_single_conv(56, 3), (64, 8, 8)) < count_flops(_single_conv(64, 3), (64, 8, 8))


def test_reduction_report_percentages():
    a = cost_report(_single_conv(64, 3), (64, 8, 8), 32)
    b = cost_report(_single_conv(64, 1), (64, 8, 8), 32)
    red = reduction_report(a, b)
    assert red["flops"] == pytest.approx(100 * 8 / 9)
    assert red["params"] == pytest.approx(100 * 8 / 9)
    assert red["simd_aligned_flops"] == pytest.approx(100 * 8 / 9)
    empty = Network({"in": Input("in", [], channels=1)}, masked=False)
    with pytest.raises(ValueError):
        reduction_report(cost_report(empty, (1, 2, 2)), a)


def test_resnet18_baseline_params_are_the_standard_count():
    net = build_architecture("resnet18-shape", {"num_classes": 1000})
    assert count_params(net) == 11_689_512


def test_resnet18_reference_structure_reproduction():
    masked = resnet18_pruned_state()
    shape = (3, 224, 224)
    exported, report = export(masked, shape, n_trials=1, verify=False)
    for name, (n, k) in RESNET18_PRUNED.items():
        conv = exported.conv(name)
        assert (conv.out_channels, conv.kernel_size) == (n, k), name
    base = cost_report(masked, shape)
    pruned = cost_report(exported, shape)
    assert abs(base.flops / 1842.78e6 - 1) < 0.02
    assert abs(pruned.flops / 1271.17e6 - 1) < 0.02
    assert reduction_report(base, pruned)["flops"] == pytest.approx(31.02, abs=1.0)


def test_table_lists_every_conv():
    net = build_architecture("convnet-2", {"width": 3})
    text = cost_report(net, (1, 8, 8), 4).table(cost_report(net, (1, 8, 8), 4))
    assert "conv1.conv" in text and "conv2.conv" in text and "reduction vs baseline" in text
