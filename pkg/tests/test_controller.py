import numpy as np
import pytest

from smof import autodiff as ad
from smof.architectures import build_architecture
from smof.controller import (
    SGD, Phase, SmofSchedule, build_shared_groups, compute_loss, fm_threshold_check, fs_peel_check,
    run_pruning_checks, training_iteration,
)
from smof.network import Add, Conv, Input, Network
from smof.params import FilterMask, FilterSkeleton, slice_mask
from smof.regularizers import PenaltyConfig, fs_penalty, fs_penalty_tensor, fm_penalty

from toynets import InvariantTracker, scripted_run, toy_residual


# ---------------------------------------------------------------- schedule


def test_phase_learning_rate_milestones():
    p = Phase(epochs=10, lr=0.1, lr_milestones=(3, 6))
    assert [p.lr_at(e) for e in (0, 2, 3, 5, 6, 9)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])
    assert Phase(epochs=1).frozen_structure and not Phase(epochs=1).prunes
    assert Phase(epochs=1, rho=0.1).prunes


def test_schedule_phase_lookup_and_validation():
    s = SmofSchedule([Phase(epochs=2), Phase(epochs=3)])
    assert s.total_epochs == 5
    assert s.phase_at(1)[0] == 0 and s.phase_at(2)[::2] == (1, 0) and s.phase_at(4)[2] == 2
    with pytest.raises(IndexError):
        s.phase_at(5)
    with pytest.raises(ValueError):
        SmofSchedule([], r=1.5)
    with pytest.raises(ValueError):
        Phase(epochs=1, rho=-0.1)


# ---------------------------------------------------------------- checks


def test_peel_threshold_is_strict_and_scaled_by_slice_size():
    fs = FilterSkeleton(5, dtype=np.float64)
    m = slice_mask(5, 1)
    fs.values.data[m] = 0.5  # mass 8.0 over 16 cells
    assert not fs_peel_check(fs, 0.5)  # 8.0 < 0.5*16 is false
    assert fs_peel_check(fs, 0.5 + 1e-9)
    assert fs.i_min == 2 and fs.effective_kernel_size == 3
    # at most one slice per call, even if the next one is tiny too
    fs.values.data[slice_mask(5, 2)] = 0.0
    assert fs_peel_check(fs, 0.1) and fs.i_min == 3
    assert not fs_peel_check(fs, 10.0)  # only the center is left


def test_mask_threshold_prunes_only_learnable_small_entries():
    fm = FilterMask(6, np.array([1, 1, 1, 1, 0, 0], bool), dtype=np.float64)
    fm.values.data[:] = [0.05, 0.5, -0.01, 0.2, 1.0, 1.0]
    assert fm_threshold_check(fm, 0.1) == 2
    np.testing.assert_array_equal(fm.pruned, [1, 0, 1, 0, 0, 0])
    assert fm.values.data[0] == 0 and fm.values.data[2] == 0


def test_mask_threshold_never_prunes_everything():
    fm = FilterMask(3, dtype=np.float64)
    fm.values.data[:] = [0.01, -0.03, 0.02]
    assert fm_threshold_check(fm, 1.0) == 2
    np.testing.assert_array_equal(fm.kept, [1])
    fm.check_invariants()
    assert fm_threshold_check(fm, 1.0) == 0


def test_pruning_resets_mask_momentum():
    model = toy_residual(dtype=np.float64)
    opt = SGD(model, momentum=0.9)
    gid = next(iter(model.masks))
    model.masks[gid].values.data[0] = 1e-4
    opt.velocity[f"mask:{gid}"] = np.ones(model.masks[gid].length)
    run_pruning_checks(model, Phase(epochs=1, delta=1e-3), opt)
    assert opt.velocity[f"mask:{gid}"][0] == 0
    assert opt.velocity[f"mask:{gid}"][1] == 1


# ---------------------------------------------------------------- optimizer


def test_sgd_skips_skeletons_and_fixed_mask_entries():
    model = toy_residual(r=0.5, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
    y = np.array([0, 1, 2, 3])
    before_fs = {n: fs.values.data.copy() for n, fs in model.skeletons()}
    before_fm = {g: fm.values.data.copy() for g, fm in model.masks.items()}
    model.zero_grad()
    total, _, _ = compute_loss(model, x, y, PenaltyConfig(beta=0.1))
    ad.backward(total)
    SGD(model, momentum=0.0).step(0.1)
    for n, fs in model.skeletons():
        np.testing.assert_array_equal(fs.values.data, before_fs[n])
    for g, fm in model.masks.items():
        fixed = ~fm.learnable
        np.testing.assert_array_equal(fm.values.data[fixed], before_fm[g][fixed])
        assert np.any(fm.values.data[fm.learnable] != before_fm[g][fm.learnable])


def test_sgd_momentum_matches_hand_update():
    model = build_architecture("convnet-2", {"width": 2}, dtype=np.float64)
    p = model.weight_params()[0][1]
    w0 = p.data.copy()
    for _, t in model.weight_params():
        t.grad = np.ones_like(t.data)
    for fm in model.masks.values():
        fm.values.grad = np.zeros_like(fm.values.data)
    opt = SGD(model, momentum=0.5, weight_decay=0.1)
    opt.step(0.1)
    g1 = 1 + 0.1 * w0
    w1 = w0 - 0.1 * g1
    np.testing.assert_allclose(p.data, w1)
    opt.step(0.1)
    g2 = 1 + 0.1 * w1
    np.testing.assert_allclose(p.data, w1 - 0.1 * (0.5 * g1 + g2))


# ---------------------------------------------------------------- loss


@pytest.mark.parametrize("seed", range(10))
def test_full_objective_gradient_matches_finite_differences(seed):
    """Data loss plus both penalties, differentiated w.r.t. every unfrozen parameter."""
    rng = np.random.default_rng(seed)
    model = toy_residual(seed=seed, kernel_size=5, width=3, r=0.67, dtype=np.float64)
    for _, fs in model.skeletons():
        fs.values.data[:] = rng.uniform(0.3, 1.5, fs.values.shape)
        if rng.random() < 0.5:
            fs.freeze_slice()
    for fm in model.masks.values():
        fm.values.data[fm.learnable] = rng.uniform(0.3, 1.5, fm.learnable.sum())
        learn = np.flatnonzero(fm.learnable)
        if len(learn) > 1:
            fm.prune(learn[:1])
    x = rng.standard_normal((4, 3, 6, 6))
    y = rng.integers(0, 4, 4)
    cfg = PenaltyConfig(alpha=0.3, beta=0.2)

    def objective():
        total, _, _ = compute_loss(model, x, y, cfg)
        return ad.add(total, fs_penalty_tensor(model, cfg))

    model.zero_grad()
    ad.backward(objective())
    params = [t for _, t in model.weight_params()]
    params += [fs.values for _, fs in model.skeletons()]
    params += [fm.values for fm in model.masks.values()]
    for t in params:
        analytic = t.grad.copy()
        num = ad.numerical_grad(lambda: float(objective().data), t.data, eps=1e-6)
        free = np.ones(t.shape, bool)
        for _, fs in model.skeletons():
            if t is fs.values:
                free = ~fs.frozen
        for fm in model.masks.values():
            if t is fm.values:
                free = ~fm.pruned
        a, n = analytic[free], num[free]
        err = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
        assert err < 1e-4, err


def test_penalty_values_match_direct_sums():
    model = toy_residual(kernel_size=3, width=2, dtype=np.float64)
    fs = model.skeletons()[0][1]
    fs.values.data[:] = np.arange(9).reshape(3, 3) / 10
    cfg = PenaltyConfig(alpha=0.5, beta=0.25)
    v = fs.values.data
    edges = [v[0, 0:2], v[0:2, 2], v[2, 2:0:-1], v[2:0:-1, 0]]
    expect_first = 0.5 * sum(np.linalg.norm(e) for e in edges)
    others = (len(model.skeletons()) - 1) * 0.5 * 4 * np.sqrt(2)
    assert fs_penalty(model, cfg) == pytest.approx(expect_first + others)
    assert float(fs_penalty_tensor(model, cfg).data) == pytest.approx(fs_penalty(model, cfg))
    n_mask = sum(fm.length for fm in model.masks.values())
    assert fm_penalty(model, cfg) == pytest.approx(0.25 * n_mask)
    l1 = PenaltyConfig(alpha=0.5, penalty_mode="l1-uniform")
    assert fs_penalty(model, l1) == pytest.approx(0.5 * (v.sum() + 9 * (len(model.skeletons()) - 1)))


# ---------------------------------------------------------------- training step


def test_structure_frozen_phase_never_prunes():
    model = toy_residual()
    tracker = scripted_run(model, Phase(epochs=1), 20)
    assert tracker.peels == 0 and tracker.prunes == 0


def test_short_aggressive_run_keeps_invariants():
    model = toy_residual(r=0.75)
    tracker = scripted_run(model, Phase(epochs=1, alpha=0.2, beta=0.05, rho=0.9, delta=0.6), 60)
    assert tracker.peels > 0 and tracker.prunes > 0


def test_l1_mode_training_keeps_invariants():
    model = toy_residual(r=0.75)
    scripted_run(model, Phase(epochs=1, alpha=0.05, beta=0.05, rho=0.6, delta=0.6), 30, penalty_mode="l1-uniform")


def test_check_interval_gates_pruning():
    model = toy_residual()
    x = np.zeros((2, 3, 8, 8), np.float32)
    y = np.array([0, 1])
    for _, fs in model.skeletons():
        fs.values.data[:] = 0.01
    phase = Phase(epochs=1, rho=0.5)
    sched = SmofSchedule([phase], check_interval=4)
    res = training_iteration(model, (x, y), phase, SGD(model), 1, 0.01, sched)
    assert res.peeled == 0
    res = training_iteration(model, (x, y), phase, SGD(model), 4, 0.01, sched)
    assert res.peeled == len(model.skeletons())


# ---------------------------------------------------------------- shared groups


def test_resnet18_shape_shared_groups():
    net = build_architecture("resnet18-shape", {"num_classes": 10})
    shared = [g for g in net.groups.values() if g.shared]
    assert len(shared) == 4
    stage1 = next(g for g in shared if "conv1" in g.member_layer_ids)
    assert set(stage1.member_layer_ids) == {"conv1", "layer1.0.conv2", "layer1.1.conv2"}
    stage2 = next(g for g in shared if "layer2.0.conv2" in g.member_layer_ids)
    assert set(stage2.member_layer_ids) == {"layer2.0.conv2", "layer2.0.downsample.conv", "layer2.1.conv2"}
    assert len(net.convs()) == 20
    singles = [g for g in net.groups.values() if not g.shared]
    assert all(g.mask_id == g.member_layer_ids[0] for g in singles)


def test_shared_groups_reject_add_on_raw_input():
    from smof.autodiff import Tensor
    w = Tensor(np.ones((3, 3, 1, 1)))
    layers = {
        "in": Input("in", [], channels=3),
        "c": Conv("c", ["in"], weight=w),
        "add": Add("add", ["c", "in"]),
    }
    with pytest.raises(ValueError):
        build_shared_groups(layers)


def test_shared_groups_reject_width_mismatch():
    from smof.autodiff import Tensor
    layers = {
        "in": Input("in", [], channels=3),
        "a": Conv("a", ["in"], weight=Tensor(np.ones((4, 3, 1, 1)))),
        "b": Conv("b", ["in"], weight=Tensor(np.ones((5, 3, 1, 1)))),
        "add": Add("add", ["a", "b"]),
    }
    with pytest.raises(ValueError):
        build_shared_groups(layers)
