import numpy as np
import pytest

from smof.architectures import build_architecture
from smof.checkpoint import CheckpointError, load_checkpoint, read_manifest, read_tensors, save_checkpoint
from smof.config import ConfigError, load_config, parse_config, parse_dataset_arg, parse_pairs
from smof.surgery import export

from toynets import randomize_state

CFG = """
# comment
run.seed = 3
[arch]
name = resnet-tiny
width = 4
[dataset]
classes = 3
train_paths = a.idx, b.idx
[optim]
batch_size = 16
[smof]
r = 0.5
penalty_mode = l1-uniform
[phase]
epochs = 2
alpha = 1e-3   # trailing comment
rho = 0.4
lr_milestones = 1
[phase]
epochs = 1
"""


def test_parse_config_sections_and_phases(tmp_path):
    cfg = parse_config(CFG, base_dir=tmp_path)
    assert cfg.seed == 3 and cfg.arch_name == "resnet-tiny" and cfg.arch_params == {"width": 4}
    assert cfg.batch_size == 16 and cfg.penalty_mode == "l1-uniform"
    assert cfg.schedule.r == 0.5
    p1, p2 = cfg.schedule.phases
    assert (p1.epochs, p1.alpha, p1.rho, p1.lr_milestones) == (2, 1e-3, 0.4, (1,))
    assert p2.frozen_structure
    assert cfg.dataset.classes == 3
    assert cfg.dataset.train_paths == [str(tmp_path / "a.idx"), str(tmp_path / "b.idx")]
    assert cfg.output_dir == str(tmp_path / "runs/default")


def test_dotted_and_sectioned_keys_are_equivalent():
    a, _ = parse_pairs("optim.momentum = 0.5\n")
    b, _ = parse_pairs("[optim]\nmomentum = 0.5\n")
    assert a == b == {"optim.momentum": 0.5}


@pytest.mark.parametrize("text, msg", [
    ("[phase]\nalpha = 1\n", "epochs"),
    ("bogus.key = 1\n[phase]\nepochs = 1\n", "unknown config key"),
    ("run.seed = 1\n", "no \\[phase\\]"),
    ("[phase]\nepochs = 1\ngamma = 2\n", "unknown keys"),
    ("[phase]\nepochs = 1\nrho = -1\n", "non-negative"),
    ("smof.penalty_mode = l3\n[phase]\nepochs = 1\n", "penalty mode"),
    ("run.precision = float16\n[phase]\nepochs = 1\n", "precision"),
    ("just some words\n", "expected"),
    ("dataset.colour = 1\n[phase]\nepochs = 1\n", "dataset key"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_dataset_arg_inline_and_file(tmp_path):
    spec = parse_dataset_arg("classes=5,noise=0.1")
    assert spec.classes == 5 and spec.noise == 0.1
    p = tmp_path / "c.cfg"
    p.write_text(CFG)
    assert parse_dataset_arg(str(p)).classes == 3
    with pytest.raises(ConfigError):
        parse_dataset_arg("classes")


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    names = sorted(p.name for p in root.glob("*.cfg"))
    assert "desk_smof.cfg" in names and "desk_baseline.cfg" in names
    for p in root.glob("*.cfg"):
        load_config(p)


# ---------------------------------------------------------------- checkpoints


def _trained_like(seed=0):
    model = build_architecture("resnet-tiny", {"width": 4, "stages": 2}, seed=seed, r=0.5)
    randomize_state(model, np.random.default_rng(seed))
    model.arch["input_shape"] = [3, 8, 8]
    return model


def test_checkpoint_round_trip_preserves_state_and_outputs(tmp_path):
    model = _trained_like()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"epoch": 4})
    loaded, manifest = load_checkpoint(path)
    assert manifest["metadata"] == {"epoch": 4} and not manifest["pruned"]
    for (n, a), (_, b) in zip(model.weight_params(), loaded.weight_params()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)
    for (n, a), (_, b) in zip(model.skeletons(), loaded.skeletons()):
        np.testing.assert_array_equal(a.values.data, b.values.data)
        np.testing.assert_array_equal(a.frozen, b.frozen)
        assert a.i_min == b.i_min
    for g in model.masks:
        np.testing.assert_array_equal(model.masks[g].pruned, loaded.masks[g].pruned)
        np.testing.assert_array_equal(model.masks[g].learnable, loaded.masks[g].learnable)
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(model.predict(x), loaded.predict(x))
    save_checkpoint(loaded, tmp_path / "again.ckpt", {"epoch": 4})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_pruned_checkpoint_round_trip(tmp_path):
    model = _trained_like(1)
    exported, report = export(model, (3, 8, 8))
    save_checkpoint(exported, tmp_path / "p.ckpt", {"surgery": report.to_dict()})
    loaded, manifest = load_checkpoint(tmp_path / "p.ckpt")
    assert manifest["pruned"] and not loaded.masked
    x = np.random.default_rng(1).standard_normal((2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(exported.predict(x), loaded.predict(x))


def test_blob_offsets_are_consistent(tmp_path):
    model = _trained_like()
    save_checkpoint(model, tmp_path / "m.ckpt")
    manifest, arrays = read_tensors(tmp_path / "m.ckpt")
    offset = 0
    for t in manifest["tensors"]:
        assert t["offset"] == offset
        offset += t["nbytes"]
        assert arrays[t["name"]].shape == tuple(t["shape"])


def test_corrupt_checkpoints_are_rejected(tmp_path):
    model = _trained_like()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="blob area"):
        read_manifest(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_manifest(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:10])
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "short.ckpt")
