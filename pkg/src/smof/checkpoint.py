"""Checkpoint file: JSON manifest followed by little-endian float32 blobs.

Layout::

    b"SMOFCKPT" | u32 format version | u64 manifest length | manifest (UTF-8 JSON) | blobs

Blobs are row-major and appear in the order of ``manifest["tensors"]``;
each entry records its byte offset relative to the start of the blob area.
"""
from __future__ import annotations

import json
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .network import (
    Add, BatchNorm, Conv, GlobalAvgPool, Input, Layer, Linear, MaxPool, Network, ReLU,
)
from .params import FilterMask, FilterSkeleton, SharedMaskGroup

MAGIC = b"SMOFCKPT"
FORMAT_VERSION = 1
_BLOB = np.dtype("<f4")

_KINDS = {cls.kind: cls for cls in (Input, Conv, BatchNorm, ReLU, MaxPool, Add, GlobalAvgPool, Linear)}
# layer fields stored as blobs rather than manifest attributes
_TENSOR_FIELDS = {"weight", "bias", "gamma", "beta", "running_mean", "running_var"}


class CheckpointError(RuntimeError):
    pass


def _layer_tensors(layer: Layer):
    for f in fields(layer):
        if f.name in _TENSOR_FIELDS:
            v = getattr(layer, f.name)
            if v is not None:
                yield f.name, v.data if isinstance(v, Tensor) else v


def save_checkpoint(model: Network, path, metadata: dict | None = None) -> None:
    tensors: list[dict] = []
    blobs: list[bytes] = []
    offset = 0

    def put(name: str, arr: np.ndarray) -> None:
        nonlocal offset
        b = np.ascontiguousarray(arr, dtype=_BLOB).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)

    layers = []
    for layer in model.layers.values():
        attrs = {}
        for f in fields(layer):
            if f.name in ("name", "inputs", "skeleton") or f.name in _TENSOR_FIELDS:
                continue
            attrs[f.name] = getattr(layer, f.name)
        layers.append({"kind": layer.kind, "name": layer.name, "inputs": list(layer.inputs), "attrs": attrs})
        for fname, arr in _layer_tensors(layer):
            put(f"{layer.name}.{fname}", arr)

    skeletons = {}
    masks = {}
    if model.masked:
        for name, fs in model.skeletons():
            skeletons[name] = {"kernel_size": fs.kernel_size, "i_min": fs.i_min,
                               "frozen": fs.frozen.astype(int).tolist()}
            put(f"{name}.skeleton", fs.values.data)
        for gid, fm in model.masks.items():
            masks[gid] = {"length": fm.length, "learnable": fm.learnable.astype(int).tolist(),
                          "pruned": fm.pruned.astype(int).tolist()}
            put(f"mask:{gid}", fm.values.data)

    manifest = {
        "format_version": FORMAT_VERSION,
        "pruned": not model.masked,
        "architecture": model.arch,
        "precision": np.dtype(model.dtype).name,
        "layers": layers,
        "skeletons": skeletons,
        "masks": masks,
        "groups": {gid: g.member_layer_ids for gid, g in model.groups.items()},
        "tensors": tensors,
        "metadata": metadata or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    if len(raw) < pos + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack("<IQ", raw[pos : pos + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos += 12
    manifest = json.loads(raw[pos : pos + n].decode())
    body = raw[pos + n :]
    expected = sum(t["nbytes"] for t in manifest["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"{path}: blob area is {len(body)} bytes, manifest expects {expected}")
    for t in manifest["tensors"]:
        if t["nbytes"] != 4 * int(np.prod(t["shape"], dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {t['name']} size disagrees with its shape")
    return manifest, body


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Manifest plus every blob as a float32 array, keyed by tensor name."""
    manifest, body = read_manifest(path)
    arrays = {}
    for t in manifest["tensors"]:
        arr = np.frombuffer(body, dtype=_BLOB, count=t["nbytes"] // 4, offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    return manifest, arrays


def load_checkpoint(path, dtype=None) -> tuple[Network, dict]:
    """Rebuild the network stored at ``path``; returns (network, manifest)."""
    manifest, arrays = read_tensors(path)
    dtype = np.dtype(dtype or manifest.get("precision", "float32")).type
    layers: dict[str, Layer] = {}
    for spec in manifest["layers"]:
        cls = _KINDS.get(spec["kind"])
        if cls is None:
            raise CheckpointError(f"unknown layer kind {spec['kind']!r}")
        kw = dict(spec["attrs"])
        for f in fields(cls):
            if f.name not in _TENSOR_FIELDS:
                continue
            key = f"{spec['name']}.{f.name}"
            if key not in arrays:
                continue
            if f.name in ("running_mean", "running_var"):
                kw[f.name] = arrays[key].astype(dtype)
            else:
                kw[f.name] = Tensor(arrays[key], requires_grad=True, dtype=dtype)
        layers[spec["name"]] = cls(spec["name"], list(spec["inputs"]), **kw)

    net = Network(layers, arch=manifest["architecture"], masked=not manifest["pruned"], dtype=dtype)
    # the manifest is key-sorted; the tensor list keeps the original group order
    order = [t["name"][5:] for t in manifest["tensors"] if t["name"].startswith("mask:")]
    order += [g for g in manifest["groups"] if g not in order]
    net.groups = {gid: SharedMaskGroup(gid, list(manifest["groups"][gid])) for gid in order}
    if net.masked:
        for name, s in manifest["skeletons"].items():
            fs = FilterSkeleton(s["kernel_size"], dtype=dtype)
            fs.values = Tensor(arrays[f"{name}.skeleton"], requires_grad=True, dtype=dtype)
            fs.frozen = np.asarray(s["frozen"], dtype=bool)
            fs.i_min = s["i_min"]
            net.conv(name).skeleton = fs
        for gid in order:
            m = manifest["masks"][gid]
            fm = FilterMask(m["length"], np.asarray(m["learnable"], dtype=bool), dtype=dtype)
            fm.values = Tensor(arrays[f"mask:{gid}"], requires_grad=True, dtype=dtype)
            fm.pruned = np.asarray(m["pruned"], dtype=bool)
            net.masks[gid] = fm
    return net, manifest
