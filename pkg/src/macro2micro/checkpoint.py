"""Single-file checkpoint container.

Layout::

    b"M2MCKPT\\n"                      8-byte magic
    <u8 little-endian header length>
    <UTF-8 JSON header>               format_version, config, extra, arrays[]
    <payload>                         little-endian float32 arrays, back to back

Each ``arrays`` entry records ``name``, ``shape``, ``offset`` and ``nbytes``
relative to the payload start. Files are written to a temp name and renamed.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import MalformedCheckpoint, MissingFile, VersionMismatch
from .networks import BUNDLE_VERSION, ModelConfig, build_bundle

MAGIC = b"M2MCKPT\n"
FORMAT_VERSION = "macro2micro-checkpoint/1"


def write_container(path, arrays, config=None, extra=None, version=FORMAT_VERSION):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = arr.detach().cpu().numpy() if torch.is_tensor(arr) else np.asarray(arr)
        blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format_version": version, "config": config or {},
                         "extra": extra or {}, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path, expected_version=FORMAT_VERSION):
    """Return ``(header, {name: float32 ndarray})``."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise MalformedCheckpoint(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(raw):
        raise MalformedCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedCheckpoint(f"{path}: unreadable header") from exc
    if header.get("format_version") != expected_version:
        raise VersionMismatch(
            f"{path}: format {header.get('format_version')!r}, expected {expected_version!r}")
    payload = memoryview(raw)[start + hlen:]
    arrays = {}
    for e in header.get("arrays", []):
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(payload):
            raise MalformedCheckpoint(f"{path}: array {e['name']} truncated or inconsistent")
        arrays[e["name"]] = np.frombuffer(
            payload[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4").reshape(e["shape"]).copy()
    return header, arrays


def save_bundle(bundle, path, optimizer_arrays=None, extra=None):
    arrays = dict(bundle.named_arrays())
    if optimizer_arrays:
        arrays.update(optimizer_arrays)
    info = {"bundle_version": bundle.version, "meta": bundle.meta}
    info.update(extra or {})
    write_container(path, arrays, config=bundle.config_dict(), extra=info)


def load_checkpoint(path):
    """Return ``(bundle, header, arrays)``; ``arrays`` still holds non-model entries."""
    header, arrays = read_container(path)
    extra = header.get("extra", {})
    if extra.get("bundle_version") != BUNDLE_VERSION:
        raise VersionMismatch(
            f"{path}: bundle {extra.get('bundle_version')!r}, expected {BUNDLE_VERSION!r}")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError, KeyError) as exc:
        raise MalformedCheckpoint(f"{path}: bad config snapshot: {exc}") from exc
    bundle = build_bundle(config, seed=extra.get("meta", {}).get("seed", 0))
    bundle.meta.update(extra.get("meta", {}))
    for name, mod in bundle.modules().items():
        prefix = name + "."
        state = {}
        for key, ref in mod.state_dict().items():
            full = prefix + key
            if full not in arrays:
                raise MalformedCheckpoint(f"{path}: missing parameter {full}")
            arr = arrays.pop(full)
            if tuple(arr.shape) != tuple(ref.shape):
                raise MalformedCheckpoint(f"{path}: {full} has shape {arr.shape}, want {tuple(ref.shape)}")
            state[key] = torch.from_numpy(arr)
        mod.load_state_dict(state)
    return bundle, header, arrays


def load_bundle(path):
    return load_checkpoint(path)[0]
