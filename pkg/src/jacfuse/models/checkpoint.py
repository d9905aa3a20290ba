"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"ELF1"  u32 version  u32 meta_len  meta (UTF-8 JSON)  u32 n_blocks
    per block: u16 name_len  name  u8 dtype  u8 ndim  u64 shape[ndim]  u64 nbytes  payload
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .cnn import Cnn3dModel
from .forest import ForestConfig, ForestModel, Tree

MAGIC = b"ELF1"
VERSION = 1
DTYPES = {0: "<f8", 1: "<i8"}
CODES = {v: k for k, v in DTYPES.items()}


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = "<f8" if arr.dtype.kind == "f" else "<i8"
        arr = np.ascontiguousarray(arr, dtype=dt)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)) + payload)
    Path(path).write_bytes(b"".join(parts))


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        meta = json.loads(take(meta_len).decode())
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt metadata") from e
    (n_blocks,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n_blocks):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        if nbytes != expected:
            raise CheckpointError(f"{path}: block {name} has {nbytes} bytes, expected {expected}")
        arrays[name] = np.frombuffer(take(nbytes), dtype=DTYPES[code]).reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return arrays, meta


def save_cnn(model: Cnn3dModel, path) -> None:
    meta = {
        "kind": "cnn3d",
        "input_shape": list(model.input_shape),
        "filters": list(model.filters),
        "dropout": model.dropout,
        "bn_momentum": model.bn_momentum,
        "seed": model.seed,
    }
    save_arrays(path, model.params, meta)


def load_cnn(path) -> Cnn3dModel:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "cnn3d":
        raise CheckpointError(f"{path}: not a CNN checkpoint")
    try:
        model = Cnn3dModel(tuple(meta["input_shape"]), tuple(meta["filters"]), meta["dropout"], meta["bn_momentum"], meta["seed"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: incomplete CNN metadata") from e
    for k, v in model.params.items():
        if k not in arrays or arrays[k].shape != v.shape:
            raise CheckpointError(f"{path}: missing or misshapen parameter {k}")
    model.params = {k: arrays[k] for k in model.params}
    return model


def save_forest(model: ForestModel, path) -> None:
    sizes = np.array([t.n_nodes for t in model.trees], dtype=np.int64)
    arrays = {
        "tree_sizes": sizes,
        "feature": np.concatenate([t.feature for t in model.trees]),
        "threshold": np.concatenate([t.threshold for t in model.trees]),
        "left": np.concatenate([t.left for t in model.trees]),
        "right": np.concatenate([t.right for t in model.trees]),
        "value": np.concatenate([t.value for t in model.trees]),
    }
    cfg = model.config
    meta = {
        "kind": "forest",
        "n_features": model.n_features,
        "config": {
            "n_trees": cfg.n_trees,
            "max_features": cfg.max_features,
            "bootstrap": cfg.bootstrap,
            "min_samples_leaf": cfg.min_samples_leaf,
            "max_depth": cfg.max_depth,
            "seed": cfg.seed,
        },
    }
    save_arrays(path, arrays, meta)


def load_forest(path) -> ForestModel:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "forest":
        raise CheckpointError(f"{path}: not a forest checkpoint")
    try:
        cfg = ForestConfig(**meta["config"])
        offsets = np.concatenate([[0], np.cumsum(arrays["tree_sizes"])])
        trees = []
        for a, b in zip(offsets[:-1], offsets[1:]):
            trees.append(
                Tree(arrays["feature"][a:b], arrays["threshold"][a:b], arrays["left"][a:b], arrays["right"][a:b], arrays["value"][a:b])
            )
        return ForestModel(trees, int(meta["n_features"]), cfg)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: incomplete forest checkpoint") from e
