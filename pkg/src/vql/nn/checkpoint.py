"""Checkpoint IO: one flat little-endian float32 binary plus a JSON manifest
mapping parameter names to shapes and byte offsets."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import SchemaError

BIN_NAME = "checkpoint.bin"
MANIFEST_NAME = "checkpoint.json"
_DTYPE = "<f4"


def save_checkpoint(out_dir, state: dict[str, np.ndarray],
                    extra: dict | None = None) -> Path:
    """Write ``state`` (name -> array) under ``out_dir``; returns the dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"dtype": _DTYPE, "params": {}}
    if extra:
        manifest["extra"] = extra
    offset = 0
    chunks = []
    for name, arr in state.items():
        flat = np.ascontiguousarray(arr, dtype=_DTYPE)
        manifest["params"][name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(flat.tobytes())
        offset += flat.nbytes
    (out / BIN_NAME).write_bytes(b"".join(chunks))
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(ckpt_dir) -> dict[str, np.ndarray]:
    """Read a checkpoint directory back into a name -> float32 array dict."""
    ckpt = Path(ckpt_dir)
    manifest_path = ckpt / MANIFEST_NAME
    bin_path = ckpt / BIN_NAME
    if not manifest_path.exists() or not bin_path.exists():
        raise SchemaError(f"not a checkpoint directory: {ckpt}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("dtype") != _DTYPE:
        raise SchemaError(f"unsupported checkpoint dtype {manifest.get('dtype')}")
    raw = bin_path.read_bytes()
    state = {}
    for name, meta in manifest["params"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = meta["offset"]
        arr = np.frombuffer(raw, dtype=_DTYPE, count=count, offset=offset)
        if arr.size != count:
            raise SchemaError(f"checkpoint truncated at parameter {name}")
        state[name] = arr.reshape(shape).copy()
    return state
