"""DFLT tensor dumps and ParameterStore checkpoints.

Dump layout: b"DFLT", little-endian uint32 rank, rank uint32 dims, then
float64 little-endian values in row-major order.
"""

import json
import logging
from pathlib import Path

import numpy as np

from utils.errors import CheckpointError
from utils.numerics import DTYPE, ParameterStore

logger = logging.getLogger("dflat_tensor_io")

MAGIC = b"DFLT"
MANIFEST_NAME = "checkpoint.json"
BLOB_NAME = "checkpoint.dflt"


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=DTYPE)
    header = MAGIC + np.uint32(array.ndim).astype("<u4").tobytes()
    header += np.asarray(array.shape, dtype="<u4").tobytes()
    return header + np.ascontiguousarray(array).astype("<f8").tobytes()


def decode_tensor(payload: bytes) -> np.ndarray:
    if payload[:4] != MAGIC:
        raise CheckpointError(f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    rank = int(np.frombuffer(payload, dtype="<u4", count=1, offset=4)[0])
    dims = tuple(int(n) for n in np.frombuffer(payload, dtype="<u4", count=rank, offset=8))
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if dims else 1
    if len(payload) != offset + 8 * count:
        raise CheckpointError(
            f"tensor dump holds {len(payload) - offset} value bytes, dims {dims} need {8 * count}"
        )
    values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
    return values.astype(DTYPE).reshape(dims)


def dump_tensor(path: str | Path, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))
    return path


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read tensor dump {path}: {e}") from e
    return decode_tensor(payload)


def save_checkpoint(store: ParameterStore, out_dir: str | Path) -> Path:
    """Write a (name, dims, offset) manifest plus one flat DFLT blob into `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    for name in store.names():
        value = store.values[name]
        entries.append({"name": name, "dims": list(value.shape), "offset": offset})
        offset += value.size
    flat = (
        np.concatenate([store.values[n].reshape(-1) for n in store.names()])
        if entries
        else np.zeros(0, dtype=DTYPE)
    )
    dump_tensor(out_dir / BLOB_NAME, flat)
    manifest = {"seed": store.seed, "blob": BLOB_NAME, "parameters": entries}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info("Saved checkpoint with %d parameters to %s", len(entries), out_dir)
    return out_dir / MANIFEST_NAME


def load_checkpoint(store: ParameterStore, path: str | Path) -> ParameterStore:
    """Copy checkpoint values into an already-registered store; names and dims must match."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint manifest {manifest_path}: {e}") from e
    flat = load_tensor(manifest_path.parent / manifest["blob"])

    seen = set()
    for entry in manifest["parameters"]:
        name, dims, offset = entry["name"], tuple(entry["dims"]), entry["offset"]
        if name not in store:
            raise CheckpointError(f"checkpoint parameter {name!r} is not part of this model")
        if store.values[name].shape != dims:
            raise CheckpointError(
                f"checkpoint dims {dims} for {name!r} do not match model dims {store.values[name].shape}"
            )
        size = int(np.prod(dims))
        store.values[name][...] = flat[offset : offset + size].reshape(dims)
        seen.add(name)
    missing = set(store.names()) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    logger.info("Loaded checkpoint %s (%d parameters)", manifest_path, len(seen))
    return store
