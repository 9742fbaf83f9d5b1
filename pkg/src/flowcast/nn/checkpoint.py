"""Deterministic checkpoint container.

Layout: 8-byte magic, 8-byte little-endian header length, JSON header, then
raw little-endian array bytes back to back. Unlike zip-based containers the
bytes depend only on the content, so identical training runs write identical
files. The header stores the producing config and its hash; loading under a
different config is refused.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from ..errors import CheckpointError, ConfigHashMismatch
from .tensor import Tensor

_MAGIC = b"FCCKPT01"
FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(arr)


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config: dict
    config_hash: str
    optimizer_state: dict | None
    rng_seed: int | None
    extra: dict


def save_checkpoint(path, params: dict, config: dict, *, optimizer_state=None,
                    rng_seed: int | None = None, extra: dict | None = None) -> str:
    """Write arrays + metadata; returns the config hash."""
    arrays: list[tuple[str, np.ndarray]] = [(f"p:{k}", _as_array(v)) for k, v in params.items()]
    opt_meta = None
    if optimizer_state is not None:
        opt_meta = {"t": int(optimizer_state["t"])}
        arrays += [(f"o:{k}", _as_array(v)) for k, v in optimizer_state["arrays"].items()]

    table = []
    offset = 0
    for name, arr in arrays:
        dt = arr.dtype.newbyteorder("<")
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset})
        offset += arr.astype(dt, copy=False).nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "rng_seed": rng_seed,
        "extra": extra or {},
        "optimizer": opt_meta,
        "arrays": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return header["config_hash"]


def load_checkpoint(path, expected_config: dict | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from None
    if len(blob) < 16 or blob[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    hlen = int.from_bytes(blob[8:16], "little")
    try:
        header = json.loads(blob[16:16 + hlen])
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')}")
    stored_hash = header["config_hash"]
    if config_hash(header["config"]) != stored_hash:
        raise ConfigHashMismatch(f"{path}: config does not match its recorded hash")
    if expected_config is not None and config_hash(expected_config) != stored_hash:
        raise ConfigHashMismatch(
            f"{path}: checkpoint built under a different config "
            f"({stored_hash[:12]} != {config_hash(expected_config)[:12]})")

    payload = blob[16 + hlen:]
    params: dict[str, Tensor] = {}
    opt_arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        start = entry["offset"]
        chunk = payload[start:start + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        arr = np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
        name = entry["name"]
        if name.startswith("p:"):
            params[name[2:]] = Tensor(arr, requires_grad=True)
        elif name.startswith("o:"):
            opt_arrays[name[2:]] = arr
    optimizer_state = None
    if header.get("optimizer") is not None:
        optimizer_state = {"t": header["optimizer"]["t"], "arrays": opt_arrays}
    return Checkpoint(
        params=params,
        config=header["config"],
        config_hash=stored_hash,
        optimizer_state=optimizer_state,
        rng_seed=header.get("rng_seed"),
        extra=header.get("extra", {}),
    )
