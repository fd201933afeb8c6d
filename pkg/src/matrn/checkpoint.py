"""Self-describing binary checkpoints.

Layout::

    b"MTRNCKPT"                 8-byte magic
    uint32 little-endian        header length in bytes
    header                      UTF-8 JSON
    payload                     concatenated little-endian tensor bytes

The header holds the format version, the full config, a manifest entry per
tensor (name, shape, dtype, byte offset, byte length) and the SHA-256 of the
payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import CheckpointError

MAGIC = b"MTRNCKPT"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optimizer/"


def save_checkpoint(path: str | Path, model, extra: dict | None = None, optimizer=None) -> None:
    """Write ``model`` (and optionally Adam moments) plus JSON-serialisable ``extra``."""
    state = model.state_dict()
    if optimizer is not None:
        state.update({OPTIM_PREFIX + k: v for k, v in optimizer.state_dict().items()})
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(state):
        arr = np.asarray(state[name], order="C")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "manifest": manifest,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + payload)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, state)`` after validating magic, version and checksum."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} "
                              f"unsupported (expected {FORMAT_VERSION})")
    payload = blob[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch")
    state = {}
    for entry in header["manifest"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of payload")
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(entry["dtype"]))
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
    return header, state


def load_checkpoint(path: str | Path, model=None):
    """Load weights into ``model``, or build a fresh model from the stored config.

    Returns ``(model, header, optimizer_state)``; the last is empty when the
    file holds no optimizer moments.

    Raises :class:`CheckpointError` if the stored config does not match the
    given model's config or any tensor is missing or mis-shaped.
    """
    from .model import MATRN

    header, state = read_checkpoint(path)
    cfg = TrainConfig.from_dict(_tuple_fix(header["config"]))
    if model is None:
        model = MATRN(cfg)
    elif model.cfg.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in cfg.to_dict().items() if model.cfg.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: config mismatch in {diff}")
    optim_state = {k[len(OPTIM_PREFIX):]: v for k, v in state.items() if k.startswith(OPTIM_PREFIX)}
    weights = {k: v for k, v in state.items() if not k.startswith(OPTIM_PREFIX)}
    try:
        model.load_state_dict(weights)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, header, optim_state


def _tuple_fix(d: dict) -> dict:
    d = dict(d)
    d["backbone_widths"] = tuple(d["backbone_widths"])
    return d
