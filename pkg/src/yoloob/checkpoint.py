"""Single-file checkpoints: JSON manifest + little-endian float32 blobs.

Layout::

    b"YOLOOBCK" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | blob

The manifest lists every array (name, shape, byte offset, byte length) in
network order, the run configuration and a SHA-256 of the blob.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .arch import Network

MAGIC = b"YOLOOBCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, net: Network, config: dict | None = None) -> dict:
    state = net.state()
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "architecture": net.graph.description,
        "entries": entries,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)))
        fh.write(mbytes)
        fh.write(blob)
    return manifest


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; returns ``(manifest, state)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _HEADER.size + mlen
    try:
        manifest = json.loads(data[_HEADER.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    blob = data[start:]
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch, refusing to load")
    state = {}
    for e in manifest["entries"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return manifest, state


def load_checkpoint(path: str | Path, net: Network) -> dict:
    """Load weights into ``net`` after checking the layer list matches exactly."""
    manifest, state = read_checkpoint(path)
    expected = net.state()
    names_ck = list(state)
    names_net = list(expected)
    for i in range(max(len(names_ck), len(names_net))):
        a = names_ck[i] if i < len(names_ck) else None
        b = names_net[i] if i < len(names_net) else None
        if a != b or (a is not None and state[a].shape != expected[b].shape):
            got = f"{a} {tuple(state[a].shape)}" if a else "<end of checkpoint>"
            want = f"{b} {tuple(expected[b].shape)}" if b else "<end of network>"
            raise CheckpointError(f"architecture mismatch at entry {i}: checkpoint has {got}, network expects {want}")
    net.load_state(state)
    return manifest
