"""Checkpoint directories: ``manifest.json`` plus one float64 payload.

The manifest lists every named array with its shape and byte offset into
``payload.bin`` (little-endian float64), followed by free-form metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError

FORMAT = "ambireg-checkpoint-v1"


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": FORMAT, "arrays": entries, "meta": meta or {}}
    (path / "payload.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(arrays, meta)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        payload = (path / "payload.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{path}: not an {FORMAT} checkpoint")
    arrays = {}
    end = 0
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        stop = start + 8 * count
        if stop > len(payload):
            raise FormatError(f"{path}: payload truncated at {e['name']}")
        arrays[e["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(e["shape"]).copy()
        end = max(end, stop)
    if end != len(payload):
        raise FormatError(f"{path}: payload size mismatch")
    return arrays, manifest["meta"]
