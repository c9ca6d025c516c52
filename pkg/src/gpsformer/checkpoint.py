"""Checkpoint file pair: ``<stem>.json`` manifest + ``<stem>.bin`` blob.

The blob is the concatenation of little-endian float32 arrays in manifest
order; each manifest entry records name, shape, byte offset and byte size.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1


def _stem(path):
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path


def save_checkpoint(path, model, epoch=None, optimizer_state=None, extra=None):
    """Write model parameters, buffers and optional optimiser slots.

    ``optimizer_state`` maps names to arrays (stored with ``kind="optimizer"``).
    Returns the manifest dict.
    """
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0

    def put(name, arr, kind):
        nonlocal offset
        a = np.asarray(arr, dtype="<f4")   # keeps 0-d shapes; tobytes() is C order
        entries.append({"name": name, "kind": kind, "shape": list(a.shape), "dtype": "float32",
                        "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes

    for name, p in model.named_parameters():
        put(name, p.data, "parameter")
    for name, b in model.named_buffers():
        put(name, b, "buffer")
    for name, arr in (optimizer_state or {}).items():
        put(name, arr, "optimizer")

    manifest = {
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "blob": stem.name + ".bin",
        "blob_nbytes": offset,
        "config": model.cfg.to_dict(),
        "epoch": epoch,
        "optimizer_state_keys": list((optimizer_state or {}).keys()),
        "arrays": entries,
    }
    if extra:
        manifest["extra"] = extra
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_checkpoint(path):
    """Return ``(manifest, {name: array})`` after validating offsets and sizes."""
    stem = _stem(path)
    try:
        manifest = json.loads(stem.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read manifest {stem.with_suffix('.json')}: {e}") from e
    blob = (stem.parent / manifest.get("blob", stem.name + ".bin")).read_bytes()
    if len(blob) != manifest["blob_nbytes"]:
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_nbytes']}")
    arrays = {}
    expected = 0
    for e in manifest["arrays"]:
        if e["name"] in arrays:
            raise CheckpointError(f"duplicate array {e['name']!r}")
        if e["offset"] != expected:
            raise CheckpointError(f"{e['name']}: offset {e['offset']} breaks contiguity (expected {expected})")
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * n:
            raise CheckpointError(f"{e['name']}: {e['nbytes']} bytes for shape {e['shape']}")
        raw = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        arrays[e["name"]] = raw.reshape(e["shape"]).astype(np.float32)
        expected += e["nbytes"]
    if expected != len(blob):
        raise CheckpointError("manifest does not cover the whole blob")
    return manifest, arrays


def load_into(model, path):
    manifest, arrays = read_checkpoint(path)
    kinds = {e["name"]: e["kind"] for e in manifest["arrays"]}
    state = {k: v for k, v in arrays.items() if kinds[k] != "optimizer"}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from e
    optim = {k: v for k, v in arrays.items() if kinds[k] == "optimizer"}
    return manifest, optim


def load_checkpoint(path):
    """Rebuild the model from the stored config and load its weights.

    Returns ``(model, manifest, optimizer_state)``; the model is in eval mode.
    """
    from .model import GPSFormerConfig, build_model

    stem = _stem(path)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    model = build_model(GPSFormerConfig.from_dict(manifest["config"]))
    manifest, optim = load_into(model, stem)
    return model.eval(), manifest, optim
