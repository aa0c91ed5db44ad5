"""Flat binary checkpoint container.

Layout (all integers little-endian):

    magic  b"MGCK"
    u32    format version (currently 1)
    u64    metadata length, then UTF-8 JSON metadata (sorted keys)
    u64    entry count
    per entry, sorted by path:
        u32  path length, UTF-8 path
        u32  ndim, u64 dims...
        raw little-endian float64 values (row-major)

Metadata always carries the model config and structure; pruned checkpoints
add a provenance block (source digest, scorer, ratio, platform mask).
Serialization is deterministic, so the byte length doubles as the memory
metric and file digests are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import struct
from io import BytesIO

import numpy as np

from .backbone import Backbone, BackboneConfig, ModelStructure
from .gating import GateTable
from .tensor import Tensor

MAGIC = b"MGCK"
VERSION = 1


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize(entries: dict[str, np.ndarray], meta: dict) -> bytes:
    buf = BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    mb = _meta_bytes(meta)
    buf.write(struct.pack("<Q", len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<Q", len(entries)))
    for path in sorted(entries):
        arr = np.ascontiguousarray(entries[path], dtype=np.float64)
        pb = path.encode("utf-8")
        buf.write(struct.pack("<I", len(pb)))
        buf.write(pb)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.astype("<f8").tobytes())
    return buf.getvalue()


def deserialize(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    buf = BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise ValueError("not a modgate checkpoint (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<Q", buf.read(8))
    meta = json.loads(buf.read(mlen).decode("utf-8"))
    (count,) = struct.unpack("<Q", buf.read(8))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (plen,) = struct.unpack("<I", buf.read(4))
        path = buf.read(plen).decode("utf-8")
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = tuple(struct.unpack("<Q", buf.read(8))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
        entries[path] = arr
    return entries, meta


def model_entries(model: Backbone) -> dict[str, np.ndarray]:
    return {path: t.values for path, t in model.params.items()}


def model_blob(model: Backbone, gates: GateTable | None = None,
               extra_meta: dict | None = None) -> bytes:
    entries = model_entries(model)
    meta = {
        "kind": "modgate-model",
        "config": model.cfg.to_dict(),
        "structure": model.structure.to_dict(),
    }
    if gates is not None:
        for path, t in gates.parameters().items():
            entries[path] = t.values
        meta["gate_groups"] = [list(s) for s in model.structure.gate_group_specs()]
        meta["gate_score_table"] = {
            "".join(str(b) for b in mask): {k: v.tolist() for k, v in scores.items()}
            for mask, scores in gates.score_cache.items()
        }
    if extra_meta:
        meta.update(extra_meta)
    return serialize(entries, meta)


def save_model(path, model: Backbone, gates: GateTable | None = None,
               extra_meta: dict | None = None) -> bytes:
    blob = model_blob(model, gates, extra_meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_model(path) -> tuple[Backbone, GateTable | None, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    return model_from_blob(blob)


def model_from_blob(blob: bytes) -> tuple[Backbone, GateTable | None, dict]:
    entries, meta = deserialize(blob)
    cfg = BackboneConfig.from_dict(meta["config"])
    structure = ModelStructure.from_dict(meta["structure"])
    params = {}
    gates = None
    gate_paths = {p: a for p, a in entries.items() if p.startswith("gates.")}
    for p, arr in entries.items():
        if not p.startswith("gates."):
            params[p] = Tensor(arr, requires_grad=True)
    model = Backbone(cfg, structure, params)
    if gate_paths:
        specs = [tuple(s) for s in meta["gate_groups"]]
        gates = GateTable.create([(s, k, int(n)) for s, k, n in specs],
                                 cfg.n_modalities, seed=0)
        for path, t in gates.parameters().items():
            t.values = gate_paths[path].copy()
    return model, gates, meta


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
