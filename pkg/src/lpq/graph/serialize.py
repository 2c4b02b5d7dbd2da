"""Model files: ``manifest.json`` (topology, attrs, layout, checksum) plus ``weights.bin``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..tables import EmbeddingTable
from .ir import ModelGraph, Node

FORMAT_VERSION = 1
ALIGN = 64
MANIFEST = "manifest.json"
BLOB = "weights.bin"


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


def _pad(n: int) -> int:
    return (-n) % ALIGN


def to_bytes(g: ModelGraph) -> tuple[bytes, bytes]:
    """(manifest bytes, blob bytes). Deterministic for a given graph."""
    parts: list[bytes] = []
    off = 0
    blobs = []
    for name in sorted(g.weights):
        a = np.asarray(g.weights[name])
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        blobs.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape), "offset": off, "nbytes": len(raw)})
        parts.append(raw + b"\0" * _pad(len(raw)))
        off += len(raw) + _pad(len(raw))
    tables = []
    for name in sorted(g.tables):
        t = g.tables[name]
        raw = t.to_bytes()
        tables.append({"name": name, "bits": t.bits, "rows": t.rows, "dim": t.dim, "offset": off, "nbytes": len(raw)})
        parts.append(raw + b"\0" * _pad(len(raw)))
        off += len(raw) + _pad(len(raw))
    blob = b"".join(parts)
    manifest = {
        "format_version": FORMAT_VERSION,
        "nodes": [n.to_dict() for n in g.nodes],
        "io": g.io,
        "meta": g.meta,
        "blobs": blobs,
        "tables": tables,
        "blob_size": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode(), blob


def from_bytes(manifest_bytes: bytes, blob: bytes) -> ModelGraph:
    try:
        m = json.loads(manifest_bytes)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"unreadable manifest: {e}") from None
    if m.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {m.get('format_version')!r} (expected {FORMAT_VERSION})")
    if len(blob) != m["blob_size"] or hashlib.sha256(blob).hexdigest() != m["blob_sha256"]:
        raise ChecksumError("weight blob checksum mismatch (truncated or corrupted)")
    weights = {}
    for b in m["blobs"]:
        raw = blob[b["offset"] : b["offset"] + b["nbytes"]]
        weights[b["name"]] = np.frombuffer(raw, dtype=np.dtype(b["dtype"])).reshape(b["shape"]).copy()
    tables = {}
    for t in m["tables"]:
        raw = blob[t["offset"] : t["offset"] + t["nbytes"]]
        tables[t["name"]] = EmbeddingTable.from_bytes(t["name"], t["bits"], t["rows"], t["dim"], raw)
    nodes = [Node.from_dict(d) for d in m["nodes"]]
    return ModelGraph(nodes, weights, tables, m["io"], m.get("meta", {}))


def save(g: ModelGraph, path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    manifest, blob = to_bytes(g)
    (p / BLOB).write_bytes(blob)
    (p / MANIFEST).write_bytes(manifest)
    return p


def load(path) -> ModelGraph:
    p = Path(path)
    try:
        manifest = (p / MANIFEST).read_bytes()
        blob = (p / BLOB).read_bytes()
    except FileNotFoundError as e:
        raise ModelFormatError(f"not a model directory: {e}") from None
    return from_bytes(manifest, blob)


def fingerprint(g: ModelGraph) -> str:
    manifest, blob = to_bytes(g)
    return hashlib.sha256(manifest + blob).hexdigest()
