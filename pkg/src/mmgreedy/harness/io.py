"""On-disk formats.

Checkpoints are a directory with ``manifest.json`` (format version, tensor
names, shapes, partition labels, counters, blob checksum) and ``tensors.bin``
(little-endian float64, tensors concatenated in manifest order).

Datasets are a directory with ``manifest.json`` (generator spec, dataset kind,
per-split checksums) and one ``<split>.bin`` per split. A split file starts with
the 8-byte magic ``MMGSPLT1``, a little-endian uint64 header length, and a UTF-8
JSON header listing ``{"name", "shape"}`` for x0, x1 and y; the float64 payload
follows, row-major, in that order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..synthdata import SPLITS, BimodalDataset, GeneratorSpec, Split
from ..trainers import Checkpoint

CHECKPOINT_FORMAT = 1
DATASET_FORMAT = 1
SPLIT_MAGIC = b"MMGSPLT1"
LE_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Version mismatch, checksum failure, or a malformed file."""


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    for group, table in (("array", ckpt.arrays), ("velocity", ckpt.velocity)):
        for name in sorted(table):
            a = np.ascontiguousarray(table[name], dtype=LE_F64)
            entries.append({"group": group, "name": name, "shape": list(a.shape),
                            "labels": ckpt.partition.get(name, []) if group == "array" else []})
            chunks.append(a.tobytes())
    blob = b"".join(chunks)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "blob": "tensors.bin",
        "blob_sha256": _sha256(blob),
        "blob_bytes": len(blob),
        "tensors": entries,
        "net_spec": ckpt.net_spec,
        "config": ckpt.config,
        "stats_counts": ckpt.stats_counts,
        "counters": {"step": ckpt.step, "epoch": ckpt.epoch, "best_epoch": ckpt.best_epoch,
                     "best_step": ckpt.best_step},
        # repr keeps the exact float; json floats round-trip exactly in python too
        "best_val": ckpt.best_val,
        "accumulator": ckpt.accumulator,
        "policy": ckpt.policy,
        "history": ckpt.history,
    }
    (path / "tensors.bin").write_bytes(blob)
    write_json(path / "manifest.json", manifest)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise FormatError(f"checkpoint format {manifest.get('format_version')} != {CHECKPOINT_FORMAT}")
    blob = (path / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"] or _sha256(blob) != manifest["blob_sha256"]:
        raise FormatError("checkpoint checksum mismatch")
    arrays, velocity, partition = {}, {}, {}
    offset = 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(blob, dtype=LE_F64, count=n, offset=offset).reshape(e["shape"]).astype(np.float64)
        offset += n * 8
        if e["group"] == "array":
            arrays[e["name"]] = a
            if e["labels"]:
                partition[e["name"]] = e["labels"]
        else:
            velocity[e["name"]] = a
    c = manifest["counters"]
    return Checkpoint(net_spec=manifest["net_spec"], config=manifest["config"], arrays=arrays,
                      velocity=velocity, stats_counts=manifest["stats_counts"], partition=partition,
                      step=c["step"], epoch=c["epoch"], best_val=manifest["best_val"],
                      best_epoch=c["best_epoch"], best_step=c["best_step"],
                      accumulator=manifest["accumulator"], policy=manifest["policy"],
                      history=manifest["history"])


# ---------------------------------------------------------------------------
# datasets


def _write_split(split: Split, path: Path) -> str:
    arrays = [("x0", split.x0), ("x1", split.x1), ("y", split.y)]
    header = json.dumps({"dtype": "<f8", "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays]})
    hb = header.encode()
    payload = b"".join(np.ascontiguousarray(a, dtype=LE_F64).tobytes() for _, a in arrays)
    data = SPLIT_MAGIC + struct.pack("<Q", len(hb)) + hb + payload
    path.write_bytes(data)
    return _sha256(data)


def _read_split(path: Path, checksum: str | None) -> Split:
    data = path.read_bytes()
    if checksum is not None and _sha256(data) != checksum:
        raise FormatError(f"checksum mismatch in {path.name}")
    if data[:8] != SPLIT_MAGIC:
        raise FormatError(f"{path.name} is not a split file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode())
    offset = 16 + hlen
    out = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        out[t["name"]] = np.frombuffer(data, dtype=LE_F64, count=n, offset=offset).reshape(t["shape"]).copy()
        offset += n * 8
    return Split(out["x0"], out["x1"], out["y"].astype(np.int64))


def save_dataset(ds: BimodalDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sums = {name: _write_split(ds.split(name), path / f"{name}.bin") for name in SPLITS}
    write_json(path / "manifest.json", {"format_version": DATASET_FORMAT, "kind": ds.kind,
                                        "spec": ds.spec.to_dict(), "checksums": sums,
                                        "sizes": {n: len(ds.split(n)) for n in SPLITS}})
    return path


def load_dataset(path) -> BimodalDataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_FORMAT:
        raise FormatError("dataset format version mismatch")
    splits = [_read_split(path / f"{n}.bin", manifest["checksums"][n]) for n in SPLITS]
    return BimodalDataset(*splits, spec=GeneratorSpec.from_dict(manifest["spec"]), kind=manifest["kind"])


def dataset_id(path) -> str:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    return _sha256(json.dumps(manifest["checksums"], sort_keys=True).encode())[:12]
