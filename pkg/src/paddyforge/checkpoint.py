"""Checkpoint files and CSV outputs.

Checkpoint layout (little-endian)::

    b"PDYFORGE"            8-byte magic
    u16 version            currently 1
    u32 header length      followed by that many bytes of UTF-8 JSON
    float32 payloads       one per parameter, in header order
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import LayerSpec, Network
from .tensor import Shape2D

MAGIC = b"PDYFORGE"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_accuracy", "wall_seconds"]
SWEEP_HEADER = ["lr", "smoothed_loss"]


def checkpoint_bytes(net: Network, meta: dict | None = None) -> bytes:
    params = net.parameters()
    header = net.describe()
    header["params"] = [{"name": p.name, "shape": list(p.master.shape)} for p in params]
    header["meta"] = meta or {}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(p.master.astype("<f4").tobytes() for p in params)
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload


def save_checkpoint(net: Network, path, meta: dict | None = None):
    Path(path).write_bytes(checkpoint_bytes(net, meta))


def parse_checkpoint(buf: bytes) -> Network:
    if len(buf) < _PREFIX.size:
        raise FormatError("file too short for checkpoint prefix", len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise FormatError("truncated header", len(buf))
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        specs = [LayerSpec.from_dict(d) for d in header["layers"]]
        net = Network(specs, Shape2D(*header["input_size"]), header["num_classes"],
                      header["in_channels"], header.get("seed", 0), header.get("arch", "custom"),
                      header.get("classes"))
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"invalid checkpoint header: {exc}", start) from exc
    params = net.parameters()
    entries = header.get("params", [])
    if [e["name"] for e in entries] != [p.name for p in params]:
        raise FormatError("parameter list does not match the architecture", start)
    pos = start + hlen
    for entry, p in zip(entries, params):
        if tuple(entry["shape"]) != p.master.shape:
            raise FormatError(f"{p.name}: stored shape {entry['shape']} != architecture shape {list(p.master.shape)}", pos)
        nbytes = p.master.size * 4
        if len(buf) < pos + nbytes:
            raise FormatError(f"truncated payload for {p.name}", len(buf))
        p.master[...] = np.frombuffer(buf, dtype="<f4", count=p.master.size, offset=pos).reshape(p.master.shape)
        p.sync(False)
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after payload", pos)
    net.meta = header.get("meta", {})
    return net


def load_checkpoint(path) -> Network:
    """Rebuild a network from ``path``; every parameter comes back trainable at full precision."""
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# CSV


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}",
                        f"{r.val_accuracy:.6f}", f"{r.wall_seconds:.6f}"])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]


def write_sweep_csv(record, path):
    """Rates are written in scientific notation (6 decimals) since they span many decades."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for lr, loss in zip(record.lrs, record.losses):
            w.writerow([f"{lr:.6e}", f"{loss:.6f}"])


def write_confusion_csv(report, classes, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted"] + list(classes))
        for name, row in zip(classes, report.confusion):
            w.writerow([name] + [int(v) for v in row])
