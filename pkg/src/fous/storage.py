"""File formats: checkpoints, embedding records, label tables, JSON-lines logs."""

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_FORMAT = 1
EMBEDDING_MAGIC = b"FOUSEMB1"
LABEL_COLUMNS = ("instance_id", "l_source", "l_random", "d_source", "d_random")


def _atomic_write(path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def save_checkpoint(path, payload):
    """Serialise ``payload`` (a dict of tensors / plain data) with a format version."""
    payload = dict(payload, format_version=CHECKPOINT_FORMAT)
    _atomic_write(path, lambda p: torch.save(payload, p))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {version!r}")
    return payload


def _record_dtype(dim):
    return np.dtype([("image_id", "<i8"), ("box_id", "<i8"), ("vector", "<f4", (dim,))])


def write_embeddings(path, image_ids, box_ids, vectors):
    """Binary file: magic, uint32 dimension, then ``(image_id, box_id, D float32)`` records."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        vectors = vectors.reshape(len(image_ids), -1) if len(image_ids) else vectors.reshape(0, 0)
    dim = vectors.shape[1]
    rec = np.zeros(len(vectors), dtype=_record_dtype(dim))
    rec["image_id"], rec["box_id"], rec["vector"] = image_ids, box_ids, vectors

    def write(p):
        with open(p, "wb") as fh:
            fh.write(EMBEDDING_MAGIC + struct.pack("<I", dim))
            fh.write(rec.tobytes())

    _atomic_write(path, write)


def read_embeddings(path):
    data = Path(path).read_bytes()
    if data[:8] != EMBEDDING_MAGIC:
        raise ValueError("not an embedding file")
    (dim,) = struct.unpack("<I", data[8:12])
    rec = np.frombuffer(data[12:], dtype=_record_dtype(dim))
    return rec["image_id"].copy(), rec["box_id"].copy(), rec["vector"].astype(np.float64)


def write_label_file(path, labels):
    """Tab-separated table with one row per instance."""

    def write(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(LABEL_COLUMNS)
            for i in range(len(labels)):
                w.writerow([i, int(labels.source_labels[i]), int(labels.random_labels[i]),
                            f"{labels.source_distances[i]:.6f}", f"{labels.random_distances[i]:.6f}"])

    _atomic_write(path, write)


def read_label_file(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return rows


def append_jsonl(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
