"""Per-building embedding sets: CSV and UEMB binary readers/writers."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, FormatError

UEMB_MAGIC = b"UEMB"


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    ids: tuple[str, ...]
    vectors: np.ndarray  # (N, D)

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != len(self.ids):
            raise ValueError("vectors must be (N, D) with one row per id")
        if not np.all(np.isfinite(vec)):
            raise ValueError("embeddings must be finite")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "vectors", vec)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def aligned(self, ids) -> np.ndarray:
        """Rows reordered to ``ids``; every id must be present."""
        index = {k: i for i, k in enumerate(self.ids)}
        missing = [k for k in ids if k not in index]
        if missing:
            raise AlignmentError(f"no embedding for ids {missing[:5]}")
        return self.vectors[[index[k] for k in ids]]


def read_csv(text: str) -> EmbeddingSet:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("empty embedding CSV")
    if rows[0] and rows[0][0].strip().lower() == "id":
        rows = rows[1:]
    ids = [r[0] for r in rows if r]
    try:
        vecs = np.array([[float(v) for v in r[1:]] for r in rows if r], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"non-numeric embedding value: {exc}") from None
    return EmbeddingSet(tuple(ids), vecs.reshape(len(ids), -1))


def write_csv(emb: EmbeddingSet) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", *[f"dim{i}" for i in range(emb.dim)]])
    for k, v in zip(emb.ids, emb.vectors):
        w.writerow([k, *[repr(float(x)) for x in v]])
    return out.getvalue()


def to_uemb(emb: EmbeddingSet) -> bytes:
    parts = [UEMB_MAGIC, struct.pack("<II", len(emb), emb.dim)]
    for k, v in zip(emb.ids, emb.vectors):
        raw = k.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + v.astype("<f4").tobytes())
    return b"".join(parts)


def from_uemb(data: bytes) -> EmbeddingSet:
    if data[:4] != UEMB_MAGIC:
        raise FormatError("not a UEMB file")
    count, dim = struct.unpack_from("<II", data, 4)
    pos = 12
    ids, vecs = [], np.empty((count, dim))
    try:
        for i in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            ids.append(data[pos + 2 : pos + 2 + n].decode("utf-8"))
            pos += 2 + n
            vecs[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated UEMB payload: {exc}") from None
    return EmbeddingSet(tuple(ids), vecs)


def load(data: bytes) -> EmbeddingSet:
    """Sniff UEMB binary vs CSV text."""
    if data[:4] == UEMB_MAGIC:
        return from_uemb(data)
    return read_csv(data.decode("utf-8"))
