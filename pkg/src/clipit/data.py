"""Containers and on-disk formats.

Embedding store ("CIPE", little-endian)::

    magic   4 bytes  b"CIPE"
    version u32      1
    N       u64
    d       u32
    flags   u8       bit0 = labels present, bit1 = ids present
    data    N*d f32  row-major
    labels  N   u32  (if bit0)
    ids     N x (u32 byte length + UTF-8 bytes)  (if bit1)

Vectors are float32 on disk and float64 in memory. Text corpora and
pseudo-pairings are JSONL.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DuplicateId,
    EmptyFilterResult,
    EmptyText,
    InputError,
    LabelLengthMismatch,
    MalformedLine,
    TruncatedFile,
    UnsupportedVersion,
)

MAGIC = b"CIPE"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB")
FLAG_LABELS = 1
FLAG_IDS = 2


@dataclass
class EmbeddingStore:
    """N row vectors with optional integer labels and string ids."""

    vectors: np.ndarray
    labels: np.ndarray | None = None
    ids: list | None = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InputError(f"embedding matrix must be N x d with N, d >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InputError("embedding matrix has non-finite entries")
        self.vectors = v
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (v.shape[0],):
                raise LabelLengthMismatch(f"{labels.shape} labels for {v.shape[0]} rows")
            if labels.size and labels.min() < 0:
                raise InputError("labels must be nonnegative")
            self.labels = labels.astype(np.int64)
        if self.ids is not None:
            ids = [str(i) for i in self.ids]
            if len(ids) != v.shape[0]:
                raise InputError(f"{len(ids)} ids for {v.shape[0]} rows")
            if len(set(ids)) != len(ids):
                raise DuplicateId("embedding ids must be unique")
            self.ids = ids

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return EmbeddingStore(
            self.vectors[index],
            None if self.labels is None else self.labels[index],
            None if self.ids is None else [self.ids[i] for i in index],
        )


def save_embeddings(store, path):
    n, d = store.vectors.shape
    flags = (FLAG_LABELS if store.labels is not None else 0) | (FLAG_IDS if store.ids is not None else 0)
    parts = [_HEADER.pack(MAGIC, VERSION, n, d, flags)]
    parts.append(np.ascontiguousarray(store.vectors, dtype="<f4").tobytes())
    if store.labels is not None:
        parts.append(np.asarray(store.labels, dtype="<u4").tobytes())
    if store.ids is not None:
        for s in store.ids:
            raw = s.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
    Path(path).write_bytes(b"".join(parts))


def load_embeddings(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"{path}: not a CIPE file")
    if len(buf) < _HEADER.size:
        raise TruncatedFile(f"{path}: header cut short")
    _, version, n, d, flags = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    off = _HEADER.size
    nbytes = n * d * 4
    if len(buf) < off + nbytes:
        raise TruncatedFile(f"{path}: expected {n} x {d} floats")
    vectors = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += nbytes
    labels = None
    if flags & FLAG_LABELS:
        if len(buf) < off + 4 * n:
            raise TruncatedFile(f"{path}: label block cut short")
        labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += 4 * n
    ids = None
    if flags & FLAG_IDS:
        ids = []
        for _ in range(n):
            if len(buf) < off + 4:
                raise TruncatedFile(f"{path}: id block cut short")
            (length,) = struct.unpack_from("<I", buf, off)
            off += 4
            if len(buf) < off + length:
                raise TruncatedFile(f"{path}: id block cut short")
            ids.append(buf[off:off + length].decode("utf-8"))
            off += length
    return EmbeddingStore(vectors.astype(np.float64), labels, ids)


# ---------------------------------------------------------------------------
# text corpus


@dataclass(frozen=True)
class Report:
    id: str
    text: str
    tags: tuple = ()


@dataclass
class TextCorpus:
    records: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DuplicateId(r.id)
            if not r.text.strip():
                raise EmptyText(f"report {r.id!r} has no text")
            seen.add(r.id)
        self._index = {r.id: k for k, r in enumerate(self.records)}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self):
        return [r.id for r in self.records]

    def index_of(self, report_id):
        return self._index[report_id]

    def get(self, report_id):
        return self.records[self._index[report_id]]


def load_corpus(path):
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(lineno, str(exc)) from None
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise MalformedLine(lineno, "record needs 'id' and 'text'")
            tags = obj.get("tags", [])
            if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
                raise MalformedLine(lineno, "'tags' must be a list of strings")
            rid = str(obj["id"])
            text = obj["text"]
            if not isinstance(text, str):
                raise MalformedLine(lineno, "'text' must be a string")
            if rid in seen:
                raise DuplicateId(f"line {lineno}: {rid}")
            if not text.strip():
                raise EmptyText(f"line {lineno}: report {rid!r}")
            seen.add(rid)
            records.append(Report(rid, text, tuple(t.lower() for t in tags)))
    return TextCorpus(records)


def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus:
            fh.write(json.dumps({"id": r.id, "text": r.text, "tags": list(r.tags)}) + "\n")


def filter_corpus(corpus, keywords):
    """Keep reports whose tags or text contain any keyword (case-insensitive substring)."""
    keys = [k.lower() for k in keywords if k.strip()]
    if not keys:
        raise InputError("at least one keyword is required")
    kept = []
    for r in corpus:
        text = r.text.lower()
        if any(k in text or any(k in tag for tag in r.tags) for k in keys):
            kept.append(r)
    if not kept:
        raise EmptyFilterResult(f"no report matches {keys}")
    return TextCorpus(kept)


# ---------------------------------------------------------------------------
# pseudo-pairing


@dataclass(frozen=True)
class PairRecord:
    image_index: int
    text_id: str
    label: int
    similarity: float


@dataclass
class PseudoPairedDataset:
    records: list

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def text_ids(self):
        return [r.text_id for r in self.records]

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def similarities(self):
        return np.array([r.similarity for r in self.records], dtype=np.float64)

    def validate(self, corpus):
        for k, r in enumerate(self.records):
            if r.image_index != k:
                raise InputError(f"pairing record {k} has image_index {r.image_index}")
            if r.text_id not in corpus._index:
                raise InputError(f"pairing references unknown report {r.text_id!r}")


def save_pairs(pairs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in pairs:
            fh.write(json.dumps({
                "image_index": r.image_index,
                "text_id": r.text_id,
                "label": r.label,
                "similarity": r.similarity,
            }) + "\n")


def load_pairs(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(PairRecord(int(obj["image_index"]), str(obj["text_id"]),
                                          int(obj["label"]), float(obj["similarity"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedLine(lineno, str(exc)) from None
    return PseudoPairedDataset(records)
