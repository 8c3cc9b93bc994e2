"""Compact on-disk embedding index and signature search.

File layout (all integers and floats little-endian)::

    b"SGNT"  u16 version  u32 record_count
    repeated record_count times:
        u16 id_length  id_length bytes of UTF-8 id
        f64 scale  f64 offset
        4096 x u8 codes            # component = offset + scale * code

A gzip-compressed copy of the same bytes is accepted on load.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .core import EMBEDDING_DIM, Embedding, Provenance
from .errors import CorruptIndexError, FormatError, StoreError

MAGIC = b"SGNT"
VERSION = 1
HEADER = struct.Struct("<4sHI")
ID_LEN = struct.Struct("<H")
PARAMS = struct.Struct("<dd")
GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    signature_id: str
    codes: np.ndarray  # uint8, length 4096
    scale: float
    offset: float

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.dtype != np.uint8 or codes.shape != (EMBEDDING_DIM,):
            raise StoreError(f"record {self.signature_id!r} needs {EMBEDDING_DIM} uint8 codes")
        if len(self.signature_id.encode("utf-8")) > 0xFFFF:
            raise StoreError("signature id longer than 65535 bytes")
        codes = codes.copy()
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (self.signature_id == other.signature_id and self.scale == other.scale
                and self.offset == other.offset and np.array_equal(self.codes, other.codes))

    @property
    def provenance(self) -> Provenance:
        return Provenance.from_signature_id(self.signature_id)

    def dequantize(self) -> np.ndarray:
        return self.offset + self.scale * self.codes.astype(np.float64)

    @property
    def nbytes(self) -> int:
        return record_size(self.signature_id)


def record_size(signature_id: str) -> int:
    return ID_LEN.size + len(signature_id.encode("utf-8")) + PARAMS.size + EMBEDDING_DIM


def index_size(signature_ids: Iterable[str]) -> int:
    return HEADER.size + sum(record_size(s) for s in signature_ids)


def quantize(vector, signature_id: str = "") -> EmbeddingRecord:
    """Affine 8-bit codes spanning the vector's own [min, max] range."""
    v = np.asarray(getattr(vector, "vector", vector), dtype=np.float64).reshape(-1)
    if v.shape != (EMBEDDING_DIM,):
        raise StoreError(f"expected {EMBEDDING_DIM} components, got {v.size}")
    if not signature_id:
        signature_id = getattr(vector, "signature_id", "")
    lo, hi = float(v.min()), float(v.max())
    scale = (hi - lo) / 255.0
    if scale == 0.0:
        codes = np.zeros(EMBEDDING_DIM, dtype=np.uint8)
    else:
        codes = np.clip(np.rint((v - lo) / scale), 0, 255).astype(np.uint8)
    return EmbeddingRecord(signature_id, codes, scale, lo)


def encode_index(records: Sequence[EmbeddingRecord]) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION, len(records))]
    for r in records:
        raw_id = r.signature_id.encode("utf-8")
        parts += [ID_LEN.pack(len(raw_id)), raw_id, PARAMS.pack(r.scale, r.offset), r.codes.tobytes()]
    return b"".join(parts)


def decode_index(data: bytes) -> List[EmbeddingRecord]:
    if data[:2] == GZIP_MAGIC:
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise CorruptIndexError(f"bad compressed index: {exc}") from exc
    if len(data) < HEADER.size:
        if MAGIC.startswith(data[:4]):
            raise CorruptIndexError("index shorter than its header")
        raise FormatError("not a signature index (bad magic)")
    magic, version, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported index version {version}")
    pos = HEADER.size
    records = []
    try:
        for _ in range(count):
            (n,) = ID_LEN.unpack_from(data, pos)
            pos += ID_LEN.size
            if pos + n + PARAMS.size + EMBEDDING_DIM > len(data):
                raise CorruptIndexError(f"index truncated inside record {len(records)}")
            sig_id = data[pos:pos + n].decode("utf-8")
            pos += n
            scale, offset = PARAMS.unpack_from(data, pos)
            pos += PARAMS.size
            codes = np.frombuffer(data, dtype=np.uint8, count=EMBEDDING_DIM, offset=pos)
            pos += EMBEDDING_DIM
            records.append(EmbeddingRecord(sig_id, codes, scale, offset))
    except struct.error as exc:
        raise CorruptIndexError(f"index truncated inside record {len(records)}") from exc
    except UnicodeDecodeError as exc:
        raise CorruptIndexError(f"record {len(records)} has an undecodable id") from exc
    if pos != len(data):
        raise CorruptIndexError(f"{len(data) - pos} trailing bytes after {count} records")
    return records


def save_index(records: Sequence[EmbeddingRecord], path, compress: bool = False) -> Path:
    """Write records atomically (temp file + rename); single writer per path."""
    path = Path(path)
    data = encode_index(list(records))
    if compress:
        data = gzip.compress(data, mtime=0)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        try:
            tmp.unlink(missing_ok=True)
        except OSError:
            pass
        raise StoreError(f"cannot write index {path}: {exc}") from exc
    return path


def load_index(path) -> List[EmbeddingRecord]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read index {path}: {exc}") from exc
    return decode_index(data)


@dataclass(frozen=True)
class SearchHit:
    signature_id: str
    distance: float
    rank: int


def search_vector(query_vector, records: Sequence[EmbeddingRecord], t: float) -> List[SearchHit]:
    q = np.asarray(getattr(query_vector, "vector", query_vector), dtype=np.float64).reshape(-1)
    if not records:
        return []
    mat = np.stack([r.dequantize() for r in records])
    norms = np.linalg.norm(mat, axis=1)
    qn = np.linalg.norm(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = (mat @ q) / (norms * qn)
    dist = np.clip(1.0 - cos, 0.0, 2.0)
    keep = np.flatnonzero(np.isfinite(dist) & (dist <= t))
    keep = keep[np.argsort(dist[keep], kind="stable")]
    return [SearchHit(records[i].signature_id, float(dist[i]), rank) for rank, i in enumerate(keep)]


def search(query, index, encoder, t: float) -> List[SearchHit]:
    """Indexed signatures within cosine distance ``t`` of ``query``, nearest first.

    ``index`` is a record list or a path to an index file; ``query`` a
    :class:`SignatureImage` embedded with ``encoder``.
    """
    from .siamese import embed

    records = load_index(index) if isinstance(index, (str, os.PathLike)) else list(index)
    if not records:
        return []
    return search_vector(embed(encoder, query), records, t)


def records_from_embeddings(embeddings: Sequence[Embedding], ids: Optional[Sequence[str]] = None
                            ) -> List[EmbeddingRecord]:
    ids = list(ids) if ids is not None else [e.signature_id for e in embeddings]
    return [quantize(e, sid) for e, sid in zip(embeddings, ids)]
