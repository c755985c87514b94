"""Binary cache container ("BSEC") for embeddings and dataset payloads.

Layout, all little-endian:

    magic   4 bytes  b"BSEC"
    version u32      currently 1
    count   u32      number of sections
    per section:
        tag   u8     0 = image embeddings, 1 = token embeddings
                     (2 = pixels, 3 = class labels, 4 = geometry are
                     internal extensions used by the dataset cache only)
        dim   u32    floats per record
        count u64    number of records
        records: id u64, provenance u8, detection u8, dim * f32
    crc     u32      CRC32 of every preceding byte

Token-embedding records have no string storage; record ids index the
canonical token list ``CANONICAL_TOKENS``. Provenance codes follow
``triggers.PROVENANCE_CODES`` (0 clean, 1..6 the attack kinds).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"BSEC"
VERSION = 1

SECTION_IMAGE = 0
SECTION_TOKEN = 1
SECTION_PIXELS = 2
SECTION_CLASS_LABELS = 3
SECTION_GEOMETRY = 4

#: fixed token identity for token-embedding records: id i is CANONICAL_TOKENS[i]
CANONICAL_TOKENS = ("a", "photo", "of", "clean", "backdoored")

_HEADER = struct.Struct("<4sII")
_SECTION_HEADER = struct.Struct("<BIQ")
_CRC = struct.Struct("<I")


class CacheFormatError(ValueError):
    """Cache file is malformed (magic, version, truncation, dims, CRC)."""


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("prov", "u1"), ("det", "u1"), ("vec", "<f4", (dim,))])


@dataclass
class Section:
    tag: int
    dim: int
    ids: np.ndarray         # (n,) uint64
    provenance: np.ndarray  # (n,) uint8
    detection: np.ndarray   # (n,) uint8
    vectors: np.ndarray     # (n, dim) float32


def pack_container(sections: Sequence[Section]) -> bytes:
    chunks = [_HEADER.pack(MAGIC, VERSION, len(sections))]
    for sec in sections:
        n = len(sec.ids)
        chunks.append(_SECTION_HEADER.pack(sec.tag, sec.dim, n))
        records = np.empty(n, dtype=_record_dtype(sec.dim))
        records["id"] = np.asarray(sec.ids, dtype=np.uint64)
        records["prov"] = np.asarray(sec.provenance, dtype=np.uint8)
        records["det"] = np.asarray(sec.detection, dtype=np.uint8)
        records["vec"] = np.asarray(sec.vectors, dtype="<f4").reshape(n, sec.dim)
        chunks.append(records.tobytes())
    body = b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def unpack_container(blob: bytes) -> list[Section]:
    if len(blob) < _HEADER.size + _CRC.size:
        raise CacheFormatError(f"file truncated: {len(blob)} bytes is below the minimum header size")
    magic, version, n_sections = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CacheFormatError(f"unsupported format version {version}, expected {VERSION}")
    (stored_crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    actual_crc = zlib.crc32(blob[: -_CRC.size])
    if stored_crc != actual_crc:
        raise CacheFormatError(f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    sections: list[Section] = []
    offset = _HEADER.size
    end = len(blob) - _CRC.size
    for _ in range(n_sections):
        if offset + _SECTION_HEADER.size > end:
            raise CacheFormatError("file truncated inside a section header")
        tag, dim, count = _SECTION_HEADER.unpack_from(blob, offset)
        offset += _SECTION_HEADER.size
        rec_dtype = _record_dtype(dim)
        nbytes = rec_dtype.itemsize * count
        if offset + nbytes > end:
            raise CacheFormatError(
                f"file truncated inside section tag {tag}: need {nbytes} record bytes"
            )
        records = np.frombuffer(blob, dtype=rec_dtype, count=count, offset=offset)
        offset += nbytes
        sections.append(
            Section(
                tag=tag,
                dim=dim,
                ids=records["id"].copy(),
                provenance=records["prov"].copy(),
                detection=records["det"].copy(),
                vectors=records["vec"].reshape(count, dim).copy(),
            )
        )
    if offset != end:
        raise CacheFormatError(f"{end - offset} unexpected trailing bytes before the CRC")
    return sections


def write_container(path, sections: Sequence[Section]) -> None:
    Path(path).write_bytes(pack_container(sections))


def read_container(path) -> list[Section]:
    return unpack_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# embedding cache


@dataclass
class EmbeddingCache:
    """Unit-norm joint-space vectors with provenance and detection tags.

    ``token_vectors`` optionally carries the word-embedding table rows
    (ids index CANONICAL_TOKENS) so an imported file is self-contained.
    """

    dim: int
    ids: np.ndarray
    provenance: np.ndarray
    detection: np.ndarray
    vectors: np.ndarray
    token_dim: int | None = None
    token_ids: np.ndarray | None = None
    token_vectors: np.ndarray | None = None
    renormalized: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingCache":
        return cls(
            dim=dim,
            ids=np.zeros(0, dtype=np.uint64),
            provenance=np.zeros(0, dtype=np.uint8),
            detection=np.zeros(0, dtype=np.uint8),
            vectors=np.zeros((0, dim), dtype=np.float32),
        )

    def subset(self, indices: np.ndarray) -> "EmbeddingCache":
        indices = np.asarray(indices)
        return replace(
            self,
            ids=self.ids[indices],
            provenance=self.provenance[indices],
            detection=self.detection[indices],
            vectors=self.vectors[indices],
            renormalized=0,
        )

    def token_row(self, word: str) -> np.ndarray:
        if self.token_vectors is None:
            raise CacheFormatError("cache has no token-embedding section")
        try:
            token_id = CANONICAL_TOKENS.index(word)
        except ValueError:
            raise KeyError(f"{word!r} is not a canonical token") from None
        hits = np.nonzero(self.token_ids == token_id)[0]
        if len(hits) == 0:
            raise CacheFormatError(f"token-embedding section lacks a row for {word!r} (id {token_id})")
        return self.token_vectors[hits[0]]


def concat_caches(caches: Sequence[EmbeddingCache]) -> EmbeddingCache:
    dims = {c.dim for c in caches}
    if len(dims) != 1:
        raise CacheFormatError(f"cannot concatenate caches with mixed dims {sorted(dims)}")
    return EmbeddingCache(
        dim=caches[0].dim,
        ids=np.concatenate([c.ids for c in caches]),
        provenance=np.concatenate([c.provenance for c in caches]),
        detection=np.concatenate([c.detection for c in caches]),
        vectors=np.concatenate([c.vectors for c in caches], axis=0),
    )


def export_embeddings(cache: EmbeddingCache, path) -> None:
    sections = [
        Section(
            tag=SECTION_IMAGE,
            dim=cache.dim,
            ids=cache.ids,
            provenance=cache.provenance,
            detection=cache.detection,
            vectors=cache.vectors,
        )
    ]
    if cache.token_vectors is not None:
        n_tok = len(cache.token_ids)
        sections.append(
            Section(
                tag=SECTION_TOKEN,
                dim=cache.token_dim,
                ids=cache.token_ids,
                provenance=np.zeros(n_tok, dtype=np.uint8),
                detection=np.zeros(n_tok, dtype=np.uint8),
                vectors=cache.token_vectors,
            )
        )
    write_container(path, sections)


def import_embeddings(path, expected_dim: int | None = None) -> EmbeddingCache:
    """Read an embedding cache, re-normalizing drifted image vectors.

    Vectors whose L2 norm deviates from 1 by more than 1e-3 are rescaled and
    counted in ``renormalized``; in-tolerance vectors are kept bit-exact.
    """
    sections = read_container(path)
    image_secs = [s for s in sections if s.tag == SECTION_IMAGE]
    token_secs = [s for s in sections if s.tag == SECTION_TOKEN]
    unknown = [s.tag for s in sections if s.tag not in (SECTION_IMAGE, SECTION_TOKEN)]
    if unknown:
        raise CacheFormatError(f"unexpected section tags {unknown} in an embedding cache")
    if not image_secs:
        raise CacheFormatError("embedding cache has no image-embedding section")
    for group, name in ((image_secs, "image"), (token_secs, "token")):
        if len({s.dim for s in group}) > 1:
            raise CacheFormatError(f"dimension mismatch across {name} sections")
    dim = image_secs[0].dim
    if expected_dim is not None and dim != expected_dim:
        raise CacheFormatError(f"dimension mismatch: file has {dim}, expected {expected_dim}")

    vectors = np.concatenate([s.vectors for s in image_secs], axis=0)
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    drifted = np.abs(norms - 1.0) > 1e-3
    if np.any(norms[drifted] <= 1e-12):
        raise CacheFormatError("embedding cache contains a zero-norm vector")
    if np.any(drifted):
        vectors = vectors.copy()
        vectors[drifted] = (vectors[drifted].astype(np.float64) / norms[drifted, None]).astype(np.float32)

    cache = EmbeddingCache(
        dim=dim,
        ids=np.concatenate([s.ids for s in image_secs]),
        provenance=np.concatenate([s.provenance for s in image_secs]),
        detection=np.concatenate([s.detection for s in image_secs]),
        vectors=vectors,
        renormalized=int(drifted.sum()),
    )
    if token_secs:
        cache.token_dim = token_secs[0].dim
        cache.token_ids = np.concatenate([s.ids for s in token_secs])
        cache.token_vectors = np.concatenate([s.vectors for s in token_secs], axis=0)
    return cache
