"""Geo-referenced embedding database and exact top-k retrieval.

Search is a full scan over inner products of unit vectors (cosine scores);
no approximate structures, so rankings are exactly reproducible. Ties are
broken by ascending record id.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptyIndex,
    IoError,
    MalformedFile,
    MalformedHeader,
    VersionMismatch,
)

INDEX_MAGIC = b"SARI"
INDEX_VERSION = 1
_INDEX_HEAD = struct.Struct("<4sIIQ")  # magic, version, dim, count


@dataclass(frozen=True)
class GeoFootprint:
    """Axis-aligned geographic rectangle covered by a patch."""

    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError(f"degenerate footprint {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.min_x, self.min_y, self.max_x, self.max_y)


@dataclass(frozen=True)
class PatchRecord:
    """One database entry: id, geo footprint, unit descriptor, source scene."""

    id: str
    footprint: GeoFootprint
    vector: np.ndarray
    source_scene: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32)
        if v.ndim != 1:
            raise DimensionMismatch(f"record {self.id}: vector must be 1-D")
        n = float(np.linalg.norm(v.astype(np.float64)))
        if abs(n - 1.0) > 1e-5:
            raise ValueError(f"record {self.id}: vector norm {n:.6f} is not 1")
        object.__setattr__(self, "vector", v)


class EmbeddingIndex:
    """Ordered collection of PatchRecords, searchable by inner product."""

    def __init__(self, dim: int) -> None:
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self.dim = dim
        self.records: list[PatchRecord] = []
        self._by_id: dict[str, PatchRecord] = {}
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def add(self, record: PatchRecord) -> None:
        if record.vector.shape != (self.dim,):
            raise DimensionMismatch(
                f"record {record.id}: dim {record.vector.shape[0]} != index dim {self.dim}")
        if record.id in self._by_id:
            raise DuplicateId(f"id {record.id!r} already present")
        self.records.append(record)
        self._by_id[record.id] = record
        self._matrix = None

    def get(self, record_id: str) -> PatchRecord | None:
        return self._by_id.get(record_id)

    def _stacked(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([r.vector for r in self.records])
        return self._matrix

    def query(self, q: np.ndarray, k: int) -> list[tuple[str, float]]:
        """min(k, size) results sorted by score descending, then id ascending."""
        if len(self.records) == 0:
            raise EmptyIndex("cannot query an empty index")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = np.asarray(q, dtype=np.float32)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query dim {q.shape} != index dim {self.dim}")

        scores = self._stacked().astype(np.float64) @ q.astype(np.float64)
        ids = np.array([r.id for r in self.records])
        order = np.lexsort((ids, -scores))[:min(k, len(self.records))]
        return [(self.records[i].id, float(scores[i])) for i in order]

    # --- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        blob = bytearray(_INDEX_HEAD.pack(INDEX_MAGIC, INDEX_VERSION,
                                          self.dim, len(self.records)))
        for r in self.records:
            rid = r.id.encode("utf-8")
            scene = r.source_scene.encode("utf-8")
            blob += struct.pack("<H", len(rid)) + rid
            blob += struct.pack("<H", len(scene)) + scene
            blob += struct.pack("<4d", *r.footprint.as_tuple())
            blob += r.vector.astype("<f4").tobytes()
        try:
            Path(path).write_bytes(bytes(blob))
        except OSError as e:
            raise IoError(f"cannot write index to {path}: {e}") from e

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise IoError(f"cannot read index from {path}: {e}") from e

        if len(raw) < _INDEX_HEAD.size:
            raise MalformedHeader(f"{path}: index header truncated")
        magic, version, dim, count = _INDEX_HEAD.unpack_from(raw)
        if magic != INDEX_MAGIC:
            raise MalformedHeader(f"{path}: bad magic {magic!r}")
        if version != INDEX_VERSION:
            raise VersionMismatch(f"{path}: unsupported index version {version}")

        index = cls(dim)
        pos = _INDEX_HEAD.size
        for i in range(count):
            try:
                rid, pos = _read_str(raw, pos)
                scene, pos = _read_str(raw, pos)
                if len(raw) < pos + 32 + 4 * dim:
                    raise MalformedFile(f"{path}: record {i} truncated")
                fp = struct.unpack_from("<4d", raw, pos)
                pos += 32
                vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).copy()
                pos += 4 * dim
                index.add(PatchRecord(rid, GeoFootprint(*fp), vec, scene))
            except (ValueError, DimensionMismatch) as e:
                raise MalformedFile(f"{path}: record {i} invalid: {e}") from e
        if pos != len(raw):
            raise MalformedFile(f"{path}: {len(raw) - pos} trailing bytes")
        return index


def _read_str(raw: bytes, pos: int) -> tuple[str, int]:
    if len(raw) < pos + 2:
        raise MalformedFile("string length field truncated")
    (n,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    if len(raw) < pos + n:
        raise MalformedFile("string payload truncated")
    return raw[pos:pos + n].decode("utf-8"), pos + n
