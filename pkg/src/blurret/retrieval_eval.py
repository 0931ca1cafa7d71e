"""Exact nearest-neighbour retrieval and mAP protocols."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from blurret.errors import DomainError, EmptyIndex, ShapeMismatch

LEVELS = (1, 2, 3, 4, 5, 6)

REPORT_SCHEMA = {
    "type": "object",
    "required": ["overall", "per_query_bl", "skipped_queries", "cutoff", "n_queries", "n_database"],
    "properties": {
        "overall": {"type": ["number", "null"]},
        "per_query_bl": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": ["number", "null"]}},
            "additionalProperties": False,
        },
        "skipped_queries": {"type": "integer", "minimum": 0},
        "cutoff": {"oneOf": [{"const": "all"}, {"type": "integer", "minimum": 1}]},
        "n_queries": {"type": "integer", "minimum": 0},
        "n_database": {"type": "integer", "minimum": 0},
        "matrix": {
            "type": "array",
            "items": {"type": "array", "items": {"type": ["number", "null"]}},
        },
        "range": {"type": ["number", "null"]},
        "std": {"type": ["number", "null"]},
    },
}


@dataclass
class DescriptorStore:
    ids: list[str]
    matrix: np.ndarray
    object_ids: np.ndarray
    bls: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.object_ids = np.asarray(self.object_ids, dtype=np.int64)
        self.bls = np.asarray(self.bls, dtype=np.int64)
        n = len(self.ids)
        if self.matrix.shape[0] != n or len(self.object_ids) != n or len(self.bls) != n:
            raise ShapeMismatch("ids, matrix and metadata lengths differ")
        if len(set(self.ids)) != n:
            raise ValueError("store ids must be unique")
        if n and np.abs(np.linalg.norm(self.matrix, axis=1) - 1.0).max() > 1e-6:
            raise DomainError("store rows must be unit norm")
        # rank of each id in ascending order, used to break score ties
        self._id_rank = np.empty(n, dtype=np.int64)
        self._id_rank[np.argsort(np.asarray(self.ids, dtype=object), kind="stable")] = np.arange(n)

    @classmethod
    def from_raw(cls, ids, raw, object_ids, bls):
        raw = np.asarray(raw, dtype=np.float64)
        return cls(list(ids), raw / np.linalg.norm(raw, axis=1, keepdims=True), object_ids, bls)

    def __len__(self):
        return len(self.ids)

    def subset(self, mask):
        idx = np.flatnonzero(mask)
        return DescriptorStore([self.ids[i] for i in idx], self.matrix[idx], self.object_ids[idx], self.bls[idx])

    def rank(self, scores):
        """Indices by descending score, ties by ascending id."""
        return np.lexsort((self._id_rank, -scores))


def search(store, query, k=None):
    """Exact top-``k`` (all when ``None``) as ``(id, score)`` pairs."""
    if len(store) == 0:
        raise EmptyIndex("search on an empty store")
    query = np.asarray(query, dtype=np.float64)
    if abs(np.linalg.norm(query) - 1.0) > 1e-6:
        raise DomainError("query must be unit norm")
    scores = store.matrix @ query
    order = store.rank(scores)
    if k is not None:
        order = order[:k]
    return [(store.ids[i], float(scores[i])) for i in order]


def average_precision(relevance, n_positives, cutoff=None, denominator="min"):
    """AP of a binary relevance list in rank order.

    With a cutoff, only the first ``cutoff`` ranks count and the sum is divided
    by ``min(n_positives, cutoff)``, or by ``n_positives`` when
    ``denominator="positives"``.
    """
    if n_positives < 1:
        raise DomainError("average precision needs at least one positive")
    rel = np.asarray(relevance, dtype=bool)
    if cutoff is not None:
        rel = rel[:cutoff]
    hits = np.flatnonzero(rel)
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    if cutoff is None or denominator == "positives":
        norm = n_positives
    else:
        norm = min(n_positives, cutoff)
    return float(precision_at_hits.sum() / norm)


def _parse_cutoff(cutoff):
    if cutoff in (None, "all"):
        return None
    return int(cutoff)


def query_aps(queries, database, cutoff=None, denominator="min"):
    """Per-query AP; NaN where the query's object has no database image."""
    if len(database) == 0:
        raise EmptyIndex("empty database")
    if set(queries.ids) & set(database.ids):
        raise ValueError("query and database ids overlap")
    cutoff = _parse_cutoff(cutoff)
    sims = queries.matrix @ database.matrix.T
    out = np.full(len(queries), np.nan)
    for i in range(len(queries)):
        relevant = database.object_ids == queries.object_ids[i]
        n_pos = int(relevant.sum())
        if n_pos == 0:
            continue
        order = database.rank(sims[i])
        out[i] = average_precision(relevant[order], n_pos, cutoff, denominator)
    return out


def _mean(values):
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else None


def evaluate(queries, database, cutoff=None, denominator="min"):
    """Overall mAP and mAP per query blur level."""
    aps = query_aps(queries, database, cutoff, denominator)
    levels = sorted(set(LEVELS) | set(int(b) for b in queries.bls))
    return {
        "overall": _mean(aps),
        "per_query_bl": {str(bl): _mean(aps[queries.bls == bl]) for bl in levels},
        "skipped_queries": int(np.isnan(aps).sum()),
        "cutoff": "all" if _parse_cutoff(cutoff) is None else int(cutoff),
        "n_queries": len(queries),
        "n_database": len(database),
    }


@dataclass
class BlurMatrix:
    """mAP cells indexed ``[database BL - 1, query BL - 1]``; NaN marks absent cells."""

    cells: np.ndarray
    levels: tuple[int, ...] = LEVELS

    @property
    def present(self):
        return self.cells[~np.isnan(self.cells)]

    @property
    def range(self):
        vals = self.present
        return float(vals.max() - vals.min()) if vals.size else None

    @property
    def std(self):
        vals = self.present
        return float(vals.std()) if vals.size else None


def blur_matrix(queries, database, cutoff=None, denominator="min", levels=LEVELS):
    cells = np.full((len(levels), len(levels)), np.nan)
    absent = []
    for i, d_bl in enumerate(levels):
        db = database.subset(database.bls == d_bl)
        for j, q_bl in enumerate(levels):
            qs = queries.subset(queries.bls == q_bl)
            if len(db) == 0 or len(qs) == 0:
                absent.append((d_bl, q_bl))
                continue
            value = _mean(query_aps(qs, db, cutoff, denominator))
            if value is None:
                absent.append((d_bl, q_bl))
            else:
                cells[i, j] = value
    if absent:
        warnings.warn(f"blur matrix cells without data (D, Q): {absent}", stacklevel=2)
    return BlurMatrix(cells, tuple(levels))


def report(queries, database, cutoff=None, per_bl_matrix=False, denominator="min"):
    out = evaluate(queries, database, cutoff, denominator)
    if per_bl_matrix:
        bm = blur_matrix(queries, database, cutoff, denominator)
        out["matrix"] = [[None if math.isnan(v) else float(v) for v in row] for row in bm.cells]
        out["range"] = bm.range
        out["std"] = bm.std
    return out


# -- descriptor files --------------------------------------------------------

DESCRIPTOR_MAGIC = b"BRDESC01"
DESCRIPTOR_VERSION = 1


def write_descriptors(path, store):
    """Binary store: magic, u32 version, u32 d, u32 n, then per record
    ``u16 id length, id bytes, i64 object_id, i32 bl, f32[d]`` (little-endian)."""
    n, d = store.matrix.shape
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<III", DESCRIPTOR_VERSION, d, n))
        rows = store.matrix.astype("<f4")
        for i in range(n):
            key = store.ids[i].encode()
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<qi", int(store.object_ids[i]), int(store.bls[i])))
            fh.write(rows[i].tobytes())


def read_descriptors(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path} is not a descriptor file")
    version, d, n = struct.unpack_from("<III", data, 8)
    if version != DESCRIPTOR_VERSION:
        raise ValueError(f"unsupported descriptor version {version}")
    off = 20
    ids, objs, bls = [], [], []
    matrix = np.empty((n, d), dtype=np.float32)
    for i in range(n):
        (klen,) = struct.unpack_from("<H", data, off)
        off += 2
        ids.append(data[off : off + klen].decode())
        off += klen
        obj, bl = struct.unpack_from("<qi", data, off)
        off += 12
        matrix[i] = np.frombuffer(data, dtype="<f4", count=d, offset=off)
        off += 4 * d
        objs.append(obj)
        bls.append(bl)
    return DescriptorStore(ids, matrix.astype(np.float64), objs, bls)
