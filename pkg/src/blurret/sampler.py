"""Blur-level-windowed selection of contrastive tuples (BLISS)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from blurret.errors import DomainError, SamplingExhausted


@dataclass
class SamplerConfig:
    radius: int = 5
    n_pos: int = 1
    n_neg: int = 5

    def __post_init__(self):
        if self.radius < 0 or self.n_pos < 1 or self.n_neg < 1:
            raise DomainError(f"invalid sampler config {self}")


@dataclass
class ContrastiveTuple:
    """Indices into the pool; ``radius`` is the window actually used."""

    query: int
    positives: list[int]
    negatives: list[int]
    radius: int

    @property
    def members(self):
        return [self.query, *self.positives, *self.negatives]


class RecordPool:
    """Training records indexed by object and blur level."""

    def __init__(self, records):
        self.records = list(records)
        self.object_ids = np.array([r.object_id for r in self.records])
        self.bls = np.array([r.bl for r in self.records])
        self.min_bl = int(self.bls.min())
        self.max_bl = int(self.bls.max())

    def __len__(self):
        return len(self.records)

    def window(self, bl, radius):
        lo = max(bl - radius, self.min_bl)
        hi = min(bl + radius, self.max_bl)
        return (self.bls >= lo) & (self.bls <= hi)


def _draw(rng, candidates, n):
    replace = len(candidates) < n
    return [int(i) for i in rng.choice(candidates, size=n, replace=replace)]


def select_tuple(query, pool, cfg, rng):
    """Positives and negatives whose blur level lies within ``radius`` of the query's.

    When the window holds no positive or no negative, the radius grows by one
    until it spans the pool's whole blur range.
    """
    obj = pool.object_ids[query]
    bl = int(pool.bls[query])
    same = pool.object_ids == obj
    not_query = np.arange(len(pool)) != query
    full = pool.max_bl - pool.min_bl
    radius = cfg.radius
    while True:
        in_window = pool.window(bl, radius)
        pos = np.flatnonzero(in_window & same & not_query)
        neg = np.flatnonzero(in_window & ~same)
        if pos.size and neg.size:
            break
        if radius >= full:
            raise SamplingExhausted(f"no positive/negative for query {query} (object {obj})")
        radius += 1
    return ContrastiveTuple(query, _draw(rng, pos, cfg.n_pos), _draw(rng, neg, cfg.n_neg), radius)


def epoch_batches(pool, cfg, seed, epoch=0, batch_size=32):
    """Every record is a query exactly once per epoch, in seeded random order."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pool))
    for i in range(0, len(order), batch_size):
        yield [select_tuple(int(q), pool, cfg, rng) for q in order[i : i + batch_size]]


def tuple_violations(tup, pool, cfg):
    """Invariant violations of one tuple; empty when it is valid."""
    problems = []
    q_obj, q_bl = pool.object_ids[tup.query], pool.bls[tup.query]
    if len(tup.positives) != cfg.n_pos or len(tup.negatives) != cfg.n_neg:
        problems.append("wrong tuple size")
    lo = max(q_bl - tup.radius, pool.min_bl)
    hi = min(q_bl + tup.radius, pool.max_bl)
    for p in tup.positives:
        if p == tup.query:
            problems.append("query reused as positive")
        if pool.object_ids[p] != q_obj:
            problems.append("positive from another object")
    for n in tup.negatives:
        if pool.object_ids[n] == q_obj:
            problems.append("negative from the query object")
    for i in tup.positives + tup.negatives:
        if not lo <= pool.bls[i] <= hi:
            problems.append("blur level outside window")
    return problems
