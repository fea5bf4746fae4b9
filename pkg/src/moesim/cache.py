"""Simulated device-resident expert cache with LRU replacement.

Residency is tracked as an ordered queue (head = least recently used).
New experts enter at the tail; on overflow the eviction scan walks from
the head, skipping pinned entries and entries belonging to the batch
being inserted, so a batch can never evict the experts it just loaded.
Existing entries are moved to the tail instead of reinserted.

Mutation is single-writer by contract: exactly one agent (the prefetch
worker or the demand-load path) touches the cache at any simulated
instant; the simulation core serializes all mutations.
"""

from __future__ import annotations

import enum
from typing import Iterable, NamedTuple


class ExpertId(NamedTuple):
    layer: int
    expert: int


class InsertKind(str, enum.Enum):
    PREFETCH = "prefetch"
    DEMAND = "demand"


class CacheError(Exception):
    """Raised on contract violations (over-large batch, pinning a non-resident)."""


class ExpertCache:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._order: dict[ExpertId, None] = {}  # insertion-ordered; head first
        self.pinned: set[ExpertId] = set()
        self.reset_stats()

    def reset_stats(self) -> None:
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.prefetch_evictions = 0
        self.prefetch_insertions = 0
        self.demand_insertions = 0

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, expert_id: ExpertId) -> bool:
        return expert_id in self._order

    @property
    def lru_order(self) -> list[ExpertId]:
        """Residents from least to most recently used."""
        return list(self._order)

    def lookup(self, expert_id: ExpertId, touch: bool) -> bool:
        """Membership test.

        With ``touch`` the probe counts toward hit/miss statistics and a
        hit refreshes recency; a non-touch probe (the prefetch skip check)
        changes nothing.
        """
        hit = expert_id in self._order
        if touch:
            if hit:
                self.hits += 1
                self._order.pop(expert_id)
                self._order[expert_id] = None
            else:
                self.misses += 1
        return hit

    def insert_batch(
        self, ids: Iterable[ExpertId], kind: InsertKind = InsertKind.PREFETCH
    ) -> list[ExpertId]:
        """Insert ``ids`` at the tail in argument order, evicting as needed.

        Victims are taken head-first among unpinned residents outside the
        batch, exactly enough to make room for the genuinely new entries.
        Already-resident ids just move to the tail. Returns the victims in
        eviction order.
        """
        batch = list(dict.fromkeys(ids))
        if len(batch) > self.capacity - len(self.pinned):
            raise CacheError(
                f"batch of {len(batch)} exceeds evictable capacity "
                f"{self.capacity - len(self.pinned)}"
            )
        batch_set = set(batch)
        new_ids = [eid for eid in batch if eid not in self._order]
        overflow = max(0, len(self._order) + len(new_ids) - self.capacity)

        evicted: list[ExpertId] = []
        if overflow:
            for eid in self._order:
                if eid in self.pinned or eid in batch_set:
                    continue
                evicted.append(eid)
                if len(evicted) == overflow:
                    break
            if len(evicted) < overflow:
                raise CacheError("not enough evictable entries for batch insert")
            for eid in evicted:
                self._order.pop(eid)
        self.evictions += len(evicted)
        if kind is InsertKind.PREFETCH:
            self.prefetch_evictions += len(evicted)
            self.prefetch_insertions += len(new_ids)
        else:
            self.demand_insertions += len(new_ids)

        for eid in batch:
            if eid in self._order:
                self._order.pop(eid)
            self._order[eid] = None
        return evicted

    def pin(self, ids: Iterable[ExpertId]) -> None:
        """Mark resident entries ineligible for eviction."""
        for eid in ids:
            if eid not in self._order:
                raise CacheError(f"cannot pin non-resident expert {eid}")
            self.pinned.add(eid)

    def unpin(self, ids: Iterable[ExpertId]) -> None:
        for eid in ids:
            self.pinned.discard(eid)

    def eviction_rate(self) -> float:
        """Prefetch-caused evictions per prefetch insertion (0/0 -> 0)."""
        if self.prefetch_insertions == 0:
            return 0.0
        return self.prefetch_evictions / self.prefetch_insertions

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0
