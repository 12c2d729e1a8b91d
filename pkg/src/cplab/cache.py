"""Fixed-capacity pseudo-label cache with curriculum-controlled eviction.

Entries are whole batches: eviction statistics are pooled over every
utterance of a batch and the batch is kept or evicted as a unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace
from typing import Sequence

import numpy as np

from .metrics import batch_ter, split_words

POUT_KINDS = ("constant", "scheduled", "dynamic", "dynamic_then_one")
F_CHOICES = ("identity", "one_minus")


class CacheError(RuntimeError):
    """Misuse of the cache protocol (insert when full, draw when not full, ...)."""


@dataclass
class CacheEntry:
    batch_id: int
    utterance_ids: list[str]
    pls: list[list[int]]
    created_step: int

    def __post_init__(self):
        if len(self.utterance_ids) != len(self.pls):
            raise ValueError("each utterance needs exactly one pseudo-label")

    def to_dict(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "utterance_ids": list(self.utterance_ids),
            "pls": [list(p) for p in self.pls],
            "created_step": self.created_step,
        }


@dataclass(frozen=True)
class PoutStrategy:
    """How the eviction probability of a drawn batch is chosen.

    ``constant``          always ``p``
    ``scheduled``         ``p1`` before ``switch_step``, ``p2`` from it on
    ``dynamic``           ``f(pooled distance(old PLs, new PLs))``, clamped to [0, 1]
    ``dynamic_then_one``  ``dynamic`` before ``switch_step``, then 1
    """

    kind: str = "dynamic_then_one"
    p: float = 1.0
    p1: float = 0.1
    p2: float = 1.0
    switch_step: int = 0
    f: str = "identity"
    rho: str = "ter"

    def __post_init__(self):
        if self.kind not in POUT_KINDS:
            raise ValueError(f"unknown p_out kind {self.kind!r}")
        if self.f not in F_CHOICES:
            raise ValueError(f"unknown f {self.f!r}; choose from {F_CHOICES}")
        if self.rho not in ("ter", "wer"):
            raise ValueError(f"unknown distance {self.rho!r}")
        for name in ("p", "p1", "p2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.switch_step < 0:
            raise ValueError("switch_step must be >= 0")

    @property
    def is_dynamic(self) -> bool:
        return self.kind in ("dynamic", "dynamic_then_one")

    @classmethod
    def parse(cls, text: str, default_switch: int = 0) -> "PoutStrategy":
        """Parse ``constant:P``, ``scheduled:P1:P2[:K]``, ``dynamic:F[:RHO]`` or
        ``dynamic_then_one:F[:K[:RHO]]``; a missing ``K`` becomes ``default_switch``."""
        parts = str(text).split(":")
        kind, args = parts[0], parts[1:]
        try:
            if kind == "constant" and len(args) == 1:
                return cls(kind, p=float(args[0]))
            if kind == "scheduled" and len(args) in (2, 3):
                k = int(args[2]) if len(args) == 3 else default_switch
                return cls(kind, p1=float(args[0]), p2=float(args[1]), switch_step=k)
            if kind == "dynamic" and len(args) in (1, 2):
                return cls(kind, f=args[0], rho=args[1] if len(args) == 2 else "ter")
            if kind == "dynamic_then_one" and 1 <= len(args) <= 3:
                k = int(args[1]) if len(args) >= 2 else default_switch
                return cls(kind, f=args[0], switch_step=k,
                           rho=args[2] if len(args) == 3 else "ter")
        except ValueError as exc:
            raise ValueError(f"bad p_out strategy {text!r}: {exc}") from None
        raise ValueError(f"bad p_out strategy {text!r}")

    def __str__(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.p:g}"
        if self.kind == "scheduled":
            return f"scheduled:{self.p1:g}:{self.p2:g}:{self.switch_step}"
        if self.kind == "dynamic":
            return f"dynamic:{self.f}:{self.rho}"
        return f"dynamic_then_one:{self.f}:{self.switch_step}:{self.rho}"


def pl_distance(
    old_pls: Sequence[Sequence[int]],
    new_pls: Sequence[Sequence[int]],
    rho: str = "ter",
    word_boundary: int = 0,
) -> float:
    """Pooled error rate of the new PLs measured against the old ones."""
    if len(old_pls) != len(new_pls):
        raise ValueError(f"{len(old_pls)} old PLs but {len(new_pls)} new PLs")
    if rho == "wer":
        return batch_ter([split_words(p, word_boundary) for p in old_pls],
                         [split_words(p, word_boundary) for p in new_pls])
    return batch_ter(old_pls, new_pls)


def raw_pout(strategy: PoutStrategy, distance: float) -> float:
    """``f(distance)`` before clamping."""
    return distance if strategy.f == "identity" else 1.0 - distance


def compute_pout(
    strategy: PoutStrategy,
    step: int,
    old_pls: Sequence[Sequence[int]] | None = None,
    new_pls: Sequence[Sequence[int]] | None = None,
    word_boundary: int = 0,
) -> float:
    if old_pls is not None and new_pls is not None and len(old_pls) != len(new_pls):
        raise ValueError(f"{len(old_pls)} old PLs but {len(new_pls)} new PLs")
    kind = strategy.kind
    if kind == "constant":
        return strategy.p
    if kind == "scheduled":
        return strategy.p1 if step < strategy.switch_step else strategy.p2
    if kind == "dynamic_then_one" and step >= strategy.switch_step:
        return 1.0
    if old_pls is None or new_pls is None:
        raise ValueError(f"{kind} p_out needs old and new PLs")
    dist = pl_distance(old_pls, new_pls, strategy.rho, word_boundary)
    return float(np.clip(raw_pout(strategy, dist), 0.0, 1.0))


@dataclass
class Cache:
    capacity: int
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    slots: list[CacheEntry | None] = field(default_factory=list)
    _vacant: int | None = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("cache capacity must be >= 1")

    def __len__(self) -> int:
        return sum(e is not None for e in self.slots)

    @property
    def full(self) -> bool:
        return len(self) == self.capacity

    @property
    def entries(self) -> list[CacheEntry]:
        return [e for e in self.slots if e is not None]

    def insert(self, entry: CacheEntry) -> "Cache":
        if self._vacant is not None:
            self.slots[self._vacant] = entry
            self._vacant = None
        elif len(self.slots) < self.capacity:
            self.slots.append(entry)
        else:
            raise CacheError(f"cache is full ({self.capacity} entries)")
        return self

    def draw(self, rng: np.random.Generator | None = None) -> CacheEntry:
        """Remove and return a uniformly chosen entry, leaving its slot vacant."""
        if not self.full:
            raise CacheError(f"draw needs a full cache, have {len(self)}/{self.capacity}")
        rng = self.rng if rng is None else rng
        i = int(rng.integers(self.capacity))
        entry = self.slots[i]
        self.slots[i] = None
        self._vacant = i
        return entry

    def readmit(
        self,
        entry: CacheEntry,
        pls_strategy: str = "new",
        fresh_pls: Sequence[Sequence[int]] | None = None,
        step: int | None = None,
    ) -> "Cache":
        """Put a drawn batch back, keeping (``old``) or refreshing (``new``) its PLs."""
        if self._vacant is None:
            raise CacheError("readmit without a preceding draw")
        if pls_strategy == "old":
            return self.insert(entry)
        if pls_strategy != "new":
            raise ValueError(f"unknown PL write-back {pls_strategy!r}")
        if fresh_pls is None or step is None:
            raise ValueError("new write-back needs fresh_pls and step")
        return self.insert(dc_replace(entry, pls=[list(p) for p in fresh_pls], created_step=step))

    def replace(self, fresh_entry: CacheEntry) -> "Cache":
        if self._vacant is None:
            raise CacheError("replace without a preceding draw")
        return self.insert(fresh_entry)

    def dump(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]
