"""Edit distance and error-rate primitives.

All rates are pooled: total edits divided by total reference length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

__all__ = [
    "EditStats",
    "levenshtein",
    "ter",
    "batch_ter",
    "wer",
    "batch_wer",
    "split_words",
]


@dataclass(frozen=True)
class EditStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def total(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: "EditStats") -> "EditStats":
        return EditStats(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


def levenshtein(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditStats:
    """Minimal substitutions/insertions/deletions turning ``ref`` into ``hyp``.

    Uniform unit costs. Among optimal alignments the backtrace prefers
    substitutions, then deletions, then insertions, so the breakdown is
    deterministic.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    if n == 0:
        return EditStats(insertions=m, ref_len=0)
    if m == 0:
        return EditStats(deletions=n, ref_len=n)

    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        ri = ref[i - 1]
        prev = d[-1]
        row = [i] + [0] * m
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ri != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
        d.append(row)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if d[i][j] == d[i - 1][j - 1] + cost:
                subs += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditStats(subs, ins, dels, n)


def _rate(edits: int, ref_len: int, hyp_len: int) -> float:
    # empty reference: 0 for an empty hypothesis, 1 otherwise
    if ref_len == 0:
        return 0.0 if hyp_len == 0 else 1.0
    return edits / ref_len


def ter(ref: Sequence[int], hyp: Sequence[int]) -> float:
    """Token error rate. Not clipped, so values above 1 are possible."""
    stats = levenshtein(ref, hyp)
    return _rate(stats.total, stats.ref_len, len(hyp))


def batch_ter(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    """Pooled token error rate over a batch of pairs."""
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if len(refs) == 0:
        raise ValueError("batch_ter needs at least one pair")
    total = EditStats()
    hyp_len = 0
    for r, h in zip(refs, hyps):
        total = total + levenshtein(r, h)
        hyp_len += len(h)
    return _rate(total.total, total.ref_len, hyp_len)


def wer(ref_words: Sequence[Hashable], hyp_words: Sequence[Hashable]) -> float:
    """Word error rate; words may be any hashable (strings, token tuples)."""
    return ter(ref_words, hyp_words)


def batch_wer(refs: Sequence[Sequence[Hashable]], hyps: Sequence[Sequence[Hashable]]) -> float:
    return batch_ter(refs, hyps)


def split_words(tokens: Sequence[int], boundary: int) -> list[tuple[int, ...]]:
    """Split a token sequence into words at ``boundary`` tokens.

    Empty words (leading, trailing or doubled boundaries) are dropped.
    """
    words: list[tuple[int, ...]] = []
    cur: list[int] = []
    for tok in tokens:
        if tok == boundary:
            if cur:
                words.append(tuple(cur))
                cur = []
        else:
            cur.append(int(tok))
    if cur:
        words.append(tuple(cur))
    return words
