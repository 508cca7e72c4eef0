"""Coverage-transition scoring with a frequency penalty.

A point reached by appending a block is worth ``alpha`` if the prefix already
reached it and ``adjusted_beta`` otherwise, where ``adjusted_beta`` shrinks
with the number of earlier test cases that covered the point.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping


@dataclass(frozen=True)
class ScoringParams:
    alpha: float = 0.1
    beta_w: float = 1.0
    factor: float = 1e-5

    def __post_init__(self):
        if not 0 < self.alpha < self.beta_w:
            raise ValueError("need 0 < alpha < beta_w")
        if self.factor < 0:
            raise ValueError("factor must be non-negative")


@dataclass
class FrequencyMap:
    """Per-point count of committed test cases that covered the point."""

    counts: Counter = field(default_factory=Counter)

    def __getitem__(self, point: int) -> int:
        return self.counts.get(point, 0)

    def copy(self) -> "FrequencyMap":
        return FrequencyMap(Counter(self.counts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "count"])
        for pid in sorted(self.counts):
            w.writerow([pid, self.counts[pid]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FrequencyMap":
        rows = list(csv.reader(io.StringIO(text)))
        return cls(Counter({int(a): int(b) for a, b in rows[1:] if a}))


@dataclass(frozen=True)
class TransitionScore:
    value: float
    new_points: frozenset
    prior_points: frozenset


def adjusted_beta(point: int, freq: FrequencyMap | Mapping[int, int], p: ScoringParams = ScoringParams()) -> float:
    f = freq[point] if isinstance(freq, FrequencyMap) else freq.get(point, 0)
    return max(p.beta_w - f * p.factor, p.alpha)


def score_transition(H: Iterable[int], cov_concat: Iterable[int], freq: FrequencyMap,
                     p: ScoringParams = ScoringParams()) -> TransitionScore:
    prior = frozenset(H)
    G = frozenset(cov_concat)
    revisited = len(G & prior)
    # sum in sorted order so the float result does not depend on set layout
    fresh = sum(adjusted_beta(x, freq, p) for x in sorted(G - prior))
    return TransitionScore(revisited * p.alpha + fresh, G, prior)


def commit_test_case(coverage: Iterable[int], freq: FrequencyMap) -> FrequencyMap:
    """Count one more test case for every point in ``coverage`` (in place)."""
    freq.counts.update(set(coverage))
    return freq
