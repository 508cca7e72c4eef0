"""Rolling FIFO memory of exemplar blocks and preference pairs, sampled with
exponential recency weighting."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class OutOfOrder(ValueError):
    pass


class Empty(LookupError):
    pass


@dataclass(frozen=True)
class Lineage:
    """A chain of blocks (token sequences) plus the register seed shared by
    every execution of the chain."""

    blocks: tuple[tuple[int, ...], ...]
    reg_seed: int
    lineage_id: int = 0

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def last(self) -> tuple[int, ...]:
        return self.blocks[-1]

    def extend(self, block: Sequence[int], lineage_id: int | None = None) -> "Lineage":
        return Lineage(self.blocks + (tuple(block),), self.reg_seed,
                       self.lineage_id if lineage_id is None else lineage_id)

    def to_json(self) -> dict:
        return {"blocks": [list(b) for b in self.blocks], "reg_seed": self.reg_seed, "id": self.lineage_id}

    @classmethod
    def from_json(cls, d: dict) -> "Lineage":
        return cls(tuple(tuple(b) for b in d["blocks"]), d["reg_seed"], d["id"])


@dataclass(frozen=True)
class PreferencePair:
    winner: tuple[int, ...]
    loser: tuple[int, ...]
    iteration: int = 0
    stage: str = "GRM"

    def __post_init__(self):
        if not self.winner or not self.loser:
            raise ValueError("pair members must be non-empty")
        if tuple(self.winner) == tuple(self.loser):
            raise ValueError("winner equals loser")

    def to_json(self) -> dict:
        return {"w": list(self.winner), "l": list(self.loser), "it": self.iteration, "stage": self.stage}

    @classmethod
    def from_json(cls, d: dict) -> "PreferencePair":
        return cls(tuple(d["w"]), tuple(d["l"]), d["it"], d["stage"])


@dataclass
class MemoryEntry:
    iteration: int
    blocks: list  # exemplars (Lineage objects or raw items)
    pairs: list[PreferencePair] = field(default_factory=list)

    def to_json(self) -> dict:
        blocks = [b.to_json() if isinstance(b, Lineage) else b for b in self.blocks]
        return {"iteration": self.iteration, "blocks": blocks, "pairs": [p.to_json() for p in self.pairs]}

    @classmethod
    def from_json(cls, d: dict) -> "MemoryEntry":
        blocks = [Lineage.from_json(b) if isinstance(b, dict) and "reg_seed" in b else b for b in d["blocks"]]
        return cls(d["iteration"], blocks, [PreferencePair.from_json(p) for p in d["pairs"]])


class FuzzMemory:
    def __init__(self, window: int = 10, recency_lambda: float = 0.9):
        if window < 1:
            raise ValueError("window must be >= 1")
        if not 0 < recency_lambda <= 1:
            raise ValueError("recency_lambda must be in (0, 1]")
        self.window_size = window
        self.recency_lambda = recency_lambda
        self.entries: deque[MemoryEntry] = deque()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def iterations(self) -> list[int]:
        return [e.iteration for e in self.entries]

    def update(self, entry: MemoryEntry) -> "FuzzMemory":
        if self.entries and entry.iteration <= self.entries[-1].iteration:
            raise OutOfOrder(f"iteration {entry.iteration} after {self.entries[-1].iteration}")
        if len(self.entries) == self.window_size:
            self.entries.popleft()
        self.entries.append(entry)
        return self

    def entry_weights(self, attr: str = "blocks") -> tuple[list[MemoryEntry], np.ndarray]:
        """Entries holding at least one item of ``attr`` and their normalized
        selection weights ``lambda ** age``."""
        if not self.entries:
            raise Empty("memory is empty")
        newest = self.entries[-1].iteration
        live = [e for e in self.entries if getattr(e, attr)]
        if not live:
            raise Empty(f"no stored {attr}")
        w = np.array([self.recency_lambda ** (newest - e.iteration) for e in live], dtype=float)
        return live, w / w.sum()

    def _sample(self, attr: str, k: int, rng: np.random.Generator) -> list:
        live, w = self.entry_weights(attr)
        picks = rng.choice(len(live), size=k, p=w)
        out = []
        for i in picks:
            items = getattr(live[i], attr)
            out.append(items[int(rng.integers(len(items)))])
        return out

    def sample_blocks(self, k: int, rng: np.random.Generator) -> list:
        return self._sample("blocks", k, rng)

    def sample_pairs(self, k: int, rng: np.random.Generator) -> list[PreferencePair]:
        return self._sample("pairs", k, rng)

    def dumps(self) -> str:
        return "".join(json.dumps(e.to_json(), separators=(",", ":")) + "\n" for e in self.entries)

    @classmethod
    def loads(cls, text: str, window: int = 10, recency_lambda: float = 0.9) -> "FuzzMemory":
        mem = cls(window, recency_lambda)
        for line in text.splitlines():
            if line.strip():
                mem.update(MemoryEntry.from_json(json.loads(line)))
        return mem
