"""Unit-sequence post-processing: run-length deduplication and BPE merges."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def dedup(seq: Sequence[int]) -> list[int]:
    """Collapse runs of equal adjacent ids: [5,5,3,3,3,5] -> [5,3,5]."""
    out: list[int] = []
    for u in seq:
        u = int(u)
        if not out or out[-1] != u:
            out.append(u)
    return out


@dataclass
class MergeTable:
    base_vocab: int
    merges: list[tuple[int, int, int]] = field(default_factory=list)  # (a, b, new_id), in order

    def __post_init__(self):
        defined = self.base_vocab
        for a, b, new in self.merges:
            if new != defined:
                raise ValueError(f"merge ids must be contiguous from {self.base_vocab}; got {new}")
            if not (0 <= a < defined and 0 <= b < defined):
                raise ValueError(f"merge ({a}, {b}) references an undefined id")
            defined += 1

    @property
    def final_vocab(self) -> int:
        return self.base_vocab + len(self.merges)

    def save(self, path: str | Path) -> None:
        lines = [f"{self.base_vocab} {self.final_vocab}"]
        lines += [f"{a} {b} {n}" for a, b, n in self.merges]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MergeTable":
        rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
        base, final = map(int, rows[0])
        table = cls(base, [tuple(map(int, r)) for r in rows[1:]])
        if table.final_vocab != final:
            raise ValueError(f"{path}: header says V'={final} but table defines {table.final_vocab}")
        return table


def _pair_counts(corpus: list[list[int]]) -> Counter:
    counts: Counter = Counter()
    for seq in corpus:
        counts.update(zip(seq, seq[1:]))
    return counts


def _merge(seq: list[int], a: int, b: int, new: int) -> list[int]:
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def bpe_learn(corpus: Iterable[Sequence[int]], target_vocab: int, base_vocab: int | None = None) -> MergeTable:
    """Greedy most-frequent-pair merges.

    Stops at ``target_vocab`` or when no adjacent pair occurs at least twice.
    Equal counts go to the lexicographically smallest pair.
    """
    seqs = [[int(u) for u in s] for s in corpus]
    if base_vocab is None:
        base_vocab = 1 + max((max(s) for s in seqs if s), default=-1)
    if target_vocab <= base_vocab:
        raise ValueError(f"target vocab {target_vocab} must exceed base vocab {base_vocab}")
    merges = []
    new_id = base_vocab
    while new_id < target_vocab:
        counts = _pair_counts(seqs)
        if not counts:
            break
        (a, b), best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best < 2:
            break
        merges.append((a, b, new_id))
        seqs = [_merge(s, a, b, new_id) for s in seqs]
        new_id += 1
    return MergeTable(base_vocab, merges)


def bpe_apply(seq: Sequence[int], table: MergeTable) -> list[int]:
    out = [int(u) for u in seq]
    for u in out:
        if not 0 <= u < table.base_vocab:
            raise ValueError(f"id {u} outside base vocabulary {table.base_vocab}")
    for a, b, new in table.merges:
        out = _merge(out, a, b, new)
    return out


def bpe_invert(seq: Sequence[int], table: MergeTable) -> list[int]:
    expand = {new: (a, b) for a, b, new in table.merges}
    out: list[int] = []
    stack = [int(u) for u in reversed(list(seq))]
    while stack:
        u = stack.pop()
        if u in expand:
            a, b = expand[u]
            stack.extend((b, a))
        elif 0 <= u < table.base_vocab:
            out.append(u)
        else:
            raise ValueError(f"unknown id {u} for table with V'={table.final_vocab}")
    return out


def subword(seq: Sequence[int], table: MergeTable | None = None, deduplicate: bool = True) -> list[int]:
    """Default pipeline order: dedup first, then BPE."""
    out = dedup(seq) if deduplicate else [int(u) for u in seq]
    return bpe_apply(out, table) if table is not None else out


def as_lists(sequences) -> list[list[int]]:
    return [np.asarray(getattr(s, "units", s)).astype(int).tolist() for s in sequences]
