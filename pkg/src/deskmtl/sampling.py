"""Dataset splits and fixed-size per-task sub-batch sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BATCH = 32


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    dev: np.ndarray
    test: np.ndarray
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.dev), len(self.test)

    def __getitem__(self, name: str) -> np.ndarray:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


def split_dataset(n: int, seed: int) -> DatasetSplit:
    """Seeded permutation cut into floor(0.70 n) / floor(0.15 n) / remainder."""
    if n < 10:
        raise ValueError(f"split_dataset needs n >= 10, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    a = (70 * n) // 100
    b = a + (15 * n) // 100
    return DatasetSplit(perm[:a], perm[a:b], perm[b:], seed)


@dataclass
class TaskIterator:
    """Endless shuffled stream over one task's training indices.

    Each epoch is a fresh permutation; a sub-batch that crosses an epoch
    boundary is topped up from the next epoch so it always has ``b`` items.
    """

    task_id: str
    indices: np.ndarray
    seed: int = 0
    cursor: int = 0
    epoch: int = 0
    drawn: int = 0
    rng: np.random.Generator = field(init=False, repr=False)
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size == 0:
            raise ValueError(f"task {self.task_id!r}: empty training split")
        self.rng = np.random.default_rng(self.seed)
        self.order = self.rng.permutation(self.indices)

    def _new_epoch(self) -> None:
        self.epoch += 1
        self.cursor = 0
        self.order = self.rng.permutation(self.indices)


def next_subbatch(it: TaskIterator, b: int = DEFAULT_BATCH) -> np.ndarray:
    if b < 1:
        raise ValueError("sub-batch size must be >= 1")
    out = np.empty(b, dtype=np.int64)
    filled = 0
    while filled < b:
        if it.cursor >= it.order.size:
            it._new_epoch()
        take = min(b - filled, it.order.size - it.cursor)
        out[filled:filled + take] = it.order[it.cursor:it.cursor + take]
        it.cursor += take
        filled += take
    it.drawn += b
    return out


def sequential_batches(indices: np.ndarray, b: int):
    """Unshuffled pass over dev/test indices."""
    for i in range(0, len(indices), b):
        yield indices[i:i + b]
