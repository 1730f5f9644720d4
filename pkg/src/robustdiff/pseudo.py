"""Per-sample pseudo-condition bookkeeping and the early-stop controller."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PseudoTable:
    """One condition vector per dataset index, refined by moving averages."""

    entries: np.ndarray  # (n_samples, cond_dim)
    update_count: np.ndarray  # (n_samples,)
    reads: int = 0

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def cond_dim(self) -> int:
        return self.entries.shape[1]

    def get(self, idx) -> np.ndarray:
        self.reads += 1
        return self.entries[idx]


def init_pseudo(dataset_size: int, cond_dim: int) -> PseudoTable:
    """Every sample starts from the same all-zero condition."""
    if dataset_size < 1 or cond_dim < 1:
        raise ValueError("dataset_size and cond_dim must be positive")
    return PseudoTable(
        np.zeros((dataset_size, cond_dim)), np.zeros(dataset_size, dtype=np.int64)
    )


def ensemble_update(table: PseudoTable, idx, y_phi: np.ndarray, alpha: float) -> PseudoTable:
    """Momentum update y <- alpha * y + (1 - alpha) * y_phi, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    idx_arr = np.atleast_1d(np.asarray(idx))
    if np.any(idx_arr < 0) or np.any(idx_arr >= table.size):
        raise IndexError("pseudo-table index out of range")
    y_phi = np.asarray(y_phi, dtype=np.float64).reshape(idx_arr.size, table.cond_dim)
    if not np.all(np.isfinite(y_phi)):
        raise ValueError("pseudo-condition update must be finite")
    # Sequential so repeated indices inside one batch each take effect.
    for i, row in zip(idx_arr, y_phi):
        table.entries[i] = alpha * table.entries[i] + (1.0 - alpha) * row
        table.update_count[i] += 1
    return table


@dataclass(frozen=True)
class EarlyStopPolicy:
    budget_iters: int

    def __post_init__(self):
        if self.budget_iters < 1:
            raise ValueError("budget must be at least 1 iteration")


def should_stop(iteration: int, policy: EarlyStopPolicy) -> bool:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return iteration >= policy.budget_iters


def save_table(path, table: PseudoTable) -> None:
    with open(path, "w") as f:
        for i in range(table.size):
            vals = " ".join(repr(float(v)) for v in table.entries[i])
            f.write(f"{i} {vals}\n")


def load_table(path) -> PseudoTable:
    rows = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            rows.append((int(parts[0]), [float(v) for v in parts[1:]]))
    rows.sort()
    entries = np.array([r[1] for r in rows])
    return PseudoTable(entries, np.zeros(len(rows), dtype=np.int64))
