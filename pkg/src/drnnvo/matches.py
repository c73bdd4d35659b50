"""Matched feature pairs shared by the feature, dataset and network code."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MatchedFeatureSet:
    """Pairs ``(f_prev[i], f_curr[i])`` between frames ``frames = (k-1, k)``.

    ``prev`` and ``curr`` are (N, 2) pixel arrays in (u, v) order.
    ``corrupted`` flags injected mismatches (synthetic data only).
    ``prev_idx``/``curr_idx`` point back into the source feature sets when
    the pairs came from the matcher.
    """

    prev: np.ndarray
    curr: np.ndarray
    frames: tuple[int, int] = (0, 1)
    corrupted: np.ndarray | None = None
    prev_idx: np.ndarray | None = None
    curr_idx: np.ndarray | None = None

    def __post_init__(self):
        prev = np.array(self.prev, dtype=float).reshape(-1, 2)
        curr = np.array(self.curr, dtype=float).reshape(-1, 2)
        if prev.shape != curr.shape:
            raise ValueError("prev and curr must have the same length")
        corrupted = (np.zeros(len(prev), dtype=bool) if self.corrupted is None
                     else np.array(self.corrupted, dtype=bool).reshape(-1))
        if len(corrupted) != len(prev):
            raise ValueError("corruption flags must align with the pairs")
        for name, arr in (("prev", prev), ("curr", curr), ("corrupted", corrupted)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("prev_idx", "curr_idx"):
            idx = getattr(self, name)
            if idx is not None:
                idx = np.array(idx, dtype=np.int64).reshape(-1)
                idx.setflags(write=False)
                object.__setattr__(self, name, idx)
        object.__setattr__(self, "frames", (int(self.frames[0]), int(self.frames[1])))

    def __len__(self):
        return len(self.prev)

    @property
    def deltas(self) -> np.ndarray:
        return self.curr - self.prev

    def subset(self, mask) -> MatchedFeatureSet:
        mask = np.asarray(mask)
        return MatchedFeatureSet(
            self.prev[mask], self.curr[mask], self.frames, self.corrupted[mask],
            None if self.prev_idx is None else self.prev_idx[mask],
            None if self.curr_idx is None else self.curr_idx[mask],
        )

    def equals(self, other: MatchedFeatureSet) -> bool:
        return (self.frames == other.frames
                and np.array_equal(self.prev, other.prev)
                and np.array_equal(self.curr, other.curr)
                and np.array_equal(self.corrupted, other.corrupted))
