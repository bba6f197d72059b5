"""Section stacks: ordered sequences of same-extent grayscale sections.

Sections are loaded lazily through a per-position callable so a deep stack
never has to be resident in memory at once. Raw sections are float32 in
[0, 1]; label sections are integer ID images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = ["SectionStack", "StackError"]

KINDS = ("raw", "label")


class StackError(RuntimeError):
    """Raised for malformed stacks or failing section access."""


@dataclass
class SectionStack:
    indices: list[int]
    extents: tuple[int, int]
    kind: str
    loader: Callable[[int], np.ndarray] = field(repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StackError(f"unknown stack kind {self.kind!r}")
        self.indices = [int(i) for i in self.indices]
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise StackError("section indices must be strictly increasing")
        self.extents = (int(self.extents[0]), int(self.extents[1]))

    @property
    def depth(self) -> int:
        return len(self.indices)

    def section(self, pos: int) -> np.ndarray:
        """Section by position in the stack (not by its index label)."""
        if not 0 <= pos < self.depth:
            raise StackError(f"section position {pos} out of range for depth {self.depth}")
        try:
            arr = self.loader(pos)
        except Exception as exc:
            raise StackError(f"failed to load section index {self.indices[pos]}: {exc}") from exc
        if arr.shape != self.extents:
            raise StackError(
                f"section index {self.indices[pos]} has extents {arr.shape}, expected {self.extents}"
            )
        return arr

    def sections(self):
        for pos in range(self.depth):
            yield self.section(pos)

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], kind: str = "raw",
                    indices: Sequence[int] | None = None) -> "SectionStack":
        """In-memory stack; all arrays must share extents."""
        arrays = [np.asarray(a) for a in arrays]
        if not arrays:
            raise StackError("empty stack: no sections given")
        extents = arrays[0].shape
        for i, a in enumerate(arrays):
            if a.ndim != 2:
                raise StackError(f"section {i} is not a 2-D image (shape {a.shape})")
            if a.shape != extents:
                raise StackError(f"section {i} has extents {a.shape}, expected {extents}")
        if kind == "raw":
            arrays = [a.astype(np.float32, copy=False) for a in arrays]
        idx = list(indices) if indices is not None else list(range(len(arrays)))
        if len(idx) != len(arrays):
            raise StackError("indices and arrays must have equal length")
        return cls(idx, extents, kind, lambda pos: arrays[pos])
