"""Bump-allocated activation arena with phase labels and a high-water mark.

One worst-case buffer is reserved up front; decode phases (encoder, skip-at,
skip-cmlm) sub-allocate by offset and reset between phases. Overflow is a hard
error, never a silent reallocation.
"""

from __future__ import annotations

import numpy as np

ALIGN = 64


class ArenaOverflowError(MemoryError):
    pass


def _aligned(nbytes):
    return (nbytes + ALIGN - 1) // ALIGN * ALIGN


class Arena:
    def __init__(self, capacity, phase="idle"):
        self.capacity = int(capacity)
        self.offset = 0
        self.high_water = 0
        self.phase = phase
        self._mem = np.zeros(self.capacity, dtype=np.uint8)

    def alloc(self, nbytes):
        """Bump-allocate `nbytes` (64-byte aligned); returns a uint8 view."""
        nbytes = int(nbytes)
        if nbytes < 0:
            raise ValueError("negative allocation")
        start = self.offset
        end = start + _aligned(nbytes)
        if end > self.capacity:
            raise ArenaOverflowError(
                f"arena overflow in phase {self.phase!r}: "
                f"need {end - start} bytes at offset {start}, capacity {self.capacity}"
            )
        self.offset = end
        self.high_water = max(self.high_water, end)
        return self._mem[start : start + nbytes]

    def reset(self, phase=None):
        """Reclaim everything; the high-water mark persists for auditing."""
        self.offset = 0
        if phase is not None:
            self.phase = phase


def arena_alloc(arena, nbytes):
    return arena.alloc(nbytes)


def arena_reset(arena, phase=None):
    arena.reset(phase)


class Workspace:
    """Buffer source for inference activations: arena-backed or plain heap.

    `outside_allocs` counts buffers served from the heap; with an arena
    attached it stays zero, which is what the allocation audit asserts.
    """

    def __init__(self, arena=None):
        self.arena = arena
        self.outside_allocs = 0

    def reset(self, phase):
        if self.arena is not None:
            self.arena.reset(phase)

    def buf(self, shape, dtype):
        dtype = np.dtype(dtype)
        count = int(np.prod(shape)) if shape else 1
        if self.arena is None:
            self.outside_allocs += 1
            return np.empty(shape, dtype=dtype)
        raw = self.arena.alloc(count * dtype.itemsize)
        return raw.view(dtype).reshape(shape)
