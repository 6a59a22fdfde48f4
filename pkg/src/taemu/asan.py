"""Redzone-tracked guest heap with use-after-free and invalid-free detection.

Every chunk is laid out as [16-byte redzone | user bytes | redzone padded to
a 16-byte span boundary], with redzones poisoned 0xA5.  Freed chunks sit in
a 64-deep FIFO quarantine before their span is recycled, so accesses to
recently freed memory always classify as use-after-free.  Validation happens
at API boundaries only; raw guest loads and stores are page-checked by the
emulator core, not here.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .emucore import GuestState, PERM_R, PERM_W

REDZONE_SIZE = 16
POISON_BYTE = 0xA5
QUARANTINE_CAPACITY = 64

HEAP_BASE = 0x40000000
HEAP_CAPACITY = 16 * 1024 * 1024


class ViolationKind(Enum):
    OOB_READ = "oob-read"
    OOB_WRITE = "oob-write"
    USE_AFTER_FREE = "use-after-free"
    WILD_ACCESS = "wild-access"
    DOUBLE_FREE = "double-free"
    INVALID_FREE = "invalid-free"


@dataclass
class AccessViolation:
    kind: ViolationKind
    chunk_base: Optional[int]
    offset: int

    def describe(self) -> str:
        where = f"chunk {self.chunk_base:#010x}" if self.chunk_base is not None else "no chunk"
        return f"{self.kind.value} ({where}, offset {self.offset})"


@dataclass
class AccessVerdict:
    ok: bool
    violation: Optional[AccessViolation] = None


class ChunkState(Enum):
    ALLOCATED = "allocated"
    FREED = "freed"


@dataclass
class _Chunk:
    user_base: int
    user_size: int
    span_start: int
    span_end: int
    state: ChunkState


def _span_size(user_size: int) -> int:
    return (2 * REDZONE_SIZE + user_size + 15) & ~15


# Byte states used by the verdict scan.
_LIVE = 0
_FREED = 1
_REDZONE = 2
_UNTRACKED = 3


class AsanHeap:
    """Bump allocator over a reserved guest range, with span recycling."""

    def __init__(self, base: int = HEAP_BASE, capacity: int = HEAP_CAPACITY):
        self.base = base
        self.capacity = capacity
        self.cursor = base
        self.chunks: dict[int, _Chunk] = {}
        self._span_starts: list[int] = []  # sorted; parallel to _span_chunks
        self._span_chunks: list[_Chunk] = []
        self.quarantine: deque[int] = deque()
        self._free_pool: dict[int, deque[int]] = {}

    def clone(self) -> "AsanHeap":
        other = AsanHeap(self.base, self.capacity)
        other.cursor = self.cursor
        other.chunks = {}
        for addr, c in self.chunks.items():
            other.chunks[addr] = _Chunk(c.user_base, c.user_size, c.span_start,
                                        c.span_end, c.state)
        other._span_starts = list(self._span_starts)
        other._span_chunks = [other.chunks[c.user_base] for c in self._span_chunks]
        other.quarantine = deque(self.quarantine)
        other._free_pool = {k: deque(v) for k, v in self._free_pool.items()}
        return other

    @property
    def end(self) -> int:
        return self.base + self.capacity

    def _insert_span(self, chunk: _Chunk) -> None:
        i = bisect.bisect_left(self._span_starts, chunk.span_start)
        self._span_starts.insert(i, chunk.span_start)
        self._span_chunks.insert(i, chunk)

    def _remove_span(self, chunk: _Chunk) -> None:
        i = bisect.bisect_left(self._span_starts, chunk.span_start)
        del self._span_starts[i]
        del self._span_chunks[i]

    def _chunk_at(self, addr: int) -> Optional[_Chunk]:
        i = bisect.bisect_right(self._span_starts, addr) - 1
        if i >= 0:
            chunk = self._span_chunks[i]
            if chunk.span_start <= addr < chunk.span_end:
                return chunk
        return None

    # -- allocation ---------------------------------------------------------

    def alloc(self, guest: GuestState, size: int, zero: bool = False) -> int:
        """Return an 8-aligned user pointer, or 0 (guest NULL) on exhaustion."""
        if size < 0 or size > self.capacity:
            return 0
        span = _span_size(size)
        pool = self._free_pool.get(span)
        if pool:
            start = pool.popleft()
        else:
            if self.cursor + span > self.end:
                return 0
            start = self.cursor
            self.cursor += span
        user_base = start + REDZONE_SIZE
        chunk = _Chunk(user_base, size, start, start + span, ChunkState.ALLOCATED)
        self.chunks[user_base] = chunk
        self._insert_span(chunk)

        guest.map_region(start, span, PERM_R | PERM_W)
        guest.mem_write(start, bytes([POISON_BYTE]) * REDZONE_SIZE, require=0)
        right = user_base + size
        guest.mem_write(right, bytes([POISON_BYTE]) * (chunk.span_end - right), require=0)
        if zero and size:
            guest.mem_write(user_base, b"\x00" * size, require=0)
        return user_base

    def free(self, guest: GuestState, ptr: int) -> Optional[AccessViolation]:
        """Free a chunk; NULL is a no-op.  Returns a violation on misuse."""
        if ptr == 0:
            return None
        chunk = self.chunks.get(ptr)
        if chunk is None:
            return AccessViolation(ViolationKind.INVALID_FREE, None, 0)
        if chunk.state is ChunkState.FREED:
            return AccessViolation(ViolationKind.DOUBLE_FREE, ptr, 0)
        chunk.state = ChunkState.FREED
        if chunk.user_size:
            guest.mem_write(ptr, bytes([POISON_BYTE]) * chunk.user_size, require=0)
        self.quarantine.append(ptr)
        if len(self.quarantine) > QUARANTINE_CAPACITY:
            evicted = self.chunks.pop(self.quarantine.popleft())
            self._remove_span(evicted)
            span = evicted.span_end - evicted.span_start
            self._free_pool.setdefault(span, deque()).append(evicted.span_start)
        return None

    # -- validation ----------------------------------------------------------

    def _byte_state(self, addr: int) -> tuple[int, Optional[_Chunk]]:
        chunk = self._chunk_at(addr)
        if chunk is None:
            return _UNTRACKED, None
        if chunk.user_base <= addr < chunk.user_base + chunk.user_size:
            return (_LIVE if chunk.state is ChunkState.ALLOCATED else _FREED), chunk
        return _REDZONE, chunk

    def is_access_valid(self, guest: GuestState, base: int, size: int,
                        is_write: bool) -> AccessVerdict:
        """Classify an access: fully inside one live chunk's user bytes, or
        fully inside a compatibly mapped non-heap region, is ok."""
        if size == 0:
            return AccessVerdict(True)
        if base + size > 0x100000000:
            return AccessVerdict(False, AccessViolation(ViolationKind.WILD_ACCESS, None, 0))
        end = base + size
        if end <= self.base or base >= self.end:
            perm = PERM_W if is_write else PERM_R
            if guest.is_mapped(base, size, perm):
                return AccessVerdict(True)
            return AccessVerdict(False, AccessViolation(ViolationKind.WILD_ACCESS, None, 0))

        state0, chunk0 = self._byte_state(base)
        if state0 == _LIVE:
            # Fast path: fully inside this chunk's user bytes.
            if end <= chunk0.user_base + chunk0.user_size:
                return AccessVerdict(True)
            bad = chunk0.user_base + chunk0.user_size
            state, chunk = self._byte_state(bad)
        else:
            bad, state, chunk = base, state0, chunk0

        oob = ViolationKind.OOB_WRITE if is_write else ViolationKind.OOB_READ
        if state == _REDZONE:
            return AccessVerdict(False, AccessViolation(oob, chunk.user_base,
                                                        bad - chunk.user_base))
        if state == _FREED:
            return AccessVerdict(False, AccessViolation(ViolationKind.USE_AFTER_FREE,
                                                        chunk.user_base,
                                                        bad - chunk.user_base))
        return AccessVerdict(False, AccessViolation(ViolationKind.WILD_ACCESS, None,
                                                    bad - base))
