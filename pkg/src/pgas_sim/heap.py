"""Per-PE symmetric heaps and the peer accessibility / offset tables.

Every PE owns one heap backed by a byte buffer.  Heaps are given synthetic,
non-overlapping base addresses derived from the global PE index so the offset
translation `dest - local_base + remote_base` is real integer arithmetic,
exactly as a store-capable fabric would see it.  The directly accessible peers
of a PE are the PEs hosted on the same node; translation to anyone else
reports NotDirect and the caller falls back to the proxy.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ContractViolation, HeapExhausted
from .locks import SpinLock

HEAP_REGION_BASE = 0x100000000000
HEAP_GUARD = 1 << 20
DEFAULT_ALIGNMENT = 64


def heap_stride(heap_size: int) -> int:
    """Distance between consecutive PEs' base addresses (size + guard, 1 MiB aligned)."""
    raw = heap_size + HEAP_GUARD
    return (raw + HEAP_GUARD - 1) // HEAP_GUARD * HEAP_GUARD


def heap_base(pe: int, heap_size: int) -> int:
    return HEAP_REGION_BASE + pe * heap_stride(heap_size)


@dataclass(frozen=True)
class PeId:
    """Identity of one processing element within 0..npes-1."""

    value: int

    def __index__(self) -> int:
        return self.value

    def __int__(self) -> int:
        return self.value


class SymmetricHeap:
    """One PE's heap: a byte buffer plus a collective bump allocator.

    Allocation is deterministic arithmetic on sizes, so every PE running the
    same allocation sequence computes identical offsets without communicating.
    """

    def __init__(self, pe: int, size: int, alignment: int = DEFAULT_ALIGNMENT):
        self.pe = pe
        self.size = size
        self.alignment = alignment
        self.base = heap_base(pe, size)
        self.mem = bytearray(size)
        self.view = memoryview(self.mem)
        self.u8 = np.frombuffer(self.mem, dtype=np.uint8)
        self.bump_cursor = 0
        # Serializes atomic read-modify-writes on heap locations; plays the
        # role of the fabric's atomic unit for this memory.  Spin-based:
        # parked waiters would pay the GIL-handoff convoy on every RMW.
        self.atomic_lock = SpinLock()

    def alloc(self, nbytes: int) -> int:
        """Advance the bump cursor; offsets are alignment multiples on every PE.

        Returned regions are zero-initialized because the backing buffer is
        born zeroed and the bump allocator never reuses space.  Writing zeroes
        here instead would race with a faster peer that has already finished
        its own matching alloc and started storing into this region remotely.
        """
        if nbytes <= 0:
            raise ContractViolation(f"allocation size must be positive, got {nbytes}")
        offset = self.bump_cursor
        rounded = (nbytes + self.alignment - 1) // self.alignment * self.alignment
        if offset + rounded > self.size:
            raise HeapExhausted(
                f"alloc({nbytes}) needs {rounded} bytes at offset {offset}, "
                f"heap is {self.size} bytes")
        self.bump_cursor = offset + rounded
        return offset

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    def offset_of(self, addr: int) -> int:
        if not self.contains(addr):
            raise ContractViolation(
                f"address {addr:#x} outside heap [{self.base:#x}, {self.base + self.size:#x})")
        return addr - self.base

    def check_range(self, offset: int, nbytes: int):
        if offset < 0 or nbytes < 0 or offset + nbytes > self.size:
            raise ContractViolation(
                f"range [{offset}, {offset + nbytes}) outside heap of {self.size} bytes")


@dataclass
class AccessTable:
    """The stashed peer-accessibility array plus base-address deltas.

    local_index[pe] is 0 when pe is not directly accessible, otherwise a
    1-based index into offsets, which holds remote_base - local_base.
    """

    local_index: List[int] = field(default_factory=list)
    offsets: List[int] = field(default_factory=list)

    @classmethod
    def build(cls, my_pe: int, bases: List[Optional[int]]) -> "AccessTable":
        """bases[pe] is the peer's heap base, or None when not direct."""
        table = cls(local_index=[0] * len(bases), offsets=[])
        my_base = bases[my_pe]
        if my_base is None:
            raise ContractViolation("own heap base must be known")
        for pe, base in enumerate(bases):
            if base is None:
                continue
            table.offsets.append(base - my_base)
            table.local_index[pe] = len(table.offsets)
        return table

    def is_direct(self, pe: int) -> bool:
        return self.local_index[pe] != 0

    def delta(self, pe: int) -> int:
        return self.offsets[self.local_index[pe] - 1]


def translate(table: AccessTable, local_base: int, heap_size: int,
              local_addr: int, target: int) -> Optional[int]:
    """Map a local symmetric address onto the target PE's heap.

    Returns the remote address for direct peers, None (NotDirect) otherwise.
    Raises if local_addr is outside the local heap.
    """
    if not local_base <= local_addr < local_base + heap_size:
        raise ContractViolation(
            f"address {local_addr:#x} outside local heap "
            f"[{local_base:#x}, {local_base + heap_size:#x})")
    idx = table.local_index[target]
    if idx == 0:
        return None
    return local_addr + table.offsets[idx - 1]
