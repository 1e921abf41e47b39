"""Low-level heap accessors shared by the worker fast path, the proxy, and
the internode daemon: scalar loads/stores, strided element moves, and signal
updates.  All atomic read-modify-writes funnel through the owning heap's
atomic lock so direct and proxied accessors of one location serialize."""

from __future__ import annotations

from .dtypes import ElementType, from_bits, to_bits
from .errors import ContractViolation
from .heap import SymmetricHeap


def store_scalar(heap: SymmetricHeap, offset: int, bits: int, elem: ElementType):
    heap.check_range(offset, elem.width)
    heap.mem[offset:offset + elem.width] = bits.to_bytes(elem.width, "little")


def load_scalar(heap: SymmetricHeap, offset: int, elem: ElementType) -> int:
    heap.check_range(offset, elem.width)
    return int.from_bytes(heap.mem[offset:offset + elem.width], "little")


def load_u64_atomic(heap: SymmetricHeap, offset: int) -> int:
    """8-byte read that can never observe a torn concurrent RMW.

    The slice read is one interpreter-level operation, and writers replace
    all 8 bytes in one such operation, so readers see either the old or the
    new value without taking the heap's atomic lock (poll loops call this)."""
    heap.check_range(offset, 8)
    return int.from_bytes(heap.mem[offset:offset + 8], "little")


def atomic_add_u64(heap: SymmetricHeap, offset: int, value: int) -> int:
    heap.check_range(offset, 8)
    with heap.atomic_lock:
        old = int.from_bytes(heap.mem[offset:offset + 8], "little")
        new = (old + value) & 0xFFFFFFFFFFFFFFFF
        heap.mem[offset:offset + 8] = new.to_bytes(8, "little")
        return old


def signal_update(heap: SymmetricHeap, offset: int, value: int, add: bool):
    """8-byte signal word write, ordered after the payload by the caller."""
    if offset % 8:
        raise ContractViolation(f"signal offset {offset} not 8-byte aligned")
    if add:
        atomic_add_u64(heap, offset, value)
    else:
        heap.check_range(offset, 8)
        with heap.atomic_lock:
            heap.mem[offset:offset + 8] = (value & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")


def gather_strided(heap: SymmetricHeap, offset: int, stride: int, nelems: int,
                   elem: ElementType) -> bytes:
    """Pack nelems elements spaced stride elements apart into contiguous bytes."""
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    if nelems == 0:
        return b""
    span = ((nelems - 1) * stride + 1) * elem.width
    heap.check_range(offset, span)
    if stride == 1:
        return bytes(heap.mem[offset:offset + nelems * elem.width])
    step = stride * elem.width
    out = bytearray(nelems * elem.width)
    for k in range(nelems):
        src = offset + k * step
        out[k * elem.width:(k + 1) * elem.width] = heap.mem[src:src + elem.width]
    return bytes(out)


def scatter_strided(heap: SymmetricHeap, offset: int, stride: int, nelems: int,
                    elem: ElementType, packed) -> None:
    """Inverse of gather_strided: spread contiguous bytes by stride."""
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    if nelems == 0:
        return
    span = ((nelems - 1) * stride + 1) * elem.width
    heap.check_range(offset, span)
    if stride == 1:
        heap.mem[offset:offset + nelems * elem.width] = packed
        return
    step = stride * elem.width
    for k in range(nelems):
        dst = offset + k * step
        heap.mem[dst:dst + elem.width] = packed[k * elem.width:(k + 1) * elem.width]


def gather_strided_buffer(buf, stride: int, nelems: int, elem: ElementType) -> bytes:
    """gather_strided over a caller-private buffer instead of a heap."""
    if stride == 1:
        return bytes(buf[:nelems * elem.width])
    out = bytearray(nelems * elem.width)
    step = stride * elem.width
    for k in range(nelems):
        out[k * elem.width:(k + 1) * elem.width] = buf[k * step:k * step + elem.width]
    return bytes(out)


def scatter_strided_buffer(buf, stride: int, nelems: int, elem: ElementType, packed):
    if stride == 1:
        buf[:nelems * elem.width] = packed
        return
    step = stride * elem.width
    for k in range(nelems):
        buf[k * step:k * step + elem.width] = packed[k * elem.width:(k + 1) * elem.width]
