"""Scalar atomic memory operations executed at the target PE's heap.

Every RMW on a heap location takes that heap's atomic lock, which is the
simulation's stand-in for the fabric's atomic unit: direct callers, the node
proxy, and the internode daemon all serialize through it, giving each
location a single total modification order.
"""

from __future__ import annotations

from typing import Optional

from . import ring
from .dtypes import ElementType, from_bits, to_bits
from .errors import ContractViolation
from .heap import SymmetricHeap

# AmoOp name -> (ring opcode, fetches a value, needs operand, needs compare)
AMO_TABLE = {
    "fetch": (ring.OP_AMO_FETCH, True, False, False),
    "set": (ring.OP_AMO_SET, False, True, False),
    "swap": (ring.OP_AMO_SWAP, True, True, False),
    "compare_swap": (ring.OP_AMO_COMPARE_SWAP, True, True, True),
    "inc": (ring.OP_AMO_INC, False, False, False),
    "add": (ring.OP_AMO_ADD, False, True, False),
    "fetch_inc": (ring.OP_AMO_FETCH_INC, True, False, False),
    "fetch_add": (ring.OP_AMO_FETCH_ADD, True, True, False),
    "and": (ring.OP_AMO_AND, False, True, False),
    "or": (ring.OP_AMO_OR, False, True, False),
    "xor": (ring.OP_AMO_XOR, False, True, False),
    "fetch_and": (ring.OP_AMO_FETCH_AND, True, True, False),
    "fetch_or": (ring.OP_AMO_FETCH_OR, True, True, False),
    "fetch_xor": (ring.OP_AMO_FETCH_XOR, True, True, False),
}

OPCODE_TO_NAME = {entry[0]: name for name, entry in AMO_TABLE.items()}

# Only these ops are defined for floating-point types (CAS compares bit patterns).
FLOAT_OK = frozenset(["fetch", "set", "swap", "compare_swap"])
BITWISE = frozenset(["and", "or", "xor", "fetch_and", "fetch_or", "fetch_xor"])


def check_amo(op_name: str, elem: ElementType, offset: int):
    if op_name not in AMO_TABLE:
        raise ContractViolation(f"unknown AMO {op_name!r}")
    if elem.width not in (4, 8):
        raise ContractViolation(f"AMOs require 4 or 8 byte types, got {elem.name}")
    if elem.is_float and op_name not in FLOAT_OK:
        raise ContractViolation(f"AMO {op_name!r} undefined for {elem.name}")
    if offset % elem.width:
        raise ContractViolation(f"offset {offset} not aligned to {elem.width}")


def apply_rmw(heap: SymmetricHeap, offset: int, opcode: int, elem: ElementType,
              operand_bits: int, compare_bits: int) -> int:
    """Execute one RMW under the heap's atomic lock; returns the prior bits."""
    width = elem.width
    heap.check_range(offset, width)
    mask = (1 << (width * 8)) - 1
    with heap.atomic_lock:
        old_bits = int.from_bytes(heap.mem[offset:offset + width], "little")
        new_bits = _next_value(opcode, elem, old_bits, operand_bits, compare_bits, mask)
        if new_bits is not None:
            heap.mem[offset:offset + width] = new_bits.to_bytes(width, "little")
        return old_bits


def _next_value(opcode: int, elem: ElementType, old_bits: int,
                operand_bits: int, compare_bits: int, mask: int) -> Optional[int]:
    if opcode == ring.OP_AMO_FETCH:
        return None
    if opcode in (ring.OP_AMO_SET, ring.OP_AMO_SWAP):
        return operand_bits & mask
    if opcode == ring.OP_AMO_COMPARE_SWAP:
        return operand_bits & mask if old_bits == (compare_bits & mask) else None
    if opcode in (ring.OP_AMO_INC, ring.OP_AMO_FETCH_INC):
        return _arith(elem, old_bits, 1, mask)
    if opcode in (ring.OP_AMO_ADD, ring.OP_AMO_FETCH_ADD):
        return _arith(elem, old_bits, from_bits(operand_bits, elem), mask)
    if opcode in (ring.OP_AMO_AND, ring.OP_AMO_FETCH_AND):
        return old_bits & operand_bits & mask
    if opcode in (ring.OP_AMO_OR, ring.OP_AMO_FETCH_OR):
        return (old_bits | operand_bits) & mask
    if opcode in (ring.OP_AMO_XOR, ring.OP_AMO_FETCH_XOR):
        return (old_bits ^ operand_bits) & mask
    raise ContractViolation(f"opcode {opcode} is not an AMO")


def _arith(elem: ElementType, old_bits: int, addend, mask: int) -> int:
    if elem.is_float:
        return to_bits(from_bits(old_bits, elem) + addend, elem)
    return (old_bits + int(addend)) & mask


def amo(ctx, op_name: str, dest: int, pe: int, elem: ElementType,
        operand=0, compare=0):
    """Atomic op at `dest` (a local symmetric address) on PE `pe`.

    Returns the prior value for fetching ops, None otherwise.  Direct peers
    run the RMW in place through the target heap's lock; everyone else rides
    the reverse-offload ring and the fetched value comes back in the
    completion payload.
    """
    check_amo(op_name, elem, ctx.heap.offset_of(dest))
    opcode, fetches, _, _ = AMO_TABLE[op_name]
    offset = ctx.heap.offset_of(dest)
    operand_bits = to_bits(operand, elem)
    compare_bits = to_bits(compare, elem)
    remote = ctx.translate(dest, pe)
    if remote is not None:
        heap = ctx.runtime.heap_of(pe)
        old_bits = apply_rmw(heap, offset, opcode, elem, operand_bits, compare_bits)
    else:
        msg = ring.RingMessage(op=opcode, dtype=elem.code,
                               src_pe=ctx.pe, dst_pe=pe, addr_a=offset,
                               imm1=operand_bits, imm2=compare_bits)
        old_bits = ctx.proxy_call(msg)
    return from_bits(old_bits, elem) if fetches else None
