"""Reverse-offload request ring: fixed 64-byte slots, many producers, one consumer.

Producers claim a slot with a single fetch-and-increment on the ticket counter,
write the payload, then stamp the slot's seq field last so the consumer only
ever observes fully written messages.  The consumer publishes its progress to a
shared counter once every `publish_interval` messages so flow control stays off
the producer fast path; producers spin (with yields) only when the ring is full.

Completion slots are pooled per PE and filled out of order by whoever executes
the request (proxy, copier, or remote daemon).
"""

from __future__ import annotations

import struct
import threading
import time
import zlib
from dataclasses import dataclass

from .errors import CompletionError, PgasError, SendAfterShutdown
from .locks import BACKOFF_SLEEP, SpinLock, spin_budget

MESSAGE_SIZE = 64

# Opcodes carried in RingMessage.op.
OP_P = 1
OP_G = 2
OP_PUT = 3
OP_GET = 4
OP_IPUT = 5
OP_IGET = 6
OP_PUT_SIGNAL = 7
OP_ENGINE_COPY = 8
# Collective fan-out: one request expands at the proxy into engine copies of
# (addr_b, count) onto addr_a in every team member's heap (node-local teams).
OP_ENGINE_PUSH = 9

# AMO opcodes occupy a contiguous block.
OP_AMO_FETCH = 16
OP_AMO_SET = 17
OP_AMO_SWAP = 18
OP_AMO_COMPARE_SWAP = 19
OP_AMO_INC = 20
OP_AMO_ADD = 21
OP_AMO_FETCH_INC = 22
OP_AMO_FETCH_ADD = 23
OP_AMO_AND = 24
OP_AMO_OR = 25
OP_AMO_XOR = 26
OP_AMO_FETCH_AND = 27
OP_AMO_FETCH_OR = 28
OP_AMO_FETCH_XOR = 29

AMO_OPS = frozenset(range(OP_AMO_FETCH, OP_AMO_FETCH_XOR + 1))

OP_NAMES = {
    OP_P: "p", OP_G: "g", OP_PUT: "put", OP_GET: "get",
    OP_IPUT: "iput", OP_IGET: "iget", OP_PUT_SIGNAL: "put_signal",
    OP_ENGINE_COPY: "engine_copy", OP_ENGINE_PUSH: "engine_push",
    OP_AMO_FETCH: "amo_fetch", OP_AMO_SET: "amo_set", OP_AMO_SWAP: "amo_swap",
    OP_AMO_COMPARE_SWAP: "amo_compare_swap", OP_AMO_INC: "amo_inc",
    OP_AMO_ADD: "amo_add", OP_AMO_FETCH_INC: "amo_fetch_inc",
    OP_AMO_FETCH_ADD: "amo_fetch_add", OP_AMO_AND: "amo_and",
    OP_AMO_OR: "amo_or", OP_AMO_XOR: "amo_xor", OP_AMO_FETCH_AND: "amo_fetch_and",
    OP_AMO_FETCH_OR: "amo_fetch_or", OP_AMO_FETCH_XOR: "amo_fetch_xor",
}

# Flag bits.
FLAG_COMPLETION = 0x01   # a completion slot index is carried and must be filled
FLAG_SIG_ADD = 0x02      # put_signal: add to the signal word instead of set
FLAG_NBI = 0x04          # informational: op was issued non-blocking
FLAG_TOKEN = 0x08        # addr_b names a staging-registry token, not a heap offset

# Little-endian, 64 bytes total:
#   seq u32 | op u8 | dtype u8 | flags u8 | pad u8 | src_pe u16 | dst_pe u16
#   | completion u16 | pad u16 | addr_a u64 | addr_b u64 | count u64
#   | imm1 u64 | imm2 u64 | stride u64
_MSG = struct.Struct("<IBBBBHHHHQQQQQQ")
assert _MSG.size == MESSAGE_SIZE

_SEQ = struct.Struct("<I")
_BODY = struct.Struct("<BBBBHHHHQQQQQQ")  # everything after seq


@dataclass
class RingMessage:
    """One fixed-size request record; field meaning depends on op."""

    op: int = 0
    dtype: int = 0
    flags: int = 0
    src_pe: int = 0
    dst_pe: int = 0
    completion_index: int = 0
    addr_a: int = 0     # target symmetric offset
    addr_b: int = 0     # source symmetric offset or staging token
    count: int = 0      # bytes or elements, per op semantics
    imm1: int = 0       # scalar value / AMO operand / signal value / iput deadline anchor
    imm2: int = 0       # compare operand / signal target offset / test checksum
    stride: int = 0     # packed strides for iput/iget, else deadline anchor
    seq: int = 0        # assigned by the ring on send

    def pack(self) -> bytes:
        return _MSG.pack(self.seq, self.op, self.dtype, self.flags, 0,
                         self.src_pe, self.dst_pe, self.completion_index, 0,
                         self.addr_a, self.addr_b, self.count,
                         self.imm1, self.imm2, self.stride)

    @classmethod
    def unpack(cls, data) -> "RingMessage":
        (seq, op, dtype, flags, _, src_pe, dst_pe, comp, _,
         addr_a, addr_b, count, imm1, imm2, stride) = _MSG.unpack(data)
        return cls(op=op, dtype=dtype, flags=flags, src_pe=src_pe, dst_pe=dst_pe,
                   completion_index=comp, addr_a=addr_a, addr_b=addr_b,
                   count=count, imm1=imm1, imm2=imm2, stride=stride, seq=seq)

    def body_checksum(self) -> int:
        """CRC32 over every payload field except seq and imm2 (test mode)."""
        body = _BODY.pack(self.op, self.dtype, self.flags, 0,
                          self.src_pe, self.dst_pe, self.completion_index, 0,
                          self.addr_a, self.addr_b, self.count,
                          self.imm1, 0, self.stride)
        return zlib.crc32(body)


class Ring:
    """Bounded MPSC ring over a flat byte buffer.

    Slot readiness is a per-slot seq stamp: the producer of ticket t writes the
    payload, then stores seq = (t + 1) mod 2^32.  The consumer of ticket t waits
    for exactly that stamp, so laps never alias until 2^32 messages wrap.
    """

    def __init__(self, capacity: int = 4096, publish_interval: int = 64):
        if capacity < 2 or capacity & (capacity - 1):
            raise PgasError(f"ring capacity must be a power of two >= 2, got {capacity}")
        self.capacity = capacity
        self.publish_interval = publish_interval
        self.slots = bytearray(capacity * MESSAGE_SIZE)
        self._mask = capacity - 1
        self._ticket = 0
        self._ticket_lock = SpinLock()
        self.consumed = 0            # consumer-private true progress
        self.consumed_published = 0  # producer-visible, updated every K messages
        self.publish_count = 0       # number of publication writes (for tests)
        self.shutdown = False

    # -- producer side --------------------------------------------------

    def send(self, msg: RingMessage) -> int:
        """Enqueue msg, returning its ticket.  Spins only while the ring is full."""
        if self.shutdown:
            raise SendAfterShutdown("ring is shut down")
        with self._ticket_lock:
            ticket = self._ticket
            self._ticket += 1
        spins = 0
        budget = spin_budget()
        while ticket - self.consumed_published >= self.capacity:
            if self.shutdown:
                raise SendAfterShutdown("ring shut down while waiting for a slot")
            spins += 1
            time.sleep(0 if spins < budget else BACKOFF_SLEEP)
        off = (ticket & self._mask) * MESSAGE_SIZE
        _BODY.pack_into(self.slots, off + 4,
                        msg.op, msg.dtype, msg.flags, 0,
                        msg.src_pe, msg.dst_pe, msg.completion_index, 0,
                        msg.addr_a, msg.addr_b, msg.count,
                        msg.imm1, msg.imm2, msg.stride)
        # Stamp last: marks the slot consumable for this lap.
        _SEQ.pack_into(self.slots, off, (ticket + 1) & 0xFFFFFFFF)
        return ticket

    # -- consumer side (single thread only) ------------------------------

    def consume(self):
        """Return the next message in ticket order, or None if not yet ready."""
        ticket = self.consumed
        off = (ticket & self._mask) * MESSAGE_SIZE
        (seq,) = _SEQ.unpack_from(self.slots, off)
        if seq != (ticket + 1) & 0xFFFFFFFF:
            # Idle: flush any unpublished progress so full-ring producers
            # are never stranded waiting on a stale counter.
            if self.consumed_published != self.consumed:
                self.consumed_published = self.consumed
                self.publish_count += 1
            return None
        msg = RingMessage.unpack(bytes(self.slots[off:off + MESSAGE_SIZE]))
        self.consumed = ticket + 1
        if self.consumed % self.publish_interval == 0:
            self.consumed_published = self.consumed
            self.publish_count += 1
        return msg

    def request_shutdown(self):
        self.shutdown = True

    def dump_slots(self, start: int = 0, count: int = None) -> str:
        """Hex dump of slots with per-field offsets, for debugging."""
        if count is None:
            count = self.capacity
        lines = []
        for i in range(start, min(start + count, self.capacity)):
            raw = bytes(self.slots[i * MESSAGE_SIZE:(i + 1) * MESSAGE_SIZE])
            msg = RingMessage.unpack(raw)
            lines.append(f"slot {i:5d}  seq={msg.seq:#010x} "
                         f"op={OP_NAMES.get(msg.op, msg.op)!s:<16} "
                         f"flags={msg.flags:#04x} src={msg.src_pe} dst={msg.dst_pe} "
                         f"comp={msg.completion_index}")
            lines.append(f"  [00..04) seq      {raw[0:4].hex()}")
            lines.append(f"  [04..08) op/dt/fl {raw[4:8].hex()}")
            lines.append(f"  [08..16) pes/comp {raw[8:16].hex()}")
            lines.append(f"  [16..24) addr_a   {raw[16:24].hex()}")
            lines.append(f"  [24..32) addr_b   {raw[24:32].hex()}")
            lines.append(f"  [32..40) count    {raw[32:40].hex()}")
            lines.append(f"  [40..48) imm1     {raw[40:48].hex()}")
            lines.append(f"  [48..56) imm2     {raw[48:56].hex()}")
            lines.append(f"  [56..64) stride   {raw[56:64].hex()}")
        return "\n".join(lines)


# Completion slot states.
COMP_EMPTY = 0
COMP_PENDING = 1
COMP_DONE = 2
COMP_ERROR = 3


class CompletionPool:
    """Fixed pool of reply slots owned by one PE, filled out of order.

    Slots transition empty -> pending -> (done | error) -> empty.  The waiter
    recycles its slot after consuming the result, so the pool bounds the number
    of outstanding proxied operations per PE.
    """

    def __init__(self, size: int = 256):
        self.size = size
        self.status = [COMP_EMPTY] * size
        self.ret = [0] * size
        self.err = [""] * size
        self.op = [0] * size
        self._free = list(range(size - 1, -1, -1))
        self._lock = SpinLock()

    def alloc(self, op: int = 0, drain=None) -> int:
        """Claim a pending slot; spins via `drain` when the pool is exhausted."""
        spins = 0
        while True:
            with self._lock:
                if self._free:
                    idx = self._free.pop()
                    self.status[idx] = COMP_PENDING
                    self.ret[idx] = 0
                    self.err[idx] = ""
                    self.op[idx] = op
                    return idx
            if drain is not None:
                drain()
            spins += 1
            time.sleep(0 if spins < 2000 else BACKOFF_SLEEP)

    def complete(self, idx: int, ret: int = 0):
        self.ret[idx] = ret
        self.status[idx] = COMP_DONE

    def fail(self, idx: int, message: str):
        self.err[idx] = message
        self.status[idx] = COMP_ERROR

    def poll(self, idx: int) -> int:
        return self.status[idx]

    def wait(self, idx: int, hot: int = None) -> int:
        """Block until slot idx resolves; recycle it and return the payload.

        `hot` bounds the yield-spin phase; cohorts of waiters pass a small
        value so they back off and leave the CPUs to the proxy."""
        spins = 0
        budget = spin_budget() if hot is None else hot
        while True:
            st = self.status[idx]
            if st == COMP_DONE:
                ret = self.ret[idx]
                self.recycle(idx)
                return ret
            if st == COMP_ERROR:
                op_name = OP_NAMES.get(self.op[idx], str(self.op[idx]))
                err = self.err[idx]
                self.recycle(idx)
                raise CompletionError(f"{op_name}: {err}")
            spins += 1
            time.sleep(0 if spins < budget else BACKOFF_SLEEP)

    def recycle(self, idx: int):
        with self._lock:
            self.status[idx] = COMP_EMPTY
            self._free.append(idx)

    def outstanding(self) -> int:
        with self._lock:
            return self.size - len(self._free)
