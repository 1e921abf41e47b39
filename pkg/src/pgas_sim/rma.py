"""Point-to-point one-sided operations.

Addresses are local symmetric addresses (ints inside the calling PE's heap);
private-side buffers may be passed directly as bytes-like objects where the
spec allows local memory.  Every operation resolves its path the same way:
direct peers take translated loads/stores (collaborative and paced by the
cost model), everything else composes a 64-byte request and rides the
reverse-offload ring, either because the cutover policy picked the engine or
because the target lives on the peer node.
"""

from __future__ import annotations

import time
from typing import Optional, Union

from . import memops, ring
from .dtypes import I64, U64, BY_CODE, ElementType, from_bits, to_bits
from .errors import ContractViolation
from .locks import BACKOFF_SLEEP, spin_budget
from .transport import (DIRECT, ENGINE, WorkGroupCtx, direct_copy, now_ns,
                        solo_group)

Buffer = Union[bytes, bytearray, memoryview]
Src = Union[int, Buffer]


# ---------------------------------------------------------------------------
# scalar ops
# ---------------------------------------------------------------------------

def p(ctx, dest: int, value, pe: int, elem: ElementType = I64):
    """Blocking scalar store to a symmetric address on pe.

    Direct peers get a single aligned store at the translated address; anyone
    else gets a ring request that returns once the proxy has executed it.
    """
    bits = to_bits(value, elem)
    remote = ctx.translate(dest, pe)
    offset = ctx.heap.offset_of(dest)
    if remote is not None:
        heap = ctx.runtime.heap_of(pe)
        memops.store_scalar(heap, offset, bits, elem)
        return
    msg = ring.RingMessage(op=ring.OP_P, dtype=elem.code, src_pe=ctx.pe,
                           dst_pe=int(pe), addr_a=offset, imm1=bits)
    ctx.proxy_call(msg)


def g(ctx, src: int, pe: int, elem: ElementType = I64):
    """Blocking scalar fetch from a symmetric address on pe."""
    remote = ctx.translate(src, pe)
    offset = ctx.heap.offset_of(src)
    if remote is not None:
        heap = ctx.runtime.heap_of(pe)
        return from_bits(memops.load_scalar(heap, offset, elem), elem)
    msg = ring.RingMessage(op=ring.OP_G, dtype=elem.code, src_pe=ctx.pe,
                           dst_pe=int(pe), addr_a=offset)
    return from_bits(ctx.proxy_call(msg), elem)


_CMPS = {
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
}


def wait_until(ctx, addr: int, cmp: str, value: int):
    """Poll a local 8-byte symmetric word with atomic loads until cmp holds."""
    if cmp not in _CMPS:
        raise ContractViolation(f"cmp must be one of {sorted(_CMPS)}, got {cmp!r}")
    offset = ctx.heap.offset_of(addr)
    test = _CMPS[cmp]
    spins = 0
    # Back off almost immediately: these waiters arrive in cohorts (team
    # sync), and hot spinners starve the very stores they are waiting on.
    while True:
        if test(memops.load_u64_atomic(ctx.heap, offset), value):
            return
        spins += 1
        time.sleep(0 if spins < 32 else BACKOFF_SLEEP)


# ---------------------------------------------------------------------------
# bulk helpers
# ---------------------------------------------------------------------------

def _src_bytes(ctx, src: Src, nbytes: int):
    """Resolve a put source: (readable view, heap offset or None)."""
    if isinstance(src, int):
        offset = ctx.heap.offset_of(src)
        ctx.heap.check_range(offset, nbytes)
        return ctx.heap.view[offset:offset + nbytes], offset
    view = memoryview(src)
    if view.nbytes < nbytes:
        raise ContractViolation(f"source buffer holds {view.nbytes} bytes, "
                                f"need {nbytes}")
    return view[:nbytes], None


def _dst_buffer(ctx, dest: Union[int, Buffer], nbytes: int):
    """Resolve a get destination: (writable view, heap offset or None)."""
    if isinstance(dest, int):
        offset = ctx.heap.offset_of(dest)
        ctx.heap.check_range(offset, nbytes)
        return ctx.heap.view[offset:offset + nbytes], offset
    view = memoryview(dest)
    if view.readonly:
        raise ContractViolation("destination buffer is read-only")
    if view.nbytes < nbytes:
        raise ContractViolation(f"destination buffer holds {view.nbytes} bytes, "
                                f"need {nbytes}")
    return view[:nbytes], None


def _remote_view(ctx, addr: int, pe: int, nbytes: int):
    remote = ctx.translate(addr, pe)
    if remote is None:
        return None
    heap = ctx.runtime.heap_of(pe)
    offset = heap.offset_of(remote)
    heap.check_range(offset, nbytes)
    return heap.view[offset:offset + nbytes]


def _path_for(ctx, op_kind: str, nbytes: int, group: WorkGroupCtx) -> str:
    return ctx.runtime.policy.rma_path(nbytes, group.group_size)


def _engine_put_msg(ctx, op: int, dest_offset: int, src, src_offset, nbytes: int,
                    pe: int, **fields) -> ring.RingMessage:
    msg = ring.RingMessage(op=op, src_pe=ctx.pe, dst_pe=int(pe),
                           addr_a=dest_offset, count=nbytes, **fields)
    if src_offset is not None:
        msg.addr_b = src_offset
    else:
        msg.addr_b = ctx.runtime.tokens.put(bytes(src))
        msg.flags |= ring.FLAG_TOKEN
    return msg


def put(ctx, dest: int, src: Src, nbytes: int, pe: int,
        group: Optional[WorkGroupCtx] = None, blocking: bool = True):
    """Blocking bulk write of nbytes from src (heap address or local buffer)
    to the symmetric address dest on pe."""
    group = group or solo_group()
    if nbytes == 0:
        group.barrier()
        return
    src_view, src_offset = _src_bytes(ctx, src, nbytes)
    dst_view = _remote_view(ctx, dest, pe, nbytes)
    if dst_view is not None and _path_for(ctx, "put", nbytes, group) == DIRECT:
        if ctx.runtime.heap_of(pe) is ctx.heap and src_offset is not None:
            src_view = bytes(src_view)  # same-heap overlap safety
        profile = ctx.runtime.pair_profile(ctx.pe, int(pe))
        direct_copy(dst_view, src_view, nbytes, group, ctx.runtime.model, profile)
        return
    # Engine offload or internode: the group leader owns the single request.
    if group.leader:
        msg = _engine_put_msg(ctx, ring.OP_PUT, ctx.heap.offset_of(dest),
                              src_view, src_offset, nbytes, pe,
                              stride=now_ns())
        if not blocking:
            msg.flags |= ring.FLAG_NBI
        ctx.proxy_call(msg, blocking=blocking)
    if blocking:
        group.barrier()


def get(ctx, dest: Union[int, Buffer], src: int, nbytes: int, pe: int,
        group: Optional[WorkGroupCtx] = None, blocking: bool = True):
    """Blocking bulk read of nbytes from the symmetric address src on pe into
    dest (heap address or writable local buffer)."""
    group = group or solo_group()
    if nbytes == 0:
        group.barrier()
        return
    dst_view, dst_offset = _dst_buffer(ctx, dest, nbytes)
    src_view = _remote_view(ctx, src, pe, nbytes)
    if src_view is not None and _path_for(ctx, "get", nbytes, group) == DIRECT:
        if ctx.runtime.heap_of(pe) is ctx.heap:
            src_view = bytes(src_view)
        profile = ctx.runtime.pair_profile(ctx.pe, int(pe))
        direct_copy(dst_view, src_view, nbytes, group, ctx.runtime.model, profile)
        return
    if group.leader:
        msg = ring.RingMessage(op=ring.OP_GET, src_pe=ctx.pe, dst_pe=int(pe),
                               addr_a=ctx.heap.offset_of(src), count=nbytes,
                               stride=now_ns())
        if not blocking:
            msg.flags |= ring.FLAG_NBI
        if ctx.translate(src, pe) is not None:
            # Same-node engine path: the scheduler writes the destination.
            if dst_offset is not None:
                msg.addr_b = dst_offset
            else:
                msg.addr_b = ctx.runtime.tokens.put(dst_view)
                msg.flags |= ring.FLAG_TOKEN
            ctx.proxy_call(msg, blocking=blocking)
        else:
            # Peer node: fetched bytes come back on the reply stream.
            def sink(data, _view=dst_view):
                _view[0:len(data)] = data
            ctx.proxy_call(msg, blocking=blocking, ext_len=nbytes, ext_sink=sink)
    if blocking:
        group.barrier()


def put_nbi(ctx, dest: int, src: Src, nbytes: int, pe: int,
            group: Optional[WorkGroupCtx] = None):
    """Non-blocking put: returns after enqueue (engine) or after the stores
    are issued (direct); completion is guaranteed only after quiet."""
    put(ctx, dest, src, nbytes, pe, group=group, blocking=False)


def get_nbi(ctx, dest: Union[int, Buffer], src: int, nbytes: int, pe: int,
            group: Optional[WorkGroupCtx] = None):
    get(ctx, dest, src, nbytes, pe, group=group, blocking=False)


def iput(ctx, dest: int, src: Src, dst_stride: int, src_stride: int,
         nelems: int, elem: ElementType, pe: int):
    """Strided blocking put: element k goes to dest + k*dst_stride elements."""
    if dst_stride < 1 or src_stride < 1:
        raise ContractViolation("strides must be >= 1 element")
    if nelems == 0:
        return
    width = elem.width
    if isinstance(src, int):
        packed = memops.gather_strided(ctx.heap, ctx.heap.offset_of(src),
                                       src_stride, nelems, elem)
    else:
        packed = memops.gather_strided_buffer(memoryview(src), src_stride,
                                              nelems, elem)
    dest_offset = ctx.heap.offset_of(dest)
    remote = ctx.translate(dest, pe)
    if remote is not None:
        heap = ctx.runtime.heap_of(pe)
        memops.scatter_strided(heap, dest_offset, dst_stride, nelems, elem, packed)
        return
    msg = ring.RingMessage(op=ring.OP_IPUT, dtype=elem.code, src_pe=ctx.pe,
                           dst_pe=int(pe), addr_a=dest_offset, count=nelems,
                           imm1=now_ns(),
                           stride=(dst_stride << 32) | src_stride,
                           flags=ring.FLAG_TOKEN,
                           addr_b=ctx.runtime.tokens.put(packed))
    ctx.proxy_call(msg)


def iget(ctx, dest: Union[int, Buffer], src: int, dst_stride: int,
         src_stride: int, nelems: int, elem: ElementType, pe: int):
    """Strided blocking get, the dual of iput."""
    if dst_stride < 1 or src_stride < 1:
        raise ContractViolation("strides must be >= 1 element")
    if nelems == 0:
        return
    src_offset = ctx.heap.offset_of(src)
    remote = ctx.translate(src, pe)
    if remote is not None:
        heap = ctx.runtime.heap_of(pe)
        packed = memops.gather_strided(heap, src_offset, src_stride, nelems, elem)
        if isinstance(dest, int):
            memops.scatter_strided(ctx.heap, ctx.heap.offset_of(dest),
                                   dst_stride, nelems, elem, packed)
        else:
            memops.scatter_strided_buffer(memoryview(dest), dst_stride,
                                          nelems, elem, packed)
        return
    msg = ring.RingMessage(op=ring.OP_IGET, dtype=elem.code, src_pe=ctx.pe,
                           dst_pe=int(pe), addr_a=src_offset, count=nelems,
                           imm1=now_ns(),
                           stride=(dst_stride << 32) | src_stride)

    if isinstance(dest, int):
        dst_heap, dst_off = ctx.heap, ctx.heap.offset_of(dest)

        def sink(data):
            memops.scatter_strided(dst_heap, dst_off, dst_stride, nelems,
                                   elem, data)
    else:
        dview = memoryview(dest)

        def sink(data):
            memops.scatter_strided_buffer(dview, dst_stride, nelems, elem, data)

    ctx.proxy_call(msg, ext_len=nelems * elem.width, ext_sink=sink)


def put_signal(ctx, dest: int, src: Src, nbytes: int, sig_addr: int,
               sig_value: int, sig_op: str, pe: int,
               group: Optional[WorkGroupCtx] = None):
    """Put followed by an 8-byte signal update that is never visible before
    the full payload."""
    if sig_op not in ("set", "add"):
        raise ContractViolation(f"sig_op must be set or add, got {sig_op!r}")
    group = group or solo_group()
    sig_offset = ctx.heap.offset_of(sig_addr)
    if sig_offset % 8:
        raise ContractViolation("signal address must be 8-byte aligned")
    remote = ctx.translate(dest if nbytes else sig_addr, pe)
    if remote is not None and _path_for(ctx, "put_signal", nbytes, group) == DIRECT:
        if nbytes:
            put(ctx, dest, src, nbytes, pe, group=group)
        else:
            group.barrier()
        if group.leader:
            heap = ctx.runtime.heap_of(pe)
            memops.signal_update(heap, sig_offset, sig_value, sig_op == "add")
        group.barrier()
        return
    if group.leader:
        src_view, src_offset = _src_bytes(ctx, src, nbytes) if nbytes else (b"", 0)
        msg = _engine_put_msg(ctx, ring.OP_PUT_SIGNAL,
                              ctx.heap.offset_of(dest) if nbytes else 0,
                              src_view, src_offset if nbytes else 0, nbytes, pe,
                              imm1=sig_value, imm2=sig_offset,
                              stride=now_ns())
        if sig_op == "add":
            msg.flags |= ring.FLAG_SIG_ADD
        ctx.proxy_call(msg)
    group.barrier()


def engine_copy(ctx, dest: int, src: Src, nbytes: int, pe: int,
                group: Optional[WorkGroupCtx] = None, blocking: bool = True):
    """Explicit copy-engine transfer regardless of the cutover policy."""
    group = group or solo_group()
    if group.leader:
        src_view, src_offset = _src_bytes(ctx, src, nbytes)
        msg = _engine_put_msg(ctx, ring.OP_ENGINE_COPY, ctx.heap.offset_of(dest),
                              src_view, src_offset, nbytes, pe, stride=now_ns())
        ctx.proxy_call(msg, blocking=blocking)
    if blocking:
        group.barrier()


# ---------------------------------------------------------------------------
# work-group variants: every item of the group calls collectively
# ---------------------------------------------------------------------------

def put_work_group(ctx, dest: int, src: Src, nbytes: int, pe: int,
                   group: WorkGroupCtx):
    group.check_collective_args(hash(("put", dest, nbytes, int(pe))))
    put(ctx, dest, src, nbytes, pe, group=group)


def get_work_group(ctx, dest: Union[int, Buffer], src: int, nbytes: int,
                   pe: int, group: WorkGroupCtx):
    group.check_collective_args(hash(("get", src, nbytes, int(pe))))
    get(ctx, dest, src, nbytes, pe, group=group)


def put_nbi_work_group(ctx, dest: int, src: Src, nbytes: int, pe: int,
                       group: WorkGroupCtx):
    group.check_collective_args(hash(("put_nbi", dest, nbytes, int(pe))))
    put(ctx, dest, src, nbytes, pe, group=group, blocking=False)


def get_nbi_work_group(ctx, dest: Union[int, Buffer], src: int, nbytes: int,
                       pe: int, group: WorkGroupCtx):
    group.check_collective_args(hash(("get_nbi", src, nbytes, int(pe))))
    get(ctx, dest, src, nbytes, pe, group=group, blocking=False)
