"""Teams and team-based collectives: push-increment sync, barrier, push
broadcast, fcollect, collect, and duplicated reductions.

Synchronization follows the push design: every PE fires an atomic increment
at each member's sync counter (its own included) and then polls its local
counter until the epoch total arrives.  Counters are never reset; epoch
arithmetic keeps them reusable for the runtime's lifetime.

Data-moving collectives push with stores: the pushing loop iterates
destinations innermost so stores to different members pipeline across links,
which is what the cost model charges for.  When the cutover policy picks the
engine, the per-destination store loops become engine transfers submitted
back to back by the group leader.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import amo as amo_mod
from . import memops, ring, rma
from .dtypes import U64, ElementType
from .errors import ContractViolation
from .transport import (DIRECT, WorkGroupCtx, collective_profile, item_block,
                        now_ns, pace_until, profile_for_pair, solo_group)

PUSH_CHUNK = 16384  # outer-loop address chunk for broadcast/fcollect stores


@dataclass
class Team:
    """One PE's view of an ordered subset of the world."""

    id: int
    members: List[int]           # world ranks, team-rank order
    my_team_rank: int
    psync_offset: int            # sync_counter u64 | epoch u64 | collect_sizes
    epoch: int = 0

    @property
    def size(self) -> int:
        return len(self.members)

    def rank_of(self, pe: int) -> Optional[int]:
        try:
            return self.members.index(pe)
        except ValueError:
            return None


def _psync_bytes(team_size: int) -> int:
    return 16 + 8 * team_size


def _alloc_team(ctx, members: List[int], team_id: int) -> Optional[Team]:
    """Collective psync allocation; returns None for non-members."""
    offset = ctx.symm_alloc(_psync_bytes(len(members)))
    if ctx.pe not in members:
        return None
    return Team(id=team_id, members=list(members),
                my_team_rank=members.index(ctx.pe), psync_offset=offset)


_next_team_id = [1]


def team_world(ctx) -> Team:
    """TEAM_WORLD: every PE, cached per context after the first collective call."""
    team = getattr(ctx, "_team_world", None)
    if team is None:
        team = _alloc_team(ctx, list(range(ctx.npes)), 0)
        ctx._team_world = team
    return team


def team_shared(ctx) -> Team:
    """TEAM_SHARED: the PEs hosted on this node."""
    team = getattr(ctx, "_team_shared", None)
    if team is None:
        rt = ctx.runtime
        members = list(range(rt.pe_base, rt.pe_base + rt.config.npes))
        team = _alloc_team(ctx, members, -1)
        ctx._team_shared = team
    return team


def team_split_strided(ctx, parent: Team, start: int, stride: int,
                       size: int) -> Optional[Team]:
    """New team of parent.members[start + k*stride]; called collectively by
    every parent member; non-members get None."""
    if parent is None:
        raise ContractViolation("split called on a null team")
    if size < 1 or stride < 1 or start < 0 or start + (size - 1) * stride >= parent.size:
        raise ContractViolation(
            f"invalid split geometry (start={start}, stride={stride}, size={size}) "
            f"for a team of {parent.size}")
    members = [parent.members[start + k * stride] for k in range(size)]
    team_id = _next_team_id[0]
    _next_team_id[0] += 1
    return _alloc_team(ctx, members, team_id)


def _team_worst_profile(ctx, team: Team):
    forced = ctx.runtime.config.topology
    if forced and forced != "auto":
        return collective_profile(team.size, forced)
    if team.size == 1:
        return collective_profile(1)
    gpus = {pe // 2 for pe in team.members}
    return collective_profile(2 if len(gpus) == 1 else 3)


# ---------------------------------------------------------------------------
# sync / barrier
# ---------------------------------------------------------------------------

def team_sync(ctx, team: Team):
    """Push an increment at every member (self included), then wait locally
    for this epoch's total.  The return is paced against the modeled epoch
    latency so measured collectives ride the cost model, not OS jitter."""
    runtime = ctx.runtime
    deadline = now_ns() + runtime.model.sync_ns(team.size)
    team.epoch += 1
    target = team.epoch * team.size
    counter_addr = ctx.addr(team.psync_offset)
    for pe in team.members:
        if runtime.is_local(pe):
            memops.atomic_add_u64(runtime.heap_of(pe), team.psync_offset, 1)
        else:
            amo_mod.amo(ctx, "add", counter_addr, pe, U64, operand=1)
    rma.wait_until(ctx, counter_addr, "ge", target)
    if runtime.model.enabled:
        pace_until(deadline)


def sync_all(ctx):
    team_sync(ctx, team_world(ctx))


def barrier(ctx, team: Team):
    ctx.quiet()
    team_sync(ctx, team)


def barrier_all(ctx):
    barrier(ctx, team_world(ctx))


def sync_all_work_group(ctx, group: WorkGroupCtx):
    group.barrier()
    if group.leader:
        sync_all(ctx)
    group.barrier()


def barrier_all_work_group(ctx, group: WorkGroupCtx):
    group.barrier()
    if group.leader:
        barrier_all(ctx)
    group.barrier()


# ---------------------------------------------------------------------------
# push engines shared by broadcast / fcollect / collect
# ---------------------------------------------------------------------------

def _push_direct(ctx, team: Team, data, dest_offset_of, group: WorkGroupCtx):
    """Store `data` into each member's heap at dest_offset_of(rank), inner
    loop across destinations, outer across address chunks; paced once against
    the pipelined-store model."""
    nbytes = len(data)
    profile = _team_worst_profile(ctx, team)
    deadline = now_ns() + ctx.runtime.model.coll_direct_ns(
        nbytes, group.group_size, profile)
    targets = []
    for rank, pe in enumerate(team.members):
        off = dest_offset_of(rank)
        if ctx.runtime.is_local(pe):
            heap = ctx.runtime.heap_of(pe)
            heap.check_range(off, nbytes)
            targets.append((heap, off, None))
        else:
            targets.append((None, off, pe))
    for chunk_lo in range(0, nbytes, PUSH_CHUNK):
        chunk_hi = min(chunk_lo + PUSH_CHUNK, nbytes)
        piece = data[chunk_lo:chunk_hi]
        for heap, off, remote_pe in targets:
            if heap is not None:
                heap.mem[off + chunk_lo:off + chunk_hi] = piece
            else:
                msg = ring.RingMessage(op=ring.OP_PUT, src_pe=ctx.pe,
                                       dst_pe=remote_pe, addr_a=off + chunk_lo,
                                       count=len(piece), stride=now_ns(),
                                       flags=ring.FLAG_TOKEN,
                                       addr_b=ctx.runtime.tokens.put(bytes(piece)))
                ctx.proxy_call(msg)
    if ctx.runtime.model.enabled:
        pace_until(deadline)


def _team_progression(team: Team):
    """(start, stride) when members form an arithmetic progression of world
    ranks that fits the fan-out encoding, else None."""
    members = team.members
    if len(members) == 1:
        return members[0], 1
    stride = members[1] - members[0]
    if stride < 1 or members[0] > 0xFFFF or stride > 0xFFFF or len(members) > 0xFFFF:
        return None
    for k, pe in enumerate(members):
        if pe != members[0] + k * stride:
            return None
    return members[0], stride


def _push_engine(ctx, team: Team, src_off: int, nbytes: int, dest_offset_of):
    """Leader-offloaded engine transfers, one per destination, submitted back
    to back so startups serialize on this PE's lane while data overlaps.

    All destinations land at the same offset in each member's heap (the
    pusher's slot), so a node-local team needs only one fan-out request; the
    proxy expands it into the per-destination copies.  Teams that span the
    peer node fall back to one request per remote destination.  Sources stay
    in the heap - the entry sync keeps them stable until the engine reads."""
    offsets = {dest_offset_of(rank) for rank in range(team.size)}
    off = offsets.pop()
    if offsets:
        raise ContractViolation("engine push requires a uniform destination offset")
    ctx.heap.check_range(off, nbytes)
    ctx.heap.mem[off:off + nbytes] = ctx.heap.mem[src_off:src_off + nbytes]
    progression = _team_progression(team)
    all_local = all(ctx.runtime.is_local(pe) for pe in team.members)
    slots = []
    if all_local and progression is not None:
        start, stride = progression
        msg = ring.RingMessage(op=ring.OP_ENGINE_PUSH, src_pe=ctx.pe,
                               dst_pe=ctx.pe, addr_a=off, addr_b=src_off,
                               count=nbytes, imm1=now_ns(),
                               imm2=start | (stride << 16) | (team.size << 32))
        slots.append(ctx.proxy_call(msg, blocking=False, track=False))
    else:
        for pe in team.members:
            if pe == ctx.pe:
                continue
            msg = ring.RingMessage(op=ring.OP_ENGINE_COPY, src_pe=ctx.pe,
                                   dst_pe=pe, addr_a=off, count=nbytes,
                                   stride=now_ns(), addr_b=src_off)
            slots.append(ctx.proxy_call(msg, blocking=False, track=False))
    for slot in slots:
        # Cohorts of waiting leaders back off at once so the proxy and the
        # copy scheduler keep both cores.
        ctx.pool.wait(slot, hot=16)


def _read_member_src(ctx, team: Team, pe: int, src_offset: int, nbytes: int) -> bytes:
    """Pull a member's source region (remote load or wire get)."""
    if ctx.runtime.is_local(pe):
        heap = ctx.runtime.heap_of(pe)
        heap.check_range(src_offset, nbytes)
        return bytes(heap.mem[src_offset:src_offset + nbytes])
    buf = bytearray(nbytes)
    rma.get(ctx, buf, ctx.addr(src_offset), nbytes, pe)
    return bytes(buf)


# ---------------------------------------------------------------------------
# broadcast / fcollect / collect
# ---------------------------------------------------------------------------

def broadcast(ctx, team: Team, dest: int, src: int, nelems: int,
              elem: ElementType, root: int, group: Optional[WorkGroupCtx] = None):
    """Root stores its src to every member's dest; bracketed by entry and
    exit syncs so reused buffers are safe on both sides."""
    group = group or solo_group()
    if not 0 <= root < team.size:
        raise ContractViolation(f"root {root} outside team of {team.size}")
    group.check_collective_args(hash(("broadcast", team.id, nelems, root)))
    nbytes = nelems * elem.width
    dest_off = ctx.heap.offset_of(dest)
    src_off = ctx.heap.offset_of(src)
    if group.leader:
        team_sync(ctx, team)
        if team.my_team_rank == root and nbytes:
            path = ctx.runtime.policy.collective_path(
                "broadcast", nelems, group.group_size, team.size, elem.width)
            if path == DIRECT:
                data = bytes(ctx.heap.mem[src_off:src_off + nbytes])
                _push_direct(ctx, team, data, lambda rank: dest_off, group)
            else:
                _push_engine(ctx, team, src_off, nbytes, lambda rank: dest_off)
        team_sync(ctx, team)
    group.barrier()


def broadcast_work_group(ctx, team: Team, dest: int, src: int, nelems: int,
                         elem: ElementType, root: int, group: WorkGroupCtx):
    group.barrier()
    broadcast(ctx, team, dest, src, nelems, elem, root, group=group)


def fcollect(ctx, team: Team, dest: int, src: int, nelems: int,
             elem: ElementType, group: Optional[WorkGroupCtx] = None):
    """Every PE pushes its src into every member's dest at element offset
    my_team_rank * nelems; the exit sync guarantees completeness."""
    group = group or solo_group()
    group.check_collective_args(hash(("fcollect", team.id, nelems)))
    nbytes = nelems * elem.width
    dest_off = ctx.heap.offset_of(dest)
    src_off = ctx.heap.offset_of(src)
    ctx.heap.check_range(dest_off, team.size * nbytes)
    my_slot = team.my_team_rank * nbytes
    if group.leader:
        team_sync(ctx, team)
        if nbytes:
            path = ctx.runtime.policy.collective_path(
                "fcollect", nelems, group.group_size, team.size, elem.width)
            if path == DIRECT:
                data = bytes(ctx.heap.mem[src_off:src_off + nbytes])
                _push_direct(ctx, team, data, lambda rank: dest_off + my_slot, group)
            else:
                _push_engine(ctx, team, src_off, nbytes, lambda rank: dest_off + my_slot)
        team_sync(ctx, team)
    group.barrier()


def fcollect_work_group(ctx, team: Team, dest: int, src: int, nelems: int,
                        elem: ElementType, group: WorkGroupCtx):
    group.barrier()
    fcollect(ctx, team, dest, src, nelems, elem, group=group)


def collect(ctx, team: Team, dest: int, src: int, my_nelems: int,
            elem: ElementType):
    """Variable-size allgather: exchange sizes through psync, prefix-sum for
    placement, then push like fcollect at the computed offsets."""
    sizes_off = team.psync_offset + 16
    # Size exchange: push my element count into everyone's collect_sizes slot.
    for pe in team.members:
        rma.p(ctx, ctx.addr(sizes_off + 8 * team.my_team_rank), my_nelems,
              pe, U64)
    team_sync(ctx, team)
    sizes = [memops.load_scalar(ctx.heap, sizes_off + 8 * r, U64)
             for r in range(team.size)]
    total = sum(sizes)
    nbytes_total = total * elem.width
    dest_off = ctx.heap.offset_of(dest)
    ctx.heap.check_range(dest_off, nbytes_total)
    my_elem_offset = sum(sizes[:team.my_team_rank])
    nbytes = my_nelems * elem.width
    if nbytes:
        src_off = ctx.heap.offset_of(src)
        my_slot = my_elem_offset * elem.width
        path = ctx.runtime.policy.collective_path(
            "collect", my_nelems, 1, team.size, elem.width)
        if path == DIRECT:
            data = bytes(ctx.heap.mem[src_off:src_off + nbytes])
            _push_direct(ctx, team, data, lambda rank: dest_off + my_slot,
                         solo_group())
        else:
            _push_engine(ctx, team, src_off, nbytes, lambda rank: dest_off + my_slot)
    team_sync(ctx, team)
    return total


# ---------------------------------------------------------------------------
# reduce
# ---------------------------------------------------------------------------

_REDUCE_FNS = {
    "min": np.minimum,
    "max": np.maximum,
    "sum": np.add,
    "prod": np.multiply,
    "and": np.bitwise_and,
    "or": np.bitwise_or,
    "xor": np.bitwise_xor,
}

BITWISE_REDUCE = ("and", "or", "xor")
FLOAT_REDUCE = ("min", "max", "sum", "prod")


def check_reduce(op: str, elem: ElementType):
    if op not in _REDUCE_FNS:
        raise ContractViolation(f"unknown reduce op {op!r}")
    if elem.is_float and op in BITWISE_REDUCE:
        raise ContractViolation(f"reduce {op!r} undefined for {elem.name}")


def reduce(ctx, team: Team, dest: int, src: int, nelems: int,
           elem: ElementType, op: str, group: Optional[WorkGroupCtx] = None):
    """Every PE computes the full result itself: remote-load each member's
    src, fold in ascending team-rank order (fixing float results bit-exactly),
    and store to the local dest.  No inter-PE result exchange."""
    check_reduce(op, elem)
    group = group or solo_group()
    group.check_collective_args(hash(("reduce", team.id, nelems, op)))
    dest_off = ctx.heap.offset_of(dest)
    src_off = ctx.heap.offset_of(src)
    nbytes = nelems * elem.width
    ctx.heap.check_range(dest_off, nbytes)
    ctx.heap.check_range(src_off, nbytes)
    fold = _REDUCE_FNS[op]
    if group.leader:
        team_sync(ctx, team)
    group.barrier()
    if nelems:
        if group.cohort or group.group_size == 1:
            lo, hi = 0, nelems
        else:
            lo, hi = item_block(nelems, group.group_size, group.item_id)
        if hi > lo:
            span_off = src_off + lo * elem.width
            span_bytes = (hi - lo) * elem.width
            acc = None
            with np.errstate(over="ignore", invalid="ignore"):
                for pe in team.members:
                    raw = _read_member_src(ctx, team, pe, span_off, span_bytes)
                    arr = np.frombuffer(raw, dtype=elem.np_dtype)
                    acc = arr.copy() if acc is None else fold(acc, arr)
            ctx.heap.mem[dest_off + lo * elem.width:
                         dest_off + hi * elem.width] = acc.tobytes()
    group.barrier()
    if group.leader:
        team_sync(ctx, team)
    group.barrier()


def reduce_work_group(ctx, team: Team, dest: int, src: int, nelems: int,
                      elem: ElementType, op: str, group: WorkGroupCtx):
    reduce(ctx, team, dest, src, nelems, elem, op, group=group)
