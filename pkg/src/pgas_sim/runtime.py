"""Runtime bring-up and the node proxy.

A Runtime instance is one "node": it hosts npes PE contexts over per-PE
symmetric heaps, one reverse-offload ring drained by a single proxy thread,
and one copy-engine scheduler.  Initialization is two-phase: phase 1
allocates heaps and establishes every PE's base address (plus the internode
handshake when configured), phase 2 builds the accessibility tables and only
then starts the proxy machinery.

PE code runs on caller-provided threads; `Runtime.parallel` is the helper
that runs one worker per local PE the way the tests and benchmarks do.
"""

from __future__ import annotations

import logging
import sys
import threading
import time
from typing import Callable, Dict, List, Optional, Tuple

from . import amo as amo_mod
from . import memops, ring
from .config import RuntimeConfig
from .dtypes import BY_CODE
from .errors import (ConfigError, ContractViolation, GeometryError, LinkError,
                     PendingOperationsError, PgasError)
from .heap import AccessTable, PeId, SymmetricHeap, heap_base, translate
from .locks import SpinLock, spin_budget
from .internode import Link, establish_link
from .ring import (AMO_OPS, FLAG_COMPLETION, FLAG_SIG_ADD, FLAG_TOKEN,
                   OP_ENGINE_COPY, OP_ENGINE_PUSH, OP_G, OP_GET, OP_IGET,
                   OP_IPUT, OP_NAMES, OP_P, OP_PUT, OP_PUT_SIGNAL,
                   CompletionPool, Ring, RingMessage)
from .transport import (CostModel, CutoverPolicy, EngineScheduler,
                        TopologyProfile, now_ns, profile_for_pair)

log = logging.getLogger("pgas_sim.runtime")

_LIVE_LOCK = threading.Lock()
_LIVE_STANDALONE = False

STATUS_OK = 0
STATUS_ERROR = 1


class TokenRegistry:
    """Names caller-side buffers with u64 tokens so the fixed-size ring
    message can reference private memory sources and destinations."""

    def __init__(self):
        self._lock = SpinLock()
        self._next = 1
        self._entries: Dict[int, object] = {}

    def put(self, obj) -> int:
        with self._lock:
            token = self._next
            self._next += 1
            self._entries[token] = obj
            return token

    def take(self, token: int):
        with self._lock:
            return self._entries.pop(token)


class PeContext:
    """One PE's identity, heap, tables, and completion pool."""

    def __init__(self, runtime: "Runtime", pe: int, local_idx: int):
        self.runtime = runtime
        self.pe = pe
        self.local_idx = local_idx
        self.heap = runtime.heaps[local_idx]
        self.table: Optional[AccessTable] = None  # built in phase 2
        self.pool = CompletionPool(runtime.config.completion_slots)
        self.outstanding: set = set()
        self._out_lock = SpinLock()

    # -- identity ---------------------------------------------------------

    @property
    def npes(self) -> int:
        return self.runtime.world_size

    def my_pe(self) -> PeId:
        return PeId(self.pe)

    def n_pes(self) -> int:
        return self.runtime.world_size

    # -- memory -----------------------------------------------------------

    def addr(self, offset: int) -> int:
        return self.heap.base + offset

    def symm_alloc(self, nbytes: int) -> int:
        """Collective bump allocation; identical call sequences give identical
        offsets on every PE, so no coordination is required."""
        return self.heap.alloc(nbytes)

    def translate(self, local_addr: int, target: int) -> Optional[int]:
        return translate(self.table, self.heap.base, self.heap.size,
                         local_addr, int(target))

    # -- proxy plumbing ----------------------------------------------------

    def comp_index(self, slot: int) -> int:
        return self.local_idx * self.runtime.config.completion_slots + slot

    def proxy_call(self, msg: RingMessage, blocking: bool = True,
                   ext_len: int = 0, ext_sink=None, track: bool = True):
        """Send msg through the ring with a completion slot attached.

        Blocking calls return the completion payload.  Non-blocking calls
        return the slot index: tracked ones are drained by quiet(), untracked
        ones are owned (and must be waited) by the caller.
        """
        slot = self.pool.alloc(msg.op, drain=self._retire_done)
        msg.completion_index = self.comp_index(slot)
        msg.flags |= FLAG_COMPLETION
        if ext_sink is not None:
            self.runtime.pending_ext[msg.completion_index] = (ext_len, ext_sink)
        self.runtime.ring.send(msg)
        if blocking:
            return self.pool.wait(slot)
        if track:
            with self._out_lock:
                self.outstanding.add(slot)
        return slot

    def _retire_done(self):
        """Free already-finished non-blocking completions (pool pressure relief)."""
        with self._out_lock:
            done = [s for s in self.outstanding
                    if self.pool.poll(s) in (ring.COMP_DONE, ring.COMP_ERROR)]
            for s in done:
                self.outstanding.discard(s)
        for s in done:
            self.pool.wait(s)

    # -- ordering ----------------------------------------------------------

    def quiet(self):
        """Complete every outstanding non-blocking operation by this PE."""
        while True:
            with self._out_lock:
                if not self.outstanding:
                    return
                slot = next(iter(self.outstanding))
                self.outstanding.discard(slot)
            self.pool.wait(slot)

    def fence(self):
        # Quiet's completion guarantee subsumes per-PE ordering.
        self.quiet()

    def outstanding_count(self) -> int:
        with self._out_lock:
            return len(self.outstanding)


class Runtime:
    """RuntimeHandle: owns the node's PEs, proxy, scheduler, and link."""

    def __init__(self, config: RuntimeConfig):
        global _LIVE_STANDALONE
        config.validate()
        self.config = config
        self.finalized = False
        self._init_trace: List[str] = []
        # Poll loops yield on every iteration; a short switch interval keeps
        # cross-thread handoff responsive at the cost model's microsecond scale.
        if sys.getswitchinterval() > 0.0002:
            sys.setswitchinterval(0.0001)

        if config.internode_role == "standalone":
            with _LIVE_LOCK:
                if _LIVE_STANDALONE:
                    raise PgasError("a standalone runtime is already live in this process")
                _LIVE_STANDALONE = True

        try:
            self._bring_up()
        except BaseException:
            if config.internode_role == "standalone":
                with _LIVE_LOCK:
                    _LIVE_STANDALONE = False
            raise

    def _bring_up(self):
        config = self.config
        # ---- phase 1: heaps exist and every base address is agreed ----
        self.link: Optional[Link] = None
        if config.internode_role == "standalone":
            self.pe_base = 0
            self.world_size = config.npes
        else:
            self.link, peer = establish_link(config.internode_role,
                                             config.peer_endpoint,
                                             npes=config.npes,
                                             world=config.world_size or 0,
                                             heap_size=config.heap_size)
            try:
                if peer.heap_size != config.heap_size:
                    raise GeometryError(f"heap_size mismatch: local {config.heap_size}, "
                                        f"peer {peer.heap_size}")
                total = config.npes + peer.npes
                for declared in (config.world_size or 0, peer.world or 0):
                    if declared and declared != total:
                        raise GeometryError(f"declared world {declared} != composed {total}")
            except GeometryError:
                self.link.close()
                raise
            self.world_size = total
            self.pe_base = 0 if config.internode_role == "node_a" else peer.npes
        self.heaps = [SymmetricHeap(self.pe_base + i, config.heap_size)
                      for i in range(config.npes)]
        self._init_trace.append("phase1:heaps")
        # Base exchange: bases derive from global PE index and heap size, so
        # agreement on geometry is agreement on every base address.
        self.bases = [heap_base(pe, config.heap_size) for pe in range(self.world_size)]
        self._init_trace.append("phase1:bases_exchanged")
        self._phase1_done = threading.Event()
        self._phase1_done.set()

        # ---- phase 2: accessibility tables, then the proxy machinery ----
        self.pes = [PeContext(self, self.pe_base + i, i) for i in range(config.npes)]
        local = range(self.pe_base, self.pe_base + config.npes)
        for ctx in self.pes:
            visible = [self.bases[pe] if pe in local else None
                       for pe in range(self.world_size)]
            ctx.table = AccessTable.build(ctx.pe, visible)
        self._init_trace.append("phase2:tables")

        self.model = CostModel(config.time_scale,
                               startup_override_us=config.engine_startup_us,
                               bw_override=(None if config.engine_bw_cap_gbps is None
                                            else config.engine_bw_cap_gbps * 1e9))
        self.policy = CutoverPolicy(mode=config.cutover_mode,
                                    forced_topology=config.topology)
        self.tokens = TokenRegistry()
        self.pending_ext: Dict[int, Tuple[int, Callable]] = {}
        self.ring = Ring(config.ring_capacity, config.publish_interval)
        self.scheduler = EngineScheduler(self.model)
        self._proxy_stop = False
        self._proxy = threading.Thread(target=self._proxy_loop,
                                       name="pgas-proxy", daemon=True)
        self._proxy.start()
        if self.link is not None:
            self.link.start_receiver(self._on_wire_request, self._on_wire_reply,
                                     self._wire_ext_len, self._on_link_down)
        self._init_trace.append("phase2:proxy_started")
        self._team_world = None

    # -- lookups ------------------------------------------------------------

    def is_local(self, pe: int) -> bool:
        return self.pe_base <= pe < self.pe_base + self.config.npes

    def heap_of(self, pe: int) -> SymmetricHeap:
        if not self.is_local(pe):
            raise ContractViolation(f"PE {pe} is not hosted on this node")
        return self.heaps[pe - self.pe_base]

    def pool_of(self, comp_index: int) -> Tuple[CompletionPool, int]:
        slots = self.config.completion_slots
        return self.pes[comp_index // slots].pool, comp_index % slots

    def pair_profile(self, src_pe: int, dst_pe: int) -> TopologyProfile:
        return profile_for_pair(src_pe, dst_pe, self.config.topology)

    # -- worker helpers -------------------------------------------------------

    def parallel(self, fn: Callable, *args) -> list:
        """Run fn(ctx, *args) on one thread per local PE; re-raise the first error."""
        results = [None] * len(self.pes)
        errors = []

        def body(i, ctx):
            try:
                results[i] = fn(ctx, *args)
            except BaseException as exc:  # noqa: BLE001 - propagated below
                errors.append(exc)

        threads = [threading.Thread(target=body, args=(i, ctx), daemon=True)
                   for i, ctx in enumerate(self.pes)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return results

    def symm_alloc_all(self, nbytes: int) -> int:
        """Convenience collective allocation performed for every local PE."""
        offsets = {ctx.symm_alloc(nbytes) for ctx in self.pes}
        if len(offsets) != 1:
            raise PgasError(f"allocation diverged across PEs: {sorted(offsets)}")
        return offsets.pop()

    # -- proxy -----------------------------------------------------------------

    def _proxy_loop(self):
        idle = 0
        while True:
            msg = self.ring.consume()
            if msg is None:
                if self._proxy_stop:
                    return
                # Poll-only progress (no doorbell): stay hot for a few ms,
                # then back off so an idle node does not burn a core.
                idle += 1
                time.sleep(0 if idle < spin_budget() * 2 else 0.001)
                continue
            idle = 0
            try:
                self._dispatch(msg)
            except Exception as exc:  # noqa: BLE001 - fail the waiter, keep draining
                log.exception("proxy dispatch failed: %s", exc)
                self._fail_completion(msg, str(exc))

    def _fail_completion(self, msg: RingMessage, text: str):
        if msg.flags & FLAG_COMPLETION:
            pool, slot = self.pool_of(msg.completion_index)
            self.pending_ext.pop(msg.completion_index, None)
            pool.fail(slot, text)

    def _complete(self, msg: RingMessage, ret: int = 0):
        if msg.flags & FLAG_COMPLETION:
            pool, slot = self.pool_of(msg.completion_index)
            pool.complete(slot, ret)

    def _dispatch(self, msg: RingMessage):
        if not self.is_local(msg.dst_pe):
            self._forward(msg)
            return
        heap = self.heap_of(msg.dst_pe)
        op = msg.op
        if op == OP_P:
            elem = BY_CODE[msg.dtype]
            memops.store_scalar(heap, msg.addr_a, msg.imm1, elem)
            self._complete(msg)
        elif op == OP_G:
            elem = BY_CODE[msg.dtype]
            self._complete(msg, memops.load_scalar(heap, msg.addr_a, elem))
        elif op in AMO_OPS:
            elem = BY_CODE[msg.dtype]
            old = amo_mod.apply_rmw(heap, msg.addr_a, op, elem, msg.imm1, msg.imm2)
            self._complete(msg, old)
        elif op in (OP_PUT, OP_ENGINE_COPY, OP_PUT_SIGNAL, OP_IPUT):
            self._schedule_put(msg, heap, payload=None)
        elif op in (OP_GET, OP_IGET):
            self._schedule_get(msg, heap)
        elif op == OP_ENGINE_PUSH:
            self._schedule_push(msg)
        else:
            raise ContractViolation(f"proxy cannot execute opcode {op}")

    def _schedule_push(self, msg: RingMessage):
        """Collective fan-out: expand one request into per-destination engine
        copies on the sender's lane (startups serialize, data overlaps), and
        complete once the last copy's deadline fires."""
        start = msg.imm2 & 0xFFFF
        step = (msg.imm2 >> 16) & 0xFFFF
        size = (msg.imm2 >> 32) & 0xFFFF
        nbytes = msg.count
        src_heap = self.heap_of(msg.src_pe)
        src_heap.check_range(msg.addr_b, nbytes)
        targets = []
        for k in range(size):
            pe = start + k * step
            if pe == msg.src_pe:
                continue
            heap = self.heap_of(pe)
            heap.check_range(msg.addr_a, nbytes)
            targets.append((pe, heap))
        if not targets:
            self._complete(msg)
            return
        remaining = [len(targets)]

        def done():
            remaining[0] -= 1
            if remaining[0] == 0:
                self._complete(msg)

        fail = lambda exc: self._fail_completion(msg, str(exc))
        for pe, heap in targets:
            profile = self.pair_profile(msg.src_pe, pe)

            def work(_heap=heap):
                _heap.mem[msg.addr_a:msg.addr_a + nbytes] = \
                    src_heap.mem[msg.addr_b:msg.addr_b + nbytes]

            self.scheduler.submit(msg.src_pe, profile, nbytes, msg.imm1,
                                  work, done, fail)

    # Bulk execution: real copies run in the scheduler thread; completion
    # fires at the modeled per-lane deadline anchored at compose time.

    def _put_source(self, msg: RingMessage, payload) -> Callable[[], bytes]:
        if payload is not None:
            return lambda: payload
        if msg.flags & FLAG_TOKEN:
            buf = self.tokens.take(msg.addr_b)
            return lambda: bytes(buf)
        src_heap = self.heap_of(msg.src_pe)
        nbytes = self._payload_len(msg)
        src_heap.check_range(msg.addr_b, nbytes)
        return lambda: bytes(src_heap.mem[msg.addr_b:msg.addr_b + nbytes])

    @staticmethod
    def _payload_len(msg: RingMessage) -> int:
        if msg.op == OP_IPUT:
            return msg.count * BY_CODE[msg.dtype].width
        if msg.op in (OP_PUT, OP_ENGINE_COPY, OP_PUT_SIGNAL):
            return msg.count
        return 0

    def _schedule_put(self, msg: RingMessage, heap: SymmetricHeap, payload,
                      reply=None):
        read_src = self._put_source(msg, payload)
        nbytes = self._payload_len(msg)
        elem = BY_CODE[msg.dtype]
        if msg.op == OP_IPUT:
            dst_stride = (msg.stride >> 32) & 0xFFFFFFFF
            if msg.count:
                heap.check_range(msg.addr_a,
                                 ((msg.count - 1) * dst_stride + 1) * elem.width)
        else:
            heap.check_range(msg.addr_a, nbytes)
            if msg.op == OP_PUT_SIGNAL:
                heap.check_range(msg.imm2, 8)
        anchor = msg.imm1 if msg.op == OP_IPUT else msg.stride
        if reply is not None or not anchor:
            anchor = now_ns()
        profile = self.pair_profile(msg.src_pe, msg.dst_pe)

        def work():
            data = read_src()
            if msg.op == OP_IPUT:
                memops.scatter_strided(heap, msg.addr_a, dst_stride, msg.count,
                                       elem, data)
            else:
                heap.mem[msg.addr_a:msg.addr_a + nbytes] = data
                if msg.op == OP_PUT_SIGNAL:
                    memops.signal_update(heap, msg.imm2, msg.imm1,
                                         bool(msg.flags & FLAG_SIG_ADD))

        if reply is None:
            done = lambda: self._complete(msg)
            fail = lambda exc: self._fail_completion(msg, str(exc))
        else:
            done = lambda: reply(STATUS_OK, 0, b"")
            fail = lambda exc: reply(STATUS_ERROR, 0, b"")
        self.scheduler.submit(msg.src_pe, profile, nbytes, anchor, work, done, fail)

    def _schedule_get(self, msg: RingMessage, heap: SymmetricHeap, reply=None):
        elem = BY_CODE[msg.dtype]
        nbytes = msg.count * elem.width if msg.op == OP_IGET else msg.count
        src_stride = msg.stride & 0xFFFFFFFF
        dst_stride = (msg.stride >> 32) & 0xFFFFFFFF
        if msg.op == OP_IGET:
            if msg.count:
                heap.check_range(msg.addr_a,
                                 ((msg.count - 1) * src_stride + 1) * elem.width)
        else:
            heap.check_range(msg.addr_a, nbytes)
        anchor = msg.imm1 if msg.op == OP_IGET else msg.stride
        if reply is not None or not anchor:
            anchor = now_ns()
        profile = self.pair_profile(msg.src_pe, msg.dst_pe)
        sink_buf = [b""]
        # Local requests name their destination: a registered private buffer
        # (token) or the requester's own heap.  Wire requests return the data.
        dest = None
        if reply is None and msg.flags & FLAG_TOKEN:
            dest = self.tokens.take(msg.addr_b)

        def work():
            if msg.op == OP_IGET:
                data = memops.gather_strided(heap, msg.addr_a, src_stride,
                                             msg.count, elem)
            else:
                data = bytes(heap.mem[msg.addr_a:msg.addr_a + nbytes])
            if reply is not None:
                sink_buf[0] = data
            elif dest is not None:
                if msg.op == OP_IGET:
                    memops.scatter_strided_buffer(dest, dst_stride, msg.count,
                                                  elem, data)
                else:
                    dest[0:nbytes] = data
            else:
                dst_heap = self.heap_of(msg.src_pe)
                if msg.op == OP_IGET:
                    memops.scatter_strided(dst_heap, msg.addr_b, dst_stride,
                                           msg.count, elem, data)
                else:
                    dst_heap.check_range(msg.addr_b, nbytes)
                    dst_heap.mem[msg.addr_b:msg.addr_b + nbytes] = data

        if reply is None:
            done = lambda: self._complete(msg, nbytes)
            fail = lambda exc: self._fail_completion(msg, str(exc))
        else:
            done = lambda: reply(STATUS_OK, nbytes, sink_buf[0])
            fail = lambda exc: reply(STATUS_ERROR, 0, b"")
        self.scheduler.submit(msg.src_pe, profile, nbytes, anchor, work, done, fail)

    # -- internode ----------------------------------------------------------

    def _forward(self, msg: RingMessage):
        if self.link is None:
            raise ContractViolation(f"PE {msg.dst_pe} unreachable: no internode link")
        payload = b""
        if msg.op in (OP_PUT, OP_ENGINE_COPY, OP_PUT_SIGNAL, OP_IPUT):
            payload = self._put_source(msg, None)()
            msg.flags &= ~FLAG_TOKEN
        self.link.send_request(msg, payload)

    def _on_wire_request(self, msg: RingMessage, payload: bytes,
                         reply: Callable[[int, int, bytes], None]):
        """Peer daemon entry: execute a forwarded request against local heaps."""
        try:
            if not self.is_local(msg.dst_pe):
                raise ContractViolation(f"PE {msg.dst_pe} is not hosted here")
            heap = self.heap_of(msg.dst_pe)
            op = msg.op
            if op == OP_P:
                memops.store_scalar(heap, msg.addr_a, msg.imm1, BY_CODE[msg.dtype])
                reply(STATUS_OK, 0, b"")
            elif op == OP_G:
                reply(STATUS_OK, memops.load_scalar(heap, msg.addr_a,
                                                    BY_CODE[msg.dtype]), b"")
            elif op in AMO_OPS:
                old = amo_mod.apply_rmw(heap, msg.addr_a, op, BY_CODE[msg.dtype],
                                        msg.imm1, msg.imm2)
                reply(STATUS_OK, old, b"")
            elif op in (OP_PUT, OP_ENGINE_COPY, OP_PUT_SIGNAL, OP_IPUT):
                self._schedule_put(msg, heap, payload, reply=reply)
            elif op in (OP_GET, OP_IGET):
                self._schedule_get(msg, heap, reply=reply)
            else:
                raise ContractViolation(f"daemon cannot execute opcode {op}")
        except Exception as exc:  # noqa: BLE001 - report to the requester
            log.exception("daemon execution failed")
            reply(STATUS_ERROR, 0, b"")

    def _wire_ext_len(self, comp_index: int, status: int) -> int:
        if status != STATUS_OK:
            return 0
        entry = self.pending_ext.get(comp_index)
        return entry[0] if entry else 0

    def _on_wire_reply(self, comp_index: int, status: int, ret: int, data: bytes):
        entry = self.pending_ext.pop(comp_index, None)
        pool, slot = self.pool_of(comp_index)
        if status != STATUS_OK:
            pool.fail(slot, "remote execution failed")
            return
        if entry is not None and data:
            entry[1](data)
        pool.complete(slot, ret)

    def _on_link_down(self, reason: str):
        """Fail every outstanding wire completion; no retry or resume."""
        for comp_index in list(self.pending_ext.keys()):
            self.pending_ext.pop(comp_index, None)
        for ctx in self.pes:
            for slot in range(ctx.pool.size):
                if ctx.pool.status[slot] == ring.COMP_PENDING:
                    ctx.pool.fail(slot, f"link failure: {reason}")

    # -- teardown -------------------------------------------------------------

    def finalize(self):
        global _LIVE_STANDALONE
        if self.finalized:
            raise PgasError("runtime already finalized")
        pending = [(ctx.pe, ctx.pool.op[s])
                   for ctx in self.pes
                   for s in list(ctx.outstanding)]
        if pending:
            pe, op = pending[0]
            raise PendingOperationsError(
                f"{len(pending)} operation(s) still in flight, e.g. "
                f"{OP_NAMES.get(op, op)} by PE {pe}; call quiet() first")
        # Drain anything already accepted, then stop the machinery.
        deadline = time.monotonic() + 30
        while self.ring.consumed < self.ring._ticket and time.monotonic() < deadline:
            time.sleep(0.0005)
        self.scheduler.drain()
        self.ring.request_shutdown()
        self._proxy_stop = True
        self._proxy.join(timeout=10)
        self.scheduler.stop()
        if self.link is not None:
            self.link.close()
        self.finalized = True
        if self.config.internode_role == "standalone":
            with _LIVE_LOCK:
                _LIVE_STANDALONE = False

    def __enter__(self) -> "Runtime":
        return self

    def __exit__(self, exc_type, exc, tb):
        if not self.finalized:
            self.finalize()


def init(config: RuntimeConfig) -> Runtime:
    return Runtime(config)


def my_pe(ctx: PeContext) -> PeId:
    return ctx.my_pe()


def n_pes(ctx: PeContext) -> int:
    return ctx.n_pes()
