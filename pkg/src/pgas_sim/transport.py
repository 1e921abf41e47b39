"""The two data paths (collaborative direct stores, simulated copy engine)
and the cutover policy that picks between them.

Timing model
------------
All costs are expressed in "analog" units (microsecond startups, GB/s-class
bandwidths) and stretched by a global ``time_scale`` so they are large enough
to pace reliably with OS sleeps.  Both paths stretch identically, so cutover
arithmetic is scale-invariant.  A scale of 0 disables the model entirely,
which correctness tests use to run at raw speed.

Direct path: every work-item copies a contiguous block and then waits out its
modeled cost (per-4KiB-chunk throttle, floored by an aggregate saturation
cap).  Engine path: requests land on a per-source-PE lane of the copy
scheduler; submissions on one lane serialize their startup cost while data
transfers overlap, and completions fire at the modeled deadline anchored at
the moment the request was composed, so queue transit time is absorbed
rather than added.
"""

from __future__ import annotations

import heapq
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from .errors import ContractViolation, PgasError
from .locks import BACKOFF_SLEEP, SpinLock, spin_budget

DIRECT = "direct"
ENGINE = "engine"

CHUNK = 4096           # direct-path throttle granularity in bytes
DIRECT_FLOOR_US = 5.0  # latency floor of a single direct store, analog us
SYNC_HOP_US = 20.0     # per-member cost of a sync epoch, analog us

RMA_OPS = ("p", "g", "put", "get", "iput", "iget", "put_signal")
COLLECTIVE_OPS = ("broadcast", "fcollect", "collect", "reduce")

RMA_GROUP_CLAMP = 64
COLL_GROUP_CLAMP = 256
DEFAULT_RMA_THRESHOLD = 4096

# Engine must beat direct by this factor at the collective flip point; keeps
# the tuned choice safely inside the 0.8 acceptance envelope under timer noise.
COLL_FLIP_BIAS = 1.15

# The collective cutover anchor: 4096 elements at 256 work-items / 4 PEs.
ANCHOR_GROUP = 256
ANCHOR_NPES = 4
ANCHOR_ELEMS = 4096
ANCHOR_WIDTH = 8


def now_ns() -> int:
    return time.perf_counter_ns()


def pace_until(deadline_ns: int):
    """Wait out a wall-clock deadline.

    Timed sleeps on this platform are rounded up to a ~1 ms quantum, so only
    the coarse part uses them; the last couple of milliseconds are yield-spun
    (sleep(0) releases the GIL each iteration without touching the timer).
    """
    while True:
        rem = deadline_ns - time.perf_counter_ns()
        if rem <= 0:
            return
        if rem > 3_500_000:
            time.sleep((rem - 2_000_000) / 1e9)
        else:
            time.sleep(0)


@dataclass(frozen=True)
class TopologyProfile:
    """Cost constants for one interconnect hop, in analog units."""

    name: str
    engine_startup_us: float     # per-transfer startup on the copy scheduler
    engine_bw: float             # engine bytes/s; 0 = unlimited
    direct_throttle_us: float    # per work-item cost per 4 KiB chunk stored
    direct_cap: float            # aggregate direct-store ceiling, bytes/s
    coll_item_bw: float          # per work-item push-loop rate for collectives

    def direct_item_bw(self) -> float:
        return CHUNK / (self.direct_throttle_us * 1e-6)


def _collective_rate_anchor() -> float:
    """Cross-device per-destination push rate at the 256-item clamp, derived
    from requiring the engine to win by COLL_FLIP_BIAS exactly at the anchor
    point (4 PEs, 256 work-items, 4096 8-byte elements)."""
    startup = 10e-6
    engine_bw = 1.6e9
    anchor_bytes = ANCHOR_ELEMS * ANCHOR_WIDTH
    inv = COLL_FLIP_BIAS * ANCHOR_NPES * startup / anchor_bytes + COLL_FLIP_BIAS / engine_bw
    return 1.0 / inv


_D256_CD = _collective_rate_anchor()

BUILTIN_PROFILES: Dict[str, TopologyProfile] = {
    "same_tile": TopologyProfile("same_tile", 4.0, 3.2e9, 6.827, 2.88e9,
                                 2.0 * _D256_CD / COLL_GROUP_CLAMP),
    "cross_tile": TopologyProfile("cross_tile", 6.0, 2.4e9, 9.102, 2.16e9,
                                  1.5 * _D256_CD / COLL_GROUP_CLAMP),
    "cross_device": TopologyProfile("cross_device", 10.0, 1.6e9, 13.653, 1.44e9,
                                    _D256_CD / COLL_GROUP_CLAMP),
}


def profile_for_pair(src_pe: int, dst_pe: int, forced: Optional[str] = None) -> TopologyProfile:
    """PEs pair onto GPUs two tiles at a time: self is same-tile, the paired
    PE is the other tile of the same device, everyone else is another device."""
    if forced and forced != "auto":
        return BUILTIN_PROFILES[forced]
    if src_pe == dst_pe:
        return BUILTIN_PROFILES["same_tile"]
    if src_pe // 2 == dst_pe // 2:
        return BUILTIN_PROFILES["cross_tile"]
    return BUILTIN_PROFILES["cross_device"]


def collective_profile(npes: int, forced: Optional[str] = None) -> TopologyProfile:
    """Slowest hop present in a team of the first npes PEs; collectives pace
    their push loops against it."""
    if forced and forced != "auto":
        return BUILTIN_PROFILES[forced]
    if npes <= 1:
        return BUILTIN_PROFILES["same_tile"]
    if npes == 2:
        return BUILTIN_PROFILES["cross_tile"]
    return BUILTIN_PROFILES["cross_device"]


_CAL_LOCK = threading.Lock()
_CAL_BW: Optional[float] = None


def measure_memcpy_bw() -> float:
    """Host memcpy bandwidth in bytes/s, measured once and cached."""
    global _CAL_BW
    with _CAL_LOCK:
        if _CAL_BW is None:
            size = 8 << 20
            src = bytearray(size)
            dst = bytearray(size)
            best = float("inf")
            for _ in range(3):
                t0 = time.perf_counter()
                dst[:] = src
                best = min(best, time.perf_counter() - t0)
            _CAL_BW = size / max(best, 1e-9)
        return _CAL_BW


def auto_time_scale() -> float:
    """Stretch factor keeping effective rates well under real memcpy speed."""
    return max(20.0, 8e9 / measure_memcpy_bw())


class CostModel:
    """Applies time_scale to profile constants and computes modeled durations."""

    def __init__(self, time_scale: Optional[float] = None,
                 startup_override_us: Optional[float] = None,
                 bw_override: Optional[float] = None):
        self.time_scale = auto_time_scale() if time_scale is None else float(time_scale)
        self.startup_override_us = startup_override_us
        self.bw_override = bw_override

    @property
    def enabled(self) -> bool:
        return self.time_scale > 0

    def startup_ns(self, profile: TopologyProfile) -> int:
        if not self.enabled:
            return 0
        us = self.startup_override_us
        if us is None:
            us = profile.engine_startup_us
        return int(us * 1000 * self.time_scale)

    def engine_bw_eff(self, profile: TopologyProfile) -> Optional[float]:
        """Effective engine bytes/s, or None when unlimited / model disabled."""
        if not self.enabled:
            return None
        bw = self.bw_override if self.bw_override is not None else profile.engine_bw
        if not bw:
            return None
        return bw / self.time_scale

    def engine_data_ns(self, nbytes: int, profile: TopologyProfile) -> int:
        bw = self.engine_bw_eff(profile)
        if bw is None:
            return 0
        return int(nbytes / bw * 1e9)

    def direct_ns(self, nbytes: int, group_size: int, profile: TopologyProfile) -> int:
        """Wall time for a collaborative direct store of nbytes by group_size
        items: per-item throttle (fractional 4 KiB chunks), floored by the
        aggregate store ceiling and by a fixed small-store latency."""
        if not self.enabled or nbytes <= 0:
            return 0
        per_item = -(-nbytes // max(group_size, 1))
        throttle = per_item / CHUNK * profile.direct_throttle_us * 1000
        saturation = nbytes / profile.direct_cap * 1e9
        return int(max(DIRECT_FLOOR_US * 1000, throttle, saturation)
                   * self.time_scale)

    def coll_direct_ns(self, nbytes_per_dest: int, group_size: int,
                       profile: TopologyProfile) -> int:
        """Wall time for a push loop delivering nbytes_per_dest to every
        destination; stores to different destinations pipeline across links,
        so the cost depends on the payload, not the destination count."""
        if not self.enabled or nbytes_per_dest <= 0:
            return 0
        rate = profile.coll_item_bw * min(max(group_size, 1), COLL_GROUP_CLAMP)
        return int(nbytes_per_dest / rate * 1e9 * self.time_scale)

    def sync_ns(self, team_size: int) -> int:
        """Modeled latency of one push-increment synchronization epoch: one
        pipelined remote-atomic hop per member."""
        if not self.enabled:
            return 0
        return int(team_size * SYNC_HOP_US * 1000 * self.time_scale)


# ---------------------------------------------------------------------------
# Work groups
# ---------------------------------------------------------------------------

VALIDATE = os.environ.get("PGAS_SIM_VALIDATE") == "1"


class SpinBarrier:
    """Rendezvous that releases only after all parties arrive.

    Waiters yield-spin on the generation counter; the stock threading.Barrier
    wakes through a condition variable, which costs milliseconds at this
    platform's timer quantum."""

    def __init__(self, parties: int):
        self.parties = parties
        self._count = 0
        self._generation = 0
        self._lock = SpinLock()

    def wait(self):
        with self._lock:
            generation = self._generation
            self._count += 1
            if self._count == self.parties:
                self._count = 0
                self._generation += 1
                return
        spins = 0
        while self._generation == generation:
            spins += 1
            time.sleep(0 if spins < 32 else BACKOFF_SLEEP)


class _GroupShared:
    def __init__(self, group_size: int):
        self.group_size = group_size
        self.barrier = SpinBarrier(group_size) if group_size > 1 else None
        self.lock = threading.Lock()
        self.result = None
        self.arg_hashes: List[int] = []


class WorkGroupCtx:
    """One work-item's view of a collaborating group.

    A *cohort* context stands in for all group_size items on a single calling
    thread: barriers are no-ops and the leader does everyone's share.  Real
    multi-threaded groups are built with :func:`make_work_group`.
    """

    def __init__(self, group_size: int, item_id: int, shared: _GroupShared,
                 cohort: bool = False):
        if not 0 <= item_id < group_size:
            raise ContractViolation(f"item_id {item_id} outside group of {group_size}")
        self.group_size = group_size
        self.item_id = item_id
        self.shared = shared
        self.cohort = cohort

    @property
    def leader(self) -> bool:
        return self.item_id == 0

    def barrier(self):
        if self.shared.barrier is not None and not self.cohort:
            self.shared.barrier.wait()

    def check_collective_args(self, args_hash: int):
        """Debug-mode detection of mismatched collective arguments."""
        if not VALIDATE or self.cohort or self.group_size == 1:
            return
        with self.shared.lock:
            self.shared.arg_hashes.append(args_hash)
            hashes = self.shared.arg_hashes
            if len(hashes) == self.group_size:
                first = hashes[0]
                self.shared.arg_hashes = []
                if any(h != first for h in hashes):
                    raise ContractViolation("work-group collective argument mismatch")
                return
        self.barrier()

    def broadcast_from_leader(self, value=None):
        """Leader publishes value; everyone returns it after a barrier."""
        if self.cohort or self.group_size == 1:
            return value if self.leader else self.shared.result
        if self.leader:
            self.shared.result = value
        self.barrier()
        out = self.shared.result
        self.barrier()
        return out


def solo_group() -> WorkGroupCtx:
    return WorkGroupCtx(1, 0, _GroupShared(1))


def cohort_group(group_size: int) -> WorkGroupCtx:
    """Single-caller stand-in for group_size items (used by the benchmarks)."""
    return WorkGroupCtx(group_size, 0, _GroupShared(1), cohort=True)


def make_work_group(group_size: int) -> List[WorkGroupCtx]:
    """Real item contexts sharing one rendezvous barrier."""
    shared = _GroupShared(group_size)
    return [WorkGroupCtx(group_size, i, shared) for i in range(group_size)]


def item_block(nbytes: int, group_size: int, item_id: int) -> Tuple[int, int]:
    """Contiguous block [i*ceil(n/G), min((i+1)*ceil(n/G), n)) owned by item i."""
    per = -(-nbytes // group_size) if nbytes else 0
    start = min(item_id * per, nbytes)
    stop = min(start + per, nbytes)
    return start, stop


def partition(nbytes: int, group_size: int) -> List[Tuple[int, int]]:
    return [item_block(nbytes, group_size, i) for i in range(group_size)]


def direct_copy(dst, src, nbytes: int, group: WorkGroupCtx,
                model: CostModel, profile: TopologyProfile):
    """Collaborative store: each item copies its block, waits out the modeled
    group cost, and joins the trailing barrier so all bytes land before return.

    dst and src are buffer views already resolved to the right heaps; slice
    stores on them are safe under concurrent access to the shared heap.
    """
    deadline = now_ns() + model.direct_ns(nbytes, group.group_size, profile)
    if nbytes:
        if group.cohort or group.group_size == 1:
            dst[:nbytes] = src[:nbytes]
        else:
            start, stop = item_block(nbytes, group.group_size, group.item_id)
            if stop > start:
                dst[start:stop] = src[start:stop]
    if model.enabled:
        pace_until(deadline)
    group.barrier()


# ---------------------------------------------------------------------------
# Copy-engine scheduler
# ---------------------------------------------------------------------------

class EngineScheduler:
    """One copier thread per node simulating per-PE engine lanes.

    Each submission carries the real copy work plus a modeled deadline:
    startup costs serialize per lane while data terms overlap lanes, and the
    deadline is anchored at the request's compose time so scheduler transit
    is absorbed rather than added.  The thread polls (short yields when hot,
    escalating sleeps when idle) because timed condition waits on this
    platform wake an order of magnitude too late for the model's scale.
    """

    def __init__(self, model: CostModel):
        self.model = model
        self._lock = SpinLock()
        self._pending = deque()
        self._timed: List[Tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._lane_clock: Dict[int, int] = {}
        self._stop = False
        self._thread = threading.Thread(target=self._run, name="pgas-copier", daemon=True)
        self._thread.start()

    def submit(self, lane: int, profile: TopologyProfile, nbytes: int,
               anchor_ns: int, work: Callable[[], None],
               done: Callable[[], None], fail: Optional[Callable] = None):
        """fail(exc) is invoked instead of done() when work raises."""
        with self._lock:
            if self._stop:
                raise PgasError("engine scheduler stopped")
            self._pending.append((lane, profile, nbytes, anchor_ns, work, done, fail))

    def _deadline(self, lane: int, profile: TopologyProfile,
                  nbytes: int, anchor_ns: int) -> int:
        if not self.model.enabled:
            return 0
        start = max(anchor_ns, self._lane_clock.get(lane, 0))
        submit_done = start + self.model.startup_ns(profile)
        self._lane_clock[lane] = submit_done
        return submit_done + self.model.engine_data_ns(nbytes, profile)

    def _run(self):
        idle = 0
        while True:
            with self._lock:
                batch = list(self._pending)
                self._pending.clear()
                stopping = self._stop
            for lane, profile, nbytes, anchor_ns, work, done, fail in batch:
                try:
                    work()
                except Exception as exc:  # noqa: BLE001 - reported to the waiter
                    if fail is not None:
                        fail(exc)
                    continue
                deadline = self._deadline(lane, profile, nbytes, anchor_ns)
                self._seq += 1
                heapq.heappush(self._timed, (deadline, self._seq, done))
            fired = 0
            while self._timed and self._timed[0][0] <= now_ns():
                _, _, done = heapq.heappop(self._timed)
                done()
                fired += 1
            if batch or fired:
                idle = 0
                continue
            if stopping and not self._timed:
                with self._lock:
                    if not self._pending:
                        return
                continue
            if self._timed:
                rem = self._timed[0][0] - now_ns()
                # Coarse sleeps only when far out; timed sleeps here round up
                # to a ~1 ms quantum, far too coarse for near deadlines.
                time.sleep(0.001 if rem > 3_500_000 else 0)
            else:
                idle += 1
                time.sleep(0 if idle < spin_budget() * 2 else 0.001)

    def drain(self):
        """Block until nothing is pending or timed (test/finalize helper)."""
        while True:
            with self._lock:
                if not self._pending and not self._timed:
                    return
            time.sleep(0.0002)

    def stop(self):
        with self._lock:
            self._stop = True
        self._thread.join(timeout=10)


# ---------------------------------------------------------------------------
# Cutover policy
# ---------------------------------------------------------------------------

def clamp(value: int, lo: int, hi: int) -> int:
    return max(lo, min(value, hi))


def collective_flip_elems(op_kind: str, group_size: int, npes: int,
                          forced_topology: Optional[str] = None,
                          width: int = ANCHOR_WIDTH) -> Optional[int]:
    """Element count where the engine overtakes the push loop by the flip bias.

    Derived from the cost model: direct pushes pipeline destinations while
    engine submissions serialize one startup per destination, so the flip
    scales linearly with the number of engine submissions the collective makes.
    Returns None when the engine can never win (rate above engine bandwidth).
    """
    profile = collective_profile(npes, forced_topology)
    dests = npes - 1 if op_kind == "broadcast" else npes
    if dests <= 0:
        return None
    rate = profile.coll_item_bw * clamp(group_size, 1, COLL_GROUP_CLAMP)
    startup = profile.engine_startup_us * 1e-6
    inv = 1.0 / rate - (COLL_FLIP_BIAS / profile.engine_bw if profile.engine_bw else 0.0)
    if inv <= 0:
        return None
    nbytes = COLL_FLIP_BIAS * dests * startup / inv
    return max(1, round(nbytes / width))


@dataclass
class CutoverPolicy:
    """Maps (operation, size, work-items, npes) to a transport path."""

    mode: str = "tuned"
    rma_threshold: int = DEFAULT_RMA_THRESHOLD     # bytes at one work-item
    forced_topology: Optional[str] = None
    overrides: Dict[Tuple[str, int, int], int] = field(default_factory=dict)

    def rma_path(self, nbytes: int, group_size: int) -> str:
        if self.mode == "never":
            return DIRECT
        if self.mode == "always":
            return ENGINE
        limit = self.rma_threshold * clamp(group_size, 1, RMA_GROUP_CLAMP)
        return ENGINE if nbytes > limit else DIRECT

    def collective_path(self, op_kind: str, nelems: int, group_size: int,
                        npes: int, width: int = ANCHOR_WIDTH) -> str:
        if self.mode == "never":
            return DIRECT
        if self.mode == "always":
            return ENGINE
        flip = self.overrides.get((op_kind, group_size, npes))
        if flip is None:
            flip = collective_flip_elems(op_kind, group_size, npes,
                                         self.forced_topology, width)
        if flip is None:
            return DIRECT
        return ENGINE if nelems >= flip else DIRECT

    def load_table(self, text: str):
        """Load `op group_size npes threshold` lines into the override table."""
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ContractViolation(f"threshold table line {lineno}: want 4 fields")
            op, gs, npes, thr = parts[0], int(parts[1]), int(parts[2]), parts[3]
            self.overrides[(op, gs, npes)] = (1 << 62) if thr == "inf" else int(thr)

    def dump_table(self) -> str:
        lines = []
        for (op, gs, npes), thr in sorted(self.overrides.items()):
            shown = "inf" if thr >= (1 << 62) else str(thr)
            lines.append(f"{op} {gs} {npes} {shown}")
        return "\n".join(lines) + ("\n" if lines else "")


def choose_path(policy: CutoverPolicy, op_kind: str, size: int,
                group_size: int, npes: int) -> str:
    """size is bytes for RMA operations and elements for collectives."""
    if op_kind in COLLECTIVE_OPS:
        return policy.collective_path(op_kind, size, group_size, npes)
    return policy.rma_path(size, group_size)


def measure_cutover(run_direct: Callable[[int], float],
                    run_engine: Callable[[int], float],
                    sizes: Iterable[int]) -> Optional[int]:
    """Smallest size from which the engine's measured bandwidth stays ahead.

    run_direct / run_engine return seconds for one transfer of the given size.
    Returns None when the engine never wins over the swept range.
    """
    sizes = sorted(sizes)
    wins = []
    for size in sizes:
        t_d = min(run_direct(size) for _ in range(3))
        t_e = min(run_engine(size) for _ in range(3))
        wins.append(t_e < t_d)
    for i, size in enumerate(sizes):
        if all(wins[i:]):
            return size
    return None
