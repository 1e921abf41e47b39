"""Benchmark harness: warm-up doubling, best-of-10 trials, CSV output, and
the c1/c2/c3 sweep suites that regenerate the paper-style figures under the
simulated cost model.

Methodology per point: run the body once, doubling the batch size until one
batch exceeds 2 ms of wall time, then time 10 trial batches of that size and
keep the best.  Bandwidth is bytes*iterations/best_seconds; latency is the
per-iteration time of the best batch.
"""

from __future__ import annotations

import csv
import io
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

from . import collectives, rma
from .config import RuntimeConfig
from .dtypes import U64
from .errors import ConfigError, GeometryError
from .runtime import Runtime
from .transport import SpinBarrier, cohort_group, solo_group

WARMUP_TARGET_S = 0.002
WARMUP_MAX_ITERS = 1 << 24
TRIALS = 10

CSV_COLUMNS = ("op", "topology", "mode", "work_items", "npes", "size",
               "iterations", "best_seconds", "bandwidth", "latency_us")

RMA_SIZES = tuple(1 << k for k in range(3, 25))          # 8 B .. 16 MiB
C3_NELEMS = tuple(1 << k for k in range(0, 15))          # 1 .. 16384 elements
C2_GROUPS = (1, 16, 128, 1024)
C3_GROUPS = (64, 256, 1024)
C3_NPES = (4, 8, 12)
BCAST_NPES = (2, 4, 6, 8, 10, 12)
BCAST_GROUP = 128


@dataclass
class BenchRecord:
    """One row of benchmark output."""

    op: str
    topology: str
    mode: str
    work_items: int
    npes: int
    size: int                  # bytes for RMA rows, elements for collectives
    iterations: int
    best_seconds: float
    bandwidth: float           # bytes per second moved by one PE
    latency_us: float

    @classmethod
    def from_timing(cls, op, topology, mode, work_items, npes, size,
                    iterations, best_seconds, bytes_per_iter) -> "BenchRecord":
        return cls(op=op, topology=topology, mode=mode, work_items=work_items,
                   npes=npes, size=size, iterations=iterations,
                   best_seconds=best_seconds,
                   bandwidth=bytes_per_iter * iterations / best_seconds,
                   latency_us=best_seconds / iterations * 1e6)


def warmup(clock: Callable[[], float], body: Callable[[], None]) -> int:
    """Double the batch size (1, 2, 4, ...) until one batch takes more than
    2 ms; returns that batch size for the trial phase."""
    iters = 1
    while True:
        start = clock()
        for _ in range(iters):
            body()
        if clock() - start > WARMUP_TARGET_S or iters >= WARMUP_MAX_ITERS:
            return iters
        iters *= 2


def best_of_trials(clock: Callable[[], float], body: Callable[[], None],
                   iterations: int, trials: int = TRIALS) -> float:
    """Best wall time over `trials` batches of `iterations` calls."""
    best = float("inf")
    for _ in range(trials):
        start = clock()
        for _ in range(iterations):
            body()
        best = min(best, clock() - start)
    return best


def measure_point(clock, body) -> tuple:
    iters = warmup(clock, body)
    return iters, best_of_trials(clock, body, iters)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _format_row(r: BenchRecord) -> str:
    return ",".join([r.op, r.topology, r.mode, str(r.work_items), str(r.npes),
                     str(r.size), str(r.iterations), repr(r.best_seconds),
                     repr(r.bandwidth), repr(r.latency_us)])


def emit_csv(records: Sequence[BenchRecord], path: str):
    """Write header plus one row per record (UTF-8, LF line endings)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in records:
            fh.write(_format_row(r) + "\n")


def append_csv(records: Sequence[BenchRecord], path: str):
    """Append rows, writing the header first if the file is new or empty."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            has_header = bool(fh.readline().strip())
    except FileNotFoundError:
        has_header = False
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if not has_header:
            fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in records:
            fh.write(_format_row(r) + "\n")


def parse_csv(text: str) -> List[BenchRecord]:
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ConfigError(f"CSV missing columns: {sorted(missing)}")
    out = []
    for row in reader:
        out.append(BenchRecord(
            op=row["op"], topology=row["topology"], mode=row["mode"],
            work_items=int(row["work_items"]), npes=int(row["npes"]),
            size=int(row["size"]), iterations=int(row["iterations"]),
            best_seconds=float(row["best_seconds"]),
            bandwidth=float(row["bandwidth"]),
            latency_us=float(row["latency_us"])))
    return out


# ---------------------------------------------------------------------------
# collective measurement scaffolding
# ---------------------------------------------------------------------------

class _TeamDriver:
    """Runs one-op bodies on every member PE in lockstep so the warm-up
    doubling and trial batches stay collectively agreed."""

    def __init__(self, runtime: Runtime, members: Sequence[int],
                 make_body: Callable, clock):
        self.clock = clock
        self.box = {}
        self.barrier = SpinBarrier(len(members) + 1)
        self.threads = []
        for rank, pe in enumerate(members):
            ctx = runtime.pes[pe - runtime.pe_base]
            t = threading.Thread(target=self._worker,
                                 args=(ctx, rank, make_body), daemon=True)
            t.start()
            self.threads.append(t)

    def _worker(self, ctx, rank, make_body):
        body = make_body(ctx)
        while True:
            self.barrier.wait()
            cmd, iters = self.box["cmd"]
            if cmd == "stop":
                return
            if rank == 0:
                start = self.clock()
            for _ in range(iters):
                body()
            if rank == 0:
                self.box["dt"] = self.clock() - start
            self.barrier.wait()

    def run_batch(self, iters: int) -> float:
        self.box["cmd"] = ("run", iters)
        self.barrier.wait()
        self.barrier.wait()
        return self.box["dt"]

    def measure(self) -> tuple:
        iters = 1
        while True:
            dt = self.run_batch(iters)
            if dt > WARMUP_TARGET_S or iters >= WARMUP_MAX_ITERS:
                break
            iters *= 2
        best = min(self.run_batch(iters) for _ in range(TRIALS))
        return iters, best

    def stop(self):
        self.box["cmd"] = ("stop", 0)
        self.barrier.wait()
        for t in self.threads:
            t.join()


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def _require(cond: bool, text: str):
    if not cond:
        raise GeometryError(text)


def _alloc_pair_buffers(runtime: Runtime, nbytes: int):
    """Src/dst sweep regions, allocated once per runtime and reused so the
    suites can run repeatedly (e.g. once per cutover mode)."""
    cached = getattr(runtime, "_bench_pair_buffers", None)
    if cached is not None and cached[2] >= nbytes:
        return cached[0], cached[1]
    src_off = runtime.symm_alloc_all(nbytes)
    dst_off = runtime.symm_alloc_all(nbytes)
    ctx = runtime.pes[0]
    ctx.heap.mem[src_off:src_off + nbytes] = bytes(
        (i * 131 + 17) & 0xFF for i in range(nbytes))
    runtime._bench_pair_buffers = (src_off, dst_off, nbytes)
    return src_off, dst_off


def suite_c1(runtime: Runtime, clock=time.perf_counter) -> List[BenchRecord]:
    """Single-threaded put/get bandwidth across the three topologies."""
    _require(runtime.world_size >= 3 and runtime.config.npes >= 3,
             "c1 needs at least 3 PEs on this node")
    _require(runtime.config.heap_size >= 36 << 20,
             "c1 needs heaps of at least 36 MiB")
    src_off, dst_off = _alloc_pair_buffers(runtime, RMA_SIZES[-1])
    ctx = runtime.pes[0]
    mode = runtime.policy.mode
    records = []
    pairs = [(0, "same_tile"), (1, "cross_tile"), (2, "cross_device")]
    for target, topo in pairs:
        for op_name, fn in (("put", rma.put), ("get", rma.get)):
            for size in RMA_SIZES:
                # put: local src -> remote dest; get: remote src -> local dest.
                body = lambda: fn(ctx, ctx.addr(dst_off), ctx.addr(src_off),
                                  size, target)
                iters, best = measure_point(clock, body)
                records.append(BenchRecord.from_timing(
                    op_name, topo, mode, 1, runtime.world_size, size,
                    iters, best, size))
    return records


def suite_c2(runtime: Runtime, clock=time.perf_counter) -> List[BenchRecord]:
    """Work-group put bandwidth for the cutover comparison (one mode per run)."""
    _require(runtime.world_size >= 3 and runtime.config.npes >= 3,
             "c2 needs at least 3 PEs on this node")
    _require(runtime.config.heap_size >= 36 << 20,
             "c2 needs heaps of at least 36 MiB")
    src_off, dst_off = _alloc_pair_buffers(runtime, RMA_SIZES[-1])
    ctx = runtime.pes[0]
    target = 2  # across devices, as the work-group experiments run
    mode = runtime.policy.mode
    records = []
    for g in C2_GROUPS:
        group = cohort_group(g)
        for size in RMA_SIZES:
            body = lambda: rma.put_work_group(ctx, ctx.addr(dst_off),
                                              ctx.addr(src_off), size, target,
                                              group)
            iters, best = measure_point(clock, body)
            records.append(BenchRecord.from_timing(
                "put_work_group", "cross_device", mode, g, runtime.world_size,
                size, iters, best, size))
    return records


def _make_prefix_teams(ctx, sizes):
    """Collective team creation: every PE allocates every team's psync so the
    bump allocators stay in lockstep, regardless of later membership."""
    world = collectives.team_world(ctx)
    teams = {world.size: world}
    for n in sorted(sizes):
        if n != world.size:
            teams[n] = collectives.team_split_strided(ctx, world, 0, 1, n)
    ctx._prefix_teams = teams


def _prefix_team(ctx, n: int):
    return ctx._prefix_teams[n]


def suite_c3(runtime: Runtime, clock=time.perf_counter) -> List[BenchRecord]:
    """fcollect latency across work-items and team sizes, plus broadcast
    scaling over the PE count (one cutover mode per run)."""
    _require(runtime.config.npes >= 12 and runtime.world_size == runtime.config.npes,
             "c3 needs 12 PEs on a single node")
    max_elems = C3_NELEMS[-1]
    _require(runtime.config.heap_size >= 32 * max_elems * 8 + (1 << 20),
             "c3 needs heaps of at least 4 MiB")
    cached = getattr(runtime, "_bench_c3_buffers", None)
    if cached is not None:
        src_off, dst_off = cached
    else:
        sizes = set(C3_NPES) | set(BCAST_NPES)
        runtime.parallel(_make_prefix_teams, sizes)
        src_off = runtime.symm_alloc_all(max_elems * 8)
        dst_off = runtime.symm_alloc_all(12 * max_elems * 8)
        for ctx in runtime.pes:
            ctx.heap.mem[src_off:src_off + max_elems * 8] = (
                int(ctx.pe + 1).to_bytes(8, "little") * max_elems)
        runtime._bench_c3_buffers = (src_off, dst_off)
    mode = runtime.policy.mode
    records = []
    for npes in C3_NPES:
        members = list(range(npes))
        for g in C3_GROUPS:
            for nelems in C3_NELEMS:
                def make_body(ctx, _n=nelems, _g=g, _npes=npes):
                    team = _prefix_team(ctx, _npes)
                    group = cohort_group(_g)
                    return lambda: collectives.fcollect_work_group(
                        ctx, team, ctx.addr(dst_off), ctx.addr(src_off),
                        _n, U64, group)
                driver = _TeamDriver(runtime, members, make_body, clock)
                iters, best = driver.measure()
                driver.stop()
                records.append(BenchRecord.from_timing(
                    "fcollect_work_group", "auto", mode, g, npes, nelems,
                    iters, best, nelems * 8 * npes))
    # The broadcast scaling figure is a tuned-cutover result; the pure-mode
    # passes only need the fcollect sweep above.
    if mode == "tuned":
        for npes in BCAST_NPES:
            members = list(range(npes))
            for nelems in C3_NELEMS:
                def make_body(ctx, _n=nelems, _npes=npes):
                    team = _prefix_team(ctx, _npes)
                    group = cohort_group(BCAST_GROUP)
                    return lambda: collectives.broadcast_work_group(
                        ctx, team, ctx.addr(dst_off), ctx.addr(src_off),
                        _n, U64, 0, group)
                driver = _TeamDriver(runtime, members, make_body, clock)
                iters, best = driver.measure()
                driver.stop()
                records.append(BenchRecord.from_timing(
                    "broadcast_work_group", "auto", mode, BCAST_GROUP, npes,
                    nelems, iters, best, nelems * 8 * (npes - 1)))
    return records


SUITES = {"c1": suite_c1, "c2": suite_c2, "c3": suite_c3}

SUITE_GEOMETRY = {
    # suite -> (min npes, min heap bytes)
    "c1": (3, 40 << 20),
    "c2": (3, 40 << 20),
    "c3": (12, 8 << 20),
}


def run_suite(runtime: Runtime, suite: str, out: Optional[str],
              clock=time.perf_counter) -> List[BenchRecord]:
    """Run a named sweep suite and append its rows to the CSV at `out`."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    records = SUITES[suite](runtime, clock)
    if out:
        append_csv(records, out)
    return records
