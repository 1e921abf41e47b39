"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line.  Run with `pytest tests/test_acceptance.py -v -s`.

Absolute hardware numbers are out of scope; these are property checks plus
shape reproduction under the simulated cost model.
"""

import random
import threading
import time

import numpy as np
import pytest

from pgas_sim import amo, bench, collectives as coll, rma
from pgas_sim.config import RuntimeConfig
from pgas_sim.dtypes import BY_NAME, FLOAT_TYPES, INT_TYPES, U64
from pgas_sim.ring import OP_PUT, CompletionPool, Ring, RingMessage
from pgas_sim.runtime import Runtime
from pgas_sim.transport import DIRECT, ENGINE, CutoverPolicy
from pgas_sim import internode

from executor import run_program
from program_gen import generate_programs
from reference_sim import ReferenceSim


def report(name: str, ok: bool, detail: str = ""):
    tail = f" ({detail})" if detail else ""
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}{tail}", flush=True)
    assert ok, f"{name}{tail}"


# ---------------------------------------------------------------------------
# 1. Ring exactly-once
# ---------------------------------------------------------------------------

def test_ring_exactly_once():
    producers, per, capacity = 8, 100_000, 4096
    ring = Ring(capacity, publish_interval=64)
    total = producers * per
    seen = bytearray(total)
    problems = []
    start = time.perf_counter()

    def produce(p):
        for i in range(per):
            msg = RingMessage(op=1, src_pe=p, imm1=i)
            msg.imm2 = msg.body_checksum()  # test-mode torn-read audit
            ring.send(msg)

    def consume():
        remaining = total
        while remaining:
            msg = ring.consume()
            if msg is None:
                time.sleep(0)
                continue
            if msg.imm2 != msg.body_checksum():
                problems.append("torn read")
                return
            idx = msg.src_pe * per + msg.imm1
            if seen[idx]:
                problems.append(f"duplicate delivery of {idx}")
                return
            seen[idx] = 1
            remaining -= 1

    consumer = threading.Thread(target=consume)
    consumer.start()
    workers = [threading.Thread(target=produce, args=(p,))
               for p in range(producers)]
    for t in workers:
        t.start()
    for t in workers:
        t.join()
    consumer.join(timeout=90)
    elapsed = time.perf_counter() - start
    received = sum(seen)
    ok = (not consumer.is_alive() and not problems
          and received == total and elapsed < 30)
    report("ring exactly-once 8x100k",
           ok, f"{received}/{total} received, {elapsed:.1f}s, "
               f"problems={problems or 'none'}")


# ---------------------------------------------------------------------------
# 2. Completion out-of-order
# ---------------------------------------------------------------------------

def test_completion_out_of_order():
    requests = 10_000
    workers = 8
    ring = Ring(1024, publish_interval=64)
    pool = CompletionPool(256)
    rng = random.Random(42)
    stop = threading.Event()

    def shuffling_proxy():
        batch = []
        done = 0
        while done < requests:
            msg = ring.consume()
            if msg is not None:
                batch.append(msg)
            if batch and (msg is None or len(batch) >= 16):
                rng.shuffle(batch)  # injected reordering
                for m in batch:
                    pool.complete(m.completion_index, m.imm1 ^ 0xA5A5)
                    done += 1
                batch = []
            elif msg is None:
                time.sleep(0)

    leaks = []

    def worker(w):
        for i in range(requests // workers):
            token = (w << 20) | i
            slot = pool.alloc(op=OP_PUT)
            ring.send(RingMessage(op=OP_PUT, completion_index=slot, imm1=token))
            got = pool.wait(slot)
            if got != token ^ 0xA5A5:
                leaks.append((w, i, got))
                return

    proxy = threading.Thread(target=shuffling_proxy)
    proxy.start()
    threads = [threading.Thread(target=worker, args=(w,)) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    proxy.join(timeout=60)
    report("completion out-of-order 10k", not proxy.is_alive() and not leaks,
           f"leaks={leaks[:3] or 'none'}")


# ---------------------------------------------------------------------------
# 3. RMA/AMO oracle, 5 seeds
# ---------------------------------------------------------------------------

def test_rma_amo_oracle_five_seeds():
    heap_size = 1 << 20
    ops_per_pe = 250  # 4 PEs x 250 = 1000 ops per program
    failures = []
    times = []
    for seed in (101, 202, 303, 404, 505):
        start = time.perf_counter()
        rt = Runtime(RuntimeConfig(npes=4, heap_size=heap_size, time_scale=0))
        try:
            region = rt.symm_alloc_all(heap_size - (1 << 16))
            programs = generate_programs(seed, 4, region,
                                         heap_size - (1 << 16), ops_per_pe)
            fetches = [None] * 4
            rt.parallel(lambda ctx: fetches.__setitem__(
                ctx.pe, run_program(ctx, programs[ctx.pe])))
            ref = ReferenceSim(4, heap_size).run(programs)
            for ctx in rt.pes:
                if bytes(ctx.heap.mem) != bytes(ref.heaps[ctx.pe]):
                    failures.append(f"seed {seed}: heap {ctx.pe} differs")
            for pe in range(4):
                if fetches[pe] != ref.fetches[pe]:
                    failures.append(f"seed {seed}: fetches {pe} differ")
        finally:
            rt.finalize()
        times.append(time.perf_counter() - start)
    ok = not failures and max(times) < 10
    report("RMA/AMO oracle 1000 ops x 5 seeds", ok,
           f"max {max(times):.2f}s/seed, failures={failures or 'none'}")


# ---------------------------------------------------------------------------
# 4. AMO linearizability
# ---------------------------------------------------------------------------

def test_amo_linearizability():
    rt = Runtime(RuntimeConfig(npes=4, heap_size=1 << 20, time_scale=0))
    try:
        off = rt.symm_alloc_all(128)
        per = 10_000

        def inc_body(ctx):
            a = ctx.addr(off)
            for _ in range(per):
                amo.amo(ctx, "inc", a, 0, U64)

        rt.parallel(inc_body)
        final = rma.g(rt.pes[0], rt.pes[0].addr(off), 0, U64)

        lock_off, held_off = off + 64, off + 72
        acquisitions = 10_000
        violations = []

        def lock_body(ctx):
            a = ctx.addr(lock_off)
            h = ctx.addr(held_off)
            me = ctx.pe + 1
            for _ in range(acquisitions // 4):
                while amo.amo(ctx, "compare_swap", a, 0, U64,
                              operand=me, compare=0) != 0:
                    pass
                if rma.g(ctx, h, 0, U64) != 0:
                    violations.append("second holder inside critical section")
                rma.p(ctx, h, me, 0, U64)
                rma.p(ctx, h, 0, 0, U64)
                amo.amo(ctx, "set", a, 0, U64, operand=0)

        rt.parallel(lock_body)
    finally:
        rt.finalize()
    ok = final == 4 * per and not violations
    report("AMO linearizability", ok,
           f"counter={final} (want {4*per}), lock violations={violations or 'none'}")


# ---------------------------------------------------------------------------
# 5. Sync safety
# ---------------------------------------------------------------------------

def test_sync_safety_happens_before():
    epochs = 10_000
    npes = 12
    rt = Runtime(RuntimeConfig(npes=npes, heap_size=1 << 20, time_scale=0))
    try:
        rt.parallel(lambda ctx: coll.team_world(ctx))
        enters = np.zeros((epochs, npes), dtype=np.int64)
        exits = np.zeros((epochs, npes), dtype=np.int64)

        def body(ctx):
            rng = random.Random(ctx.pe * 7919)
            team = ctx._team_world
            for e in range(epochs):
                if rng.random() < 0.02:
                    time.sleep(rng.random() * 0.0003)
                enters[e, ctx.pe] = time.perf_counter_ns()
                coll.team_sync(ctx, team)
                exits[e, ctx.pe] = time.perf_counter_ns()

        start = time.perf_counter()
        rt.parallel(body)
        elapsed = time.perf_counter() - start
    finally:
        rt.finalize()
    early = int(np.sum(exits.min(axis=1) < enters.max(axis=1)))
    report("sync safety 10k epochs x 12 PEs", early == 0,
           f"early exits={early}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 6. Collectives oracle
# ---------------------------------------------------------------------------

NELEMS_SWEEP = tuple(range(1, 65)) + (1024, 4096)


def _ascending_fold(inputs, op):
    fn = coll._REDUCE_FNS[op]
    acc = inputs[0].copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for arr in inputs[1:]:
            acc = fn(acc, arr)
    return acc


def _input_array(pe, elem, nelems, tag):
    rng = np.random.default_rng(hash((pe, elem.name, nelems, tag)) & 0xFFFFFFFF)
    if elem.is_float:
        return rng.uniform(-1e6, 1e6, size=nelems).astype(elem.np_dtype)
    info = np.iinfo(elem.np_dtype)
    return rng.integers(info.min, info.max, size=nelems,
                        endpoint=True, dtype=elem.np_dtype)


def test_collectives_oracle():
    max_bytes = 4096 * 8
    failures = []
    for npes in (2, 4, 12):
        rt = Runtime(RuntimeConfig(npes=12, heap_size=2 << 20, time_scale=0))
        try:
            def mk(ctx):
                world = coll.team_world(ctx)
                ctx._t = (world if npes == 12
                          else coll.team_split_strided(ctx, world, 0, 1, npes))
            rt.parallel(mk)
            src = rt.symm_alloc_all(max_bytes)
            dst = rt.symm_alloc_all(12 * max_bytes)

            def body(ctx):
                team = ctx._t
                if team is None:
                    return
                a = ctx.addr
                for nelems in NELEMS_SWEEP:
                    # broadcast / fcollect / collect on u64 data
                    ins = [_input_array(p, U64, nelems, "bfc")
                           for p in team.members]
                    ctx.heap.mem[src:src + nelems * 8] = \
                        ins[team.my_team_rank].tobytes()
                    coll.broadcast(ctx, team, a(dst), a(src), nelems, U64, 0)
                    got = bytes(ctx.heap.mem[dst:dst + nelems * 8])
                    if got != ins[0].tobytes():
                        failures.append(f"broadcast npes={npes} nelems={nelems} pe={ctx.pe}")
                    coll.fcollect(ctx, team, a(dst), a(src), nelems, U64)
                    got = bytes(ctx.heap.mem[dst:dst + npes * nelems * 8])
                    if got != np.concatenate(ins).tobytes():
                        failures.append(f"fcollect npes={npes} nelems={nelems} pe={ctx.pe}")
                    my_n = (team.my_team_rank + nelems) % (nelems + 1)
                    sizes = [(r + nelems) % (nelems + 1) for r in range(npes)]
                    coll.collect(ctx, team, a(dst), a(src), my_n, U64)
                    expect = np.concatenate(
                        [ins[r][:sizes[r]] for r in range(npes)]) if any(sizes) \
                        else np.empty(0, dtype="<u8")
                    got = bytes(ctx.heap.mem[dst:dst + sum(sizes) * 8])
                    if got != expect.tobytes():
                        failures.append(f"collect npes={npes} nelems={nelems} pe={ctx.pe}")
                # reduce: all ops x types at a trimmed nelems sweep
                for elem in INT_TYPES:
                    ops = ("min", "max", "sum", "prod", "and", "or", "xor")
                    self_check_reduce(ctx, team, npes, elem, ops, a, src, dst,
                                      failures)
                for elem in FLOAT_TYPES:
                    ops = ("min", "max", "sum", "prod")
                    self_check_reduce(ctx, team, npes, elem, ops, a, src, dst,
                                      failures)

            def self_check_reduce(ctx, team, npes_, elem, ops, a, src, dst,
                                  failures_):
                # never bail early: every member must keep making the same
                # collective calls or the rest of the team deadlocks
                for op in ops:
                    for nelems in NELEMS_SWEEP:
                        ins = [_input_array(p, elem, nelems, op)
                               for p in team.members]
                        raw = ins[team.my_team_rank].tobytes()
                        ctx.heap.mem[src:src + len(raw)] = raw
                        coll.reduce(ctx, team, a(dst), a(src), nelems, elem, op)
                        want = _ascending_fold(ins, op).tobytes()
                        got = bytes(ctx.heap.mem[dst:dst + len(want)])
                        if got != want and len(failures_) < 20:
                            failures_.append(
                                f"reduce {op}/{elem.name} npes={npes_} "
                                f"nelems={nelems} pe={ctx.pe}")

            rt.parallel(body)
        finally:
            rt.finalize()
        if failures:
            break
    report("collectives oracle (bit-exact)", not failures,
           f"failures={failures[:5] or 'none'}")


# ---------------------------------------------------------------------------
# 7 + 11. Cutover envelope and broadcast scaling shape (shared sweep data)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def envelope_rows():
    start = time.perf_counter()
    data = {"c2": {}, "c3": {}}
    rt = Runtime(RuntimeConfig(npes=3, heap_size=40 << 20, time_scale=20))
    try:
        for mode in ("never", "always", "tuned"):
            rt.policy.mode = mode
            for r in bench.suite_c2(rt):
                data["c2"][(mode, r.work_items, r.size)] = r
    finally:
        rt.finalize()
    rt = Runtime(RuntimeConfig(npes=12, heap_size=8 << 20, time_scale=20))
    try:
        for mode in ("never", "always", "tuned"):
            rt.policy.mode = mode
            for r in bench.suite_c3(rt):
                data["c3"][(mode, r.op, r.work_items, r.npes, r.size)] = r
    finally:
        rt.finalize()
    data["elapsed"] = time.perf_counter() - start
    return data


def test_cutover_envelope(envelope_rows):
    rows = envelope_rows
    violations = []
    worst = 1.0
    for g in bench.C2_GROUPS:
        for size in bench.RMA_SIZES:
            nv = rows["c2"][("never", g, size)].bandwidth
            al = rows["c2"][("always", g, size)].bandwidth
            tu = rows["c2"][("tuned", g, size)].bandwidth
            ratio = tu / max(nv, al)
            worst = min(worst, ratio)
            if ratio < 0.8:
                violations.append(f"c2 G={g} size={size} ratio={ratio:.3f}")
    for g in bench.C3_GROUPS:
        for npes in bench.C3_NPES:
            for nelems in bench.C3_NELEMS:
                key = ("fcollect_work_group", g, npes, nelems)
                nv = rows["c3"][("never",) + key].latency_us
                al = rows["c3"][("always",) + key].latency_us
                tu = rows["c3"][("tuned",) + key].latency_us
                ratio = min(nv, al) / tu
                worst = min(worst, ratio)
                if ratio < 0.8:
                    violations.append(
                        f"c3 G={g} npes={npes} nelems={nelems} ratio={ratio:.3f}")
    elapsed = rows["elapsed"]
    ok = not violations and elapsed < 300
    report("cutover envelope (c2 + c3 fcollect, 3 modes)", ok,
           f"worst ratio {worst:.3f}, swept in {elapsed:.0f}s, "
           f"violations={violations[:4] or 'none'}")


def test_broadcast_scaling_shape(envelope_rows):
    rows = envelope_rows["c3"]
    bad = []
    for nelems in bench.C3_NELEMS:
        if nelems * 8 < 4096:
            continue
        two = rows[("tuned", "broadcast_work_group", bench.BCAST_GROUP, 2,
                    nelems)].latency_us
        others = [rows[("tuned", "broadcast_work_group", bench.BCAST_GROUP,
                        n, nelems)].latency_us for n in bench.BCAST_NPES[1:]]
        if not all(two < o for o in others):
            bad.append(f"nelems={nelems}: 2pe={two:.0f}us vs {sorted(others)}")
    report("broadcast 2-PE strict minimum at >=4KiB payloads", not bad,
           f"violations={bad or 'none'}")


# ---------------------------------------------------------------------------
# 8. Cutover anchor
# ---------------------------------------------------------------------------

def test_cutover_anchor():
    policy = CutoverPolicy(mode="tuned")
    paths = [policy.rma_path(size, 1) for size in bench.RMA_SIZES]
    flips = [(bench.RMA_SIZES[i], bench.RMA_SIZES[i + 1])
             for i in range(len(paths) - 1) if paths[i] != paths[i + 1]]
    ok = (flips == [(4096, 8192)] and paths[0] == DIRECT
          and paths[-1] == ENGINE)
    report("cutover anchor: single direct->engine flip between 4KiB and 8KiB",
           ok, f"flips={flips}")


# ---------------------------------------------------------------------------
# 9. Warm-up protocol
# ---------------------------------------------------------------------------

def test_warmup_protocol():
    class Clock:
        def __init__(self):
            self.now = 0.0

        def __call__(self):
            return self.now

    clock = Clock()
    batches = []
    count = [0]

    def body():
        count[0] += 1
        clock.now += 0.001

    iters = bench.warmup(clock, body)
    doubling_ok = iters == 4 and count[0] == 7  # 1 + 2 + 4, no skipped powers

    clock2 = Clock()
    trial_costs = iter([0.009, 0.004, 0.007, 0.003, 0.008,
                        0.005, 0.006, 0.010, 0.011, 0.012])

    def body2():
        clock2.now += next(trial_costs)

    best = bench.best_of_trials(clock2, body2, iterations=1)
    trials_ok = abs(best - 0.003) < 1e-12
    exhausted = False
    try:
        body2()
    except StopIteration:
        exhausted = True  # exactly 10 trials consumed
    report("warm-up doubling + best-of-10 trials",
           doubling_ok and trials_ok and exhausted,
           f"iters={iters}, best={best}")


# ---------------------------------------------------------------------------
# 10. Internode world of 4
# ---------------------------------------------------------------------------

def test_internode_oracle_and_frames():
    # frame golden bytes
    msg = RingMessage(op=OP_PUT, src_pe=1, dst_pe=2, completion_index=3,
                      addr_a=0x40, addr_b=0x80, count=4)
    frame = internode.pack_request(msg, b"abcd")
    frames_ok = (len(frame) == 76
                 and frame[:8].hex() == "5341475001000000"
                 and frame[-4:] == b"abcd"
                 and internode.pack_reply(5, 0, 7).hex() ==
                 "53414750010100000500000007000000000000000000000000000000")

    from conftest import free_port
    endpoint = f"127.0.0.1:{free_port()}"
    heap_size = 1 << 20
    nodes = {}

    def boot(role):
        nodes[role] = Runtime(RuntimeConfig(
            npes=2, internode_role=role, peer_endpoint=endpoint,
            heap_size=heap_size, time_scale=0))

    ta = threading.Thread(target=boot, args=("node_a",))
    tb = threading.Thread(target=boot, args=("node_b",))
    ta.start(); tb.start(); ta.join(); tb.join()
    a, b = nodes["node_a"], nodes["node_b"]
    failures = []
    try:
        region_size = heap_size - (1 << 16)
        assert a.symm_alloc_all(region_size) == b.symm_alloc_all(region_size)
        region = 0
        programs = generate_programs(777, 4, region, region_size, 250)
        fetches = [None] * 4

        def node_body(rt):
            rt.parallel(lambda ctx: fetches.__setitem__(
                ctx.pe, run_program(ctx, programs[ctx.pe])))

        th_a = threading.Thread(target=node_body, args=(a,))
        th_b = threading.Thread(target=node_body, args=(b,))
        th_a.start(); th_b.start()
        th_a.join(timeout=120); th_b.join(timeout=120)
        if th_a.is_alive() or th_b.is_alive():
            failures.append("cross-node program did not finish")
        else:
            ref = ReferenceSim(4, heap_size).run(programs)
            for rt in (a, b):
                for ctx in rt.pes:
                    if bytes(ctx.heap.mem) != bytes(ref.heaps[ctx.pe]):
                        failures.append(f"heap {ctx.pe} differs")
            for pe in range(4):
                if fetches[pe] != ref.fetches[pe]:
                    failures.append(f"fetches {pe} differ")
    finally:
        a.finalize()
        b.finalize()
    report("internode two-daemon world-of-4 oracle + frame goldens",
           frames_ok and not failures,
           f"frames_ok={frames_ok}, failures={failures or 'none'}")
