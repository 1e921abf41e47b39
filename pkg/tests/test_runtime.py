import pytest

from pgas_sim import rma
from pgas_sim.config import RuntimeConfig
from pgas_sim.errors import (ConfigError, PendingOperationsError, PgasError)
from pgas_sim.runtime import Runtime


def test_single_pe_tables(make_runtime):
    rt = make_runtime(npes=1)
    ctx = rt.pes[0]
    assert ctx.table.local_index == [1]
    assert ctx.table.offsets == [0]
    assert ctx.my_pe().value == 0
    assert ctx.n_pes() == 1


def test_four_pe_full_accessibility(make_runtime):
    rt = make_runtime(npes=4)
    for ctx in rt.pes:
        assert all(idx != 0 for idx in ctx.table.local_index)
        assert ctx.my_pe().value < ctx.n_pes()


def test_identity_examples(make_runtime):
    rt = make_runtime(npes=4)
    assert rt.pes[2].my_pe().value == 2


def test_two_phase_init_order(make_runtime):
    rt = make_runtime(npes=2)
    trace = rt._init_trace
    assert trace.index("phase1:heaps") < trace.index("phase2:tables")
    assert trace.index("phase1:bases_exchanged") < trace.index("phase2:tables")
    assert trace.index("phase2:tables") < trace.index("phase2:proxy_started")


def test_collective_alloc_identical_offsets(make_runtime):
    rt = make_runtime(npes=4)
    offs = [ctx.symm_alloc(64) for ctx in rt.pes]
    assert len(set(offs)) == 1
    offs2 = [ctx.symm_alloc(64) for ctx in rt.pes]
    assert len(set(offs2)) == 1 and offs2[0] == offs[0] + 64


def test_quiet_with_nothing_pending(make_runtime):
    rt = make_runtime(npes=2)
    rt.pes[0].quiet()  # immediate return
    assert rt.pes[0].outstanding_count() == 0


def test_quiet_drains_nbi(make_runtime):
    rt = make_runtime(npes=2, cutover_mode="always")
    off = rt.symm_alloc_all(4096)
    ctx = rt.pes[0]
    payload = bytes(range(256)) * 8
    for rep in range(8):
        rma.put_nbi(ctx, ctx.addr(off + rep * 256), payload[:256], 256, 1)
    ctx.quiet()
    assert ctx.outstanding_count() == 0
    back = bytearray(2048)
    rma.get(ctx, back, ctx.addr(off), 2048, 1)
    assert bytes(back) == payload


def test_fence_equals_quiet(make_runtime):
    rt = make_runtime(npes=2)
    rt.pes[0].fence()
    assert rt.pes[0].outstanding_count() == 0


def test_finalize_idempotent_shutdown(make_runtime):
    rt = make_runtime(npes=1)
    rt.finalize()
    with pytest.raises(PgasError):
        rt.finalize()


def test_finalize_with_inflight_op_names_it(make_runtime):
    rt = make_runtime(npes=2, cutover_mode="always", time_scale=50,
                      heap_size=1 << 22)
    off = rt.symm_alloc_all(1 << 21)
    ctx = rt.pes[0]
    rma.put_nbi(ctx, ctx.addr(off), bytes(1 << 20), 1 << 20, 1)
    with pytest.raises(PendingOperationsError, match="put"):
        rt.finalize()
    ctx.quiet()
    rt.finalize()


def test_only_one_standalone_runtime(make_runtime):
    make_runtime(npes=1)
    with pytest.raises(PgasError, match="already live"):
        Runtime(RuntimeConfig(npes=1, time_scale=0))


def test_put_nbi_then_quiet_visible_everywhere(make_runtime):
    rt = make_runtime(npes=4)
    off = rt.symm_alloc_all(8192)

    def body(ctx):
        data = bytes([ctx.pe + 1]) * 1024
        for q in range(ctx.npes):
            rma.put_nbi(ctx, ctx.addr(off + ctx.pe * 1024), data, 1024, q)
        ctx.quiet()

    rt.parallel(body)
    for ctx in rt.pes:
        for p in range(4):
            got = bytes(ctx.heap.mem[off + p * 1024: off + p * 1024 + 1024])
            assert got == bytes([p + 1]) * 1024
