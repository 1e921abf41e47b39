import threading

import pytest

from pgas_sim import amo, rma
from pgas_sim.dtypes import F64, I8, I32, I64, U32, U64
from pgas_sim.errors import ContractViolation


class TestSemantics:
    def test_fetch_add_returns_prior(self, make_runtime):
        rt = make_runtime(npes=2)
        off = rt.symm_alloc_all(64)
        ctx = rt.pes[0]
        rma.p(ctx, ctx.addr(off), 7, 1, I64)
        assert amo.amo(ctx, "fetch_add", ctx.addr(off), 1, I64, operand=5) == 7
        assert rma.g(ctx, ctx.addr(off), 1, I64) == 12

    def test_compare_swap(self, make_runtime):
        rt = make_runtime(npes=1)
        ctx = rt.pes[0]
        off = ctx.symm_alloc(64)
        rma.p(ctx, ctx.addr(off), 3, 0, I64)
        assert amo.amo(ctx, "compare_swap", ctx.addr(off), 0, I64,
                       operand=9, compare=3) == 3
        assert rma.g(ctx, ctx.addr(off), 0, I64) == 9
        # repeated: compare fails, value unchanged
        assert amo.amo(ctx, "compare_swap", ctx.addr(off), 0, I64,
                       operand=1, compare=3) == 9
        assert rma.g(ctx, ctx.addr(off), 0, I64) == 9

    def test_full_table(self, make_runtime):
        rt = make_runtime(npes=1)
        ctx = rt.pes[0]
        off = ctx.symm_alloc(64)
        a = ctx.addr(off)
        amo.amo(ctx, "set", a, 0, U64, operand=0b1100)
        assert amo.amo(ctx, "fetch", a, 0, U64) == 0b1100
        assert amo.amo(ctx, "swap", a, 0, U64, operand=5) == 0b1100
        amo.amo(ctx, "inc", a, 0, U64)
        assert amo.amo(ctx, "fetch_inc", a, 0, U64) == 6
        amo.amo(ctx, "add", a, 0, U64, operand=3)
        assert amo.amo(ctx, "fetch", a, 0, U64) == 10
        amo.amo(ctx, "and", a, 0, U64, operand=0b0110)
        assert amo.amo(ctx, "fetch_or", a, 0, U64, operand=0b1000) == 0b0010
        assert amo.amo(ctx, "fetch_xor", a, 0, U64, operand=0b1111) == 0b1010
        assert amo.amo(ctx, "fetch_and", a, 0, U64, operand=0b0001) == 0b0101

    def test_signed_and_wraparound(self, make_runtime):
        rt = make_runtime(npes=1)
        ctx = rt.pes[0]
        off = ctx.symm_alloc(64)
        rma.p(ctx, ctx.addr(off), -1, 0, I32)
        assert amo.amo(ctx, "fetch_add", ctx.addr(off), 0, I32, operand=1) == -1
        assert rma.g(ctx, ctx.addr(off), 0, I32) == 0

    def test_float_swap_and_cas_bit_pattern(self, make_runtime):
        rt = make_runtime(npes=1)
        ctx = rt.pes[0]
        off = ctx.symm_alloc(64)
        amo.amo(ctx, "set", ctx.addr(off), 0, F64, operand=1.5)
        assert amo.amo(ctx, "swap", ctx.addr(off), 0, F64, operand=2.5) == 1.5
        got = amo.amo(ctx, "compare_swap", ctx.addr(off), 0, F64,
                      operand=9.0, compare=2.5)
        assert got == 2.5
        assert rma.g(ctx, ctx.addr(off), 0, F64) == 9.0

    def test_unsupported_pairs_rejected(self, make_runtime):
        rt = make_runtime(npes=1)
        ctx = rt.pes[0]
        off = ctx.symm_alloc(64)
        with pytest.raises(ContractViolation):
            amo.amo(ctx, "add", ctx.addr(off), 0, F64, operand=1.0)
        with pytest.raises(ContractViolation):
            amo.amo(ctx, "fetch_add", ctx.addr(off), 0, I8, operand=1)
        with pytest.raises(ContractViolation):
            amo.amo(ctx, "fetch_add", ctx.addr(off) + 2, 0, I64, operand=1)


class TestLinearizability:
    def test_concurrent_increments_exact(self, make_runtime):
        rt = make_runtime(npes=4)
        off = rt.symm_alloc_all(64)
        per = 2500

        def body(ctx):
            a = ctx.addr(off)
            for _ in range(per):
                amo.amo(ctx, "inc", a, 0, U64)

        rt.parallel(body)
        assert rma.g(rt.pes[0], rt.pes[0].addr(off), 0, U64) == 4 * per

    def test_fetch_variants_see_distinct_priors(self, make_runtime):
        rt = make_runtime(npes=4)
        off = rt.symm_alloc_all(64)
        per = 1000
        seen = [None] * 4

        def body(ctx):
            a = ctx.addr(off)
            seen[ctx.pe] = [amo.amo(ctx, "fetch_inc", a, 0, U64)
                            for _ in range(per)]

        rt.parallel(body)
        every = sorted(v for vals in seen for v in vals)
        assert every == list(range(4 * per))

    def test_cas_spin_lock_single_holder(self, make_runtime):
        rt = make_runtime(npes=4)
        off = rt.symm_alloc_all(128)
        lock_off, owner_off = off, off + 64
        acquisitions = 1000
        failures = []

        def body(ctx):
            a = ctx.addr(lock_off)
            me = ctx.pe + 1
            for _ in range(acquisitions // 4):
                while amo.amo(ctx, "compare_swap", a, 0, U64,
                              operand=me, compare=0) != 0:
                    pass
                # critical section: non-atomic read-modify-write
                v = rma.g(ctx, ctx.addr(owner_off), 0, U64)
                rma.p(ctx, ctx.addr(owner_off), v + 1, 0, U64)
                if amo.amo(ctx, "fetch", a, 0, U64) != me:
                    failures.append("lost lock mid-section")
                amo.amo(ctx, "set", a, 0, U64, operand=0)

        rt.parallel(body)
        assert not failures
        assert rma.g(rt.pes[0], rt.pes[0].addr(owner_off), 0, U64) == acquisitions
