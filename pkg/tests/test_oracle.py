"""Random-program equivalence against the sequential reference simulator."""

import threading

import pytest

from executor import run_program
from program_gen import generate_programs
from reference_sim import ReferenceSim


def run_and_compare(runtimes, seed, ops_per_pe, heap_size, region_size):
    """Execute one generated program concurrently and check every byte and
    fetched value against the reference."""
    world = sum(rt.config.npes for rt in runtimes)
    region_off = None
    for rt in runtimes:
        off = rt.symm_alloc_all(region_size)
        region_off = off if region_off is None else region_off
        assert off == region_off
    programs = generate_programs(seed, world, region_off, region_size, ops_per_pe)
    fetches = [None] * world

    def node_body(rt):
        def pe_body(ctx):
            fetches[ctx.pe] = run_program(ctx, programs[ctx.pe])
        rt.parallel(pe_body)

    threads = [threading.Thread(target=node_body, args=(rt,)) for rt in runtimes]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    ref = ReferenceSim(world, heap_size).run(programs)
    for rt in runtimes:
        for ctx in rt.pes:
            assert bytes(ctx.heap.mem) == bytes(ref.heaps[ctx.pe]), \
                f"heap mismatch on PE {ctx.pe} (seed {seed})"
    for pe in range(world):
        assert fetches[pe] == ref.fetches[pe], \
            f"fetched-value stream mismatch on PE {pe} (seed {seed})"


@pytest.mark.parametrize("seed", [1, 2])
@pytest.mark.parametrize("mode", ["tuned", "always"])
def test_single_node_oracle(make_runtime, seed, mode):
    heap = 1 << 20
    rt = make_runtime(npes=4, heap_size=heap, cutover_mode=mode)
    run_and_compare([rt], seed, 120, heap, heap - (1 << 16))


def test_two_node_oracle(make_node_pair):
    heap = 1 << 20
    a, b = make_node_pair(npes_a=2, npes_b=2, heap_size=heap)
    run_and_compare([a, b], 5, 100, heap, heap - (1 << 16))
