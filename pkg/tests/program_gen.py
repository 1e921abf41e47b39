"""Random RMA/AMO program generator with a single-writer discipline.

The oracle region of every heap is split into one slice per writer PE; a PE
only ever writes (and AMO-targets) its own slice, on any heap, and only reads
its own slice remotely.  That makes the concurrent execution's final state
independent of cross-PE interleaving, so the sequential reference is exact.
Non-blocking bursts keep their destination ranges pairwise disjoint and are
always closed by a quiet.
"""

from __future__ import annotations

import random

AMO_NAMES = ("fetch", "set", "swap", "compare_swap", "inc", "add",
             "fetch_inc", "fetch_add", "and", "or", "xor",
             "fetch_and", "fetch_or", "fetch_xor")

ELEMS = ("i32", "u32", "i64", "u64")
WIDTHS = {"i32": 4, "u32": 4, "i64": 8, "u64": 8}


def generate_programs(seed: int, npes: int, region_off: int, region_size: int,
                      ops_per_pe: int):
    rng = random.Random(seed)
    slice_size = region_size // npes // 8 * 8
    programs = []
    for pe in range(npes):
        lo = region_off + pe * slice_size
        programs.append(_generate_pe(rng, pe, npes, lo, slice_size, ops_per_pe))
    return programs


def _rand_range(rng, lo, size, nbytes):
    off = rng.randrange(0, size - nbytes + 1)
    return lo + off


def _aligned(rng, lo, size, width):
    off = rng.randrange(0, (size - width) // width + 1) * width
    return lo + (off // width) * width


def _generate_pe(rng, pe, npes, lo, slice_size, count):
    ops = []
    while len(ops) < count:
        kind = rng.choices(
            ("put", "put_heap", "get", "p", "g", "iput", "iget",
             "put_signal", "amo", "nbi_burst"),
            weights=(18, 8, 14, 10, 8, 7, 7, 8, 14, 6))[0]
        q = rng.randrange(npes)
        if kind == "put":
            nbytes = rng.choice((1, 3, 8, 17, 64, 300, 1024, 4096))
            dst = _rand_range(rng, lo, slice_size, nbytes)
            ops.append(("put", q, dst, rng.randbytes(nbytes)))
        elif kind == "put_heap":
            nbytes = rng.choice((8, 32, 256, 2048))
            dst = _rand_range(rng, lo, slice_size, nbytes)
            src = _rand_range(rng, lo, slice_size, nbytes)
            ops.append(("put_heap", q, dst, src, nbytes))
        elif kind == "get":
            nbytes = rng.choice((1, 8, 64, 512, 4096))
            src = _rand_range(rng, lo, slice_size, nbytes)
            dst = _rand_range(rng, lo, slice_size, nbytes)
            ops.append(("get", q, src, dst, nbytes))
        elif kind == "p":
            elem = rng.choice(ELEMS)
            w = WIDTHS[elem]
            off = _aligned(rng, lo, slice_size, w)
            ops.append(("p", q, off, rng.getrandbits(8 * w), elem))
        elif kind == "g":
            elem = rng.choice(ELEMS)
            off = _aligned(rng, lo, slice_size, WIDTHS[elem])
            ops.append(("g", q, off, elem))
        elif kind == "iput":
            elem = rng.choice(ELEMS)
            w = WIDTHS[elem]
            nelems = rng.randrange(1, 24)
            dst_stride = rng.randrange(1, 5)
            src_stride = rng.randrange(1, 5)
            span = ((nelems - 1) * dst_stride + 1) * w
            if span > slice_size:
                continue
            dst = _aligned(rng, lo, slice_size - span + w, w)
            buf = rng.randbytes(((nelems - 1) * src_stride + 1) * w)
            ops.append(("iput", q, dst, dst_stride, src_stride, nelems, elem, buf))
        elif kind == "iget":
            elem = rng.choice(ELEMS)
            w = WIDTHS[elem]
            nelems = rng.randrange(1, 24)
            dst_stride = rng.randrange(1, 5)
            src_stride = rng.randrange(1, 5)
            src_span = ((nelems - 1) * src_stride + 1) * w
            dst_span = ((nelems - 1) * dst_stride + 1) * w
            if max(src_span, dst_span) > slice_size:
                continue
            src = _aligned(rng, lo, slice_size - src_span + w, w)
            dst = _aligned(rng, lo, slice_size - dst_span + w, w)
            ops.append(("iget", q, src, dst, dst_stride, src_stride, nelems, elem))
        elif kind == "put_signal":
            nbytes = rng.choice((0, 8, 128, 2048))
            dst = _rand_range(rng, lo, slice_size, max(nbytes, 1))
            sig_off = _aligned(rng, lo, slice_size, 8)
            if dst < sig_off + 8 and sig_off < dst + nbytes:
                continue  # signal word must not overlap the payload
            ops.append(("put_signal", q, dst, rng.randbytes(nbytes), sig_off,
                        rng.getrandbits(32), rng.choice(("set", "add"))))
        elif kind == "amo":
            name = rng.choice(AMO_NAMES)
            elem = rng.choice(ELEMS)
            w = WIDTHS[elem]
            off = _aligned(rng, lo, slice_size, w)
            operand = rng.getrandbits(8 * w)
            compare = rng.getrandbits(2)  # small so compare_swap sometimes hits
            ops.append(("amo", name, q, off, elem, operand, compare))
        else:  # nbi burst: writes pairwise disjoint, reads avoid the writes
            burst = rng.randrange(2, 7)
            writes = []  # (target, lo, hi) ranges written during the burst

            def clashes(tgt, a, b):
                return any(t == tgt and a < hi and lo_ < b
                           for t, lo_, hi in writes)

            for _ in range(burst):
                nbytes = rng.choice((8, 64, 700, 4096))
                for _ in range(20):
                    tgt = rng.randrange(npes)
                    dst = _rand_range(rng, lo, slice_size, nbytes)
                    if clashes(tgt, dst, dst + nbytes) or \
                            clashes(pe, dst, dst + nbytes):
                        continue
                    if rng.random() < 0.6:
                        writes.append((tgt, dst, dst + nbytes))
                        ops.append(("put_nbi", tgt, dst, rng.randbytes(nbytes)))
                    else:
                        src = _rand_range(rng, lo, slice_size, nbytes)
                        if clashes(tgt, src, src + nbytes):
                            continue
                        writes.append((pe, dst, dst + nbytes))
                        ops.append(("get_nbi", tgt, src, dst, nbytes))
                    break
            ops.append(("quiet",))
    ops = ops[:count]
    ops.append(("quiet",))  # truncation must not strand a burst
    return ops
