"""Command line front ends: the benchmark driver and the ring dump tool."""

from __future__ import annotations

import argparse
import sys

from . import bench
from .config import load_config
from .errors import ConfigError, GeometryError, PgasError
from .runtime import Runtime

EXIT_CONFIG = 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pgas-bench",
        description="Run the c1/c2/c3 benchmark sweeps over the simulated runtime.")
    parser.add_argument("--suite", required=True, choices=sorted(bench.SUITES),
                        help="which sweep to run")
    parser.add_argument("--config", help="key=value config file (or set PGAS_SIM_CONFIG)")
    parser.add_argument("--out", required=True, help="CSV file to append results to")
    parser.add_argument("--mode", choices=("never", "always", "tuned"),
                        help="cutover mode override")
    parser.add_argument("--topology", help="force one topology profile")
    parser.add_argument("--npes", type=int, help="PEs on this node")
    parser.add_argument("--heap-size", type=int, help="bytes per PE heap")
    parser.add_argument("--time-scale", type=float,
                        help="cost-model stretch factor (0 disables the model)")
    args = parser.parse_args(argv)

    min_npes, min_heap = bench.SUITE_GEOMETRY[args.suite]
    overrides = {
        "cutover_mode": args.mode,
        "topology": args.topology,
        "npes": args.npes,
        "heap_size": args.heap_size,
        "time_scale": args.time_scale,
    }
    try:
        cfg = load_config(args.config, **overrides)
        # Grow to the suite's geometry when nothing asked for a specific shape.
        if args.npes is None and cfg.npes < min_npes:
            overrides["npes"] = min_npes
        if args.heap_size is None and cfg.heap_size < min_heap:
            overrides["heap_size"] = min_heap
        cfg = load_config(args.config, **overrides)
        with Runtime(cfg) as runtime:
            records = bench.run_suite(runtime, args.suite, args.out)
    except (ConfigError, GeometryError) as exc:
        print(f"pgas-bench: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PgasError as exc:
        print(f"pgas-bench: {exc}", file=sys.stderr)
        return 1
    print(f"pgas-bench: {len(records)} points appended to {args.out}")
    return 0


def ring_dump_main(argv=None) -> int:
    """Create a demo ring, send a few synthetic messages, print the slot dump."""
    from .ring import Ring, RingMessage

    parser = argparse.ArgumentParser(
        prog="pgas-ring-dump",
        description="Offset-annotated hex dump of reverse-offload ring slots.")
    parser.add_argument("--capacity", type=int, default=8)
    parser.add_argument("--fill", type=int, default=3,
                        help="synthetic messages to enqueue before dumping")
    args = parser.parse_args(argv)
    ring = Ring(args.capacity, publish_interval=4)
    for i in range(args.fill):
        ring.send(RingMessage(op=1 + (i % 8), src_pe=i % 4, dst_pe=(i + 1) % 4,
                              addr_a=0x40 * i, count=64 + i, imm1=i))
    print(ring.dump_slots())
    return 0


if __name__ == "__main__":
    sys.exit(main())
