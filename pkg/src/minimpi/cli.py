"""Console entry points: minimpi, minimpi-run, minimpi-bench."""

import argparse
import sys

from . import __version__
from .errors import MinimpiError


def _fail(prog, exc):
    print("%s: %s: %s" % (prog, exc.code, exc), file=sys.stderr)
    return 1


def main(argv=None):
    """`minimpi` — debug and demo utilities."""
    parser = argparse.ArgumentParser(
        prog="minimpi",
        description="miniature message-passing runtime utilities")
    sub = parser.add_subparsers(dest="cmd", required=True)

    sub.add_parser("version", help="print the package version")

    dump = sub.add_parser(
        "type-dump",
        help="flatten a datatype constructor expression to iov segments")
    dump.add_argument("expr",
                      help="e.g. 'vector(3, 2, 4, int32)' or "
                           "'subarray([1000]*3, [100]*3, [300]*3, "
                           "contiguous(16, byte))'")
    dump.add_argument("--max-segments", type=int, default=4, metavar="K",
                      help="how many leading segments to print (default 4)")

    demo = sub.add_parser("demo", help="run a small built-in demo")
    demo.add_argument("name", choices=["threadcomm"])
    demo.add_argument("--threads", type=int, default=4)

    ns = parser.parse_args(argv)
    try:
        if ns.cmd == "version":
            print(__version__)
            return 0
        if ns.cmd == "type-dump":
            from .datatype import parse_type_expr, type_iov, type_iov_len
            d = parse_type_expr(ns.expr)
            iov_len, nbytes = type_iov_len(d)
            print("iov_len %d" % iov_len)
            print("bytes %d" % nbytes)
            segs, got = type_iov(d, 0, ns.max_segments)
            for i in range(got):
                print("seg[%d] offset=%d len=%d"
                      % (i, segs[i].base_offset, segs[i].length))
            return 0
        from . import demos
        return demos.demo_threadcomm(ns.threads)
    except MinimpiError as exc:
        return _fail("minimpi", exc)


def run_main(argv=None):
    """`minimpi-run` — spawn an n-rank job."""
    parser = argparse.ArgumentParser(
        prog="minimpi-run", description="launch a multi-rank program")
    parser.add_argument("-n", type=int, required=True, metavar="RANKS")
    parser.add_argument("--transport", choices=["in-proc", "inproc",
                                                "socket"],
                        default="socket")
    parser.add_argument("--lock-mode", choices=["global", "pervci"])
    parser.add_argument("--vci-pool", type=int, metavar="N")
    parser.add_argument("program")
    parser.add_argument("args", nargs=argparse.REMAINDER)
    ns = parser.parse_args(argv)

    import os

    from .runtime import launch
    env = dict(os.environ)
    if ns.lock_mode is not None:
        env["MINIMPI_LOCK_MODE"] = ns.lock_mode
    if ns.vci_pool is not None:
        env["MINIMPI_VCI_POOL"] = str(ns.vci_pool)
    try:
        return launch(ns.n, ns.program, ns.args,
                      transport=ns.transport.replace("-", ""), env=env)
    except MinimpiError as exc:
        return _fail("minimpi-run", exc)


def _sizes_arg(text):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError("sizes must be a comma list of"
                                         " ints: %r" % text)


def bench_main(argv=None):
    """`minimpi-bench` — CSV to stdout, human summary to stderr."""
    parser = argparse.ArgumentParser(
        prog="minimpi-bench",
        description="message-rate, point-to-point, and progress demos")
    sub = parser.add_subparsers(dest="cmd", required=True)

    mr = sub.add_parser("msgrate", help="multithreaded 8-byte message rate")
    mr.add_argument("--threads", type=int, default=4, metavar="T")
    mr.add_argument("--mode", choices=["global", "pervci", "stream"],
                    required=True)
    mr.add_argument("--window", type=int, default=64, metavar="W")
    mr.add_argument("--iters", type=int, default=50, metavar="N")
    mr.add_argument("--reps", type=int, default=5)

    pp = sub.add_parser("p2p", help="ping-pong latency / windowed bandwidth")
    pp.add_argument("--pattern", choices=["latency", "bandwidth"],
                    required=True)
    pp.add_argument("--placement", choices=["threadcomm", "instances"],
                    required=True)
    pp.add_argument("--sizes", type=_sizes_arg, default=[8, 65536, 1048576],
                    metavar="A,B,...")
    pp.add_argument("--rounds", type=int, default=100)
    pp.add_argument("--window", type=int, default=64, metavar="W")
    pp.add_argument("--reps", type=int, default=5)

    pd = sub.add_parser("progress-demo",
                        help="passive-target read epoch vs a busy target")
    pd.add_argument("--busy-seconds", type=float, default=2.0, metavar="T")
    pd.add_argument("--progress", choices=["none", "thread"],
                    default="none")
    pd.add_argument("--reps", type=int, default=5)

    ns = parser.parse_args(argv)
    from . import bench
    try:
        if ns.cmd == "msgrate":
            rows = bench.run_msgrate(ns.threads, ns.mode, ns.window,
                                     ns.iters, ns.reps)
        elif ns.cmd == "p2p":
            rows = bench.run_p2p(ns.pattern, ns.placement, ns.sizes,
                                 ns.reps, ns.rounds, ns.window)
        else:
            rows = bench.run_progress_demo(ns.busy_seconds, ns.progress,
                                           ns.reps)
        bench.emit_csv(ns.cmd, rows)
        bench.summarize(ns.cmd, rows)
        return 0
    except MinimpiError as exc:
        return _fail("minimpi-bench", exc)


if __name__ == "__main__":
    sys.exit(main())
