"""Runnable demos.  `minimpi demo threadcomm` or python -m minimpi.demos.

The threadcomm demo is launcher-friendly: run under minimpi-run -n 2 it
brings up one instance per process from the environment, folds the
processes' threads into one thread communicator, and each thread prints
its global rank ("Rank 3 / 8" style).
"""

import argparse
import sys
import threading

from .comm import threadcomm_init
from .runtime import init


def demo_threadcomm(threads=4):
    inst = init()
    tc = threadcomm_init(inst.world, threads)
    errs = []

    def member():
        try:
            r = tc.start()
            print("Rank %d / %d" % (r, tc.size), flush=True)
            tc.finish()
        except BaseException as exc:
            errs.append(exc)

    workers = [threading.Thread(target=member, daemon=True)
               for _ in range(threads)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    tc.free()
    inst.finalize()
    if errs:
        raise errs[0]
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="minimpi.demos")
    sub = parser.add_subparsers(dest="cmd", required=True)
    tcd = sub.add_parser("threadcomm")
    tcd.add_argument("--threads", type=int, default=4)
    ns = parser.parse_args(argv)
    return demo_threadcomm(ns.threads)


if __name__ == "__main__":
    sys.exit(main())
