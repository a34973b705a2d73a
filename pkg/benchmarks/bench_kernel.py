"""Time the event kernel compiled with numba against its pure-numpy fallback.

    python benchmarks/bench_kernel.py [--size-bytes N] [--repeats K] [--loss P]

The fallback is the same source run by the interpreter (``LFNSIM_DISABLE_JIT=1``),
so each mode runs in its own subprocess.  Both modes must agree on the result.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def run_once(size: int, loss: float, repeats: int) -> dict:
    from lfnsim import _accel
    from lfnsim.config import RunConfig
    from lfnsim.scenario import run_transfer

    cfg = RunConfig(size_bytes=size, loss=loss)
    t0 = time.perf_counter()
    record = run_transfer(cfg)  # first call includes compilation or cache load
    warmup = time.perf_counter() - t0
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_transfer(cfg)
        times.append(time.perf_counter() - t0)
    return {"jit": _accel.JIT_ENABLED, "warmup_s": warmup, "best_s": min(times),
            "packets": record.packets_sent, "record": record.to_dict()}


def measure(disable_jit: bool, args) -> dict:
    env = dict(os.environ, LFNSIM_DISABLE_JIT="1" if disable_jit else "0")
    cmd = [sys.executable, __file__, "--child", "--size-bytes", str(args.size_bytes),
           "--loss", str(args.loss), "--repeats", str(args.repeats)]
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout
    return json.loads(out)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size-bytes", type=int, default=1448 * 4000)
    p.add_argument("--loss", type=float, default=0.01)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args()
    if args.child:
        print(json.dumps(run_once(args.size_bytes, args.loss, args.repeats)))
        return

    jit = measure(False, args)
    fallback = measure(True, args)
    if jit["record"] != fallback["record"]:
        sys.exit("compiled and fallback kernels disagree")
    print(f"transfer: {args.size_bytes} bytes, loss {args.loss:g}, {jit['packets']} packets")
    for name, r in (("numba", jit), ("numpy fallback", fallback)):
        per_packet = r["best_s"] / r["packets"] * 1e6
        print(f"{name:>15}: best {r['best_s']:.4f} s  ({per_packet:.3f} us/packet), "
              f"first call {r['warmup_s']:.2f} s")
    print(f"speedup: {fallback['best_s'] / jit['best_s']:.0f}x")


if __name__ == "__main__":
    main()
