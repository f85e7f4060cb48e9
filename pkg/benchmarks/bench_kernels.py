"""Compare the numba kernels with their numpy fallbacks.

Times both kernel pairs on the aircraft-benchmark batch size and on a larger
batch, checks that the two paths agree, then times one closed-loop DMPC run
in a subprocess with and without ``DUALMPC_DISABLE_JIT``.

    python3 benchmarks/bench_kernels.py [--repeats 200] [--skip-closed-loop]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from dualmpc import kernels
from dualmpc._accel import HAVE_NUMBA


def problem(nb, n, m, H, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(nb, n, n)) * 0.4
    B = rng.normal(size=(nb, n, m))
    x0 = rng.normal(size=(nb, n))
    U = rng.normal(size=(nb, H, m))
    ref = rng.normal(size=(H + 1, n))
    M = rng.normal(size=(n, n))
    Q = M @ M.T
    R = np.eye(m)
    return A, B, x0, U, ref, Q, R, 2.0 * Q, rng.uniform(size=nb)


def best_of(fn, repeats):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e6


def bench_kernels(repeats):
    sizes = {"aircraft (8 branches)": (8, 4, 1, 20), "large (64 branches)": (64, 6, 2, 30)}
    rows = []
    for label, (nb, n, m, H) in sizes.items():
        A, B, x0, U, ref, Q, R, QN, w = problem(nb, n, m, H)
        c_np, g_np = kernels.rollout_cost_grad_numpy(A, B, x0, U, ref, Q, R, QN, w)
        c_jit, g_jit = kernels.rollout_cost_grad_jit(A, B, x0, U, ref, Q, R, QN, w)
        agree = max(np.max(np.abs(c_np - c_jit) / np.abs(c_np)), np.max(np.abs(g_np - g_jit)) / np.max(np.abs(g_np)))
        t_np = best_of(lambda: kernels.rollout_cost_grad_numpy(A, B, x0, U, ref, Q, R, QN, w), repeats)
        t_jit = best_of(lambda: kernels.rollout_cost_grad_jit(A, B, x0, U, ref, Q, R, QN, w), repeats)
        rows.append(("rollout_cost_grad", label, t_np, t_jit, agree))

        q_np = kernels.condense_numpy(A, B, x0, ref, Q, R, QN)
        q_jit = kernels.condense_jit(A, B, x0, ref, Q, R, QN)
        agree = max(np.max(np.abs(a - b)) / np.max(np.abs(a)) for a, b in zip(q_np, q_jit))
        t_np = best_of(lambda: kernels.condense_numpy(A, B, x0, ref, Q, R, QN), repeats)
        t_jit = best_of(lambda: kernels.condense_jit(A, B, x0, ref, Q, R, QN), repeats)
        rows.append(("condense", label, t_np, t_jit, agree))

    print(f"{'kernel':<20}{'batch':<24}{'numpy [us]':>12}{'numba [us]':>12}{'speedup':>9}{'rel diff':>11}")
    for name, label, t_np, t_jit, agree in rows:
        print(f"{name:<20}{label:<24}{t_np:>12.1f}{t_jit:>12.1f}{t_np / t_jit:>9.1f}{agree:>11.1e}")


CLOSED_LOOP = """
import time
from dualmpc.config import read_benchmark
from dualmpc.simharness import run_closed_loop
b = read_benchmark()
run_closed_loop(b.models, b.cost, b.truth, b.scenario, "dmpc", 0)  # warm-up (JIT compile)
t0 = time.perf_counter()
log = run_closed_loop(b.models, b.cost, b.truth, b.scenario, "dmpc", 1)
print(time.perf_counter() - t0, repr(float(log.states[-1, 3])))
"""


def bench_closed_loop():
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, DUALMPC_DISABLE_JIT=flag)
        res = subprocess.run([sys.executable, "-c", CLOSED_LOOP], env=env, capture_output=True, text=True, check=True)
        seconds, final = res.stdout.split()
        out[label] = (float(seconds), final)
    print("\nclosed-loop DMPC run, 100 steps, aircraft benchmark")
    for label, (seconds, final) in out.items():
        print(f"  {label:<6} {seconds:6.2f} s   final altitude {final}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--skip-closed-loop", action="store_true")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels(args.repeats)
    if not args.skip_closed_loop:
        bench_closed_loop()


if __name__ == "__main__":
    main()
