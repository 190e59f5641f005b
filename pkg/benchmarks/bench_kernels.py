"""Compiled vs pure-Python kernel timings, plus a short end-to-end training run.

    python benchmarks/bench_kernels.py [--repeat 5] [--train-steps 8192]

Kernels are timed in-process against both implementations. The training run is
timed in subprocesses because the backend is fixed when ``oui_lab`` is imported.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from oui_lab import _pykernels

try:
    from oui_lab import _ckernels
except ImportError:
    _ckernels = None


def _cases(rng):
    w = [rng.normal(size=(64, 4)), rng.normal(size=(64, 64)), rng.normal(size=(2, 64))]
    b = [rng.normal(size=64), rng.normal(size=64), rng.normal(size=2)]
    obs = rng.normal(size=4)
    n = 1024
    rewards, values, next_values = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
    terminated = rng.random(n) < 0.02
    truncated = np.zeros(n, dtype=bool)
    prev = rng.random((1024, 64)) < 0.5
    curr = prev ^ (rng.random((1024, 64)) < 0.01)

    def make(impl):
        stack = impl.DenseStack(w, b)
        return {
            "cartpole_step x1000": lambda: [impl.cartpole_step(0.01, 0.0, 0.02, 0.0, i & 1) for i in range(1000)],
            "policy sample x1000": lambda: [stack.sample(obs, 0.5) for _ in range(1000)],
            "gae (1024 steps)": lambda: impl.gae(rewards, values, next_values, terminated, truncated, 0.99, 0.95),
            "column_counts 1024x64": lambda: impl.column_counts(prev),
            "transition_counts 1024x64": lambda: impl.transition_counts(prev, curr),
        }

    return make


def bench_kernels(repeat: int) -> None:
    make = _cases(np.random.default_rng(0))
    py_cases = make(_pykernels)
    c_cases = make(_ckernels) if _ckernels is not None else {}
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in py_cases.items():
        t_py = min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3
        if name in c_cases:
            t_c = min(timeit.repeat(c_cases[name], number=1, repeat=repeat)) * 1e3
            print(f"{name:28s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.1f}x")
        else:
            print(f"{name:28s} {t_py:10.3f} {'n/a':>10s} {'':>8s}")


def bench_training(steps: int) -> None:
    code = (
        "import hashlib, time; from oui_lab import kernels; from oui_lab.ppo_engine import PpoConfig, train_run;"
        f"cfg = PpoConfig.for_env('cartpole', 1e-3, 0, total_steps={steps});"
        "t = time.perf_counter(); rec = train_run('cartpole', cfg);"
        "print(kernels.BACKEND, time.perf_counter() - t, hashlib.sha256(rec.to_line().encode()).hexdigest())"
    )
    results = {}
    for backend in ("python", "auto"):
        env = dict(os.environ, OUI_LAB_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        name, secs, digest = out.stdout.split()
        results[backend] = (name, float(secs), digest)
    print(f"\ntraining run, CartPole, {steps} steps:")
    for backend, (name, secs, _) in results.items():
        print(f"  {name:8s} {secs:7.2f} s")
    same = results["python"][2] == results["auto"][2]
    print(f"  identical run records across backends: {same}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--train-steps", type=int, default=8192)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; timing the fallback only")
    start = time.perf_counter()
    bench_kernels(args.repeat)
    bench_training(args.train_steps)
    print(f"\ntotal {time.perf_counter() - start:.1f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
