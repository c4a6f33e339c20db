#!/usr/bin/env python3
"""
Side-by-side timing: numpy reference kernels vs numba JIT kernels.

Also checks the two paths agree, and times one training step per backend
(REMOH_LAB_NO_NUMBA selects the backend at import, so each step timing runs
in a fresh interpreter).
"""
import os
import subprocess
import sys
import time

import numpy as np

from remoh_lab import _kernels as K

STEP_SNIPPET = """
import time
from remoh_lab.model import ModelConfig, build_model
from remoh_lab.synth import build_dataset
from remoh_lab.training import TrainConfig, train
from remoh_lab import _kernels
man = build_dataset(seed=0)
model = build_model(ModelConfig(vocab_size=len(man.vocabulary())), 0)
train(model, man, TrainConfig(max_steps=5))  # warm caches and JIT
t = time.perf_counter()
train(model, man, TrainConfig(max_steps=40))
print(_kernels.BACKEND, (time.perf_counter() - t) / 40)
"""


def best_of(fn, *args, reps=7):
    fn(*args)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    if not K.HAVE_NUMBA:
        print("numba unavailable (or REMOH_LAB_NO_NUMBA set); only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22} {'shape':>14} {'numpy (ms)':>11} {'numba (ms)':>11} {'speedup':>8} {'max|diff|':>10}")
    print("-" * 82)
    for rows, cols in [(64, 32), (512, 64), (4096, 169)]:
        x = rng.normal(0, 3, (rows, cols))
        g = rng.normal(size=(rows, cols))
        t = rng.integers(0, cols, rows)
        y = K.numpy_softmax_rows(x)
        cases = [
            ("softmax_rows", K.numpy_softmax_rows, K.numba_softmax_rows, (x,)),
            ("softmax_rows_grad", K.numpy_softmax_rows_grad, K.numba_softmax_rows_grad, (y, g)),
            ("cross_entropy", K.numpy_cross_entropy, K.numba_cross_entropy, (x, t)),
            ("cross_entropy_grad", K.numpy_cross_entropy_grad, K.numba_cross_entropy_grad, (y, t)),
        ]
        for name, f_np, f_nb, args in cases:
            a, b = f_np(*args), f_nb(*args)
            diff = max(float(np.max(np.abs(np.asarray(u) - np.asarray(v)))) for u, v in
                       zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
            t_np, t_nb = best_of(f_np, *args), best_of(f_nb, *args)
            print(f"{name:<22} {f'{rows}x{cols}':>14} {t_np * 1e3:>11.3f} {t_nb * 1e3:>11.3f} "
                  f"{t_np / t_nb:>7.1f}x {diff:>10.1e}")
        s = np.maximum(rng.normal(size=(rows, 6)), 0)
        m = np.ones(rows, dtype=bool)
        t_np, t_nb = best_of(K.numpy_active_counts, s, m), best_of(K.numba_active_counts, s, m)
        print(f"{'active_counts':<22} {f'{rows}x6':>14} {t_np * 1e3:>11.3f} {t_nb * 1e3:>11.3f} {t_np / t_nb:>7.1f}x")

    print("\ntraining step (default toy model, batch 8):")
    for flag in ("0", "1"):
        env = dict(os.environ, REMOH_LAB_NO_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True)
        if out.returncode:
            print(out.stderr)
            continue
        backend, sec = out.stdout.split()
        print(f"  {backend:<6} {float(sec) * 1e3:7.1f} ms/step")


if __name__ == "__main__":
    main()
