"""Time im2col/col2im and a full conv forward+backward on both kernel backends.

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from siamgap.ndkernel import _backend, _npkernels

SHAPES = [
    # (N, C, H, W, k, stride)
    (32, 1, 66, 66, 3, 1),
    (32, 8, 66, 66, 3, 1),
    (32, 16, 34, 34, 3, 2),
    (32, 64, 10, 10, 3, 1),
]


def bench_kernels(repeats):
    try:
        c_im2col, c_col2im = _backend.kernels("cython")
    except ImportError:
        print("compiled kernels are not built; only the numpy backend is available")
        c_im2col = c_col2im = None
    print(f"{'shape':<28}{'op':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for n, c, h, w, k, s in SHAPES:
        xp = np.random.default_rng(0).standard_normal((n, c, h, w))
        cols = _npkernels.im2col(xp, k, k, s)
        runs = {
            "im2col": (lambda f: f(xp, k, k, s), _npkernels.im2col, c_im2col),
            "col2im": (lambda f: f(cols, n, c, h, w, k, k, s), _npkernels.col2im, c_col2im),
        }
        for op, (call, f_np, f_c) in runs.items():
            t_np = min(timeit.repeat(lambda: call(f_np), number=1, repeat=repeats)) * 1e3
            if f_c is None:
                print(f"{str((n, c, h, w, k, s)):<28}{op:<8}{t_np:>10.2f}{'-':>11}{'-':>9}")
                continue
            if not np.array_equal(call(f_np), call(f_c)):
                raise SystemExit(f"backends disagree on {op} {(n, c, h, w, k, s)}")
            t_c = min(timeit.repeat(lambda: call(f_c), number=1, repeat=repeats)) * 1e3
            print(f"{str((n, c, h, w, k, s)):<28}{op:<8}{t_np:>10.2f}{t_c:>11.2f}{t_np / t_c:>8.1f}x")


_STEP = """
import timeit
import numpy as np
from siamgap.model import ModelConfig, build_model
from siamgap import ndkernel as nk
m = build_model(ModelConfig.desk(), 0)
rng = np.random.default_rng(0)
a, b = rng.random((2, 32, 1, 64, 64))
def step():
    with nk.Tape() as t:
        probs, _ = m.forward(a, b, training=True, rng=np.random.default_rng(1))
        loss = nk.mean(nk.log(nk.gather(probs, np.zeros(32, dtype=int))))
    t.backward(loss)
print(min(timeit.repeat(step, number=1, repeat={repeats})) * 1e3)
"""


def bench_step(repeats):
    """Whole training step (desk model, batch 32) in a fresh process per backend."""
    print("\ndesk model, batch 32, forward+backward:")
    for name, flag in (("numpy", "1"), ("cython", "0")):
        env = dict(os.environ, SIAMGAP_PURE_PYTHON=flag)
        res = subprocess.run(
            [sys.executable, "-c", _STEP.format(repeats=repeats)],
            env=env, capture_output=True, text=True, check=True,
        )
        print(f"  {name:<7}{float(res.stdout):9.1f} ms")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {_backend.BACKEND}\n")
    bench_kernels(args.repeats)
    bench_step(max(1, args.repeats // 2))
