"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Kernel rows call both implementations directly.  The end-to-end rows time
an input-gradient pass of the toy CNN in two subprocesses, one per backend
(the backend is fixed at import by XAIMETER_DISABLE_NUMBA).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from xaimeter import _kernels as K

E2E = """
import timeit, numpy as np
from xaimeter.model import toy_cnn, ClassLogitModel
g = ClassLogitModel(toy_cnn(3, seed=0), 0)
x = np.random.default_rng(0).uniform(0, 255, size=(50, 32, 32, 3))
g.grad(x)
print(min(timeit.repeat(lambda: g.grad(x), number=1, repeat={repeat})))
"""


def best(fn, repeat):
    fn()  # warm-up (triggers JIT compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 32, 32, 3))
    w = rng.normal(size=(3, 3, 3, 8))
    b = np.zeros(8)
    h = K.conv2d_forward_np(x, w, b, 1)
    dout = rng.normal(size=h.shape)
    _, idx_np = K.maxpool_forward_np(h, 2)
    _, idx_nb = K.maxpool_forward_nb(h, 2)
    pdout = rng.normal(size=(50, 16, 16, 8))
    cases = [
        ("conv2d forward", lambda: K.conv2d_forward_np(x, w, b, 1), lambda: K.conv2d_forward_nb(x, w, b, 1)),
        ("conv2d backward (input)", lambda: K.conv2d_backward_input_np(w, dout, x.shape, 1),
         lambda: K.conv2d_backward_input_nb(w, dout, x.shape, 1)),
        ("conv2d backward (params)", lambda: K.conv2d_backward_params_np(x, w.shape, dout, 1),
         lambda: K.conv2d_backward_params_nb(x, w.shape, dout, 1)),
        ("maxpool forward", lambda: K.maxpool_forward_np(h, 2), lambda: K.maxpool_forward_nb(h, 2)),
        ("maxpool backward", lambda: K.maxpool_backward_np(pdout, idx_np, h.shape, 2),
         lambda: K.maxpool_backward_nb(pdout, idx_nb, h.shape, 2)),
    ]
    for name, f_np, f_nb in cases:
        yield name, best(f_np, repeat), best(f_nb, repeat)


def e2e(repeat, disable):
    env = {**os.environ, "XAIMETER_DISABLE_NUMBA": "1" if disable else "0"}
    out = subprocess.run([sys.executable, "-c", E2E.format(repeat=repeat)], env=env, capture_output=True,
                         text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'case (batch 50, 32x32)':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    rows = list(kernel_rows(args.repeat))
    rows.append(("toy CNN input gradient", e2e(args.repeat, True), e2e(args.repeat, False)))
    for name, t_np, t_nb in rows:
        print(f"{name:28s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
