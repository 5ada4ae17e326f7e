"""Compare the compiled (Cython) and pure-numpy kernel backends.

Run from the repository root::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each backend runs in its own subprocess (the backend is chosen once, at
import time, via ``RRCNN_PURE_PYTHON``). Reported numbers are the best of
``--repeat`` wall-clock timings, in milliseconds.
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from rrcnn import kernels, tensor as T
from rrcnn.architectures import build
from rrcnn.train import wcce_loss

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
x = rng.standard_normal((8, 32, 64, 64)).astype(np.float32)
k = rng.standard_normal((32, 32, 3, 3)).astype(np.float32)
y = T.conv2d(x, k)
g = rng.standard_normal(y.shape).astype(np.float32)
u = rng.standard_normal((8, 32, 128, 128)).astype(np.float32)
oh, ow, pt, pl = T.conv_geometry(64, 64, 3, 3, 1, "same")
net = build("rrcnn1", 14, width_scale=0.25, seed=0)
xb = rng.standard_normal((8, 14, 32, 32)).astype(np.float32)
yb = rng.integers(0, 2, (8, 32, 32))

def step():
    net.zero_grad()
    p = net.forward(xb)
    net.backward_logits(wcce_loss(p, yb)[1])

cases = {
    "im2col_batch (8x32x64x64, 3x3)": lambda: kernels.im2col_batch(x, 3, 3, 1, pt, pl, oh, ow),
    "conv2d forward": lambda: T.conv2d(x, k),
    "conv2d backward": lambda: T.conv2d_backward(x, k, g),
    "maxpool2 forward": lambda: T.maxpool2(x),
    "bilinear x2 forward": lambda: T.upsample_bilinear2(x),
    "bilinear x2 backward": lambda: T.upsample_bilinear2_backward(u),
    "rrcnn1 train step (w=0.25, 8x14x32x32)": step,
}
out = {name: 1000 * min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in cases.items()}
print(json.dumps({"backend": kernels.BACKEND, "ms": out}))
"""


def run(pure, repeat):
    env = dict(os.environ, RRCNN_PURE_PYTHON="1" if pure else "0", OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    fast, slow = run(False, args.repeat), run(True, args.repeat)
    if fast["backend"] != "cython":
        print("note: the compiled extension is not built; both columns use numpy kernels")
    print(f"{'case':44s} {fast['backend']:>10s} {slow['backend']:>10s} {'speedup':>8s}")
    for name, t_fast in fast["ms"].items():
        t_slow = slow["ms"][name]
        print(f"{name:44s} {t_fast:10.2f} {t_slow:10.2f} {t_slow / t_fast:8.2f}x")


if __name__ == "__main__":
    main()
