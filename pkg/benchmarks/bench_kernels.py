"""Compare the numba and pure-numpy kernel paths.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times each conv/BN kernel on shapes from the desk reference network, then
one full training step of the reference model under each backend (the
numpy run happens in a subprocess with DONNA_DISABLE_NUMBA=1).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from donna import NUMBA_OK
from donna.kernels import bn_train_backward, bn_train_forward, conv2d_backward, conv2d_forward

SHAPES = [
    # (label, N, H, W, Cin, Cout, k, stride, groups)
    ("depthwise k5 96ch 8x8", 64, 8, 8, 96, 96, 5, 1, 96),
    ("depthwise k5 s2 128ch", 64, 8, 8, 128, 128, 5, 2, 128),
    ("grouped k3 96ch g12 8x8", 64, 8, 8, 96, 96, 3, 1, 12),
    ("stem 3x3 s2 3->16", 64, 16, 16, 3, 16, 3, 2, 1),
]

STEP = """
import time, numpy as np
from donna.blocks import build_reference
from donna.optim import Adam
from donna.tensor import Tensor, softmax_cross_entropy
m = build_reference("desk-ref-3", seed=1); opt = Adam(m.parameters())
x = np.random.default_rng(0).random((64, 3, 16, 16)); y = np.arange(64) % 8
for i in range({n}):
    if i == 1: t = time.perf_counter()
    loss = softmax_cross_entropy(m(Tensor(x)), y); loss.backward(); opt.step(1e-3)
print((time.perf_counter() - t) / ({n} - 1))
"""


def _time(fn, repeat):
    fn()  # warm-up (includes numba compilation)
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t) / repeat


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=6)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = ["numba", "numpy"] if NUMBA_OK else ["numpy"]
    print(f"{'kernel':34s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for label, n, h, w_, cin, cout, k, s, g in SHAPES:
        x = rng.standard_normal((n, h, w_, cin))
        w = rng.standard_normal((cout, cin // g, k, k))
        ho = (h + 2 * (k // 2) - k) // s + 1
        gout = rng.standard_normal((n, ho, ho, cout))
        times = []
        for b in backends:
            f = lambda: conv2d_forward(x, w, s, k // 2, g, backend=b)  # noqa: E731
            bw = lambda: conv2d_backward(x, w, gout, s, k // 2, g, backend=b)  # noqa: E731
            times.append((_time(f, args.repeat), _time(bw, args.repeat)))
        for i, part in enumerate(("fwd", "bwd")):
            cells = " ".join(f"{t[i] * 1e3:10.2f}ms" for t in times)
            ratio = f"{times[1][i] / times[0][i]:8.1f}x" if len(times) == 2 else ""
            print(f"{label + ' ' + part:34s} {cells} {ratio}")
    xb = rng.standard_normal((64 * 64, 96))
    gam, bet = rng.standard_normal(96), rng.standard_normal(96)
    times = []
    for b in backends:
        out = bn_train_forward(xb, gam, bet, 1e-5, backend=b)
        times.append((
            _time(lambda: bn_train_forward(xb, gam, bet, 1e-5, backend=b), args.repeat),
            _time(lambda: bn_train_backward(xb, out[1], gam, out[4], backend=b), args.repeat),
        ))
    for i, part in enumerate(("fwd", "bwd")):
        cells = " ".join(f"{t[i] * 1e3:10.2f}ms" for t in times)
        ratio = f"{times[1][i] / times[0][i]:8.1f}x" if len(times) == 2 else ""
        print(f"{'batch-norm 4096x96 ' + part:34s} {cells} {ratio}")

    print("\nfull reference training step, batch 64:")
    for b in backends:
        env = dict(os.environ, DONNA_DISABLE_NUMBA="1" if b == "numpy" else "")
        out = subprocess.run([sys.executable, "-c", STEP.format(n=args.steps)], env=env, capture_output=True, text=True, check=True)
        print(f"  {b:6s} {float(out.stdout) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    main()
