#!/usr/bin/env python
"""Compare the compiled convolution kernels against the NumPy fallback.

Times the three convolution primitives (forward, input gradient, weight
gradient) on shapes drawn from the actual network, plus one end-to-end
inference, on both backends. Also cross-checks numerical agreement so a
fast-but-wrong kernel cannot slip through.

Run after installing the package:

    python benchmarks/bench_kernels.py [--iters 5] [--threads 1]
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np


def _time(fn, iters: int) -> float:
    fn()  # warmup
    best = float("inf")
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


# (name, N, Cin, H, W, Cout, k, stride, padding, groups) — shapes the model actually runs
CASES = [
    ("stem 3->64 /2 @256", 1, 3, 256, 256, 64, 3, 2, 1, 1),
    ("dw 128 /1 @64", 1, 128, 64, 64, 128, 3, 1, 1, 128),
    ("pw 128->256 @64", 1, 128, 64, 64, 256, 1, 1, 0, 1),
    ("fuse 512->256 @32", 1, 512, 32, 32, 256, 3, 1, 1, 1),
]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--iters", type=int, default=5, help="timed repeats (best-of)")
    parser.add_argument("--threads", type=int, default=1, help="compiled-kernel threads")
    args = parser.parse_args()

    os.environ["CANET_THREADS"] = str(args.threads)
    from canet.kernels import _numpy_kernels as npk

    try:
        from canet.kernels import _conv_ext as ext
    except ImportError:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1

    rng = np.random.default_rng(0)
    print(f"{'case':<22} {'kernel':<16} {'numpy':>9} {'compiled':>9} {'speedup':>8}  agree")
    for name, n, cin, h, w, cout, k, s, p, g in CASES:
        x = rng.standard_normal((n, cin, h, w), dtype=np.float32)
        wt = rng.standard_normal((cout, cin // g, k, k), dtype=np.float32) * 0.1
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        dy = rng.standard_normal((n, cout, ho, wo), dtype=np.float32)

        funcs = {
            "forward": (
                lambda: npk.conv2d_forward(x, wt, (s, s), (p, p), g),
                lambda: ext.conv2d_forward(x, wt, (s, s), (p, p), g, args.threads),
            ),
            "backward_input": (
                lambda: npk.conv2d_backward_input(dy, wt, x.shape, (s, s), (p, p), g),
                lambda: ext.conv2d_backward_input(dy, wt, x.shape, (s, s), (p, p), g, args.threads),
            ),
            "backward_weight": (
                lambda: npk.conv2d_backward_weight(x, dy, wt.shape, (s, s), (p, p), g),
                lambda: ext.conv2d_backward_weight(x, dy, wt.shape, (s, s), (p, p), g, args.threads),
            ),
        }
        for kernel, (ref_fn, fast_fn) in funcs.items():
            ref, fast = ref_fn(), fast_fn()
            scale = max(1.0, float(np.abs(ref).max()))
            agree = float(np.abs(ref - fast).max()) / scale < 1e-4
            t_ref = _time(ref_fn, args.iters)
            t_fast = _time(fast_fn, args.iters)
            print(
                f"{name:<22} {kernel:<16} {t_ref * 1e3:>7.1f}ms {t_fast * 1e3:>7.1f}ms "
                f"{t_ref / t_fast:>7.1f}x  {'yes' if agree else 'NO'}"
            )
            if not agree:
                return 1

    # end-to-end: one eval-mode forward per backend
    from canet.fca import FcaConfig
    from canet.model import CANet, CanetConfig
    from canet import kernels
    from canet.tensor import Tensor

    config = CanetConfig(
        backbone="tiny", num_classes=3, deconv_channels=32,
        fca=FcaConfig(fusion_channels=32), input_size=(128, 128),
    )
    model = CANet(config, seed=0)
    model.eval()
    img = Tensor(rng.standard_normal((1, 3, 128, 128), dtype=np.float32))
    for backend in ("numpy", "compiled"):
        kernels.use(backend)
        t = _time(lambda: model(img), args.iters)
        print(f"{'tiny 128x128 e2e':<22} {'inference':<16} {backend:<9} {t * 1e3:>7.1f}ms")
    kernels.use("compiled")
    return 0


if __name__ == "__main__":
    sys.exit(main())
