"""Time the numba and numpy kernel backends on TinyNet-sized workloads.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 16]

Reports the best wall time per call for each backend and the speedup.
The first numba call compiles (or loads the on-disk cache), so every
case is warmed up once before timing.
"""

import argparse
import time

import numpy as np

from camforge import kernels, model as M, tensor as T


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, 8, 64, 64)).astype(np.float32)
    p = T.ConvParams(rng.normal(size=(16, 8, 3, 3)).astype(np.float32), np.zeros(16, np.float32), 1, 1)
    up = rng.normal(size=(batch, 16, 64, 64)).astype(np.float32)
    net = M.tinynet(seed=0)
    img = rng.normal(size=(batch, 3, 64, 64)).astype(np.float32)
    onehot = np.zeros((batch, 2), np.float32)
    onehot[:, 1] = 1

    def tiny_fwd_bwd():
        _, acts = M.forward(net, img, cache=True)
        M.backward(net, acts, onehot)

    return {
        "conv2d forward 8->16 @64x64": lambda: T.conv2d(x, p),
        "conv2d backward 8->16 @64x64": lambda: T.conv2d_backward(x, p, up),
        "maxpool2 forward @64x64": lambda: T.maxpool2(x),
        "maxpool2 backward @64x64": lambda: T.maxpool2_backward(x, x[:, :, ::2, ::2]),
        "TinyNet forward": lambda: M.forward(net, img),
        "TinyNet forward+backward": tiny_fwd_bwd,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()
    names = [b for b in ("numpy", "numba") if b in kernels.BACKENDS]
    print(f"batch {args.batch}, best of {args.repeat}; backends: {', '.join(names)}")
    print(f"{'case':32s}" + "".join(f"{n:>12s}" for n in names) + ("    speedup" if len(names) == 2 else ""))
    for label, fn in cases(args.batch).items():
        row = {}
        for name in names:
            with kernels.using(name):
                row[name] = best_of(fn, args.repeat)
        line = f"{label:32s}" + "".join(f"{row[n] * 1e3:10.2f}ms" for n in names)
        if len(names) == 2:
            line += f"    {row['numpy'] / row['numba']:6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
