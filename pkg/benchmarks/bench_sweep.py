"""Compare the native and numpy sweep kernels, alone and inside an SD layer.

Usage: python3 benchmarks/bench_sweep.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from sdnet import kernels, sdn
from sdnet.tensor import GradTape, ParamStore, Tensor
from sdnet import ops

SHAPES = [(16, 8, 1, 16), (32, 16, 8, 32), (32, 32, 8, 32), (64, 16, 4, 64)]


def kernel_inputs(T, C, N, L, k=3, seed=0):
    rng = np.random.default_rng(seed)
    f = lambda *s: (0.3 * rng.standard_normal(s)).astype(np.float32)  # noqa: E731
    return f(T, 2 * C, N, L), f(T, C, N, L), f(2 * C, C * k), f(C, C * k), k


def bench_kernel(name, shape, repeat):
    mod = kernels._BACKENDS[name]
    pre_zr, pre_c, Kzr, Kc, k = kernel_inputs(*shape)
    h, zr, c = mod.forward(pre_zr, pre_c, Kzr, Kc, k)
    gh = np.ones_like(h)
    fwd = min(timeit.repeat(lambda: mod.forward(pre_zr, pre_c, Kzr, Kc, k), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: mod.backward(gh, h, zr, c, Kzr, Kc, k), number=1, repeat=repeat))
    return fwd, bwd


def bench_layer(name, repeat, C_in=8, C_s=16, N=8, H=32, W=32):
    kernels.set_backend(name)
    rng = np.random.default_rng(0)
    cfg = sdn.SdnLayerConfig(state_size=C_s, directions=("LR", "UD"), residual=True)
    store = ParamStore()
    params = sdn.init_sdn_params(store, "sd", C_in, cfg, rng)
    x = Tensor(rng.standard_normal((N, C_in, H, W)))

    def step():
        with GradTape() as tape:
            loss = ops.sum(sdn.sdn_forward(x, cfg, params))
        tape.backward(loss)

    return min(timeit.repeat(step, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    names = kernels.available()
    print(f"backends: {', '.join(names)}")
    print(f"{'shape (T,C,N,L)':<20}" + "".join(f"{n + ' fwd/bwd ms':>24}" for n in names))
    for shape in SHAPES:
        cells = []
        for n in names:
            f, b = bench_kernel(n, shape, args.repeat)
            cells.append(f"{1e3 * f:10.2f} /{1e3 * b:8.2f}")
        print(f"{str(shape):<20}" + "".join(f"{c:>24}" for c in cells))
    print("SD layer train step (N=8, 8->16 channels, 32x32, [LR,UD]):")
    for n in names:
        print(f"  {n:<8} {1e3 * bench_layer(n, args.repeat):8.2f} ms")


if __name__ == "__main__":
    main()
