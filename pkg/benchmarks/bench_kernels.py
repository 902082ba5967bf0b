"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Times each kernel on model-sized inputs, then one forward/backward pass of
the default U-Net, under both backends.
"""
import argparse
import timeit

import numpy as np

from cocktail import autodiff as ad
from cocktail import kernels
from cocktail.backbone import UNet


def kernel_cases(rng):
    x = rng.standard_normal((16, 32, 18, 18)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, 1)
    flat = rng.standard_normal(16 * 32 * 16 * 16).astype(np.float32)
    g = rng.standard_normal(flat.shape).astype(np.float32)
    stats_in = rng.standard_normal((16 * 64, 64)).astype(np.float32)
    return {
        "im2col": lambda: kernels.im2col(x, 3, 3, 1),
        "col2im": lambda: kernels.col2im(cols, 18, 18, 1),
        "silu_forward": lambda: kernels.silu_forward(flat),
        "silu_backward": lambda: kernels.silu_backward(flat, g),
        "channel_stats": lambda: kernels.channel_stats(stats_in, 1e-5),
    }


def model_step(unet, z, ids):
    eps, _ = unet(z, 500, ids)
    ad.backward(ad.mse(eps, ad.Tensor(z)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    unet = UNet()
    unet.decoder.conv_out.weight.data[:] = 0.01
    rng = np.random.default_rng(0)
    z = rng.standard_normal((16, 4, 16, 16)).astype(np.float32)
    ids = rng.integers(1, 20, size=(16, 8))
    results = {}
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        cases = kernel_cases(np.random.default_rng(0))
        cases["unet fwd+bwd (batch 16)"] = lambda: model_step(unet, z, ids)
        for name, fn in cases.items():
            fn()
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            results.setdefault(name, {})[backend] = best
    backends = kernels.available_backends()
    print(f"{'kernel':<26}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for name, row in results.items():
        line = f"{name:<26}" + "".join(f"{row[b] * 1e3:>14.3f}" for b in backends)
        if "compiled" in row:
            line += f"{row['python'] / row['compiled']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
