"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from protoprompt import kernels
from protoprompt.config import SynthConfig, TrainConfig
from protoprompt.data import class_signatures, make_sample, synth_sample
from protoprompt.model import init_model
from protoprompt.trainer import make_pairs, train_step


def cases():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((32, 64, 16), dtype=np.float32)
    w = rng.standard_normal((1, 16, 128), dtype=np.float32)
    q = rng.standard_normal((32, 1024, 8), dtype=np.float32)
    k = rng.standard_normal((32, 8, 1024), dtype=np.float32)
    t = rng.standard_normal((2048, 128), dtype=np.float32)
    x = rng.standard_normal((32, 8, 8, 16), dtype=np.float32)
    g = rng.standard_normal((32, 32, 32, 16), dtype=np.float32)
    yield "matmul (32x64x16 @ 1x16x128)", lambda: kernels.batched_matmul(a, w)
    yield "matmul (32x1024x8 @ 32x8x1024)", lambda: kernels.batched_matmul(q, k)
    yield "matmul_tn (2048x16)^T @ (2048x128)", lambda: kernels.matmul_tn(a.reshape(-1, 16), t)
    yield "upsample x4 (32x8x8x16)", lambda: kernels.upsample_bilinear(x, 4)
    yield "upsample adjoint x4", lambda: kernels.upsample_bilinear_adjoint(g, 4)

    cfg = SynthConfig()
    srng = np.random.default_rng(1)
    sig = class_signatures(srng, cfg.num_classes + 1, cfg.channels)
    samples = [make_sample(f"s{i}", *synth_sample(srng, cfg, sig)) for i in range(16)]
    pairs = make_pairs(samples)[:32]
    tcfg = TrainConfig()
    state = init_model(tcfg)
    yield "train step (batch 32, default model)", lambda: train_step(state, pairs, tcfg)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = [b for b in ("compiled", "python") if kernels.BACKENDS.get(b) is not None]
    print(f"{'case':42s}" + "".join(f"{b:>14s}" for b in backends))
    for name, fn in cases():
        row = f"{name:42s}"
        for b in backends:
            prev = kernels.set_backend(b)
            try:
                fn()
                best = min(timeit.repeat(fn, number=3, repeat=args.repeat)) / 3
            finally:
                kernels.set_backend(prev)
            row += f"{best * 1e3:12.3f}ms"
        print(row)


if __name__ == "__main__":
    main()
