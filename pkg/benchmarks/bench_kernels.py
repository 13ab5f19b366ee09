"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 64]

Times each sliding-window kernel at LeNet shapes, plus one LeNet
forward+backward step, and checks the two backends agree.
"""

import argparse
import timeit

import numpy as np

from fssd import kernels
from fssd.models import ModelConfig, build_model
from fssd.trainer import loss_and_grads


def cases(batch, rng):
    # first LeNet block on 28x28 inputs: pad 2, 5x5 kernel, 6 channels, 2x2 pool
    xp = rng.random((batch, 1, 32, 32))
    cols = kernels.im2col(xp, 5, 5, 1)
    act = rng.standard_normal((batch, 6, 28, 28))
    pooled, arg = kernels.maxpool_forward(act, 2, 2)
    return {
        "im2col": lambda: kernels.im2col(xp, 5, 5, 1),
        "col2im": lambda: kernels.col2im(cols, xp.shape, 5, 5, 1),
        "maxpool_forward": lambda: kernels.maxpool_forward(act, 2, 2),
        "maxpool_backward": lambda: kernels.maxpool_backward(pooled, arg, act.shape, 2, 2),
    }


def lenet_step(batch, rng):
    model = build_model(ModelConfig("lenet", input_shape=(1, 28, 28), conv_channels=(6, 16), kernel_size=5,
                                    padding=2, pool=2, fc_sizes=(120, 84), num_classes=10, seed=0))
    x = rng.random((batch, 1, 28, 28))
    y = rng.integers(0, 10, batch)
    return lambda: loss_and_grads(model, x, y)


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=64)
    args = parser.parse_args(argv)
    if kernels.COMPILED_BACKEND is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    results = {}
    for backend in ("numpy", "compiled"):
        kernels.use_backend(backend)
        rng = np.random.default_rng(0)
        fns = cases(args.batch, rng)
        fns["lenet_step"] = lenet_step(args.batch, rng)
        results[backend] = {name: (best_of(fn, args.repeat), fn()) for name, fn in fns.items()}

    print(f"batch {args.batch}, best of {args.repeat}")
    print(f"{'kernel':<18}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}")
    for name in results["numpy"]:
        t_np, out_np = results["numpy"][name]
        t_c, out_c = results["compiled"][name]
        a = out_np[0] if isinstance(out_np, tuple) else out_np
        b = out_c[0] if isinstance(out_c, tuple) else out_c
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        print(f"{name:<18}{1e3 * t_np:>10.2f}{1e3 * t_c:>13.2f}{t_np / t_c:>8.1f}x")


if __name__ == "__main__":
    main()
