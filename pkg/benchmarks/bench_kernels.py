"""Time each kernel, and one training step, on both backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 8]

Shapes are taken from the reference configuration (432 tokens, d_e 64,
8 heads, feed-forward width 256).
"""
import argparse
import time

import numpy as np

from tubelet import kernels
from tubelet import model as mdl
from tubelet import objectives as obj
from tubelet import tensor as tn


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch):
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(batch * 8 * 432, 432)).astype(np.float32)
    probs = kernels._pykernels.softmax_forward(scores)
    tokens = rng.normal(size=(batch * 432, 64)).astype(np.float32)
    gain, shift = np.ones(64, np.float32), np.zeros(64, np.float32)
    _, xhat, rstd = kernels._pykernels.layer_norm_forward(tokens, gain, shift, 1e-5)
    hidden = rng.normal(size=(batch * 432, 256)).astype(np.float32)
    video = rng.random((batch, 14, 6, 60, 60)).astype(np.float32)
    cols = kernels._pykernels.patchify(video, 2, 5)
    return {
        "softmax_forward": lambda: kernels.softmax_forward(scores),
        "softmax_backward": lambda: kernels.softmax_backward(probs, scores),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(tokens, gain, shift, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(tokens, xhat, rstd, gain),
        "gelu_forward": lambda: kernels.gelu_forward(hidden),
        "gelu_backward": lambda: kernels.gelu_backward(hidden, hidden),
        "patchify": lambda: kernels.patchify(video, 2, 5),
        "unpatchify": lambda: kernels.unpatchify(cols, 14, 6, 60, 60, 2, 5),
    }


def train_step(batch):
    config = mdl.ModelConfig()
    params = mdl.init_params(config, 0)
    rng = np.random.default_rng(1)
    x = tn.Tensor(rng.random((batch, config.c_total, 6, 60, 60)).astype(np.float32))
    target = tn.Tensor(rng.random((batch, 6, 11, 60, 60)).astype(np.float32))

    def step():
        with tn.GradientTape() as tape:
            pred = tn.transpose(mdl.forward(x, params, config), (0, 2, 1, 3, 4))
            loss = obj.multiscale_loss(pred, target)
        tape.gradient(loss, list(params.values()))

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()

    names = [n for n in ("python", "compiled") if n in kernels.available]
    cases = kernel_cases(args.batch)
    cases["train_step"] = train_step(args.batch)
    print(f"{'case':<22}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for case, fn in cases.items():
        timings = []
        for n in names:
            with kernels.use(n):
                fn()  # warm-up
                timings.append(best_of(fn, 1 if case == "train_step" else args.repeat))
        line = f"{case:<22}" + "".join(f"{t * 1e3:>10.2f}ms" for t in timings)
        if len(timings) == 2:
            line += f"{timings[0] / timings[1]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
