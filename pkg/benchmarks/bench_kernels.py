"""Time the hot kernels on both backends and print a comparison table.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats 3] [--steps 10]

Each row reports the best wall time per call over --repeats samples for the
pure-Python kernels and the compiled extension, plus the speedup. The final
row times a full optimizer step (forward, losses, backward, update) through
the training loop. Run with JOURNEYKIT_PURE=1 to check that selection still
works; the script switches backends itself either way.
"""

import argparse
import math
import random
import sys
import time
from array import array

from journeykit.numerics import set_backend
from journeykit.numerics.backend import compiled_available, kern
from journeykit.model import LayerGroupConfig, config_from_corpus
from journeykit.training import (GeneratorSpec, ObjectiveWeights,
                                 gen_synthetic, train)


def randbuf(rng, n):
    return array("d", (rng.gauss(0.0, 1.0) for _ in range(n)))


def bench_mm(rng):
    m = k = n = 64
    a, b = randbuf(rng, m * k), randbuf(rng, k * n)
    out = array("d", bytes(8 * m * n))
    return f"mm {m}x{k}x{n}", lambda: kern.mm(a, b, out, m, k, n)


def bench_masked_softmax(rng):
    m = n = 192
    s = randbuf(rng, m * n)
    mask = bytearray(1 if rng.random() < 0.75 else 0 for _ in range(m * n))
    for i in range(m):
        mask[i * n + i] = 1   # keep every row attendable
    out = array("d", bytes(8 * m * n))
    return (f"masked_softmax {m}x{n}",
            lambda: kern.masked_softmax(s, mask, out, m, n))


def bench_layernorm(rng):
    m, n = 256, 64
    x = randbuf(rng, m * n)
    gain, offset = randbuf(rng, n), randbuf(rng, n)
    out = array("d", bytes(8 * m * n))
    mean, rstd = array("d", bytes(8 * m)), array("d", bytes(8 * m))
    return (f"layernorm {m}x{n}",
            lambda: kern.layernorm(x, gain, offset, out, mean, rstd,
                                   m, n, 1e-5))


def bench_rotate_rows(rng):
    m, n = 256, 64
    x = randbuf(rng, m * n)
    ang = randbuf(rng, m * (n // 2))
    out = array("d", bytes(8 * m * n))
    return (f"rotate_rows {m}x{n}",
            lambda: kern.rotate_rows(x, ang, out, m, n, n // 2))


def bench_ce(rng):
    m, n = 128, 512
    logits = randbuf(rng, m * n)
    targets = array("l", (rng.randrange(n) for _ in range(m)))
    probs = array("d", bytes(8 * m * n))
    return (f"ce_fwd {m}x{n}",
            lambda: kern.ce_fwd(logits, targets, probs, m, n))


def bench_adam(rng):
    n = 65536
    p, g = randbuf(rng, n), randbuf(rng, n)
    mbuf = array("d", bytes(8 * n))
    vbuf = array("d", bytes(8 * n))
    return (f"adam_step n={n}",
            lambda: kern.adam_step(p, g, mbuf, vbuf, n, 1e-3, 0.9, 0.999,
                                   1e-8, 0.1, 0.001))


def bench_train_step(steps):
    corpus = gen_synthetic(GeneratorSpec(entities=8, relations=2,
                                         sentences=4), seed=0)
    cfg = config_from_corpus(
        corpus, d_model=16, head_count=2, ffn_mult=1,
        layer_groups=(LayerGroupConfig("structured", "instance_local", 1),
                      LayerGroupConfig("language", "instance_local", 1)))

    def run():
        train(cfg, corpus, ObjectiveWeights(), steps=steps, seed=0)

    return f"train step d=16 ({steps} steps avg)", run, steps


def best_time(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3,
                    help="samples per measurement (default 3)")
    ap.add_argument("--steps", type=int, default=10,
                    help="optimizer steps in the end-to-end row (default 10)")
    args = ap.parse_args(argv)

    if not compiled_available():
        print("compiled extension not built; run "
              "`pip install -e . --no-build-isolation` with the [speed] "
              "extra first", file=sys.stderr)
        return 1

    rng = random.Random(0)
    rows = [bench_mm(rng), bench_masked_softmax(rng), bench_layernorm(rng),
            bench_rotate_rows(rng), bench_ce(rng), bench_adam(rng)]

    print(f"{'kernel':<31} {'pure':>12} {'compiled':>12} {'speedup':>9}")
    for label, fn in rows:
        times = {}
        for backend in ("pure", "compiled"):
            set_backend(backend)
            times[backend] = best_time(fn, args.repeats)
        print(f"{label:<31} {times['pure'] * 1e3:>9.3f} ms "
              f"{times['compiled'] * 1e3:>9.3f} ms "
              f"{times['pure'] / times['compiled']:>8.1f}x")

    label, run, steps = bench_train_step(args.steps)
    times = {}
    for backend in ("pure", "compiled"):
        set_backend(backend)
        times[backend] = best_time(run, 1) / steps
    print(f"{label:<31} {times['pure'] * 1e3:>9.3f} ms "
          f"{times['compiled'] * 1e3:>9.3f} ms "
          f"{times['pure'] / times['compiled']:>8.1f}x")

    set_backend("compiled")
    return 0


if __name__ == "__main__":
    sys.exit(main())
