"""Benchmark the compiled patch-lowering kernels against the numpy fallback.

Records every im2col/col2im geometry one training step performs at the
default config, then times both backends on each and checks they agree
bitwise. Run as: python3 benchmarks/bench_kernels.py
"""
import argparse
import time
from collections import Counter

import numpy as np

from ssrefine.harness import TrainConfig, build_state, train_step, rng_for, _TAG_STEP
from ssrefine.tensorcore import kernels, precision


def record_geometries(cfg: TrainConfig):
    """Run one training step and collect (kind, shape, kh, kw, stride, pad) calls."""
    calls = Counter()
    real_im2col, real_col2im = kernels.im2col, kernels.col2im

    def rec_im2col(x, kh, kw, stride, pad):
        calls[("im2col", x.shape, kh, kw, stride, pad)] += 1
        return real_im2col(x, kh, kw, stride, pad)

    def rec_col2im(cols, x_shape, kh, kw, stride, pad):
        calls[("col2im", tuple(x_shape), kh, kw, stride, pad)] += 1
        return real_col2im(cols, x_shape, kh, kw, stride, pad)

    kernels.im2col, kernels.col2im = rec_im2col, rec_col2im
    try:
        with precision(cfg.precision):
            state = build_state(cfg)
            rng = rng_for(cfg.seed, _TAG_STEP, 0)
            shape = (cfg.batch_size, 3, cfg.image_size, cfg.image_size)
            x = rng.uniform(-1, 1, size=shape).astype(np.float32)
            y = rng.uniform(-1, 1, size=shape).astype(np.float32)
            train_step(state, x, y, rng)
    finally:
        kernels.im2col, kernels.col2im = real_im2col, real_col2im
    return calls


def bench(fn, repeats):
    fn()  # warmup
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run_backend(calls, dtype, repeats, use_compiled):
    saved = kernels._cy
    kernels._cy = saved if use_compiled else None
    try:
        rng = np.random.default_rng(0)
        rows = {}
        for (kind, shape, kh, kw, stride, pad), count in sorted(calls.items()):
            b, c, h, w = shape
            oh = kernels.conv_out_size(h, kh, stride, pad)
            ow = kernels.conv_out_size(w, kw, stride, pad)
            if kind == "im2col":
                x = rng.standard_normal(shape).astype(dtype)
                fn = lambda: kernels.im2col(x, kh, kw, stride, pad)
            else:
                cols = rng.standard_normal((b * oh * ow, c * kh * kw)).astype(dtype)
                fn = lambda: kernels.col2im(cols, shape, kh, kw, stride, pad)
            rows[(kind, shape, kh, kw, stride, pad)] = (bench(fn, repeats), count, fn())
        return rows
    finally:
        kernels._cy = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7, help="timing repeats per geometry")
    ap.add_argument("--image-size", type=int, default=None, help="override config image size")
    ap.add_argument("--batch", type=int, default=None, help="override config batch size")
    args = ap.parse_args()

    overrides = {}
    if args.image_size:
        overrides["image_size"] = args.image_size
    if args.batch:
        overrides["batch_size"] = args.batch
    cfg = TrainConfig(steps=1, train_scenes=2, **overrides)

    if kernels._cy is None:
        print("compiled extension not built; nothing to compare "
              f"(active backend: {kernels.BACKEND})")
        return

    calls = record_geometries(cfg)
    dtype = np.dtype(cfg.precision)
    print(f"one training step at image_size={cfg.image_size} batch={cfg.batch_size} "
          f"({dtype.name}): {sum(calls.values())} kernel calls, {len(calls)} geometries\n")

    numpy_rows = run_backend(calls, dtype, args.repeats, use_compiled=False)
    comp_rows = run_backend(calls, dtype, args.repeats, use_compiled=True)

    hdr = f"{'kind':7} {'input':>18} {'k':>3} {'s':>2} {'p':>2} {'calls':>5} " \
          f"{'numpy':>10} {'compiled':>10} {'speedup':>8}  bitwise"
    print(hdr)
    print("-" * len(hdr))
    tot_np = tot_cy = 0.0
    all_equal = True
    for key in sorted(calls):
        kind, shape, kh, kw, stride, pad = key
        t_np, count, out_np = numpy_rows[key]
        t_cy, _, out_cy = comp_rows[key]
        equal = out_np.shape == out_cy.shape and np.array_equal(out_np, out_cy)
        all_equal = all_equal and equal
        tot_np += t_np * count
        tot_cy += t_cy * count
        print(f"{kind:7} {str(shape):>18} {kh}x{kw} {stride:>2} {pad:>2} {count:>5} "
              f"{t_np*1e3:>8.3f}ms {t_cy*1e3:>8.3f}ms {t_np/t_cy:>7.2f}x  {equal}")
    print("-" * len(hdr))
    print(f"{'per-step total':>41} {tot_np*1e3:>8.3f}ms {tot_cy*1e3:>8.3f}ms "
          f"{tot_np/tot_cy:>7.2f}x  {all_equal}")
    if not all_equal:
        raise SystemExit("backends disagree bitwise")


if __name__ == "__main__":
    main()
