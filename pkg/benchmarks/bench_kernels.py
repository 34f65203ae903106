"""Time the hot kernels under both backends and print a comparison table.

Usage:
    python3 benchmarks/bench_kernels.py [--rows 8192] [--width 384]
                                        [--repeats 30] [--skip-forward]

JIT compilation happens during warmup, so the numba column reflects
steady-state cost. The end-to-end section times a full encoder forward
(batch of images through every block) to show what the kernel gap is
worth in practice; pass --skip-forward to bench the raw kernels only.
"""

import argparse
import statistics
import time

import numpy as np

from promptlab import kernels
from promptlab.encoder import EncoderConfig, EncoderState, PromptStack


def _time_call(fn, args, repeats):
    for _ in range(3):
        fn(*args)
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn(*args)
        samples.append((time.perf_counter() - started) * 1e3)
    return statistics.median(samples)


def _kernel_cases(rows, width):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, width))
    g = rng.normal(size=(rows, width))
    gamma = rng.normal(size=width)
    beta = rng.normal(size=width)
    y = kernels.softmax_lastaxis(x)
    _, mean, rstd = kernels.layernorm_lastaxis(x, gamma, beta, 1e-5)
    return (
        ("softmax_lastaxis", kernels.softmax_lastaxis, (x,)),
        ("softmax_lastaxis_grad", kernels.softmax_lastaxis_grad, (y, g)),
        ("layernorm_lastaxis", kernels.layernorm_lastaxis, (x, gamma, beta, 1e-5)),
        ("layernorm_lastaxis_grad", kernels.layernorm_lastaxis_grad, (x, gamma, mean, rstd, g)),
        ("gelu", kernels.gelu, (x,)),
        ("gelu_grad", kernels.gelu_grad, (x, g)),
    )


def bench_kernels(backends, rows, width, repeats):
    results = {}
    for backend in backends:
        kernels.use_backend(backend)
        kernels.warmup()
        for name, fn, args in _kernel_cases(rows, width):
            results.setdefault(name, {})[backend] = _time_call(fn, args, repeats)
    return results


def bench_forward(backends, repeats):
    cfg = EncoderConfig(depth=4, width=64, heads=4, patch_count=16,
                        patch_dim=12, output_dim=16, seed=0)
    stack = PromptStack.create("progressive", 8, cfg.width,
                               active_layers=(0, 1, 2, 3), alpha=0.1, seed=1)
    state = EncoderState.create(cfg, stack)
    images = np.random.default_rng(2).normal(size=(64, cfg.patch_count, cfg.patch_dim))
    results = {}
    for backend in backends:
        kernels.use_backend(backend)
        kernels.warmup()
        results[backend] = _time_call(lambda im: state.forward(im), (images,), repeats)
    return results


def _print_table(title, rows, backends, label="kernel"):
    name_w = max(len(label), max(len(name) for name, _ in rows))
    header = f"{label:<{name_w}}" + "".join(f"  {b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}"
    print(title)
    print(header)
    print("-" * len(header))
    for name, timings in rows:
        line = f"{name:<{name_w}}"
        for backend in backends:
            line += f"  {timings[backend]:>9.3f} ms"
        if len(backends) == 2:
            first, second = (timings[b] for b in backends)
            line += f"  {first / second:>7.2f}x"
        print(line)
    print()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=8192)
    parser.add_argument("--width", type=int, default=384)
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--skip-forward", action="store_true")
    args = parser.parse_args()

    backends = list(kernels.available_backends())
    if "numba" not in backends:
        print("numba unavailable; timing the numpy backend only\n")
    print(f"input {args.rows} rows x {args.width} cols, float64, "
          f"median of {args.repeats} runs\n")

    kernel_results = bench_kernels(backends, args.rows, args.width, args.repeats)
    _print_table("per-kernel", list(kernel_results.items()), backends)

    if not args.skip_forward:
        forward = bench_forward(backends, max(5, args.repeats // 3))
        _print_table("encoder forward (batch 64, depth 4, width 64)",
                     [("forward", forward)], backends, label="pass")


if __name__ == "__main__":
    main()
