"""Compiled vs pure-NumPy kernels, and one training step per mode with each backend.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from ctxtransducer import kernels
from ctxtransducer.config import RunConfig
from ctxtransducer.dataset import generate_context_task
from ctxtransducer.model import init_params
from ctxtransducer.training import objective


def best_ms(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * min(times)


def kernel_cases(rng):
    B, T, H = 16, 80, 32
    xw = rng.normal(size=(B, T, 4 * H))
    wh = 0.3 * rng.normal(size=(H, 4 * H))
    dh = rng.normal(size=(B, T, H))
    lp = np.log(rng.dirichlet(np.ones(3), size=(60, 21)))
    lp_blank = np.ascontiguousarray(lp[..., 0])
    lp_label = np.ascontiguousarray(lp[:, :20, 1])
    ref = rng.integers(1, 10, size=200).astype(np.int64)
    hyp = rng.integers(1, 10, size=200).astype(np.int64)

    def cases(mod):
        g, c, _ = mod.lstm_recurrence_forward(xw, wh)
        return {
            f"lstm forward  B={B} T={T} H={H}": lambda: mod.lstm_recurrence_forward(xw, wh),
            f"lstm backward B={B} T={T} H={H}": lambda: mod.lstm_recurrence_backward(dh, g, c, wh),
            "lattice fwd/bwd T=60 U=20": lambda: mod.lattice_forward_backward(lp_blank, lp_label),
            "levenshtein 200x200": lambda: mod.levenshtein_table(ref, hyp),
        }

    return cases


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = sorted(kernels.BACKENDS, reverse=True)
    if "cython" not in backends:
        print("compiled extension not built; only the NumPy fallback is available")
    cases = kernel_cases(np.random.default_rng(0))
    rows = {}
    for name in backends:
        for label, fn in cases(kernels.get_backend(name)).items():
            rows.setdefault(label, {})[name] = best_ms(fn, args.repeat)

    cfg = RunConfig()
    records = generate_context_task(cfg.task, 16)
    params = init_params(cfg.model, 0)
    previous = kernels.BACKEND_NAME
    for name in backends:
        kernels.set_backend(name)
        for mode in ("segmented", "full_utterance"):
            rows.setdefault(f"train step ({mode}, batch 16)", {})[name] = best_ms(
                lambda: objective(params, records, mode), max(3, args.repeat // 4)
            )
    kernels.set_backend(previous)

    print(f"{'kernel':<36}" + "".join(f"{b + ' ms':>14}" for b in backends) + ("    speedup" if len(backends) > 1 else ""))
    for label, r in rows.items():
        line = f"{label:<36}" + "".join(f"{r[b]:>14.3f}" for b in backends)
        if len(backends) > 1:
            line += f"{r['python'] / r['cython']:>10.1f}x"
        print(line)


if __name__ == "__main__":
    main()
