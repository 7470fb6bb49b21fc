"""Time the numba and numpy LSTM kernels on training- and inference-sized batches.

    python3 benchmarks/bench_kernels.py [--hidden 8] [--batch 128] [--repeat 5]
"""

import argparse
import time

import numpy as np

from stocktl import kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--hidden", type=int, default=8)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--steps", type=int, default=240)
    ap.add_argument("--infer", type=int, default=8192, help="rows for feature extraction")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    H = args.hidden
    wx = rng.uniform(-0.3, 0.3, (4 * H, 1))
    wh = rng.uniform(-0.3, 0.3, (4 * H, H))
    b = rng.uniform(-0.3, 0.3, 4 * H)
    x = rng.normal(0, 1, (args.batch, args.steps))
    xi = rng.normal(0, 1, (args.infer, args.steps))
    dh = rng.normal(0, 1, (args.batch, H))

    backends = {"numpy": (K.lstm_forward_numpy, K.lstm_backward_numpy, K.lstm_final_state_numpy)}
    if K.lstm_forward_numba is not None:
        backends["numba"] = (K.lstm_forward_numba, K.lstm_backward_numba,
                             K.lstm_final_state_numba)

    print(f"H={H} batch={args.batch} steps={args.steps} infer_rows={args.infer}")
    print(f"{'backend':8s} {'fwd+bwd ms':>11s} {'extract ms':>11s}")
    for name, (fwd, bwd, final) in backends.items():
        def step():
            hs, cs, acts = fwd(x, wx, wh, b)
            bwd(x, wh, hs, cs, acts, dh)

        t_train = best_of(step, args.repeat)
        t_infer = best_of(lambda: final(xi, wx, wh, b), args.repeat)
        print(f"{name:8s} {1e3 * t_train:11.2f} {1e3 * t_infer:11.2f}")


if __name__ == "__main__":
    main()
