"""Time one local SGD epoch on the numba and numpy backends.

    python benchmarks/bench_kernels.py [--n 2000] [--batch-sizes 1,8,64] [--repeat 5]
"""
import argparse
import time

import numpy as np

from fedsim import _kernels
from fedsim.model import classifier_layout, epoch_order, init_params
from fedsim.partition import synth_dataset


def best_of(kernel, W, b, X, y, order, batch_size, lr, repeat):
    times = []
    for _ in range(repeat):
        Wc, bc = W.copy(), b.copy()
        t0 = time.perf_counter()
        kernel(Wc, bc, X, y, order, batch_size, lr)
        times.append(time.perf_counter() - t0)
    return min(times), Wc, bc


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--batch-sizes", default="1,8,64")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()

    data = synth_dataset(args.n, seed=0)
    p = init_params(classifier_layout(data.dim, data.num_classes), 0).tensors()
    W, b = p["weight"].copy(), p["bias"].copy()
    order = epoch_order(0, 0, args.n)

    if _kernels.sgd_epoch_numba is None:
        print("numba not importable (or FEDSIM_NUMBA=0); timing numpy only")
    else:
        # first call compiles (or loads the on-disk cache)
        t0 = time.perf_counter()
        _kernels.sgd_epoch_numba(W.copy(), b.copy(), data.features, data.labels, order, 1, args.lr)
        print(f"numba first call (compile/cache load): {time.perf_counter() - t0:.3f}s")

    print(f"{'B':>5} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |dW|':>10}")
    for bs in (int(v) for v in args.batch_sizes.split(",")):
        tn, Wn, _ = best_of(_kernels.sgd_epoch_numpy, W, b, data.features, data.labels,
                            order, bs, args.lr, args.repeat)
        if _kernels.sgd_epoch_numba is None:
            print(f"{bs:>5} {tn * 1e3:>10.2f} {'-':>10} {'-':>8} {'-':>10}")
            continue
        tj, Wj, _ = best_of(_kernels.sgd_epoch_numba, W, b, data.features, data.labels,
                            order, bs, args.lr, args.repeat)
        diff = float(np.max(np.abs(Wn - Wj)))
        print(f"{bs:>5} {tn * 1e3:>10.2f} {tj * 1e3:>10.2f} {tn / tj:>7.1f}x {diff:>10.1e}")


if __name__ == "__main__":
    main()
