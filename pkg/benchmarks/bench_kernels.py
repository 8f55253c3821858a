"""Time the batched average-precision kernel: compiled extension vs numpy fallback.

    python benchmarks/bench_kernels.py [--queries 200] [--gallery 20000] [--repeat 5]

Both backends get identical random scores (with deliberate ties) and their
outputs are checked for exact agreement before any timing is reported.
"""
import argparse
import time

import numpy as np

from aff import _kernels_py

try:
    from aff import _kernels
except ImportError:
    _kernels = None


def make_case(n_queries, n_gallery, n_classes, seed):
    rng = np.random.default_rng(seed)
    # rounding creates ties so the id tie-break path is exercised
    scores = np.round(rng.standard_normal((n_queries, n_gallery)), 2)
    gallery_ids = rng.permutation(n_gallery).astype(np.int64)
    gallery_labels = rng.integers(0, n_classes, n_gallery).astype(np.int64)
    query_labels = rng.integers(0, n_classes, n_queries).astype(np.int64)
    return np.ascontiguousarray(scores), gallery_ids, gallery_labels, query_labels


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--gallery", type=int, default=20000)
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    case = make_case(args.queries, args.gallery, args.classes, args.seed)
    call = (*case, None, args.top_k)
    ref_ap, ref_valid = _kernels_py.average_precision_batch(*call)
    t_py = best_of(_kernels_py.average_precision_batch, call, args.repeat)
    print(f"case: {args.queries} queries x {args.gallery} gallery items, top_k={args.top_k}")
    print(f"numpy fallback : {t_py * 1e3:9.2f} ms")
    if _kernels is None:
        print("compiled kernel: not built (pip install -e . builds it)")
        return
    ap, valid = _kernels.average_precision_batch(*call)
    if not (np.array_equal(np.asarray(ap), ref_ap) and np.array_equal(np.asarray(valid), ref_valid)):
        raise SystemExit("backends disagree; refusing to report timings")
    t_c = best_of(_kernels.average_precision_batch, call, args.repeat)
    print(f"compiled kernel: {t_c * 1e3:9.2f} ms  ({t_py / t_c:.1f}x faster, outputs identical)")


if __name__ == "__main__":
    main()
