"""Time the compiled and numpy kernel backends on representative shapes.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both backends are imported directly, so one process compares them.
"""
import argparse
import json
import timeit

import numpy as np

from graphdoc import kernels


def _graph(n_docs, passages, rng):
    """Block-diagonal batch of fully connected document graphs."""
    indptr, indices, base = [0], [], 0
    for _ in range(n_docs):
        n = passages + 1
        for i in range(n):
            indices.extend(range(base, base + n))
            indptr.append(len(indices))
        base += n
    return np.array(indptr, dtype=np.int64), np.array(indices, dtype=np.int64), base


def cases(rng):
    words = [f"token{i}" for i in rng.integers(0, 50000, 20000)]
    table = rng.normal(size=(32768, 128))
    lens = rng.integers(40, 128, 2000)
    offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    ids = rng.integers(0, 32768, offsets[-1]).astype(np.int64)
    grad_bag = rng.normal(size=(2000, 128))
    indptr, indices, n = _graph(64, 30, rng)
    z = rng.normal(size=(n, 256))
    a = rng.normal(size=512)
    out_grad = rng.normal(size=(n, 256))
    return {
        "hash_tokens 20k words": lambda k: k.hash_tokens(words, 32768),
        "embedding_bag_forward 2000 bags x 128": lambda k: k.embedding_bag_forward(table, ids, offsets),
        "embedding_bag_backward 2000 bags x 128": lambda k: k.embedding_bag_backward(grad_bag, ids, offsets, 32768),
        "gat_forward 64 docs x 31 nodes, d=256": lambda k: k.gat_forward(z, a, indptr, indices, 0.2),
        "gat_backward 64 docs x 31 nodes, d=256": lambda k: k.gat_backward(
            out_grad, z, a, k.gat_forward(z, a, indptr, indices, 0.2)[1], indptr, indices, 0.2),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write timings here as well")
    args = ap.parse_args()
    backends = kernels.backends()
    rng = np.random.default_rng(0)
    results = {}
    print(f"{'kernel':45s}" + "".join(f"{name:>12s}" for name in backends) + "     speedup")
    for label, fn in cases(rng).items():
        row = {}
        for name, mod in backends.items():
            fn(mod)  # warm-up
            row[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        results[label] = row
        speed = f"{row['python'] / row['cython']:10.1f}x" if "cython" in row else "       n/a"
        print(f"{label:45s}" + "".join(f"{row[n] * 1e3:10.2f}ms" for n in backends) + speed)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
