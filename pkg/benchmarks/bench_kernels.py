"""Compare the compiled and pure-Python edit-distance kernels.

    python3 benchmarks/bench_kernels.py [--pairs N] [--length L] [--repeat R]
"""
import argparse
import random
import timeit

from avsr_temporal import kernels


def make_pairs(n, length, vocab=16, seed=0):
    rng = random.Random(seed)
    return [([rng.randrange(vocab) for _ in range(length)],
             [rng.randrange(vocab) for _ in range(length + rng.randrange(-3, 4))])
            for _ in range(n)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--length", type=int, default=12)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    pairs = make_pairs(args.pairs, args.length)
    impls = kernels.backends()
    results = {}
    for name, fn in impls.items():
        t = min(timeit.repeat(lambda: [fn(r, h) for r, h in pairs], number=1, repeat=args.repeat))
        results[name] = t
        print(f"{name:8s} {t * 1e6 / len(pairs):9.2f} us/pair   ({t:.4f} s for {len(pairs)} pairs)")
    outs = {name: [fn(r, h) for r, h in pairs] for name, fn in impls.items()}
    assert len({tuple(v) for v in outs.values()}) == 1, "backends disagree"
    if "cython" in results:
        print(f"speedup  {results['python'] / results['cython']:.1f}x  (default backend: {kernels.BACKEND})")
    else:
        print("compiled backend not built; only the fallback was timed")


if __name__ == "__main__":
    main()
