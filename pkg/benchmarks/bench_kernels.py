"""Compare the compiled kernels against the pure-Python fallback.

Usage::

    python benchmarks/bench_kernels.py [--n 20000] [--iterations 200000] [--repeats 3]

Prints one row per kernel with the best-of-``repeats`` wall time for each
backend and the speedup. Both backends produce identical output, which is
checked on the way.
"""

import argparse
import time

import numpy as np

from adaptcp import _backend
from adaptcp.models import GaussianMean, Geometric, SegmentScorer, build_cache
from adaptcp.recursions import compute_recursions, map_segmentation
from adaptcp.sampler import SamplerConfig, run


def best_of(repeats, fn):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--iterations", type=int, default=200_000)
    ap.add_argument("--recursion-n", type=int, default=2_000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _backend.COMPILED:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(args.seed)
    n = args.n
    y = np.repeat(rng.normal(0, 3, 20), n // 20) + rng.normal(0, 1, n // 20 * 20)
    model = GaussianMean(0.0, 1.0, 9.0)
    prior = Geometric(20 / len(y))
    sc = SegmentScorer(build_cache(y, model), model, prior)
    small = SegmentScorer(build_cache(y[: args.recursion_n], model), model, prior)

    rows = []
    for label, kw in (("adaptive sampler", {}), ("non-adaptive sampler", {"adaptation_enabled": False}),
                      ("thresholded sampler", {"thresholding_enabled": True})):
        res = {}
        for backend in ("compiled", "python"):
            cfg = SamplerConfig(iterations=args.iterations, seed=args.seed, backend=backend, **kw)
            res[backend] = best_of(args.repeats, lambda: run(cfg, sc.cache, model, prior, scorer=sc).summary)
        assert np.array_equal(res["compiled"][1].count_counts, res["python"][1].count_counts)
        rows.append((label, res["compiled"][0], res["python"][0], f"{args.iterations / res['compiled'][0]:.3g} it/s"))

    res = {b: best_of(args.repeats, lambda b=b: compute_recursions(small.cache, model, prior, scorer=small, backend=b))
           for b in ("compiled", "python")}
    assert res["compiled"][1].log_evidence == res["python"][1].log_evidence
    rows.append((f"backward recursion n={args.recursion_n}", res["compiled"][0], res["python"][0], ""))

    res = {b: best_of(args.repeats, lambda b=b: map_segmentation(scorer=small, backend=b))
           for b in ("compiled", "python")}
    assert res["compiled"][1] == res["python"][1]
    rows.append((f"MAP recursion n={args.recursion_n}", res["compiled"][0], res["python"][0], ""))

    probs = rng.dirichlet(np.ones(1000))
    u = np.sort(rng.random(10**6))
    res = {b: best_of(args.repeats, lambda b=b: _backend.merge_sorted_uniforms(probs, u, backend=b))
           for b in ("compiled", "python")}
    assert np.array_equal(res["compiled"][1], res["python"][1])
    rows.append(("sorted-uniform merge 1e6 x 1000", res["compiled"][0], res["python"][0], ""))

    print(f"{'kernel':<34}{'compiled s':>12}{'python s':>12}{'speedup':>10}  note")
    for label, c, p, note in rows:
        print(f"{label:<34}{c:>12.4f}{p:>12.4f}{p / c:>9.1f}x  {note}")


if __name__ == "__main__":
    main()
