"""Recall@10 and query latency of the graph index against exact search.

    python scripts/ann_recall_benchmark.py --n 10000 --dim 128 --beams 64 128 256 400
"""
import argparse
import time

import numpy as np

from kcomp.retrieval import GraphParams, build_index


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--beams", type=int, nargs="+", default=[64, 128, 256, 400])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    vectors = rng.normal(size=(args.n, args.dim))
    ids = [f"c{i:06d}" for i in range(args.n)]
    queries = rng.normal(size=(args.queries, args.dim))

    exact = build_index(ids, vectors)
    truth = [{r.chunk_id for r in exact.search(q, args.k)} for q in queries]

    t0 = time.perf_counter()
    graph = build_index(ids, vectors, "approximate_graph", GraphParams(seed=args.seed))
    print(f"graph build: {time.perf_counter() - t0:.1f}s for {args.n} x {args.dim}")
    print(f"{'query_beam':>10} {'recall@' + str(args.k):>10} {'ms/query':>9}")
    for beam in args.beams:
        t0 = time.perf_counter()
        hits = sum(len(t & {r.chunk_id for r in graph.search(q, args.k, beam=beam)}) for q, t in zip(queries, truth))
        ms = (time.perf_counter() - t0) * 1000 / args.queries
        print(f"{beam:>10} {hits / (args.k * args.queries):>10.3f} {ms:>9.2f}")


if __name__ == "__main__":
    main()
