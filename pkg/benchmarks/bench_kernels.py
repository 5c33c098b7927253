"""Compiled vs pure-Python timings for the hot kernels.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N]``.  Prints one CSV
row per kernel and problem size with the best-of-N time of each backend and
the speedup.  Exits with a message if the extension has not been built.
"""
import argparse
import sys
import timeit

import numpy as np
import scipy.sparse as sp

from geomdl import _kernels_py
from geomdl.graph import graph_from_adjacency, laplacian_matrix
from geomdl.mesh import icosphere


def random_sparse_graph(n, avg_degree, seed=0):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=avg_degree / n, random_state=rng, format="csr")
    A = sp.triu(A + A.T, 1)
    return graph_from_adjacency(A + A.T)


def cases():
    for n in (1_000, 10_000):
        g = random_sparse_graph(n, 8)
        W = g.weights
        yield "heavy_edge_matching", n, (W.indptr.astype(np.int32), W.indices.astype(np.int32), W.data, n // 2)
        L = laplacian_matrix(g, "sym_normalized")
        L.sort_indices()
        x = np.random.default_rng(1).standard_normal((n, 16))
        yield "cheb_recurrence", n, (L.indptr.astype(np.int32), L.indices.astype(np.int32), L.data, 1.0, x, 5)
    for s in (4, 5):
        m = icosphere(s)
        yield "cotan_face_terms", len(m.faces), (m.face_lengths,)


def best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    try:
        from geomdl import _kernels as compiled
    except ImportError:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print("kernel,size,cython_s,python_s,speedup")
    for name, size, a in cases():
        tc = best(getattr(compiled, name), a, args.repeat)
        tp = best(getattr(_kernels_py, name), a, args.repeat)
        print(f"{name},{size},{tc:.6f},{tp:.6f},{tp / tc:.1f}")


if __name__ == "__main__":
    main()
