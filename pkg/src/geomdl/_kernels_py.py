"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` function for function and are used whenever the
compiled extension is unavailable (or ``GEOMDL_PURE_PYTHON=1`` is set).
"""
import numpy as np


def heavy_edge_matching(indptr, indices, data, target):
    """One greedy heavy-edge matching pass.

    Vertices are visited in ascending order; each unmatched vertex is paired
    with its unmatched neighbour of maximal weight (ties: lowest index).
    Pairing stops as soon as the cluster count reaches ``target``.

    Returns
    -------
    labels : ndarray of int64
        Cluster id per vertex, numbered in order of first visit.
    count : int
        Number of clusters.
    """
    n = len(indptr) - 1
    partner = np.full(n, -1, dtype=np.int64)
    count = n
    for u in range(n):
        if count <= target:
            break
        if partner[u] != -1:
            continue
        best = -1
        best_w = -np.inf
        for p in range(indptr[u], indptr[u + 1]):
            v = indices[p]
            if v == u or partner[v] != -1:
                continue
            if data[p] > best_w:
                best_w = data[p]
                best = v
        if best != -1:
            partner[u] = best
            partner[best] = u
            count -= 1
    labels = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for u in range(n):
        if labels[u] != -1:
            continue
        labels[u] = nxt
        if partner[u] != -1:
            labels[partner[u]] = nxt
        nxt += 1
    return labels, nxt


def _csr_matmul(indptr, indices, data, x):
    n = len(indptr) - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    out = np.zeros_like(x)
    np.add.at(out, rows, data[:, None] * x[indices])
    return out


def cheb_recurrence(indptr, indices, data, scale, x, r):
    """Chebyshev terms ``T_j(scale * L - I) x`` for ``j < r``.

    ``L`` is given in CSR form; ``x`` is ``(n, p)``.  Returns ``(r, n, p)``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n, p = x.shape
    out = np.empty((r, n, p))
    out[0] = x
    if r == 1:
        return out
    out[1] = scale * _csr_matmul(indptr, indices, data, x) - x
    for j in range(2, r):
        out[j] = 2.0 * (scale * _csr_matmul(indptr, indices, data, out[j - 1]) - out[j - 1]) - out[j - 2]
    return out


def cotan_face_terms(lengths):
    """Heron areas and per-edge cotangent terms from face edge lengths.

    ``lengths[f, i]`` is the length of the edge of face ``f`` opposite its
    ``i``-th corner.  The term for that edge is
    ``(-l_i^2 + l_a^2 + l_b^2) / (8 area)``, i.e. half the cotangent of the
    opposite angle.

    Returns ``(areas, terms, bad)`` where ``bad`` is the index of the first
    face violating the strict triangle inequality, or -1.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    l0, l1, l2 = lengths[:, 0], lengths[:, 1], lengths[:, 2]
    s = 0.5 * (l0 + l1 + l2)
    prod = s * (s - l0) * (s - l1) * (s - l2)
    invalid = (s - l0 <= 0) | (s - l1 <= 0) | (s - l2 <= 0) | (prod <= 0)
    bad = int(np.argmax(invalid)) if invalid.any() else -1
    areas = np.sqrt(np.where(invalid, 0.0, prod))
    sq = lengths**2
    total = sq.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (total - 2.0 * sq) / (8.0 * areas[:, None])
    return areas, terms, bad
