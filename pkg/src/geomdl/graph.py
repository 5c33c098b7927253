"""Weighted undirected graphs and discrete calculus on them.

Vertex indices are 0-based in the Python API (files on disk are 1-based).
Edge functions are stored once per unordered edge ``(i, j)`` with ``i < j``,
in the order of :attr:`Graph.edge_index`; the value for ``(j, i)`` is the
negated stored value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from geomdl._backend import kernels

NORMALIZATIONS = ("weighted", "unnormalized", "random_walk", "sym_normalized")


class GraphError(ValueError):
    """Invalid graph data or an operation the graph cannot support."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable weighted undirected graph.

    Attributes
    ----------
    n : int
        Number of vertices.
    vertex_weights : ndarray, shape (n,)
        Positive vertex measure ``a_i``.
    weights : scipy.sparse.csr_matrix
        Symmetric adjacency ``W`` with sorted column indices and no diagonal.
    """

    n: int
    vertex_weights: np.ndarray
    weights: sp.csr_matrix
    degrees: np.ndarray = field(init=False)
    edge_index: np.ndarray = field(init=False)
    edge_weights: np.ndarray = field(init=False)

    def __post_init__(self):
        W = self.weights
        object.__setattr__(self, "degrees", np.asarray(W.sum(axis=1)).ravel())
        upper = sp.triu(W, k=1, format="csr")
        upper.sort_indices()
        rows = np.repeat(np.arange(self.n), np.diff(upper.indptr))
        object.__setattr__(self, "edge_index", np.stack([rows, upper.indices]).T.astype(np.int64))
        object.__setattr__(self, "edge_weights", upper.data.astype(np.float64))
        for arr in (self.vertex_weights, self.degrees, self.edge_index, self.edge_weights):
            arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return len(self.edge_weights)

    def __repr__(self):
        return f"Graph(n={self.n}, edges={self.num_edges})"


def build_graph(n, vertex_weights=None, edges=(), *, allow_negative=False) -> Graph:
    """Build a graph from ``(i, j, w)`` triplets (0-based, either orientation).

    Repeated edges must carry the same weight.  Negative weights are rejected
    unless ``allow_negative`` is set (cotangent Laplacians of obtuse meshes).
    """
    n = int(n)
    if n < 1:
        raise GraphError("graph must have at least one vertex")
    a = np.ones(n) if vertex_weights is None else np.asarray(vertex_weights, dtype=np.float64).copy()
    if a.shape != (n,):
        raise GraphError(f"expected {n} vertex weights, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise GraphError("vertex weights must be finite and positive")

    seen = {}
    for e in edges:
        i, j, w = int(e[0]), int(e[1]), float(e[2])
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"edge ({i}, {j}) out of range for n={n}")
        if i == j:
            raise GraphError(f"self-loop at vertex {i}")
        if not np.isfinite(w) or (w < 0 and not allow_negative):
            raise GraphError(f"invalid weight {w} on edge ({i}, {j})")
        key = (i, j) if i < j else (j, i)
        if key in seen and seen[key] != w:
            raise GraphError(f"conflicting weights for edge {key}: {seen[key]} vs {w}")
        seen[key] = w
    return _from_upper(n, a, seen)


def _from_upper(n, a, edge_map):
    if edge_map:
        keys = np.array(sorted(edge_map), dtype=np.int64)
        w = np.array([edge_map[tuple(k)] for k in keys])
        i, j = keys[:, 0], keys[:, 1]
    else:
        i = j = np.zeros(0, dtype=np.int64)
        w = np.zeros(0)
    return graph_from_arrays(n, a, i, j, w)


def graph_from_arrays(n, vertex_weights, i, j, w) -> Graph:
    """Vectorised constructor from unique upper-triangle arrays (``i < j``)."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    W = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n)).tocsr()
    W.sum_duplicates()
    W.sort_indices()
    W.indptr = W.indptr.astype(np.int32)
    W.indices = W.indices.astype(np.int32)
    a = np.ones(n) if vertex_weights is None else np.asarray(vertex_weights, dtype=np.float64)
    return Graph(n=n, vertex_weights=a, weights=W)


def graph_from_adjacency(W, vertex_weights=None, *, allow_negative=False) -> Graph:
    """Graph from a symmetric (sparse or dense) adjacency matrix; the diagonal is ignored."""
    W = sp.csr_matrix(W, dtype=np.float64)
    n = W.shape[0]
    if W.shape != (n, n):
        raise GraphError("adjacency must be square")
    if W.nnz:
        scale = max(1.0, abs(W).max())
        if abs(W - W.T).max() > 1e-12 * scale:
            raise GraphError("adjacency must be symmetric")
    upper = sp.triu(W, k=1).tocoo()
    if not allow_negative and np.any(upper.data < 0):
        raise GraphError("negative edge weights")
    a = np.ones(n) if vertex_weights is None else np.asarray(vertex_weights, dtype=np.float64)
    if np.any(a <= 0):
        raise GraphError("vertex weights must be positive")
    return graph_from_arrays(n, a, upper.row, upper.col, upper.data)


def _check_vertex_fn(f, graph):
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] != graph.n:
        raise GraphError(f"vertex function has length {f.shape[0]}, graph has {graph.n} vertices")
    return f


def _check_edge_fn(F, graph):
    F = np.asarray(F, dtype=np.float64)
    if F.shape[0] != graph.num_edges:
        raise GraphError(f"edge function has length {F.shape[0]}, graph has {graph.num_edges} edges")
    return F


def _bcast(v, like):
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def inner_product_vertices(f, g, graph):
    """``sum_i a_i f_i g_i`` (summed over channels for matrix inputs)."""
    f = _check_vertex_fn(f, graph)
    g = _check_vertex_fn(g, graph)
    if f.shape != g.shape:
        raise GraphError("shape mismatch")
    return float(np.sum(_bcast(graph.vertex_weights, f) * f * g))


def inner_product_edges(F, G, graph):
    """``sum_{i<j} w_ij F_ij G_ij``, one term per unordered edge."""
    F = _check_edge_fn(F, graph)
    G = _check_edge_fn(G, graph)
    if F.shape != G.shape:
        raise GraphError("shape mismatch")
    return float(np.sum(_bcast(graph.edge_weights, F) * F * G))


def gradient(f, graph):
    """Edge function ``(grad f)_ij = f_i - f_j`` on the ``i < j`` edges."""
    f = _check_vertex_fn(f, graph)
    i, j = graph.edge_index.T
    return f[i] - f[j]


def divergence(F, graph):
    """Vertex function ``(div F)_i = -(1/a_i) sum_j w_ij F_ij``.

    The sign makes ``-div`` the adjoint of :func:`gradient` and
    ``Laplacian = -div grad``.
    """
    F = _check_edge_fn(F, graph)
    i, j = graph.edge_index.T
    wF = _bcast(graph.edge_weights, F) * F
    out = np.zeros((graph.n,) + F.shape[1:])
    np.add.at(out, i, wF)
    np.add.at(out, j, -wF)
    return -out / _bcast(graph.vertex_weights, out)


def _metric(graph, normalization):
    if normalization == "weighted":
        return graph.vertex_weights
    if normalization == "unnormalized":
        return np.ones(graph.n)
    if normalization in ("random_walk", "sym_normalized"):
        d = graph.degrees
        if np.any(d <= 0):
            raise GraphError(f"isolated vertex {int(np.argmax(d <= 0))}: degree normalization undefined")
        return d
    raise GraphError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")


def stiffness_matrix(graph) -> sp.csr_matrix:
    """``D - W`` as a CSR matrix with sorted indices."""
    L = (sp.diags(graph.degrees) - graph.weights).tocsr()
    L.sort_indices()
    return L


def laplacian_matrix(graph, normalization="weighted") -> sp.csr_matrix:
    """Sparse Laplacian.

    ``weighted``: ``A^-1 (D - W)`` with the graph's own vertex weights;
    ``unnormalized``: ``D - W``; ``random_walk``: ``D^-1 (D - W)``;
    ``sym_normalized``: ``D^-1/2 (D - W) D^-1/2``.
    """
    a = _metric(graph, normalization)
    L = stiffness_matrix(graph)
    if normalization == "sym_normalized":
        s = 1.0 / np.sqrt(a)
        out = sp.diags(s) @ L @ sp.diags(s)
    else:
        out = sp.diags(1.0 / a) @ L
    out = out.tocsr()
    out.sort_indices()
    return out


def apply_laplacian(f, graph, normalization="weighted"):
    """Matrix-free Laplacian application.

    For ``weighted`` this is literally ``-divergence(gradient(f))``.
    """
    f = _check_vertex_fn(f, graph)
    if normalization == "weighted":
        return -divergence(gradient(f, graph), graph)
    a = _metric(graph, normalization)
    Lf = _bcast(graph.degrees, f) * f - graph.weights @ f
    if normalization == "sym_normalized":
        s = _bcast(1.0 / np.sqrt(a), f)
        return s * (_bcast(graph.degrees, f) * (s * f) - graph.weights @ (s * f))
    return Lf / _bcast(a, f)


def dirichlet_energy(f, graph):
    """``<f, Laplacian f>`` in the graph's vertex metric."""
    return inner_product_edges(gradient(f, graph), gradient(f, graph), graph)


def khop_mask(graph, sources, hops):
    """Boolean mask of vertices within ``hops`` edges of any of ``sources``."""
    mask = np.zeros(graph.n, dtype=bool)
    mask[np.atleast_1d(sources)] = True
    A = graph.weights.copy()
    A.data[:] = 1.0
    for _ in range(hops):
        mask = mask | (A @ mask.astype(float) > 0)
    return mask


# --- coarsening ------------------------------------------------------------


@dataclass(frozen=True)
class CoarseningMap:
    """Assignment of fine vertices to coarse clusters."""

    labels: np.ndarray
    count: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.count):
            raise GraphError("cluster label out of range")
        if np.bincount(labels, minlength=self.count).min(initial=1) == 0:
            raise GraphError("empty cluster")
        object.__setattr__(self, "labels", labels)

    def compose(self, other: "CoarseningMap") -> "CoarseningMap":
        """Map fine -> self -> other."""
        return CoarseningMap(other.labels[self.labels], other.count)


def contract(graph, cmap: CoarseningMap) -> Graph:
    """Coarse graph: summed vertex weights, summed inter-cluster edge weights."""
    a = np.zeros(cmap.count)
    np.add.at(a, cmap.labels, graph.vertex_weights)
    i, j = graph.edge_index.T
    ci, cj = cmap.labels[i], cmap.labels[j]
    keep = ci != cj
    lo, hi = np.minimum(ci, cj)[keep], np.maximum(ci, cj)[keep]
    if lo.size:
        C = sp.coo_matrix((graph.edge_weights[keep], (lo, hi)), shape=(cmap.count, cmap.count)).tocsr()
        C.sum_duplicates()
        C = C.tocoo()
        return graph_from_arrays(cmap.count, a, C.row, C.col, C.data)
    return graph_from_arrays(cmap.count, a, [], [], [])


def coarsen(graph, ratio):
    """Greedy heavy-edge matching down to ``floor(ratio * n)`` clusters.

    Matching passes repeat on the contracted graph until the target is met or
    a pass merges nothing (e.g. no edges left), in which case the remaining
    vertices stay singletons.

    Returns
    -------
    coarse : Graph
    cmap : CoarseningMap
        Fine vertex -> coarse vertex.
    """
    if not 0 < ratio < 1:
        raise GraphError("coarsening ratio must lie in (0, 1)")
    target = int(np.floor(ratio * graph.n + 1e-12))
    if target < 1:
        raise GraphError(f"ratio {ratio} leaves fewer than one cluster for n={graph.n}")
    cmap = CoarseningMap(np.arange(graph.n), graph.n)
    current = graph
    while current.n > target:
        W = current.weights
        labels, count = kernels.heavy_edge_matching(
            W.indptr.astype(np.int32), W.indices.astype(np.int32), W.data.astype(np.float64), target
        )
        if count == current.n:
            break
        step = CoarseningMap(labels, count)
        current = contract(current, step)
        cmap = cmap.compose(step)
    return current, cmap


def pool(f, cmap: CoarseningMap, reducer="max"):
    """Reduce a vertex function over clusters with ``max``, ``mean`` or ``sum``."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] != len(cmap.labels):
        raise GraphError("vertex function length does not match coarsening map")
    shape = (cmap.count,) + f.shape[1:]
    if reducer == "sum":
        out = np.zeros(shape)
        np.add.at(out, cmap.labels, f)
        return out
    if reducer == "mean":
        out = np.zeros(shape)
        np.add.at(out, cmap.labels, f)
        return out / _bcast(np.bincount(cmap.labels, minlength=cmap.count).astype(float), out)
    if reducer == "max":
        out = np.full(shape, -np.inf)
        np.maximum.at(out, cmap.labels, f)
        return out
    raise GraphError(f"unknown reducer {reducer!r}")


def unpool(g, cmap: CoarseningMap):
    """Copy coarse values back to every fine vertex of the cluster."""
    return np.asarray(g)[cmap.labels]
