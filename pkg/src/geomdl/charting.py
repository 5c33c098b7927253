"""Patch operators and intrinsic spatial convolution.

A patch operator is a family of ``J`` nonnegative weight stencils
``v_j(x, x')`` stored as sparse ``n x n`` matrices.  Patch responses
integrate against the vertex measure::

    D_j(x) f = sum_x' v_j(x, x') a_x' f(x')

so in matrix form ``D_j f = V_j A f``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from geomdl.graph import Graph
from geomdl.mesh import ConductivityField, MeshError, TriMesh, anisotropic_cotan_laplacian, cotan_laplacian
from geomdl.spectral import eigendecompose, heat_kernel

DEFAULT_REFERENCE = np.eye(3)


@dataclass(frozen=True, eq=False)
class PseudoCoords:
    """Flat list of ``(center, neighbor, u)`` triples over ``n`` vertices."""

    n: int
    centers: np.ndarray
    neighbors: np.ndarray
    coords: np.ndarray
    scheme: str

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def of(self, x):
        """``(neighbors, coords)`` of one center."""
        sel = self.centers == x
        return self.neighbors[sel], self.coords[sel]


@dataclass(frozen=True, eq=False)
class PatchOperator:
    weights: tuple
    metric: np.ndarray
    scheme: str
    params: dict = field(default_factory=dict)
    normalized: bool = False

    @property
    def J(self) -> int:
        return len(self.weights)

    @property
    def n(self) -> int:
        return len(self.metric)

    def matrices(self):
        """``V_j A`` for every ``j``: the linear maps ``f -> D_j f``."""
        A = sp.diags(self.metric)
        return [(V @ A).tocsr() for V in self.weights]


# --- geodesic polar coordinates --------------------------------------------


def _tangent_frame(points, center, ref_normal, reference):
    """PCA normal of ``points`` oriented along ``ref_normal``, plus the reference axis in the plane."""
    X = points - points.mean(axis=0)
    _, s, Vt = np.linalg.svd(X, full_matrices=True)
    if len(s) < 2 or s[1] <= 1e-9 * max(s[0], 1e-300):
        raise MeshError(f"degenerate tangent plane at vertex {center}: neighbourhood is collinear")
    normal = Vt[2]
    if normal @ ref_normal < 0:
        normal = -normal
    for axis in reference:
        e1 = axis - (axis @ normal) * normal
        nrm = np.linalg.norm(e1)
        if nrm > 0.1:
            e1 = e1 / nrm
            return normal, e1, np.cross(normal, e1)
    raise MeshError(f"no reference axis projects onto the tangent plane at vertex {center}")


def geodesic_polar_coords(mesh: TriMesh, radius, centers=None, reference=DEFAULT_REFERENCE) -> PseudoCoords:
    """Geodesic polar coordinates ``(rho, theta)`` around each center.

    ``rho`` is the Dijkstra distance over edge lengths, restricted to
    ``rho <= radius``.  ``theta`` in ``[0, 2 pi)`` is the angle of the
    neighbour projected onto the PCA tangent plane of the ball (together with
    the one-ring), measured from the first axis of ``reference`` that is not
    nearly normal to the plane.  The center itself is listed with
    ``rho = theta = 0``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    centers = np.arange(mesh.n) if centers is None else np.atleast_1d(np.asarray(centers, dtype=np.int64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    A = mesh.adjacency()
    deg = np.diff(A.indptr)
    if np.any(deg[centers] == 0):
        raise MeshError(f"isolated vertex {int(centers[deg[centers] == 0][0])}")
    dist = dijkstra(mesh.length_graph(), directed=False, indices=centers, limit=radius * (1 + 1e-12))
    V = mesh.vertices
    normals = mesh.vertex_normals()
    cs, nbs, us = [], [], []
    for row, x in enumerate(centers):
        nb = np.flatnonzero(dist[row] <= radius)
        ring = A.indices[A.indptr[x] : A.indptr[x + 1]]
        support = np.union1d(nb, ring)
        normal, e1, e2 = _tangent_frame(V[support], x, normals[x], reference)
        d = V[nb] - V[x]
        theta = np.mod(np.arctan2(d @ e2, d @ e1), 2 * np.pi)
        theta[nb == x] = 0.0
        theta[theta >= 2 * np.pi] = 0.0
        cs.append(np.full(len(nb), x))
        nbs.append(nb)
        us.append(np.column_stack([dist[row, nb], theta]))
    return PseudoCoords(mesh.n, np.concatenate(cs), np.concatenate(nbs), np.concatenate(us), "geodesic")


def wrapped_angle(a, b):
    """Signed angular difference ``a - b`` mapped to ``(-pi, pi]``."""
    d = np.mod(np.asarray(a) - np.asarray(b) + np.pi, 2 * np.pi) - np.pi
    return np.where(d == -np.pi, np.pi, d)


def _gauss(d, sigma):
    if sigma == np.inf:
        return np.ones_like(d)
    return np.exp(-(d**2) / (2.0 * sigma**2))


def _assemble(rows, cols, vals, n):
    V = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    V.sum_duplicates()
    V.eliminate_zeros()
    return V


def normalize_weights(weights, metric):
    """Scale rows so ``sum_x' v(x, x') a_x' = 1`` wherever the row is nonzero."""
    out = []
    for V in weights:
        s = V @ metric
        inv = np.divide(1.0, s, out=np.zeros_like(s), where=s > 0)
        out.append((sp.diags(inv) @ V).tocsr())
    return tuple(out)


def geodesic_patch_weights(coords: PseudoCoords, rho_bins, theta_bins=None, sigma_rho=1.0, sigma_theta=1.0, metric=None, normalize=True) -> PatchOperator:
    """Products of radial and wrapped angular Gaussians around bin centers.

    Bins are ordered radius-major: ``j = i_rho * J_theta + i_theta``.  With
    ``theta_bins=None`` only radial bins are built (angle independent, hence
    intrinsic).  ``sigma = inf`` makes a factor constant.  The center's
    angular factor is 1 since its angle is undefined.
    """
    if sigma_rho <= 0 or sigma_theta <= 0:
        raise ValueError("bandwidths must be positive")
    rho_bins = np.atleast_1d(np.asarray(rho_bins, dtype=np.float64))
    radial_only = theta_bins is None
    theta_bins = np.zeros(1) if radial_only else np.atleast_1d(np.asarray(theta_bins, dtype=np.float64))
    metric = np.ones(coords.n) if metric is None else np.asarray(metric, dtype=np.float64)
    rho, theta = coords.coords[:, 0], coords.coords[:, 1]
    at_center = coords.centers == coords.neighbors
    weights = []
    for r in rho_bins:
        radial = _gauss(rho - r, sigma_rho)
        for t in theta_bins:
            angular = np.ones_like(theta) if radial_only else _gauss(wrapped_angle(theta, t), sigma_theta)
            angular = np.where(at_center, 1.0, angular)
            weights.append(_assemble(coords.centers, coords.neighbors, radial * angular, coords.n))
    weights = tuple(weights)
    if normalize:
        weights = normalize_weights(weights, metric)
    params = {
        "rho_bins": rho_bins.tolist(),
        "theta_bins": None if radial_only else theta_bins.tolist(),
        "sigma_rho": float(sigma_rho),
        "sigma_theta": float(sigma_theta),
    }
    scheme = "geodesic_radial" if radial_only else "geodesic"
    return PatchOperator(weights, metric, scheme, params, normalize)


# --- heat-kernel patches ---------------------------------------------------


def _kernel_weights(graph: Graph, times, k, scheme_tol=1e-6):
    basis = eigendecompose(graph, min(k, graph.n))
    out = []
    for t in times:
        H = heat_kernel(basis, t)
        neg = H.min()
        if neg < -scheme_tol:
            warnings.warn(f"heat kernel at t={t} has negative entries down to {neg:.2e}; clamped to 0", stacklevel=3)
        out.append(sp.csr_matrix(np.maximum(H, 0.0)))
    return out, basis


def heat_patch_weights(mesh: TriMesh, times, k=None, normalize=False) -> PatchOperator:
    """Isotropic heat kernels ``h_t(x, .)`` of the cotangent Laplacian, one stencil per time."""
    g = cotan_laplacian(mesh)
    weights, _ = _kernel_weights(g, times, mesh.n if k is None else k)
    weights = tuple(weights)
    a = g.vertex_weights
    if normalize:
        weights = normalize_weights(weights, a)
    return PatchOperator(weights, a, "heat", {"times": list(map(float, times)), "k": k}, normalize)


def anisotropic_patch_weights(mesh: TriMesh, alpha, thetas, times, k=None, axis=(1.0, 0.0, 0.0), normalize=False) -> PatchOperator:
    """Anisotropic heat kernels, one stencil per ``(theta, t)``, theta-major."""
    weights = []
    a = mesh.vertex_areas
    for th in thetas:
        g = anisotropic_cotan_laplacian(mesh, ConductivityField(alpha, th), axis=axis)
        w, _ = _kernel_weights(g, times, mesh.n if k is None else k)
        weights.extend(w)
    weights = tuple(weights)
    if normalize:
        weights = normalize_weights(weights, a)
    params = {"alpha": float(alpha), "thetas": list(map(float, thetas)), "times": list(map(float, times)), "k": k}
    return PatchOperator(weights, a, "anisotropic", params, normalize)


# --- MoNet ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MoNetKernelParams:
    """Means ``mu`` (J x d) and lower-triangular factors ``L`` with ``Sigma_j = L_j L_j^T``."""

    mu: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        L = np.asarray(self.L, dtype=np.float64)
        if L.shape != (mu.shape[0], mu.shape[1], mu.shape[1]):
            raise ValueError(f"factor shape {L.shape} does not match means {mu.shape}")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("covariance factors must be lower triangular")
        if np.any(np.abs(np.diagonal(L, axis1=1, axis2=2)) <= 0):
            raise ValueError("covariance factor is singular")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "L", L)

    @classmethod
    def from_covariances(cls, mu, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        try:
            L = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"covariance is not positive definite: {exc}") from None
        return cls(mu, L)

    @property
    def J(self) -> int:
        return self.mu.shape[0]

    @property
    def covariances(self):
        return self.L @ np.transpose(self.L, (0, 2, 1))


def gaussian_kernel_values(U, params: MoNetKernelParams):
    """``(m, J)`` values ``exp(-(u - mu_j)^T Sigma_j^-1 (u - mu_j) / 2)``."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    out = np.empty((len(U), params.J))
    for j in range(params.J):
        z = np.linalg.solve(params.L[j], (U - params.mu[j]).T)
        out[:, j] = np.exp(-0.5 * np.sum(z**2, axis=0))
    return out


def monet_weights(coords: PseudoCoords, params: MoNetKernelParams, metric=None, normalize=False) -> PatchOperator:
    if coords.d != params.mu.shape[1]:
        raise ValueError(f"pseudo-coordinates have d={coords.d}, kernels d={params.mu.shape[1]}")
    vals = gaussian_kernel_values(coords.coords, params)
    metric = np.ones(coords.n) if metric is None else np.asarray(metric, dtype=np.float64)
    weights = tuple(_assemble(coords.centers, coords.neighbors, vals[:, j], coords.n) for j in range(params.J))
    if normalize:
        weights = normalize_weights(weights, metric)
    return PatchOperator(weights, metric, "monet", {"J": params.J, "d": coords.d}, normalize)


def graph_pseudo_coords(graph: Graph, self_loops=True) -> PseudoCoords:
    """``u(x, x') = (deg(x)^-1/2, deg(x')^-1/2)`` over edges, both directions.

    Degrees count the self loop when ``self_loops`` is set, which keeps
    isolated vertices finite.
    """
    ei = graph.edge_index
    c = np.concatenate([ei[:, 0], ei[:, 1]])
    nb = np.concatenate([ei[:, 1], ei[:, 0]])
    deg = np.bincount(c, minlength=graph.n).astype(np.float64)
    if self_loops:
        v = np.arange(graph.n)
        c, nb = np.concatenate([c, v]), np.concatenate([nb, v])
        deg = deg + 1.0
    if np.any(deg[c] == 0):
        raise ValueError("isolated vertex without self loops has no pseudo-coordinates")
    order = np.lexsort((nb, c))
    c, nb = c[order], nb[order]
    U = np.column_stack([deg[c] ** -0.5, deg[nb] ** -0.5])
    return PseudoCoords(graph.n, c, nb, U, "degree")


def mean_aggregation_matrix(coords: PseudoCoords):
    """``(n, m)`` sparse map summing per-pair values into centers, divided by neighbourhood size."""
    m = len(coords.centers)
    cnt = np.bincount(coords.centers, minlength=coords.n).astype(np.float64)
    vals = 1.0 / cnt[coords.centers]
    return sp.csr_matrix((vals, (coords.centers, np.arange(m))), shape=(coords.n, m))


# --- applying patches -------------------------------------------------------


def patch_apply(f, op: PatchOperator, x):
    """Patch responses ``D_j(x) f`` for one center, shape ``(J,)`` (or ``(J, p)``)."""
    f = np.asarray(f, dtype=np.float64)
    af = op.metric * f if f.ndim == 1 else op.metric[:, None] * f
    return np.array([V.getrow(x) @ af for V in op.weights]).reshape((op.J,) + f.shape[1:])


def patch_responses(f, op: PatchOperator):
    """All responses, shape ``(J, n)`` or ``(J, n, p)``."""
    f = np.asarray(f, dtype=np.float64)
    af = op.metric * f if f.ndim == 1 else op.metric[:, None] * f
    return np.stack([np.asarray(V @ af) for V in op.weights])


def intrinsic_convolve(f, op: PatchOperator, g):
    """``(f * g)(x) = sum_j g_j D_j(x) f``.

    ``g`` has shape ``(J,)`` for a single channel or ``(J, p, q)`` for a
    multichannel template bank.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] != op.J:
        raise ValueError(f"template has {g.shape[0]} entries, operator has J={op.J}")
    R = patch_responses(f, op)
    if g.ndim == 1:
        return np.tensordot(g, R, axes=(0, 0))
    return np.einsum("jnp,jpq->nq", R, g)


def angular_max_convolve(f, op: PatchOperator, g, n_theta):
    """Max over the ``n_theta`` cyclic angular rotations of a radius-major template.

    Rotating the template by one angular bin permutes its entries within
    each radial ring, so the result does not depend on which bin the
    angular origin falls into.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or len(g) != op.J or op.J % n_theta:
        raise ValueError("template must be a vector of length J = n_rho * n_theta")
    R = patch_responses(f, op)
    G = g.reshape(-1, n_theta)
    outs = [np.tensordot(np.roll(G, s, axis=1).ravel(), R, axes=(0, 0)) for s in range(n_theta)]
    return np.max(outs, axis=0)


def covariance_pool(F):
    """Upper triangle (row-major, with diagonal) of the ``p x p`` feature covariance."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] < 2:
        raise ValueError("covariance pooling needs at least two rows")
    C = np.atleast_2d(np.cov(F, rowvar=False, ddof=1))
    return C[np.triu_indices(F.shape[1])]


# --- serialisation -----------------------------------------------------------

PATCH_SCHEMA = "geomdl.patch/1"


def save_patch_operator(op: PatchOperator, path, d=None):
    """Triplet CSV ``j,row,col,value`` plus ``<path>.json`` header."""
    path = str(path)
    rows = []
    for j, V in enumerate(op.weights):
        C = V.tocoo()
        rows.append(np.column_stack([np.full(C.nnz, j), C.row, C.col, C.data]))
    T = np.vstack(rows) if rows else np.zeros((0, 4))
    with open(path, "w") as fh:
        fh.write("j,row,col,value\n")
        for j, r, c, v in T:
            fh.write(f"{int(j)},{int(r)},{int(c)},{float(v)!r}\n")
    header = {
        "schema": PATCH_SCHEMA,
        "scheme": op.scheme,
        "params": op.params,
        "J": op.J,
        "d": d,
        "n": op.n,
        "normalized": op.normalized,
        "metric": op.metric.tolist(),
    }
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)


def load_patch_operator(path) -> PatchOperator:
    path = str(path)
    with open(path + ".json") as fh:
        header = json.load(fh)
    if header.get("schema") != PATCH_SCHEMA:
        raise ValueError(f"unsupported patch schema {header.get('schema')!r}")
    T = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = header["n"]
    weights = []
    for j in range(header["J"]):
        sel = T[:, 0] == j
        weights.append(sp.csr_matrix((T[sel, 3], (T[sel, 1].astype(int), T[sel, 2].astype(int))), shape=(n, n)))
    return PatchOperator(tuple(weights), np.array(header["metric"]), header["scheme"], header["params"], header["normalized"])
