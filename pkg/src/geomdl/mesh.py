"""Triangle meshes, cotangent Laplacians and point-cloud graphs."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from geomdl._backend import kernels
from geomdl.graph import Graph, graph_from_arrays


class MeshError(ValueError):
    """Malformed or non-manifold mesh."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Validated manifold triangle mesh.

    ``faces[f]`` lists corners ``(v0, v1, v2)``; the edge opposite corner
    ``c`` is ``(v_{c+1}, v_{c+2})``.  Derived arrays are computed once.
    """

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray = field(init=False)
    face_edges: np.ndarray = field(init=False)
    edge_face_count: np.ndarray = field(init=False)
    face_lengths: np.ndarray = field(init=False)
    face_areas: np.ndarray = field(init=False)

    def __post_init__(self):
        V = np.ascontiguousarray(self.vertices, dtype=np.float64)
        F = np.ascontiguousarray(self.faces, dtype=np.int64)
        if V.ndim != 2 or V.shape[1] != 3:
            raise MeshError("vertices must be an (n, 3) array")
        if F.ndim != 2 or F.shape[1] != 3:
            raise MeshError("faces must be an (m, 3) array of triangles")
        n = len(V)
        if F.size and (F.min() < 0 or F.max() >= n):
            raise MeshError("face index out of range")
        if np.any((F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])):
            raise MeshError("face with repeated vertex")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)

        # half-edges opposite each corner: (v1, v2), (v2, v0), (v0, v1)
        tails = F[:, [1, 2, 0]]
        heads = F[:, [2, 0, 1]]
        directed = tails.ravel() * n + heads.ravel()
        if len(np.unique(directed)) != len(directed):
            _, counts = np.unique(directed, return_counts=True)
            raise MeshError(
                "inconsistent face orientation or non-manifold edge "
                f"({int((counts > 1).sum())} half-edges repeated)"
            )
        lo = np.minimum(tails, heads).ravel()
        hi = np.maximum(tails, heads).ravel()
        keys, inverse, counts = np.unique(lo * n + hi, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise MeshError(f"non-manifold mesh: {int((counts > 2).sum())} edges shared by more than two faces")
        edges = np.stack([keys // n, keys % n], axis=1)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "face_edges", inverse.reshape(-1, 3))
        object.__setattr__(self, "edge_face_count", counts)

        lengths = np.linalg.norm(V[tails] - V[heads], axis=2)
        if np.any(lengths <= 0):
            raise MeshError("degenerate mesh: zero-length edge")
        areas, _, bad = kernels.cotan_face_terms(lengths)
        if bad != -1:
            raise MeshError(f"face {bad} violates the triangle inequality (degenerate triangle)")
        object.__setattr__(self, "face_lengths", lengths)
        object.__setattr__(self, "face_areas", areas)

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def edge_lengths(self) -> np.ndarray:
        out = np.empty(len(self.edges))
        out[self.face_edges.ravel()] = self.face_lengths.ravel()
        return out

    @property
    def boundary_edges(self) -> np.ndarray:
        return self.edges[self.edge_face_count == 1]

    @property
    def vertex_areas(self) -> np.ndarray:
        """One third of the incident face areas."""
        a = np.zeros(self.n)
        for c in range(3):
            np.add.at(a, self.faces[:, c], self.face_areas / 3.0)
        return a

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    def is_closed(self) -> bool:
        return bool(np.all(self.edge_face_count == 2))

    def face_normals(self, unit=True):
        V, F = self.vertices, self.faces
        N = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
        if unit:
            N = N / np.linalg.norm(N, axis=1, keepdims=True)
        return N

    def vertex_normals(self):
        N = self.face_normals(unit=False)
        out = np.zeros((self.n, 3))
        for c in range(3):
            np.add.at(out, self.faces[:, c], N)
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.where(norm > 0, norm, 1.0)

    def adjacency(self) -> sp.csr_matrix:
        """Unweighted symmetric vertex adjacency of the edge graph."""
        i, j = self.edges.T
        A = sp.coo_matrix((np.ones(2 * len(i)), (np.r_[i, j], np.r_[j, i])), shape=(self.n, self.n))
        return A.tocsr()

    def length_graph(self) -> sp.csr_matrix:
        """Symmetric sparse matrix of edge lengths (for Dijkstra)."""
        i, j = self.edges.T
        l = self.edge_lengths
        return sp.coo_matrix((np.r_[l, l], (np.r_[i, j], np.r_[j, i])), shape=(self.n, self.n)).tocsr()

    def transformed(self, R=None, t=None) -> "TriMesh":
        V = self.vertices
        if R is not None:
            V = V @ np.asarray(R).T
        if t is not None:
            V = V + np.asarray(t)
        return TriMesh(V, self.faces)

    def permuted(self, perm) -> "TriMesh":
        """Relabel vertices so that new vertex ``k`` is old vertex ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return TriMesh(self.vertices[perm], inv[self.faces])


# --- OFF I/O ---------------------------------------------------------------


def _off_tokens(text):
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line


def parse_off(text) -> TriMesh:
    lines = list(_off_tokens(text))
    if not lines or not lines[0].startswith("OFF"):
        raise MeshError("missing OFF header")
    head = lines[0][3:].split()
    rest = lines[1:]
    if not head:
        if not rest:
            raise MeshError("missing OFF counts line")
        head, rest = rest[0].split(), rest[1:]
    try:
        nv, nf = int(head[0]), int(head[1])
    except (IndexError, ValueError) as exc:
        raise MeshError(f"bad OFF counts line: {' '.join(head)!r}") from exc
    if len(rest) < nv + nf:
        raise MeshError(f"OFF file truncated: expected {nv} vertices and {nf} faces")
    try:
        V = np.array([[float(x) for x in rest[k].split()[:3]] for k in range(nv)])
        faces = []
        for k in range(nv, nv + nf):
            toks = [int(x) for x in rest[k].split()]
            if toks[0] != 3 or len(toks) < 4:
                raise MeshError(f"only triangular faces are supported (line: {rest[k]!r})")
            faces.append(toks[1:4])
    except ValueError as exc:
        raise MeshError(f"OFF parse error: {exc}") from exc
    if V.shape != (nv, 3):
        raise MeshError("vertex lines need three coordinates")
    return TriMesh(V, np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_off(path) -> TriMesh:
    with open(path) as fh:
        return parse_off(fh.read())


def save_off(mesh: TriMesh, path):
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n} {len(mesh.faces)} {len(mesh.edges)}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(x)) for x in v) + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# --- metric quantities -----------------------------------------------------


def heron_area(l_ij, l_jk, l_ik) -> float:
    """Triangle area from its three side lengths."""
    a, b, c = float(l_ij), float(l_jk), float(l_ik)
    if min(a, b, c) <= 0 or a + b <= c or b + c <= a or a + c <= b:
        raise MeshError(f"lengths ({a}, {b}, {c}) violate the strict triangle inequality")
    s = 0.5 * (a + b + c)
    return float(np.sqrt(s * (s - a) * (s - b) * (s - c)))


def metric_cotan_weights(mesh: TriMesh) -> np.ndarray:
    """Per-edge weights from edge lengths alone, aligned with ``mesh.edges``."""
    _, terms, _ = kernels.cotan_face_terms(mesh.face_lengths)
    w = np.zeros(len(mesh.edges))
    np.add.at(w, mesh.face_edges.ravel(), terms.ravel())
    return w


def angle_cotan_weights(mesh: TriMesh) -> np.ndarray:
    """``(cot alpha + cot beta) / 2`` from the embedding, aligned with ``mesh.edges``."""
    V, F = mesh.vertices, mesh.faces
    w = np.zeros(len(mesh.edges))
    for c in range(3):
        apex = V[F[:, c]]
        u = V[F[:, (c + 1) % 3]] - apex
        v = V[F[:, (c + 2) % 3]] - apex
        cot = np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        np.add.at(w, mesh.face_edges[:, c], 0.5 * cot)
    return w


def cotan_laplacian(mesh: TriMesh, clamp_negative=False, return_report=False):
    """Cotangent-weight graph with barycentric vertex areas.

    Negative weights (obtuse configurations) are kept unless
    ``clamp_negative``; either way they are counted in the report.
    """
    w = metric_cotan_weights(mesh)
    report = {
        "negative_weight_edges": int(np.sum(w < 0)),
        "boundary_edges": int(np.sum(mesh.edge_face_count == 1)),
        "total_area": mesh.total_area,
    }
    if clamp_negative:
        w = np.maximum(w, 0.0)
    i, j = mesh.edges.T
    g = graph_from_arrays(mesh.n, mesh.vertex_areas, i, j, w)
    return (g, report) if return_report else g


def cotan_report(mesh: TriMesh) -> dict:
    return cotan_laplacian(mesh, return_report=True)[1]


# --- point clouds ----------------------------------------------------------


def gaussian_graph_from_pointcloud(points, sigma, connectivity="full", k=None, r=None) -> Graph:
    """Graph with weights ``exp(-|x_i - x_j|^2 / 2 sigma^2)``.

    ``connectivity`` is ``"full"``, ``"knn"`` (``k`` nearest neighbours, an
    edge is kept if either endpoint selects it; ties go to the lower index)
    or ``"radius"`` (all pairs within distance ``r``).
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    D2 = cdist(X, X, "sqeuclidean")
    if connectivity == "full":
        mask = ~np.eye(n, dtype=bool)
    elif connectivity == "knn":
        if k is None or k < 1 or k >= n:
            raise ValueError(f"knn needs 1 <= k < n (k={k}, n={n})")
        D = D2.copy()
        np.fill_diagonal(D, np.inf)
        nbr = np.argsort(D, axis=1, kind="stable")[:, :k]
        mask = np.zeros((n, n), dtype=bool)
        mask[np.repeat(np.arange(n), k), nbr.ravel()] = True
        mask |= mask.T
    elif connectivity == "radius":
        if r is None or r <= 0:
            raise ValueError("radius connectivity needs r > 0")
        mask = D2 <= r * r
        np.fill_diagonal(mask, False)
    else:
        raise ValueError(f"unknown connectivity {connectivity!r}")
    i, j = np.nonzero(np.triu(mask, 1))
    w = np.exp(-D2[i, j] / (2.0 * sigma**2))
    return graph_from_arrays(n, None, i, j, w)


# --- anisotropic Laplacian -------------------------------------------------


@dataclass(frozen=True)
class ConductivityField:
    """Anisotropy ``alpha`` and angle ``theta`` (radians), scalar or per vertex.

    The conductivity tensor is ``R_theta diag(alpha, 1) R_theta^T`` in a frame
    whose first axis is the reference direction.
    """

    alpha: float | np.ndarray = 1.0
    theta: float | np.ndarray = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.alpha) <= 0):
            raise ValueError("anisotropy alpha must be positive")

    def tensors(self, n):
        alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (n,))
        theta = np.broadcast_to(np.asarray(self.theta, dtype=np.float64), (n,))
        c, s = np.cos(theta), np.sin(theta)
        R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        Dg = np.zeros((n, 2, 2))
        Dg[:, 0, 0] = alpha
        Dg[:, 1, 1] = 1.0
        return R @ Dg @ np.transpose(R, (0, 2, 1))


def principal_curvature_directions(mesh: TriMesh) -> np.ndarray:
    """Per-vertex unit direction of maximal absolute normal curvature.

    Fits ``z = a x^2 + b x y + c y^2`` over the 2-ring in the vertex's
    tangent frame.
    """
    N = mesh.vertex_normals()
    A = mesh.adjacency()
    A2 = (A @ A + A).tocsr()
    V = mesh.vertices
    out = np.zeros((mesh.n, 3))
    for v in range(mesh.n):
        nb = A2.indices[A2.indptr[v] : A2.indptr[v + 1]]
        nb = nb[nb != v]
        nrm = N[v]
        t1 = np.cross(nrm, [1.0, 0.0, 0.0])
        if np.linalg.norm(t1) < 1e-6:
            t1 = np.cross(nrm, [0.0, 1.0, 0.0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(nrm, t1)
        d = V[nb] - V[v]
        x, y, z = d @ t1, d @ t2, d @ nrm
        M = np.stack([x * x, x * y, y * y], 1)
        coef, *_ = np.linalg.lstsq(M, z, rcond=None)
        S = np.array([[2 * coef[0], coef[1]], [coef[1], 2 * coef[2]]])
        evals, evecs = np.linalg.eigh(S)
        e = evecs[:, np.argmax(np.abs(evals))]
        out[v] = e[0] * t1 + e[1] * t2
    return out


def _face_frames(mesh, ref_dirs):
    """Orthonormal per-face frames whose first axis is the projected reference."""
    n = mesh.face_normals()
    proj = ref_dirs - np.einsum("ij,ij->i", ref_dirs, n)[:, None] * n
    norm = np.linalg.norm(proj, axis=1)
    V, F = mesh.vertices, mesh.faces
    degenerate = norm < 1e-9
    if degenerate.any():
        edge = V[F[:, 1]] - V[F[:, 0]]
        proj[degenerate] = edge[degenerate]
        norm[degenerate] = np.linalg.norm(edge[degenerate], axis=1)
        warnings.warn(
            f"reference direction parallel to {int(degenerate.sum())} face normals; "
            "falling back to the first face edge there",
            stacklevel=3,
        )
    e1 = proj / norm[:, None]
    e2 = np.cross(n, e1)
    return e1, e2, int(degenerate.sum())


def anisotropic_stiffness_terms(mesh: TriMesh, field: ConductivityField, axis=(1.0, 0.0, 0.0), use_curvature=False):
    """Per-face, per-edge weights ``-area * grad(phi_i)^T A grad(phi_j)``.

    Returned with the same layout as the cotangent face terms (edge opposite
    each corner).
    """
    V, F = mesh.vertices, mesh.faces
    if use_curvature:
        dirs = principal_curvature_directions(mesh)
        ref = np.zeros((len(F), 3))
        for c in range(3):
            d = dirs[F[:, c]]
            sign = np.sign(np.einsum("ij,ij->i", d, dirs[F[:, 0]]))
            ref += d * np.where(sign == 0, 1.0, sign)[:, None]
    else:
        ref = np.broadcast_to(np.asarray(axis, dtype=np.float64), (len(F), 3))
    e1, e2, _ = _face_frames(mesh, ref)
    vt = field.tensors(mesh.n)
    M = vt[F].mean(axis=1)  # (m, 2, 2) per-face tensor in the (e1, e2) frame

    P = V[F] - V[F[:, :1]]  # corner offsets from v0
    q = np.stack([np.einsum("fcj,fj->fc", P, e1), np.einsum("fcj,fj->fc", P, e2)], -1)
    E = np.stack([q[:, 1], q[:, 2]], -1)  # columns are edge vectors, (m, 2, 2)
    Einv = np.linalg.inv(E)  # rows: gradients of barycentric coords 1, 2
    G = np.empty((len(F), 3, 2))
    G[:, 1] = Einv[:, 0]
    G[:, 2] = Einv[:, 1]
    G[:, 0] = -G[:, 1] - G[:, 2]
    K = mesh.face_areas[:, None, None] * np.einsum("fia,fab,fjb->fij", G, M, G)
    # edge opposite corner c joins corners c+1 and c+2
    return np.stack([-K[:, 1, 2], -K[:, 2, 0], -K[:, 0, 1]], axis=1)


def anisotropic_cotan_laplacian(mesh: TriMesh, field: ConductivityField, axis=(1.0, 0.0, 0.0), use_curvature=False) -> Graph:
    """FEM discretisation of ``-div(A grad f)`` as a graph with vertex areas.

    Edge weights may be negative for strong anisotropy; with ``alpha = 1``
    they coincide with :func:`cotan_laplacian`.
    """
    terms = anisotropic_stiffness_terms(mesh, field, axis=axis, use_curvature=use_curvature)
    w = np.zeros(len(mesh.edges))
    np.add.at(w, mesh.face_edges.ravel(), terms.ravel())
    i, j = mesh.edges.T
    return graph_from_arrays(mesh.n, mesh.vertex_areas, i, j, w)


# --- generators ------------------------------------------------------------


def icosphere(subdivisions=3, radius=1.0) -> TriMesh:
    """Subdivided icosahedron projected onto the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    V = [
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ]
    F = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    V = [np.array(v, dtype=float) / np.linalg.norm(v) for v in V]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = V[a] + V[b]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        F = [
            f
            for a, b, c in F
            for f in ([a, mid(a, b), mid(c, a)], [b, mid(b, c), mid(a, b)], [c, mid(c, a), mid(b, c)],
                      [mid(a, b), mid(b, c), mid(c, a)])
        ]
    return TriMesh(radius * np.array(V), np.array(F))


def grid_mesh(nx, ny, spacing=1.0, jitter=0.0, seed=0) -> TriMesh:
    """Planar ``nx`` x ``ny`` vertex grid in the xy-plane, quads split on one diagonal.

    ``jitter`` displaces interior vertices in-plane by up to that fraction of
    the spacing.
    """
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="xy")
    V = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], 1)
    if jitter:
        rng = np.random.default_rng(seed)
        interior = np.zeros((ny, nx), dtype=bool)
        interior[1:-1, 1:-1] = True
        interior = interior.ravel()
        V[interior, :2] += rng.uniform(-jitter, jitter, (interior.sum(), 2)) * spacing
    return TriMesh(V, _grid_faces(nx, ny))


def _grid_faces(nx, ny):
    F = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            b, d, e = a + 1, a + nx, a + nx + 1
            F.append([a, b, e])
            F.append([a, e, d])
    return np.array(F, dtype=np.int64)


def strip_mesh(nx, ny, spacing=1.0, turn_angles=None) -> TriMesh:
    """Grid strip folded along its vertical grid lines.

    Column ``c`` sits at point ``P_c`` of a polyline in the xz-plane with unit
    steps of ``spacing``; ``turn_angles[c]`` is the bend at column ``c + 1``.
    Every quad stays planar, so all edge lengths equal those of the flat strip.
    """
    turns = np.zeros(nx - 1) if turn_angles is None else np.asarray(turn_angles, dtype=float)
    if len(turns) != nx - 1:
        raise ValueError("need one turn angle per column step")
    heading = np.cumsum(np.r_[0.0, turns[:-1]]) if nx > 1 else np.zeros(0)
    steps = spacing * np.stack([np.cos(heading), np.sin(heading)], 1)
    P = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    V = np.array([[P[c, 0], r * spacing, P[c, 1]] for r in range(ny) for c in range(nx)])
    return TriMesh(V, _grid_faces(nx, ny))


def tetrahedron() -> TriMesh:
    V = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    F = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(V, F)
