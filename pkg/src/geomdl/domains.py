"""Input domains: built-in generators, edge-list files and OFF meshes.

Domain strings
--------------
``icosphere:N``        sphere mesh after ``N`` subdivisions
``grid:NXxNY``         planar grid mesh; options ``,jitter=0.2,seed=1,spacing=1``
``path:N``             path graph with unit weights
``*.off``              triangle mesh (0-based faces)
anything else          edge-list TSV: ``i<TAB>j[<TAB>w]`` with 1-based ids,
                       ``#`` comments, optional ``<file>.vw`` vertex weights
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from geomdl.graph import Graph, GraphError, build_graph
from geomdl.mesh import TriMesh, cotan_laplacian, grid_mesh, icosphere, load_off


class DomainError(ValueError):
    """Unreadable or malformed domain specification."""


@dataclass(frozen=True, eq=False)
class Domain:
    name: str
    graph: Graph
    mesh: TriMesh | None = None
    source: str | None = None  # path of the input file, if any

    @property
    def n(self) -> int:
        return self.graph.n


def read_edge_list(path) -> Graph:
    """Parse a 1-based edge list; vertex weights come from ``<path>.vw`` if present.

    The vertex count is the largest id seen, or the number of lines in the
    ``.vw`` file when that is larger.  Repeated edges must agree in weight.
    """
    edges = []
    n = 0
    try:
        fh = open(path)
    except OSError as exc:
        raise DomainError(f"cannot open edge list {path!r}: {exc.strerror}") from None
    with fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) not in (2, 3):
                raise DomainError(f"{path}:{ln}: expected 'i j [w]'")
            try:
                i, j = int(tok[0]), int(tok[1])
                w = float(tok[2]) if len(tok) == 3 else 1.0
            except ValueError:
                raise DomainError(f"{path}:{ln}: non-numeric field") from None
            if i < 1 or j < 1:
                raise DomainError(f"{path}:{ln}: vertex ids are 1-based")
            edges.append((i - 1, j - 1, w))
            n = max(n, i, j)
    a = None
    vw = str(path) + ".vw"
    if os.path.exists(vw):
        a = np.loadtxt(vw, ndmin=1, comments="#")
        if len(a) < n:
            raise DomainError(f"{vw}: {len(a)} vertex weights for {n} vertices")
        n = len(a)
    if n == 0:
        raise DomainError(f"{path}: empty edge list")
    try:
        return build_graph(n, a, edges)
    except GraphError as exc:
        raise DomainError(f"{path}: {exc}") from None


def write_edge_list(graph: Graph, path, weights_sidecar=True):
    with open(path, "w") as fh:
        for (i, j), w in zip(graph.edge_index, graph.edge_weights):
            fh.write(f"{i + 1}\t{j + 1}\t{float(w)!r}\n")
    if weights_sidecar:
        with open(str(path) + ".vw", "w") as fh:
            for a in graph.vertex_weights:
                fh.write(f"{float(a)!r}\n")


def _options(parts):
    opts = {}
    for p in parts:
        if "=" not in p:
            raise DomainError(f"bad domain option {p!r}; expected key=value")
        k, v = p.split("=", 1)
        opts[k.strip()] = v.strip()
    return opts


def _mesh_domain(name, mesh, source=None):
    return Domain(name, cotan_laplacian(mesh), mesh, source)


def load_domain(spec) -> Domain:
    """Resolve a domain string (see module docstring)."""
    spec = str(spec)
    head, *rest = spec.split(",")
    kind, _, arg = head.partition(":")
    try:
        if kind == "icosphere" and arg:
            return _mesh_domain(spec, icosphere(int(arg)))
        if kind == "grid" and arg:
            nx, ny = (int(v) for v in arg.lower().split("x"))
            o = _options(rest)
            mesh = grid_mesh(nx, ny, float(o.get("spacing", 1.0)), float(o.get("jitter", 0.0)), int(o.get("seed", 0)))
            return _mesh_domain(spec, mesh)
        if kind == "path" and arg:
            n = int(arg)
            if n < 1:
                raise DomainError("path needs at least one vertex")
            return Domain(spec, build_graph(n, None, [(i, i + 1, 1.0) for i in range(n - 1)]))
    except ValueError as exc:
        if isinstance(exc, DomainError):
            raise
        raise DomainError(f"bad built-in domain {spec!r}: {exc}") from None
    if not os.path.exists(spec):
        raise DomainError(f"no such domain file or built-in: {spec!r}")
    if spec.lower().endswith(".off"):
        try:
            return _mesh_domain(spec, load_off(spec), spec)
        except ValueError as exc:
            raise DomainError(f"{spec}: {exc}") from None
    return Domain(spec, read_edge_list(spec), None, spec)
