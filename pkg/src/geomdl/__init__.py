"""Geometric deep learning toolkit: graph and mesh calculus, spectral
analysis, learnable filters, charting and a small training engine."""
from geomdl._backend import BACKEND
from geomdl.graph import (
    CoarseningMap,
    Graph,
    GraphError,
    apply_laplacian,
    build_graph,
    coarsen,
    dirichlet_energy,
    divergence,
    gradient,
    graph_from_adjacency,
    graph_from_arrays,
    inner_product_edges,
    inner_product_vertices,
    laplacian_matrix,
    pool,
    unpool,
)
from geomdl.mesh import MeshError, TriMesh, cotan_laplacian, grid_mesh, icosphere, load_off
from geomdl.spectral import (
    Eigenbasis,
    diffusion_distance,
    eigendecompose,
    fourier_analysis,
    fourier_synthesis,
    heat_kernel,
    spectral_convolve,
    wft,
)

__version__ = "0.1.0"
