import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_graph
from geomdl.graph import (
    GraphError,
    apply_laplacian,
    build_graph,
    coarsen,
    dirichlet_energy,
    divergence,
    gradient,
    graph_from_adjacency,
    inner_product_edges,
    inner_product_vertices,
    khop_mask,
    laplacian_matrix,
    pool,
    unpool,
)


class TestConstruction:
    def test_path_degrees(self, g2, g3):
        assert_array_equal(g2.degrees, [1, 1])
        assert_array_equal(g3.degrees, [1, 2, 1])
        assert g3.num_edges == 2

    def test_rejects_bad_input(self):
        with pytest.raises(GraphError):
            build_graph(2, [1.0, 0.0], [(0, 1, 1.0)])
        with pytest.raises(GraphError):
            build_graph(2, None, [(0, 1, -1.0)])
        with pytest.raises(GraphError):
            build_graph(2, None, [(0, 2, 1.0)])
        with pytest.raises(GraphError):
            graph_from_adjacency(np.array([[0.0, 1.0], [2.0, 0.0]]))

    def test_edge_index_sorted_upper(self, rng):
        g = random_graph(rng, 12)
        i, j = g.edge_index.T
        assert np.all(i < j)
        assert_allclose(g.weights[i, j].A1, g.edge_weights)

    def test_immutable(self, g2):
        with pytest.raises(ValueError):
            g2.degrees[0] = 5.0


class TestInnerProducts:
    def test_vertex_examples(self, g2):
        assert inner_product_vertices([1, 0], [1, 0], g2) == 1.0
        g = build_graph(2, [2.0, 3.0], [(0, 1, 1.0)])
        assert inner_product_vertices([1, 1], [1, 1], g) == 5.0
        assert inner_product_vertices([0, 0], [4, -1], g2) == 0.0

    def test_edge_examples(self, g2, g3):
        assert inner_product_edges([1.0], [1.0], g2) == 1.0
        assert inner_product_edges([1.0, 2.0], [1.0, 2.0], g3) == 5.0
        assert inner_product_edges([0.0, 0.0], [3.0, 1.0], g3) == 0.0


class TestOperators:
    def test_gradient_examples(self, g2, g3):
        assert_array_equal(gradient([1.0, 0.0], g2), [1.0])
        assert_array_equal(gradient([0.0, 1.0, 3.0], g3), [-1.0, -2.0])
        assert_array_equal(gradient(np.full(3, 7.0), g3), [0.0, 0.0])

    def test_divergence_examples(self, g2):
        # sign chosen so that -div is the adjoint of the gradient
        assert_allclose(divergence([1.0], g2), [-1.0, 1.0])
        assert_allclose(divergence([0.0], g2), [0.0, 0.0])
        g = build_graph(2, [2.0, 1.0], [(0, 1, 1.0)])
        assert_allclose(divergence([1.0], g), [-0.5, 1.0])

    def test_laplacian_matrices(self, g2, g3):
        assert_array_equal(laplacian_matrix(g2, "unnormalized").toarray(), [[1, -1], [-1, 1]])
        assert_array_equal(
            laplacian_matrix(g3, "unnormalized").toarray(), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]
        )
        assert_array_equal(laplacian_matrix(g2, "random_walk").toarray(), [[1, -1], [-1, 1]])

    def test_apply_examples(self, g2, g3):
        assert_allclose(apply_laplacian([1.0, 0.0], g2), [1.0, -1.0])
        assert_allclose(apply_laplacian([0.0, 1.0, 0.0], g3), [-1.0, 2.0, -1.0])
        assert_allclose(apply_laplacian(np.ones(3), g3), 0.0, atol=1e-15)

    def test_isolated_vertex_normalization_error(self):
        g = build_graph(3, None, [(0, 1, 1.0)])
        for norm in ("random_walk", "sym_normalized"):
            with pytest.raises(GraphError, match="isolated"):
                laplacian_matrix(g, norm)
        laplacian_matrix(g, "weighted")

    @pytest.mark.parametrize("norm", ["weighted", "unnormalized", "random_walk", "sym_normalized"])
    def test_matrix_free_matches_sparse(self, rng, norm):
        g = random_graph(rng, 15)
        f = rng.standard_normal((15, 3))
        assert_allclose(apply_laplacian(f, g, norm), laplacian_matrix(g, norm) @ f, atol=1e-12)

    def test_dirichlet_energy(self, rng):
        g = random_graph(rng, 10)
        f = rng.standard_normal(10)
        expected = f @ (np.diag(g.degrees) - g.weights.toarray()) @ f
        assert_allclose(dirichlet_energy(f, g), expected, rtol=1e-12)
        assert_allclose(dirichlet_energy(f, g), inner_product_vertices(f, apply_laplacian(f, g), g), rtol=1e-12)


@given(st.integers(2, 25), st.integers(0, 2**31 - 1))
def test_adjointness_property(n, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n)
    f = rng.standard_normal(n)
    F = rng.standard_normal(g.num_edges)
    lhs = inner_product_edges(F, gradient(f, g), g)
    rhs = inner_product_vertices(-divergence(F, g), f, g)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


@given(st.integers(2, 25), st.integers(0, 2**31 - 1))
def test_laplacian_psd_property(n, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, connected=False)
    f = rng.standard_normal(n)
    assert inner_product_vertices(f, apply_laplacian(f, g), g) >= -1e-12
    assert np.abs(apply_laplacian(np.full(n, 3.0), g)).max() <= 1e-12


class TestCoarsening:
    def test_two_vertices_merge(self, g2):
        coarse, cmap = coarsen(g2, 0.5)
        assert coarse.n == 1
        assert_array_equal(cmap.labels, [0, 0])

    def test_heaviest_edge_first(self):
        g = build_graph(3, None, [(0, 1, 1.0), (0, 2, 5.0)])
        coarse, cmap = coarsen(g, 0.67)
        assert cmap.count == 2
        assert cmap.labels[0] == cmap.labels[2] != cmap.labels[1]
        assert_allclose(coarse.edge_weights, [1.0])

    def test_tie_lowest_index(self, g3):
        _, cmap = coarsen(g3, 0.67)
        assert cmap.labels[0] == cmap.labels[1] != cmap.labels[2]

    def test_no_edges_singletons(self):
        g = build_graph(4, None, [])
        coarse, cmap = coarsen(g, 0.5)
        assert coarse.n == 4
        assert_array_equal(cmap.labels, np.arange(4))

    def test_bad_ratio(self, g3):
        with pytest.raises(GraphError):
            coarsen(g3, 1.0)
        with pytest.raises(GraphError):
            coarsen(g3, 0.1)

    def test_weight_and_measure_conserved(self, rng):
        g = random_graph(rng, 30)
        coarse, cmap = coarsen(g, 0.25)
        assert coarse.n <= 7
        assert_allclose(coarse.vertex_weights.sum(), g.vertex_weights.sum())
        cross = cmap.labels[g.edge_index[:, 0]] != cmap.labels[g.edge_index[:, 1]]
        assert_allclose(coarse.edge_weights.sum(), g.edge_weights[cross].sum())

    def test_pool_reducers(self):
        g = build_graph(2, None, [(0, 1, 1.0)])
        _, cmap = coarsen(g, 0.5)
        f = np.array([1.0, 3.0])
        assert pool(f, cmap, "max")[0] == 3.0
        assert pool(f, cmap, "mean")[0] == 2.0
        assert pool(f, cmap, "sum")[0] == 4.0
        assert_array_equal(unpool(pool(f, cmap, "mean"), cmap), [2.0, 2.0])


def test_khop_mask(g3):
    assert_array_equal(khop_mask(g3, 0, 0), [True, False, False])
    assert_array_equal(khop_mask(g3, 0, 1), [True, True, False])
    assert_array_equal(khop_mask(g3, 0, 2), [True, True, True])
