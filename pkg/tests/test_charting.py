import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_graph
from geomdl.charting import (
    MoNetKernelParams,
    angular_max_convolve,
    anisotropic_patch_weights,
    covariance_pool,
    gaussian_kernel_values,
    geodesic_patch_weights,
    geodesic_polar_coords,
    graph_pseudo_coords,
    heat_patch_weights,
    intrinsic_convolve,
    load_patch_operator,
    mean_aggregation_matrix,
    monet_weights,
    patch_apply,
    patch_responses,
    save_patch_operator,
    wrapped_angle,
)
from geomdl.mesh import MeshError, TriMesh, grid_mesh, icosphere


def rotation(rng):
    Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
    Q = Q * np.sign(np.diag(R))
    return Q if np.linalg.det(Q) > 0 else -Q


class TestGeodesicCoords:
    def test_axis_aligned_neighbors(self):
        m = grid_mesh(5, 5)
        c = 12
        nb, u = geodesic_polar_coords(m, 1.0, centers=[c]).of(c)
        lookup = dict(zip(nb.tolist(), map(tuple, u)))
        assert_allclose(lookup[c], (0.0, 0.0))
        assert_allclose(lookup[13], (1.0, 0.0), atol=1e-14)
        assert_allclose(lookup[17], (1.0, np.pi / 2), atol=1e-14)
        assert_allclose(lookup[11], (1.0, np.pi), atol=1e-14)
        assert_allclose(lookup[7], (1.0, 3 * np.pi / 2), atol=1e-14)

    def test_small_radius_only_center(self):
        m = grid_mesh(4, 4)
        nb, _ = geodesic_polar_coords(m, 0.5, centers=[5]).of(5)
        assert_array_equal(nb, [5])

    def test_rigid_motion_with_reference(self, rng):
        m = grid_mesh(6, 6, jitter=0.2, seed=3)
        R = rotation(rng)
        a = geodesic_polar_coords(m, 2.1)
        b = geodesic_polar_coords(m.transformed(R, [1.0, 2.0, 3.0]), 2.1, reference=np.eye(3) @ R.T)
        assert_array_equal(a.neighbors, b.neighbors)
        assert_allclose(a.coords[:, 0], b.coords[:, 0], atol=1e-12)
        assert_allclose(wrapped_angle(a.coords[:, 1], b.coords[:, 1]), 0.0, atol=1e-9)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            geodesic_polar_coords(grid_mesh(3, 3), 0.0)


class TestWeights:
    def test_bin_center_is_one(self):
        m = grid_mesh(5, 5)
        coords = geodesic_polar_coords(m, 1.0, centers=[12])
        op = geodesic_patch_weights(coords, [1.0], [0.0], 0.3, 0.3, normalize=False)
        assert_allclose(op.weights[0][12, 13], 1.0, rtol=1e-14)

    def test_wrapped_angle(self):
        eps = 0.1
        assert_allclose(wrapped_angle(2 * np.pi - eps, 0.0), -eps, atol=1e-15)
        assert wrapped_angle(np.pi, 0.0) == np.pi
        assert wrapped_angle(-np.pi, 0.0) == np.pi

    def test_wrap_in_weights(self):
        # neighbor at angle 3pi/2 sits eps = pi/2 from a bin at 0 going the short way round
        m = grid_mesh(5, 5)
        coords = geodesic_polar_coords(m, 1.0, centers=[12])
        op = geodesic_patch_weights(coords, [1.0], [0.0], np.inf, 1.0, normalize=False)
        assert_allclose(op.weights[0][12, 7], np.exp(-((np.pi / 2) ** 2) / 2), rtol=1e-14)

    def test_infinite_sigma_is_mean(self, rng):
        m = grid_mesh(6, 6, jitter=0.1, seed=1)
        coords = geodesic_polar_coords(m, 1.5)
        op = geodesic_patch_weights(coords, [0.0], [0.0], np.inf, np.inf)
        f = rng.standard_normal(m.n)
        out = patch_responses(f, op)[0]
        for x in (0, 14, 35):
            nb, _ = coords.of(x)
            assert_allclose(out[x], f[nb].mean(), rtol=1e-12)
        assert_allclose(patch_responses(np.full(m.n, 2.0), op)[0], 2.0, rtol=1e-14)

    def test_measure_normalized(self):
        m = grid_mesh(5, 5, jitter=0.2)
        coords = geodesic_polar_coords(m, 1.6)
        op = geodesic_patch_weights(coords, [0.0, 1.0], [0.0, np.pi], 0.5, 0.8, metric=m.vertex_areas)
        for V in op.weights:
            s = V @ m.vertex_areas
            assert_allclose(s[s > 0], 1.0, rtol=1e-12)

    def test_negative_sigma(self):
        coords = geodesic_polar_coords(grid_mesh(3, 3), 1.0)
        with pytest.raises(ValueError):
            geodesic_patch_weights(coords, [0.0], None, sigma_rho=-1.0)


class TestHeatPatches:
    def test_isotropic_limit(self):
        m = grid_mesh(6, 6, jitter=0.15, seed=2)
        iso = heat_patch_weights(m, [0.5])
        ani = anisotropic_patch_weights(m, 1.0, [0.0, 1.1, 2.3], [0.5])
        for V in ani.weights:
            assert_allclose(V.toarray(), iso.weights[0].toarray(), atol=1e-8)

    def test_small_time_is_delta(self):
        m = grid_mesh(5, 5, jitter=0.2, seed=0)
        op = heat_patch_weights(m, [1e-9], normalize=True)
        D = op.matrices()[0].toarray()
        assert_allclose(D, np.eye(m.n), atol=1e-6)

    def test_orthogonal_elongation(self):
        m = grid_mesh(15, 15)
        c = 7 * 15 + 7
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            op = anisotropic_patch_weights(m, 4.0, [0.0, np.pi / 2], [2.0])
        d = m.vertices[:, :2] - m.vertices[c, :2]
        axes = []
        for V in op.weights:
            h = V.toarray()[c]
            M = (d * h[:, None]).T @ d
            w, U = np.linalg.eigh(M)
            assert w[1] / w[0] > 1.5
            axes.append(U[:, 1])
        # the diagonal split of each quad tilts the axes by ~2e-4 rad
        assert abs(axes[0] @ axes[1]) < 1e-3
        assert abs(axes[0][0]) > 1 - 1e-6

    def test_negative_values_warn(self):
        V = np.array([[0, 0, 0], [4, 0, 0], [2, 0.3, 0], [2, -0.3, 0], [2, 3, 0]])
        m = TriMesh(V, np.array([[0, 1, 2], [0, 3, 1], [0, 2, 4], [2, 1, 4]]))
        with pytest.warns(UserWarning, match="negative"):
            op = heat_patch_weights(m, [0.05])
        assert op.weights[0].min() >= 0


class TestMoNet:
    def test_values(self):
        p = MoNetKernelParams.from_covariances(np.array([[1.0, 2.0]]), np.eye(2)[None])
        assert_allclose(gaussian_kernel_values([[1.0, 2.0]], p), [[1.0]])
        assert_allclose(gaussian_kernel_values([[2.0, 3.0]], p), [[np.exp(-1.0)]], rtol=1e-15)

    def test_separable(self, rng):
        s1, s2 = 0.7, 1.9
        mu = np.array([[0.3, -0.4]])
        p = MoNetKernelParams.from_covariances(mu, np.diag([s1**2, s2**2])[None])
        U = rng.standard_normal((20, 2))
        expected = np.exp(-((U[:, 0] - 0.3) ** 2) / (2 * s1**2)) * np.exp(-((U[:, 1] + 0.4) ** 2) / (2 * s2**2))
        assert_allclose(gaussian_kernel_values(U, p)[:, 0], expected, rtol=1e-12, atol=1e-12)

    def test_invalid_factor(self):
        with pytest.raises(ValueError):
            MoNetKernelParams(np.zeros((1, 2)), np.array([[[1.0, 1.0], [0.0, 1.0]]]))
        with pytest.raises(ValueError):
            MoNetKernelParams.from_covariances(np.zeros((1, 2)), -np.eye(2)[None])

    def test_wide_kernel_is_graph_mean(self, rng):
        g = random_graph(rng, 15)
        coords = graph_pseudo_coords(g)
        p = MoNetKernelParams(np.zeros((1, 2)), 1e6 * np.eye(2)[None])
        op = monet_weights(coords, p, normalize=True)
        f = rng.standard_normal(15)
        A = g.weights.toarray() > 0
        np.fill_diagonal(A, True)
        assert_allclose(patch_responses(f, op)[0], (A @ f) / A.sum(1), atol=1e-8)
        M = mean_aggregation_matrix(coords)
        assert_allclose(M @ f[coords.neighbors], (A @ f) / A.sum(1), atol=1e-12)

    def test_degree_coords(self, g3):
        coords = graph_pseudo_coords(g3)
        nb, u = coords.of(1)
        assert_array_equal(nb, [0, 1, 2])
        assert_allclose(u, [[3**-0.5, 2**-0.5], [3**-0.5, 3**-0.5], [3**-0.5, 2**-0.5]])

    def test_dimension_mismatch(self, g3):
        p = MoNetKernelParams(np.zeros((1, 3)), np.eye(3)[None])
        with pytest.raises(ValueError):
            monet_weights(graph_pseudo_coords(g3), p)


class TestConvolution:
    @pytest.fixture
    def op(self):
        m = grid_mesh(6, 5, jitter=0.2, seed=7)
        coords = geodesic_polar_coords(m, 2.0)
        return geodesic_patch_weights(coords, [0.5, 1.5], np.linspace(0, 2 * np.pi, 4, endpoint=False), 0.5, 0.7,
                                      metric=m.vertex_areas)

    def test_indicator_template(self, op, rng):
        f = rng.standard_normal(op.n)
        R = patch_responses(f, op)
        assert_allclose(intrinsic_convolve(f, op, np.eye(op.J)[3]), R[3], atol=1e-15)

    def test_dense_oracle(self, op, rng):
        f = rng.standard_normal(op.n)
        g = rng.standard_normal(op.J)
        A = np.diag(op.metric)
        dense = sum(g[j] * op.weights[j].toarray() @ A @ f for j in range(op.J))
        assert_allclose(intrinsic_convolve(f, op, g), dense, atol=1e-10)
        assert_allclose(patch_apply(f, op, 4), patch_responses(f, op)[:, 4], atol=1e-14)

    def test_multichannel(self, op, rng):
        F = rng.standard_normal((op.n, 2))
        g = rng.standard_normal((op.J, 2, 3))
        out = intrinsic_convolve(F, op, g)
        ref = intrinsic_convolve(F[:, 0], op, g[:, 0, 1]) + intrinsic_convolve(F[:, 1], op, g[:, 1, 1])
        assert_allclose(out[:, 1], ref, atol=1e-12)

    def test_angular_max_rotation_invariant(self, op, rng):
        f = rng.standard_normal(op.n)
        g = rng.standard_normal(op.J)
        rolled = np.roll(g.reshape(2, 4), 1, axis=1).ravel()
        assert_allclose(angular_max_convolve(f, op, g, 4), angular_max_convolve(f, op, rolled, 4), atol=1e-14)

    def test_wrong_template_length(self, op):
        with pytest.raises(ValueError):
            intrinsic_convolve(np.ones(op.n), op, np.ones(op.J + 1))

    def test_io_roundtrip(self, op, tmp_path):
        save_patch_operator(op, tmp_path / "patch.csv")
        back = load_patch_operator(tmp_path / "patch.csv")
        assert back.J == op.J and back.scheme == op.scheme
        for a, b in zip(op.weights, back.weights):
            assert (a != b).nnz == 0
        assert_array_equal(back.metric, op.metric)


class TestCovariancePool:
    def test_identical_rows(self):
        assert_allclose(covariance_pool(np.tile([1.0, 2.0, 3.0], (5, 1))), 0.0)

    def test_two_rows(self):
        assert_allclose(covariance_pool(np.array([[0.0], [2.0]])), [2.0])

    @given(st.integers(0, 2**31 - 1))
    def test_row_permutation(self, seed):
        rng = np.random.default_rng(seed)
        F = rng.standard_normal((9, 3))
        assert_array_equal(covariance_pool(F[rng.permutation(9)]).round(12), covariance_pool(F).round(12))

    def test_single_row(self):
        with pytest.raises(ValueError):
            covariance_pool(np.ones((1, 2)))


def test_collinear_neighbourhood_rejected():
    V = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1e-14, 0]])
    with pytest.raises(MeshError):
        m = TriMesh(V, np.array([[0, 1, 3], [1, 2, 3]]))
        geodesic_polar_coords(m, 0.5, centers=[0])
