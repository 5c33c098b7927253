"""Acceptance suite: one test per headline criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
PASS/FAIL line per criterion.  The citation-network criteria need the CORA
files in ``$GEOMDL_CORA_DIR`` (or ``data/cora`` in the repository) and fail
with an explanatory message when they are absent.
"""
import os
import time
import warnings

import numpy as np
import pytest

from conftest import random_graph
from geomdl.charting import (
    geodesic_patch_weights,
    geodesic_polar_coords,
    heat_patch_weights,
    patch_responses,
)
from geomdl.cli import basis_demo
from geomdl.filters import cheb_eval, cheb_filter_apply, cheb_params_for
from geomdl.graph import (
    apply_laplacian,
    divergence,
    gradient,
    inner_product_edges,
    inner_product_vertices,
    khop_mask,
    laplacian_matrix,
)
from geomdl.mesh import (
    TriMesh,
    angle_cotan_weights,
    cotan_laplacian,
    grid_mesh,
    icosphere,
    metric_cotan_weights,
    strip_mesh,
)
from geomdl.spectral import (
    diffusion_distance,
    diffusion_distance_matrix,
    diffusion_distance_spatial,
    eigendecompose,
    heat_kernel,
    heat_operator,
    spectral_convolve,
)
from geomdl.train import CORA_DEFAULTS, TrainConfig, run_cora, run_gradchecks

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TRIALS = 1000


def cora_root():
    root = os.environ.get("GEOMDL_CORA_DIR") or os.path.join(REPO, "data", "cora")
    for d in (root, os.path.join(root, "cora")):
        if os.path.isfile(os.path.join(d, "cora.content")) and os.path.isfile(os.path.join(d, "cora.cites")):
            return d
    pytest.fail(f"CORA dataset not found (looked in {root!r}); set GEOMDL_CORA_DIR to a directory "
                "holding cora.content and cora.cites", pytrace=False)


def trial_graph(rng):
    n = int(rng.integers(2, 41))
    return random_graph(rng, n, p=rng.uniform(0.05, 0.6))


@pytest.mark.slow
@pytest.mark.criterion("CORA/GCN test accuracy >= 0.78 in < 5 min")
def test_cora_gcn(criterion):
    root = cora_root()
    t0 = time.perf_counter()
    res, data, split = run_cora("gcn", root, TrainConfig(
        CORA_DEFAULTS["optimizer"], CORA_DEFAULTS["lr"], CORA_DEFAULTS["weight_decay"], CORA_DEFAULTS["epochs"]))
    elapsed = time.perf_counter() - t0
    acc = res.final["test_acc"]
    criterion["detail"] = f"n={data.n} edges={data.graph.num_edges} test_acc={acc:.4f} time={elapsed:.1f}s"
    assert data.n == 2708
    assert acc >= 0.78
    assert elapsed < 300


@pytest.mark.slow
@pytest.mark.criterion("CORA/MoNet test accuracy >= 0.78")
def test_cora_monet(criterion):
    root = cora_root()
    res, data, _ = run_cora("monet", root, TrainConfig(
        CORA_DEFAULTS["optimizer"], CORA_DEFAULTS["lr"], CORA_DEFAULTS["weight_decay"], CORA_DEFAULTS["epochs"]))
    acc = res.final["test_acc"]
    criterion["detail"] = f"test_acc={acc:.4f}"
    assert acc >= 0.78


@pytest.mark.criterion("ChebNet equals dense spectral oracle (50 graphs, 1e-8)")
def test_cheb_equals_spectral_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 51))
        g = random_graph(rng, n, p=rng.uniform(0.05, 0.5))
        r = int(rng.integers(1, 6))
        alpha = rng.standard_normal(r)
        f = rng.standard_normal(n)
        norm = ("weighted", "sym_normalized")[int(rng.integers(2))]
        params = cheb_params_for(g, alpha, norm)
        b = eigendecompose(g, n, normalization=norm, method="dense")
        oracle = spectral_convolve(f, cheb_eval(b.eigenvalues, alpha, params.lam_max), b)
        worst = max(worst, float(np.abs(cheb_filter_apply(f, params, g, norm) - oracle).max()))
    criterion["detail"] = f"max abs diff {worst:.2e}"
    assert worst <= 1e-8


@pytest.mark.criterion("calculus identities (1000 trials each)")
def test_calculus_identities(criterion):
    rng = np.random.default_rng(7)
    adj = lap = psd = kern = 0.0
    for _ in range(TRIALS):
        g = trial_graph(rng)
        f = rng.standard_normal(g.n)
        F = rng.standard_normal(g.num_edges)
        adj = max(adj, abs(inner_product_edges(F, gradient(f, g), g) - inner_product_vertices(-divergence(F, g), f, g)))
    for _ in range(TRIALS):
        g = trial_graph(rng)
        f = rng.standard_normal(g.n)
        ref = laplacian_matrix(g) @ f
        lap = max(lap, np.abs(-divergence(gradient(f, g), g) - ref).max() / max(1.0, np.abs(ref).max()))
    for _ in range(TRIALS):
        g = trial_graph(rng)
        f = rng.standard_normal(g.n)
        psd = min(psd, inner_product_vertices(f, apply_laplacian(f, g), g))
        w = eigendecompose(g, g.n, method="dense").eigenvalues
        psd = min(psd, float(w.min()))
    for _ in range(TRIALS):
        g = trial_graph(rng)
        kern = max(kern, np.abs(apply_laplacian(np.full(g.n, rng.normal()), g)).max())
    criterion["detail"] = (f"adjointness {adj:.1e}, Laplacian=-div grad {lap:.1e} (rel), "
                           f"min quadratic form/eigenvalue {psd:.1e}, constant kernel {kern:.1e}")
    assert adj <= 1e-12
    assert lap <= 1e-14
    assert psd >= -1e-12
    assert kern <= 1e-12


@pytest.mark.criterion("heat/diffusion suite")
def test_heat_diffusion_suite(criterion):
    rng = np.random.default_rng(11)
    h0 = semi = dd = rw = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 31))
        g = random_graph(rng, n, p=rng.uniform(0.1, 0.6))
        b = eigendecompose(g, n, normalization="unnormalized")
        h0 = max(h0, np.abs(heat_kernel(b, 0.0) - np.eye(n)).max())
        t, s = rng.uniform(0, 2, 2)
        bw = eigendecompose(g, n)
        semi = max(semi, np.abs(heat_operator(bw, t) @ heat_operator(bw, s) - heat_operator(bw, t + s)).max())
        for _ in range(5):
            x, y = rng.integers(0, n, 2)
            dd = max(dd, abs(diffusion_distance_spatial(bw, t, x, y) - diffusion_distance(bw, t, x, y)))
        brw = eigendecompose(g, n, normalization="random_walk")
        rw = max(rw, np.abs(heat_operator(brw, t).sum(axis=1) - 1.0).max())
    criterion["detail"] = f"H0=I {h0:.1e}, semigroup {semi:.1e}, spatial/spectral {dd:.1e}, rw rows {rw:.1e}"
    assert h0 <= 1e-10
    assert semi <= 1e-8
    assert dd <= 1e-8
    assert rw <= 1e-8


@pytest.mark.criterion("mesh Laplacian")
def test_mesh_laplacian(criterion):
    meshes = [icosphere(3), grid_mesh(12, 9, jitter=0.3, seed=5), strip_mesh(9, 5, turn_angles=np.full(8, 0.4))]
    form = max(np.abs(metric_cotan_weights(m) - angle_cotan_weights(m)).max() for m in meshes)
    harm = 0.0
    for seed in range(5):
        m = grid_mesh(10, 10, spacing=0.5, jitter=0.3, seed=seed)
        g = cotan_laplacian(m)
        interior = np.ones(m.n, dtype=bool)
        interior[np.unique(m.boundary_edges)] = False
        for coef in np.random.default_rng(seed).standard_normal((3, 3)):
            f = coef[0] * m.vertices[:, 0] + coef[1] * m.vertices[:, 1] + coef[2]
            harm = max(harm, np.abs(apply_laplacian(f, g)[interior]).max())
    lam = [eigendecompose(cotan_laplacian(icosphere(s)), 2).eigenvalues[1] for s in (3, 4)]
    err = [abs(l - 2.0) / 2.0 for l in lam]
    criterion["detail"] = (f"forms {form:.1e}, harmonic residual {harm:.1e}, "
                           f"lambda_1 {lam[0]:.8f} -> {lam[1]:.8f}")
    assert form <= 1e-10
    assert harm < 1e-10
    assert err[0] <= 0.10 and err[1] <= 0.10
    assert err[1] < err[0]


@pytest.mark.criterion("gradient checks (20 instances, rel err < 1e-5)")
def test_gradient_checks(criterion):
    worst = run_gradchecks(instances=20, seed=3)
    criterion["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    required = {"spectral_multipliers", "spline_alpha", "cheb_alpha", "gcn_theta", "gnn_theta", "monet_mu_sigma_g"}
    assert required <= set(worst)
    assert max(worst.values()) < 1e-5


@pytest.mark.criterion("Chebyshev locality (exact)")
def test_locality(criterion):
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(100):
        n = int(rng.integers(5, 60))
        g = random_graph(rng, n, p=rng.uniform(0.02, 0.15))
        r = int(rng.integers(1, 6))
        params = cheb_params_for(g, rng.standard_normal(r))
        x = int(rng.integers(n))
        beyond = ~khop_mask(g, x, r)
        f = rng.standard_normal(n)
        f2 = f.copy()
        f2[beyond] = rng.standard_normal(beyond.sum()) * 1e3
        assert cheb_filter_apply(f, params, g)[x] == cheb_filter_apply(f2, params, g)[x]
        # exact sparsity: the response to a delta vanishes outside its (r-1)-hop ball
        resp = cheb_filter_apply(np.eye(n)[x], params, g)
        assert np.all(resp[~khop_mask(g, x, r - 1)] == 0.0)
        checked += 1
    criterion["detail"] = f"{checked} graphs, outputs bit-identical and supports exact"


@pytest.mark.criterion("isometry invariance and basis dependence")
def test_isometry(criterion):
    turns = [0.5, -0.7, 0.9, 0.3, -0.4, 0.8, -0.2, 0.6, 0.1]
    flat, bent = strip_mesh(10, 6), strip_mesh(10, 6, turn_angles=turns)
    assert np.abs(flat.vertices[:, 2]).max() == 0.0 and np.abs(bent.vertices[:, 2]).max() > 1.0
    diffs = {"cotan": np.abs(metric_cotan_weights(flat) - metric_cotan_weights(bent)).max()}
    bf, bb = (eigendecompose(cotan_laplacian(m), m.n) for m in (flat, bent))
    diffs["heat"] = max(np.abs(heat_kernel(bf, t) - heat_kernel(bb, t)).max() for t in (0.1, 1.0, 5.0))
    diffs["diffusion"] = max(np.abs(diffusion_distance_matrix(bf, t) - diffusion_distance_matrix(bb, t)).max()
                             for t in (0.1, 1.0, 5.0))
    f = np.random.default_rng(0).standard_normal(flat.n)
    ops = []
    for m in (flat, bent):
        coords = geodesic_polar_coords(m, 2.5)
        radial = geodesic_patch_weights(coords, [0.0, 1.0, 2.0], None, sigma_rho=0.5, metric=m.vertex_areas)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            heat = heat_patch_weights(m, [0.2, 1.0], normalize=True)
        ops.append((patch_responses(f, radial), patch_responses(f, heat)))
    diffs["patch"] = max(np.abs(a - b).max() for a, b in zip(ops[0], ops[1]))

    # near-isometric pair: 1% vertex noise on a jittered grid
    A = grid_mesh(12, 12, jitter=0.3, seed=1)
    rng = np.random.default_rng(0)
    B = TriMesh(A.vertices + 0.01 * np.mean(A.edge_lengths) * rng.standard_normal(A.vertices.shape), A.faces)
    demo = basis_demo(A, B, rng.standard_normal(A.n), seed=0)
    sd, cd = demo["spectral_discrepancy"], demo["cheb_discrepancy"]
    criterion["detail"] = (", ".join(f"{k} {v:.1e}" for k, v in diffs.items())
                           + f"; near-isometric discrepancy spectral {sd:.3f} vs cheb {cd:.3f}")
    assert max(diffs.values()) <= 1e-8
    assert sd > cd
