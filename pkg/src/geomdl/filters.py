"""Learnable convolution constructions on graphs.

Numpy forward passes for spectral layers, spline-parametrised multipliers,
Chebyshev polynomial filters, renormalised one-hop propagation (GCN) and a
generic two-input node function (GNN).  Differentiable counterparts built on
:mod:`geomdl.autodiff` live in :mod:`geomdl.train`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import BSpline

from geomdl._backend import kernels
from geomdl.graph import Graph, laplacian_matrix
from geomdl.spectral import Eigenbasis

NONLINEARITIES = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "identity": lambda x: x,
}


def _xi(name):
    try:
        return NONLINEARITIES[name]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {name!r}; choose from {sorted(NONLINEARITIES)}") from None


def _as_2d(F):
    F = np.asarray(F, dtype=np.float64)
    return (F[:, None], True) if F.ndim == 1 else (F, False)


# --- spectral layers -------------------------------------------------------


@dataclass(frozen=True)
class SpectralLayerParams:
    """Diagonal spectral multipliers, shape ``(k, p, q)``."""

    multipliers: np.ndarray

    @property
    def shape(self):
        return self.multipliers.shape

    @staticmethod
    def parameter_count(p, q, k) -> int:
        return p * q * k


def spectral_layer_forward(F, params: SpectralLayerParams, basis: Eigenbasis, xi="identity"):
    """``g_l = xi(sum_l' Phi diag(w_ll') Phi^T A f_l')``."""
    F, flat = _as_2d(F)
    Wm = np.asarray(params.multipliers, dtype=np.float64)
    k, p, q = Wm.shape
    if k != basis.k or F.shape != (basis.n, p):
        raise ValueError(f"input {F.shape} and multipliers {Wm.shape} do not match basis (n={basis.n}, k={basis.k})")
    C = basis.eigenvectors.T @ (basis.metric[:, None] * F)
    G = _xi(xi)(basis.eigenvectors @ np.einsum("kp,kpq->kq", C, Wm))
    return G[:, 0] if flat and q == 1 else G


def spline_basis(eigenvalues, q_b, lam_max=None, mode="bspline"):
    """``k x q_b`` matrix of clamped cubic B-splines evaluated at the eigenvalues.

    Knots are uniform on ``[0, lam_max]`` (default: the largest eigenvalue),
    with fourfold end knots.  ``mode="identity"`` returns ``I`` (requires
    ``q_b == k``) so multipliers equal the coefficients.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if mode == "identity":
        if q_b != len(lam):
            raise ValueError("identity mode needs q_b == k")
        return np.eye(q_b)
    if mode != "bspline":
        raise ValueError(f"unknown spline mode {mode!r}")
    if q_b < 4:
        raise ValueError(f"cubic splines need q_b >= 4, got {q_b}")
    if q_b > len(lam):
        raise ValueError(f"q_b={q_b} exceeds the number of eigenvalues k={len(lam)}")
    t = spline_knots(q_b, float(lam.max()) if lam_max is None else float(lam_max))
    x = np.clip(lam, t[0], t[-1])
    return BSpline.design_matrix(x, t, 3).toarray()


def spline_knots(q_b, lam_max):
    if lam_max <= 0:
        raise ValueError("lam_max must be positive")
    inner = np.linspace(0.0, lam_max, q_b - 2)
    return np.concatenate([[0.0] * 3, inner, [lam_max] * 3])


def greville_abscissae(q_b, lam_max):
    """Spline coefficients that reproduce the identity function ``lambda``."""
    t = spline_knots(q_b, lam_max)
    return np.array([t[j + 1 : j + 4].mean() for j in range(q_b)])


@dataclass(frozen=True)
class SplineMultiplierParams:
    """Interpolation matrix ``B`` (k x q_b) and coefficients ``alpha`` (q_b x p x q)."""

    B: np.ndarray
    alpha: np.ndarray

    @staticmethod
    def parameter_count(p, q, q_b) -> int:
        return p * q * q_b


def spline_multipliers(params: SplineMultiplierParams):
    """Multipliers ``B alpha`` with the shape of ``alpha`` after its first axis becomes ``k``."""
    alpha = np.asarray(params.alpha, dtype=np.float64)
    if alpha.shape[0] != params.B.shape[1]:
        raise ValueError("alpha length does not match the number of spline functions")
    return np.tensordot(params.B, alpha, axes=(1, 0))


# --- Chebyshev filters -----------------------------------------------------


def power_iteration_lmax(L, max_iter=200, rtol=1e-8, safety=1.01, seed=0):
    """Largest-eigenvalue estimate of ``L`` scaled by ``safety``."""
    L = sp.csr_matrix(L)
    n = L.shape[0]
    x = np.random.default_rng(seed).random(n) + 0.5
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = L @ x
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            break
        new = float(x @ y)
        x = y / nrm
        if lam and abs(new - lam) <= rtol * abs(new):
            lam = new
            break
        lam = new
    # Rayleigh quotient can lag below the true radius; the norm ratio bounds it from above for normal L
    lam = max(lam, float(np.linalg.norm(L @ x)))
    if lam <= 0:
        raise ValueError("operator has no positive spectrum")
    return safety * lam


def cheb_eval(lam, alpha, lam_max):
    """``sum_j alpha_j T_j(2 lam / lam_max - 1)`` via the three-term recurrence."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or len(alpha) < 1:
        raise ValueError("alpha must be a nonempty vector")
    x = 2.0 * np.asarray(lam, dtype=np.float64) / lam_max - 1.0
    t_prev, t = np.ones_like(x), x
    out = alpha[0] * t_prev
    if len(alpha) > 1:
        out = out + alpha[1] * t
    for a in alpha[2:]:
        t_prev, t = t, 2.0 * x * t - t_prev
        out = out + a * t
    return out


def chebyshev_t(j, x):
    """Single Chebyshev polynomial ``T_j(x)``."""
    e = np.zeros(j + 1)
    e[j] = 1.0
    return cheb_eval((np.asarray(x) + 1.0) / 2.0, e, 1.0)


@dataclass(frozen=True)
class ChebParams:
    """Coefficients ``alpha`` of shape ``(r,)`` or ``(r, p, q)`` and the spectral bound."""

    alpha: np.ndarray
    lam_max: float

    def __post_init__(self):
        if np.asarray(self.alpha).shape[0] < 1:
            raise ValueError("Chebyshev order r must be at least 1")
        if not self.lam_max > 0:
            raise ValueError("lam_max must be positive")

    @property
    def order(self) -> int:
        return np.asarray(self.alpha).shape[0]

    @staticmethod
    def parameter_count(p, q, r) -> int:
        return p * q * r


def _csr32(L):
    L = sp.csr_matrix(L, dtype=np.float64)
    L.sort_indices()
    return L.indptr.astype(np.int32), L.indices.astype(np.int32), L.data


def cheb_terms(L, lam_max, F, r):
    """``(r, n, p)`` stack ``T_j(2 L / lam_max - I) F`` without eigenvectors."""
    F, _ = _as_2d(F)
    indptr, indices, data = _csr32(L)
    return kernels.cheb_recurrence(indptr, indices, data, 2.0 / lam_max, F, int(r))


def cheb_filter_apply_operator(F, params: ChebParams, L):
    """Chebyshev filter of an explicit sparse Laplacian ``L``."""
    F, flat = _as_2d(F)
    alpha = np.asarray(params.alpha, dtype=np.float64)
    T = cheb_terms(L, params.lam_max, F, params.order)
    if alpha.ndim == 1:
        out = np.tensordot(alpha, T, axes=(0, 0))
        return out[:, 0] if flat else out
    out = np.einsum("jnp,jpq->nq", T, alpha)
    return out[:, 0] if flat and out.shape[1] == 1 else out


def cheb_filter_apply(F, params: ChebParams, graph: Graph, normalization="weighted"):
    """``sum_j alpha_j T_j(Delta~) f`` with ``Delta~ = 2 Delta / lam_max - I``."""
    return cheb_filter_apply_operator(F, params, laplacian_matrix(graph, normalization))


def cheb_params_for(graph: Graph, alpha, normalization="weighted"):
    """Attach a power-iteration spectral bound to coefficients ``alpha``."""
    return ChebParams(np.asarray(alpha, dtype=np.float64), power_iteration_lmax(laplacian_matrix(graph, normalization)))


# --- GCN and GNN -----------------------------------------------------------


def gcn_operator(graph: Graph) -> sp.csr_matrix:
    """``D~^-1/2 (W + I) D~^-1/2`` with ``D~`` the row sums of ``W + I``."""
    Wt = graph.weights + sp.identity(graph.n, format="csr")
    d = np.asarray(Wt.sum(axis=1)).ravel()
    s = 1.0 / np.sqrt(d)
    return (sp.diags(s) @ Wt @ sp.diags(s)).tocsr()


def gcn_forward(F, Theta, graph: Graph, xi="identity", operator=None):
    """``xi(D~^-1/2 W~ D~^-1/2 F Theta)``; a scalar ``Theta`` is the one-channel case."""
    F, flat = _as_2d(F)
    Theta = np.atleast_2d(np.asarray(Theta, dtype=np.float64))
    if Theta.shape[0] != F.shape[1]:
        raise ValueError(f"Theta {Theta.shape} does not accept {F.shape[1]} input channels")
    P = gcn_operator(graph) if operator is None else operator
    G = _xi(xi)(P @ (F @ Theta))
    return G[:, 0] if flat and G.shape[1] == 1 else G


def diffusion_inputs(F, graph: Graph, scales=(1,)):
    """``[W^s F for s in scales]`` followed by ``D F``, as a list."""
    F, _ = _as_2d(F)
    out = []
    for s in scales:
        if s < 1:
            raise ValueError("diffusion scales start at 1")
        X = F
        for _ in range(s):
            X = graph.weights @ X
        out.append(X)
    out.append(graph.degrees[:, None] * F)
    return out


@dataclass(frozen=True)
class GNNParams:
    """Affine node function on ``[W^s F ...; D F]``: ``theta`` is ``(len(scales)+1) p x q``."""

    theta: np.ndarray
    bias: np.ndarray
    scales: tuple = (1,)

    @staticmethod
    def parameter_count(p, q, n_scales=1) -> int:
        return (n_scales + 1) * p * q + q


def gnn_forward(F, params: GNNParams | None, graph: Graph, xi="relu", eta=None, scales=(1,)):
    """Rowwise ``eta((W F)_i, (D F)_i)``.

    With ``eta=None`` the default family ``xi([W^s F; D F] theta + b)`` is
    used.  A callable ``eta(wf, df)`` receives the ``n x p`` arrays directly.
    """
    F, flat = _as_2d(F)
    if eta is not None:
        WF, DF = diffusion_inputs(F, graph, (1,))
        G = eta(WF, DF)
    else:
        Z = np.hstack(diffusion_inputs(F, graph, params.scales))
        theta = np.asarray(params.theta, dtype=np.float64)
        if theta.shape[0] != Z.shape[1]:
            raise ValueError(f"theta expects {theta.shape[0]} inputs, got {Z.shape[1]}")
        G = _xi(xi)(Z @ theta + params.bias)
    G = np.asarray(G)
    return G[:, 0] if flat and G.ndim == 2 and G.shape[1] == 1 else G


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_SCHEMA = "geomdl.checkpoint/1"


def save_checkpoint(path, params: dict, manifest: dict | None = None):
    """Write ``<path>.json`` (schema, shapes, hyperparameters) and ``<path>.npz``."""
    path = str(path)
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "tensors": {k: list(v.shape) for k, v in sorted(arrays.items())},
        "manifest": manifest or {},
    }
    with open(path + ".npz", "wb") as fh:
        np.savez(fh, **arrays)
    with open(path + ".json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    return path + ".json", path + ".npz"


def load_checkpoint(path):
    """Return ``(params, manifest)``; shapes are checked against the header."""
    path = str(path)
    with open(path + ".json") as fh:
        header = json.load(fh)
    if header.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {header.get('schema')!r}")
    with np.load(path + ".npz") as z:
        params = {k: z[k].copy() for k in z.files}
    for k, shape in header["tensors"].items():
        if k not in params or list(params[k].shape) != shape:
            raise ValueError(f"tensor {k!r} missing or with wrong shape")
    return params, header["manifest"]
