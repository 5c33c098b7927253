"""Laplacian eigenbases and the spectral quantities built on them.

All eigenvectors are orthonormal in the vertex metric ``A``:
``Phi.T @ diag(a) @ Phi = I``.  Analysis is therefore ``Phi.T @ (a * f)``
and synthesis ``Phi @ f_hat``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from geomdl.graph import Graph, GraphError, _metric, stiffness_matrix

DENSE_THRESHOLD = 512


class EigenError(RuntimeError):
    """Eigensolver failure (bad request or non-convergence)."""


@dataclass(frozen=True, eq=False)
class Eigenbasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    metric: np.ndarray
    normalization: str = "weighted"

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def n(self) -> int:
        return self.eigenvectors.shape[0]

    def truncate(self, k) -> "Eigenbasis":
        return Eigenbasis(self.eigenvalues[:k], self.eigenvectors[:, :k], self.metric, self.normalization)

    def orthonormality_error(self) -> float:
        Phi = self.eigenvectors
        return float(np.abs(Phi.T @ (self.metric[:, None] * Phi) - np.eye(self.k)).max())


# --- eigensolvers ----------------------------------------------------------


def fix_signs(V):
    """Flip columns so the entry of largest magnitude is positive (first index on ties)."""
    V = np.array(V, dtype=np.float64, copy=True)
    if V.size == 0:
        return V
    absV = np.abs(V)
    peak = absV.max(axis=0)
    idx = np.argmax(absV >= peak * (1.0 - 1e-12), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    V *= np.where(s == 0, 1.0, s)
    return V


def _gershgorin_upper(S):
    S = sp.csr_matrix(S)
    return float(np.max(np.asarray(abs(S).sum(axis=1)).ravel()))


def _cheb_filter(S, X, degree, a, b):
    """Apply ``T_degree`` of ``S`` mapped so ``[a, b]`` -> ``[-1, 1]``; grows fastest below ``a``."""
    e = (b - a) / 2.0
    c = (b + a) / 2.0
    Y = (S @ X - c * X) / e
    Xp = X
    for _ in range(2, degree + 1):
        Yn = 2.0 * (S @ Y - c * Y) / e - Xp
        Xp, Y = Y, Yn
        nrm = np.linalg.norm(Y, axis=0)
        Y = Y / nrm
        Xp = Xp / nrm
    return Y


def _orthonormalize_against(Q, x):
    for _ in range(2):
        x = x - Q @ (Q.T @ x)
    return x


def _lanczos_pass(S, m, rng):
    """``m`` Lanczos steps with full reorthogonalisation; returns an orthonormal basis."""
    n = S.shape[0]
    Q = np.zeros((n, 0))
    x = rng.standard_normal(n)
    while Q.shape[1] < m:
        x = _orthonormalize_against(Q, x)
        nrm = np.linalg.norm(x)
        if nrm < 1e-10:
            # invariant subspace found: restart with a fresh direction
            x = _orthonormalize_against(Q, rng.standard_normal(n))
            nrm = np.linalg.norm(x)
            if nrm < 1e-10:
                break
        q = x / nrm
        Q = np.column_stack([Q, q])
        x = S @ q
    return Q


def _rayleigh_ritz(S, Q):
    H = Q.T @ (S @ Q)
    evals, evecs = np.linalg.eigh(0.5 * (H + H.T))
    return evals, Q @ evecs


def lanczos_smallest(S, k, tol=1e-10, max_restarts=None, krylov_dim=None, degree=24, seed=0):
    """Smallest ``k`` eigenpairs of a symmetric sparse ``S`` without shift-invert.

    A Lanczos pass with full reorthogonalisation seeds Ritz vectors.  Each
    restart keeps a block of ``k + guard`` Ritz vectors, applies a Chebyshev
    polynomial of ``S`` that damps the spectrum on ``[cut, bound]`` (``cut``
    the first unwanted Ritz value, ``bound`` a Gershgorin bound), then
    reorthonormalises and performs Rayleigh-Ritz with ``S``.

    Converged when, after at least two block restarts, every residual
    ``|S y - theta y|`` is below ``tol * max(1, bound)``.  Returns ``(theta, Y, restarts)``.
    """
    S = sp.csr_matrix(S)
    n = S.shape[0]
    if k > n:
        raise EigenError(f"requested k={k} eigenpairs of an n={n} operator")
    max_restarts = 10 * k if max_restarts is None else max_restarts
    m = min(n, krylov_dim or max(3 * k, 40))
    b = _gershgorin_upper(S)
    thresh = tol * max(1.0, b)
    rng = np.random.default_rng(seed)
    block = min(n, k + max(4, k // 2))

    Q = _lanczos_pass(S, m, rng)
    evals, Y = _rayleigh_ritz(S, Q)
    res = np.full(k, np.inf)
    for it in range(max_restarts + 1):
        R = S @ Y[:, :k] - Y[:, :k] * evals[:k]
        res = np.linalg.norm(R, axis=0)
        if Q.shape[1] >= n or (it >= 2 and np.all(res <= thresh)):
            return evals[:k], Y[:, :k], it
        if it == max_restarts:
            break
        # the single-vector pass cannot resolve multiplicities, so the first
        # block restart carries random guard vectors beyond the wanted k
        X = Y[:, : (k if it == 0 else block)]
        if X.shape[1] < block:
            extra = rng.standard_normal((n, block - X.shape[1]))
            X = np.column_stack([X, _orthonormalize_against(X, extra)])
        cut = evals[min(block, len(evals) - 1)] if len(evals) > block else evals[-1]
        cut = max(cut, evals[min(k, len(evals) - 1)])
        if cut < b:
            X = _cheb_filter(S, X, degree, cut, b)
        else:
            X = S @ X
        Q, _ = np.linalg.qr(X)
        evals, Y = _rayleigh_ritz(S, Q)
    raise EigenError(
        f"Lanczos did not converge in {max_restarts} restarts (max residual {res.max():.3e} > {thresh:.3e})"
    )


def eigendecompose_matrices(L, metric, k, method="auto", dense_threshold=DENSE_THRESHOLD, tol=1e-10, normalization="custom"):
    """Solve ``L phi = lambda A phi`` for the ``k`` smallest pairs.

    Uses the symmetric substitution ``Psi = A^1/2 Phi`` on
    ``A^-1/2 L A^-1/2``; dense ``eigh`` up to ``dense_threshold`` vertices,
    the Lanczos solver above it.
    """
    L = sp.csr_matrix(L, dtype=np.float64)
    a = np.asarray(metric, dtype=np.float64)
    n = L.shape[0]
    if not 1 <= k <= n:
        raise EigenError(f"k must lie in [1, {n}], got {k}")
    if np.any(a <= 0):
        raise EigenError("metric must be positive")
    s = 1.0 / np.sqrt(a)
    S = (sp.diags(s) @ L @ sp.diags(s)).tocsr()
    if method == "auto":
        method = "dense" if n <= dense_threshold else "lanczos"
    if method == "dense":
        Sd = S.toarray()
        Sd = 0.5 * (Sd + Sd.T)
        evals, Psi = sla.eigh(Sd, subset_by_index=[0, k - 1])
    elif method == "lanczos":
        evals, Psi, _ = lanczos_smallest(0.5 * (S + S.T), k, tol=tol)
    else:
        raise EigenError(f"unknown method {method!r}")
    order = np.argsort(evals, kind="stable")
    evals, Psi = evals[order], Psi[:, order]
    if evals[0] < -1e-10 * max(1.0, abs(evals[-1])):
        raise EigenError(f"operator is not positive semidefinite (lambda_0 = {evals[0]:.3e})")
    evals = np.where(evals < 0, 0.0, evals)
    Phi = fix_signs(s[:, None] * Psi)
    return Eigenbasis(evals, Phi, a.copy(), normalization)


def eigendecompose(graph: Graph, k, normalization="weighted", **kwargs) -> Eigenbasis:
    """First ``k`` Laplacian eigenpairs of a graph.

    ``weighted`` uses the graph's vertex weights as metric, ``unnormalized``
    the identity, ``random_walk`` the degrees; ``sym_normalized`` solves the
    standard problem for ``D^-1/2 (D - W) D^-1/2``.
    """
    if normalization == "sym_normalized":
        d = _metric(graph, normalization)
        s = 1.0 / np.sqrt(d)
        L = sp.diags(s) @ stiffness_matrix(graph) @ sp.diags(s)
        return eigendecompose_matrices(L, np.ones(graph.n), k, normalization=normalization, **kwargs)
    if normalization not in ("weighted", "unnormalized", "random_walk"):
        raise GraphError(f"unknown normalization {normalization!r}")
    return eigendecompose_matrices(stiffness_matrix(graph), _metric(graph, normalization), k, normalization=normalization, **kwargs)


# --- Fourier analysis and spectral filtering -------------------------------


def _col(f):
    f = np.asarray(f, dtype=np.float64)
    return f, f.ndim == 1


def fourier_analysis(f, basis: Eigenbasis):
    """Coefficients ``<f, phi_i>`` in the basis metric."""
    f = np.asarray(f, dtype=np.float64)
    a = basis.metric if f.ndim == 1 else basis.metric[:, None]
    return basis.eigenvectors.T @ (a * f)


def fourier_synthesis(coeffs, basis: Eigenbasis):
    return basis.eigenvectors @ np.asarray(coeffs, dtype=np.float64)


def spectral_convolve(f, g_hat, basis: Eigenbasis):
    """``Phi diag(g_hat) Phi^T A f``."""
    g_hat = np.asarray(g_hat, dtype=np.float64)
    if g_hat.shape != (basis.k,):
        raise ValueError(f"filter has {g_hat.shape} coefficients, basis has k={basis.k}")
    c = fourier_analysis(f, basis)
    c = g_hat * c if c.ndim == 1 else g_hat[:, None] * c
    return fourier_synthesis(c, basis)


def heat_kernel(basis: Eigenbasis, t):
    """Dense ``h_t(x, x') = sum_i exp(-t lambda_i) phi_i(x) phi_i(x')``."""
    if t < 0:
        raise ValueError("diffusion time must be nonnegative")
    Phi = basis.eigenvectors
    return (Phi * np.exp(-t * basis.eigenvalues)) @ Phi.T


def heat_operator(basis: Eigenbasis, t):
    """Dense matrix mapping initial heat to heat at time ``t`` (``H_t A``)."""
    return heat_kernel(basis, t) * basis.metric[None, :]


def heat_apply(f, basis: Eigenbasis, t):
    """Matrix-free heat diffusion of ``f`` for time ``t``."""
    if t < 0:
        raise ValueError("diffusion time must be nonnegative")
    return spectral_convolve(f, np.exp(-t * basis.eigenvalues), basis)


def heat_kernel_diagonal(basis: Eigenbasis, t):
    """``h_t(x, x)`` for every vertex (heat kernel signature at one scale)."""
    return (basis.eigenvectors**2) @ np.exp(-t * basis.eigenvalues)


def diffusion_distance(basis: Eigenbasis, t, x, y):
    """Spectral form ``sqrt(sum_i exp(-2 t lambda_i) (phi_i(x) - phi_i(y))^2)``."""
    if t < 0:
        raise ValueError("diffusion time must be nonnegative")
    d = basis.eigenvectors[x] - basis.eigenvectors[y]
    return float(np.sqrt(np.sum(np.exp(-2.0 * t * basis.eigenvalues) * d**2)))


def diffusion_distance_matrix(basis: Eigenbasis, t, sources=None):
    """Pairwise diffusion distances between ``sources`` (all vertices if omitted)."""
    idx = np.arange(basis.n) if sources is None else np.asarray(sources)
    E = basis.eigenvectors[idx] * np.exp(-t * basis.eigenvalues)
    sq = np.sum(E**2, axis=1)
    D2 = sq[:, None] + sq[None, :] - 2.0 * E @ E.T
    D2 = np.maximum(D2, 0.0)
    np.fill_diagonal(D2, 0.0)
    return np.sqrt(D2)


def diffusion_distance_spatial(basis: Eigenbasis, t, x, y):
    """``sqrt(sum_z a_z (h_t(x, z) - h_t(y, z))^2)`` from the heat kernel rows."""
    Phi = basis.eigenvectors
    e = np.exp(-t * basis.eigenvalues)
    hx = (Phi * e) @ Phi[x]
    hy = (Phi * e) @ Phi[y]
    return float(np.sqrt(np.sum(basis.metric * (hx - hy) ** 2)))


# --- windowed Fourier transform --------------------------------------------


def translate_modulate_atom(basis: Eigenbasis, g_hat, center, j):
    """Window translated to ``center`` and modulated by ``phi_j``.

    ``g(x) = phi_j(x) sum_i g_hat_i phi_i(x) phi_i(center)``; the WFT
    coefficient ``wft(f)[center, j]`` equals ``<f, g>`` in the basis metric.
    """
    g_hat = np.asarray(g_hat, dtype=np.float64)
    if g_hat.shape != (basis.k,):
        raise ValueError("window must have k spectral coefficients")
    Phi = basis.eigenvectors
    translated = Phi @ (g_hat * Phi[center])
    return Phi[:, j] * translated


def wft(f, g_hat, basis: Eigenbasis):
    """``(Sf)(x', j) = sum_i g_hat_i phi_i(x') <f, phi_i phi_j>`` as an ``n x k`` matrix."""
    g_hat = np.asarray(g_hat, dtype=np.float64)
    if g_hat.shape != (basis.k,):
        raise ValueError("window must have k spectral coefficients")
    f = np.asarray(f, dtype=np.float64)
    Phi = basis.eigenvectors
    C = Phi.T @ ((basis.metric * f)[:, None] * Phi)
    return Phi @ (g_hat[:, None] * C)


# --- export / import -------------------------------------------------------

SCHEMA = "geomdl.eigenbasis/1"


def save_eigenbasis(basis: Eigenbasis, path, fmt="csv"):
    """Write the basis plus a JSON header ``<path>.json``.

    CSV layout: one row per eigenpair, ``lambda_i`` followed by the ``n``
    entries of ``phi_i``.  ``npz`` stores the same arrays in binary.
    """
    path = str(path)
    header = {
        "schema": SCHEMA,
        "k": basis.k,
        "n": basis.n,
        "normalization": basis.normalization,
        "format": fmt,
        "metric": basis.metric.tolist(),
    }
    if fmt == "csv":
        rows = np.column_stack([basis.eigenvalues, basis.eigenvectors.T])
        np.savetxt(path, rows, delimiter=",", fmt="%.17g")
    elif fmt == "npz":
        with open(path, "wb") as fh:
            np.savez(fh, eigenvalues=basis.eigenvalues, eigenvectors=basis.eigenvectors, metric=basis.metric)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)


def load_eigenbasis(path) -> Eigenbasis:
    path = str(path)
    with open(path + ".json") as fh:
        header = json.load(fh)
    if header.get("schema") != SCHEMA:
        raise ValueError(f"unsupported eigenbasis schema {header.get('schema')!r}")
    if header["format"] == "npz":
        with np.load(path) as z:
            return Eigenbasis(z["eigenvalues"], z["eigenvectors"], z["metric"], header["normalization"])
    rows = np.atleast_2d(np.loadtxt(path, delimiter=","))
    return Eigenbasis(rows[:, 0].copy(), rows[:, 1:].T.copy(), np.array(header["metric"]), header["normalization"])
