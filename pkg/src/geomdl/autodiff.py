"""A small reverse-mode differentiation tape over numpy arrays.

Every operation appends a node holding its inputs, attributes and value.
``Tape.backward`` walks the nodes in reverse; ``Tape.replay`` re-evaluates
them in order from the leaves, which reproduces the recorded values exactly
because the same numpy calls run on the same inputs.

Example
-------
>>> tape = Tape()
>>> x = tape.const(np.ones((3, 2)))
>>> w = tape.param("w", np.full((2, 1), 0.5))
>>> loss = tape.sum((x @ w) ** 2)
>>> tape.backward(loss)["w"].ravel()
array([6., 6.])
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from geomdl._backend import kernels


class TapeError(RuntimeError):
    """Invalid tape use or non-finite intermediate."""


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray = None
    requires_grad: bool = False


class Var:
    """Handle to a tape node with arithmetic sugar."""

    __array_priority__ = 100

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self.tape.scale(self.tape._lift(other), -1.0))

    def __rsub__(self, other):
        return self.tape.add(self.tape._lift(other), self.tape.scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(self.tape._lift(other), self)

    def __pow__(self, p):
        if p != 2:
            raise TapeError("only squaring is supported")
        return self.tape.mul(self, self)

    def __repr__(self):
        return f"Var(node={self.idx}, op={self.tape.nodes[self.idx].op!r}, shape={self.shape})"


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


# --- operator table: name -> (forward(vals, attrs), backward(g, vals, out, attrs)) ---

def _f_matmul(v, a):
    return v[0] @ v[1]


def _b_matmul(g, v, out, a):
    need = a["need"]
    return (g @ v[1].T if need[0] else None), (v[0].T @ g if need[1] else None)


def _f_spmm(v, a):
    return np.asarray(a["S"] @ v[0])


def _b_spmm(g, v, out, a):
    return (np.asarray(a["ST"] @ g),)


def _f_add(v, a):
    return v[0] + v[1]


def _b_add(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _f_mul(v, a):
    return v[0] * v[1]


def _b_mul(g, v, out, a):
    need = a["need"]
    return (
        _unbroadcast(g * v[1], v[0].shape) if need[0] else None,
        _unbroadcast(g * v[0], v[1].shape) if need[1] else None,
    )


def _f_scale(v, a):
    return a["c"] * v[0]


def _b_scale(g, v, out, a):
    return (a["c"] * g,)


def _f_relu(v, a):
    return np.maximum(v[0], 0.0)


def _b_relu(g, v, out, a):
    return (g * (v[0] > 0),)


def _f_tanh(v, a):
    return np.tanh(v[0])


def _b_tanh(g, v, out, a):
    return (g * (1.0 - out**2),)


def _f_exp(v, a):
    return np.exp(v[0])


def _b_exp(g, v, out, a):
    return (g * out,)


def _f_sum(v, a):
    return np.asarray(v[0].sum())


def _b_sum(g, v, out, a):
    return (np.full(v[0].shape, float(g)),)


def _f_reshape(v, a):
    return v[0].reshape(a["shape"])


def _b_reshape(g, v, out, a):
    return (g.reshape(v[0].shape),)


def _f_einsum(v, a):
    return np.einsum(a["spec"], *v, optimize=True)


def _b_einsum(g, v, out, a):
    ins, o = a["spec"].split("->")
    s0, s1 = ins.split(",")
    need = a["need"]
    g0 = np.einsum(f"{o},{s1}->{s0}", g, v[1], optimize=True) if need[0] else None
    g1 = np.einsum(f"{s0},{o}->{s1}", v[0], g, optimize=True) if need[1] else None
    return g0, g1


def _f_log_softmax(v, a):
    return _log_softmax(v[0])


def _b_log_softmax(g, v, out, a):
    return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)


def _f_nll(v, a):
    rows = a["rows"]
    return np.asarray(-v[0][rows, a["labels"]].mean())


def _b_nll(g, v, out, a):
    grad = np.zeros_like(v[0])
    rows = a["rows"]
    np.add.at(grad, (rows, a["labels"]), -float(g) / len(rows))
    return (grad,)


def _f_cheb_basis(v, a):
    S = a["S"]
    x = v[0]
    out = kernels.cheb_recurrence(S.indptr, S.indices, S.data, a["scale"], x, a["r"])
    return out


def _b_cheb_basis(g, v, out, a):
    # adjoint of X -> (T_0 X, ..., T_{r-1} X) is G -> sum_j T_j(M^T) G_j (Clenshaw)
    MT = a["MT"]
    r = a["r"]

    def M(x):
        return a["scale"] * (MT @ x) - x

    if r == 1:
        return (g[0].copy(),)
    b1 = np.zeros_like(g[0])
    b2 = np.zeros_like(g[0])
    for j in range(r - 1, 0, -1):
        b1, b2 = g[j] + 2.0 * M(b1) - b2, b1
    return (g[0] + M(b1) - b2,)


def _f_gaussian(v, a):
    U = a["U"]
    mu, L = v
    d = U[:, None, :] - mu[None, :, :]
    z = _tri_solve(L, d)
    return np.exp(-0.5 * np.sum(z**2, axis=2))


def _b_gaussian(g, v, out, a):
    U = a["U"]
    mu, L = v
    d = U[:, None, :] - mu[None, :, :]
    z = _tri_solve(L, d)
    y = _tri_solve_T(L, z)  # Sigma^-1 (u - mu)
    w = (g * out)[:, :, None]
    g_mu = np.sum(w * y, axis=0)
    g_L = np.einsum("mj,mja,mjb->jab", g * out, y, z)
    g_L = np.tril(g_L)
    return g_mu, g_L


def _tri_solve(L, d):
    """``z[m, j] = L_j^-1 d[m, j]`` for lower-triangular ``L_j``."""
    J, dim, _ = L.shape
    z = np.empty_like(d)
    for i in range(dim):
        acc = d[:, :, i] - np.einsum("jk,mjk->mj", L[:, i, :i], z[:, :, :i])
        z[:, :, i] = acc / L[:, i, i]
    return z


def _tri_solve_T(L, z):
    """``y[m, j] = L_j^-T z[m, j]``."""
    J, dim, _ = L.shape
    y = np.empty_like(z)
    for i in range(dim - 1, -1, -1):
        acc = z[:, :, i] - np.einsum("jk,mjk->mj", L[:, i + 1 :, i], y[:, :, i + 1 :])
        y[:, :, i] = acc / L[:, i, i]
    return y


def _f_sqerr(v, a):
    return np.asarray(np.sum((v[0] - a["target"]) ** 2))


def _b_sqerr(g, v, out, a):
    return (2.0 * float(g) * (v[0] - a["target"]),)


_OPS = {
    "matmul": (_f_matmul, _b_matmul),
    "spmm": (_f_spmm, _b_spmm),
    "add": (_f_add, _b_add),
    "mul": (_f_mul, _b_mul),
    "scale": (_f_scale, _b_scale),
    "relu": (_f_relu, _b_relu),
    "tanh": (_f_tanh, _b_tanh),
    "exp": (_f_exp, _b_exp),
    "sum": (_f_sum, _b_sum),
    "reshape": (_f_reshape, _b_reshape),
    "einsum": (_f_einsum, _b_einsum),
    "log_softmax": (_f_log_softmax, _b_log_softmax),
    "nll": (_f_nll, _b_nll),
    "cheb_basis": (_f_cheb_basis, _b_cheb_basis),
    "gaussian": (_f_gaussian, _b_gaussian),
    "sqerr": (_f_sqerr, _b_sqerr),
}


@dataclass
class Tape:
    """Ordered record of operations with a registry of named parameters."""

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    frozen: set = field(default_factory=set)

    # leaves

    def const(self, value) -> Var:
        return self._leaf("const", value, {})

    def param(self, name, value, trainable=True) -> Var:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        v = self._leaf("param", value, {"name": name})
        self.params[name] = v.idx
        if not trainable:
            self.frozen.add(name)
        return v

    def _leaf(self, op, value, attrs):
        value = np.array(value, dtype=np.float64, copy=True)
        self.nodes.append(Node(op, (), attrs, value, op == "param"))
        return Var(self, len(self.nodes) - 1)

    def _lift(self, x):
        return x if isinstance(x, Var) else self.const(x)

    def _record(self, op, inputs, **attrs) -> Var:
        inputs = tuple(self._lift(x) for x in inputs)
        for x in inputs:
            if x.tape is not self:
                raise TapeError("operands belong to a different tape")
        idx = len(self.nodes)
        need = tuple(self.nodes[x.idx].requires_grad for x in inputs)
        attrs["need"] = need
        node = Node(op, tuple(x.idx for x in inputs), attrs, requires_grad=any(need))
        node.value = self._eval(node, idx)
        self.nodes.append(node)
        return Var(self, idx)

    def _eval(self, node, idx):
        value = _OPS[node.op][0]([self.nodes[i].value for i in node.inputs], node.attrs)
        value = np.asarray(value, dtype=np.float64)
        if np.isnan(value).any():
            raise TapeError(f"NaN produced by node {idx} ({node.op})")
        return value

    # operations

    def matmul(self, a, b):
        return self._record("matmul", (a, b))

    def spmm(self, S, x):
        """Product with a constant sparse (or dense) matrix ``S``."""
        S = sp.csr_matrix(S, dtype=np.float64)
        return self._record("spmm", (x,), S=S, ST=S.T.tocsr())

    def add(self, a, b):
        return self._record("add", (a, b))

    def mul(self, a, b):
        return self._record("mul", (a, b))

    def scale(self, a, c):
        return self._record("scale", (a,), c=float(c))

    def relu(self, a):
        return self._record("relu", (a,))

    def tanh(self, a):
        return self._record("tanh", (a,))

    def exp(self, a):
        return self._record("exp", (a,))

    def sum(self, a):
        return self._record("sum", (a,))

    def reshape(self, a, shape):
        return self._record("reshape", (a,), shape=tuple(shape))

    def einsum(self, spec, a, b):
        """Two-operand ``np.einsum``; every input index must survive in the other operand or the output."""
        ins, out = spec.replace(" ", "").split("->")
        s0, s1 = ins.split(",")
        for s, other in ((s0, s1 + out), (s1, s0 + out)):
            if len(set(s)) != len(s) or not set(s) <= set(other):
                raise TapeError(f"unsupported einsum {spec!r}")
        return self._record("einsum", (a, b), spec=f"{s0},{s1}->{out}")

    def log_softmax(self, a):
        return self._record("log_softmax", (a,))

    def nll(self, logp, labels, rows=None):
        """Mean negative log-likelihood of ``labels`` over ``rows`` (all rows by default)."""
        labels = np.asarray(labels, dtype=np.int64)
        n, c = logp.shape
        rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
        if len(rows) == 0:
            raise TapeError("no rows selected for the loss")
        labels = labels[rows] if len(labels) == n and len(rows) != n else labels
        if labels.shape != rows.shape:
            raise TapeError("labels and rows have different lengths")
        if labels.min() < 0 or labels.max() >= c:
            raise TapeError(f"label out of range [0, {c})")
        return self._record("nll", (logp,), rows=rows, labels=labels)

    def cheb_basis(self, M, scale, x, r):
        """Stack ``(T_0(Mt) x, ..., T_{r-1}(Mt) x)`` with ``Mt = scale * M - I``."""
        if r < 1:
            raise TapeError("Chebyshev order must be at least 1")
        M = sp.csr_matrix(M, dtype=np.float64)
        M.sort_indices()
        M.indptr = M.indptr.astype(np.int32)
        M.indices = M.indices.astype(np.int32)
        return self._record("cheb_basis", (x,), S=M, MT=M.T.tocsr(), scale=float(scale), r=int(r))

    def gaussian(self, U, mu, L):
        """``exp(-|L_j^-1 (u_m - mu_j)|^2 / 2)`` for pseudo-coordinates ``U`` (m x d)."""
        return self._record("gaussian", (mu, L), U=np.asarray(U, dtype=np.float64))

    def sqerr(self, pred, target):
        """Squared Euclidean distance ``|pred - target|^2``."""
        return self._record("sqerr", (pred,), target=np.asarray(target, dtype=np.float64))

    # evaluation

    def backward(self, out: Var, wrt=None):
        """Gradients of the scalar ``out`` per parameter name.

        Frozen parameters get exact zeros.  ``wrt`` restricts the result and
        raises for names never registered on this tape.
        """
        names = list(self.params) if wrt is None else list(wrt)
        for name in names:
            if name not in self.params:
                raise TapeError(f"unregistered parameter {name!r}")
        if out.value.size != 1:
            raise TapeError("backward needs a scalar output")
        grads = {out.idx: np.ones_like(out.value)}
        for idx in range(out.idx, -1, -1):
            g = grads.pop(idx, None)
            node = self.nodes[idx]
            if g is None or not node.inputs or not node.requires_grad:
                if g is not None:
                    grads[idx] = g
                continue
            if np.isnan(g).any():
                raise TapeError(f"NaN gradient reaching node {idx} ({node.op})")
            vals = [self.nodes[i].value for i in node.inputs]
            for i, need, gi in zip(node.inputs, node.attrs["need"], _OPS[node.op][1](g, vals, node.value, node.attrs)):
                if need:
                    grads[i] = grads[i] + gi if i in grads else gi
        result = {}
        for name in names:
            idx = self.params[name]
            if name in self.frozen or idx not in grads:
                result[name] = np.zeros_like(self.nodes[idx].value)
            else:
                result[name] = grads[idx]
        return result

    def replay(self, params=None):
        """Re-evaluate every node from the leaves, optionally with new parameter values.

        Returns the list of node values.  Without ``params`` the values match
        the recorded ones bit for bit.
        """
        params = params or {}
        unknown = set(params) - set(self.params)
        if unknown:
            raise TapeError(f"unregistered parameter(s) {sorted(unknown)}")
        values = []
        for idx, node in enumerate(self.nodes):
            if node.op == "param" and node.attrs["name"] in params:
                new = np.asarray(params[node.attrs["name"]], dtype=np.float64)
                if new.shape != node.value.shape:
                    raise TapeError(f"parameter {node.attrs['name']!r} changed shape")
                node.value = new.copy()
            elif node.inputs:
                node.value = self._eval(node, idx)
            values.append(node.value)
        return values
