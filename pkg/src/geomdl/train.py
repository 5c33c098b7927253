"""Losses, optimisers, gradient checking, models and training pipelines.

Models are described by a parameter dictionary and a ``forward`` that
records the network on a fresh :class:`~geomdl.autodiff.Tape`.  Training is
full batch and deterministic given the seed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from geomdl._backend import BACKEND
from geomdl.autodiff import Tape, TapeError, Var
from geomdl.charting import (
    PatchOperator,
    PseudoCoords,
    geodesic_patch_weights,
    geodesic_polar_coords,
    graph_pseudo_coords,
    heat_patch_weights,
    anisotropic_patch_weights,
    mean_aggregation_matrix,
)
from geomdl.filters import gcn_operator, power_iteration_lmax, save_checkpoint
from geomdl.graph import Graph, build_graph, graph_from_arrays, laplacian_matrix
from geomdl.mesh import TriMesh, cotan_laplacian
from geomdl.spectral import eigendecompose


class DataError(ValueError):
    """Missing or malformed input data."""


class TrainingDiverged(RuntimeError):
    """Loss or an intermediate became NaN."""


# --- losses ----------------------------------------------------------------


def loss_squared(pred, target):
    """``|pred - target|^2`` and its gradient ``2 (pred - target)``."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sum(d * d)), 2.0 * d


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_multinomial(logits, labels):
    """Mean ``-log softmax(logits)[label]`` and its gradient ``(softmax - onehot) / m``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    m, c = logits.shape
    if labels.shape != (m,):
        raise ValueError("one label per row is required")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(m), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    return float(loss), grad / m


# --- optimisers ------------------------------------------------------------


class SGD:
    def __init__(self, lr):
        if not lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        self.lr = lr

    def step(self, params, grads):
        return {k: v - self.lr * grads[k] for k, v in params.items()}


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def make_optimizer(name, lr):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# --- gradient checking -----------------------------------------------------


def gradcheck(loss_fn, params, h=1e-5):
    """Relative error of tape gradients against central differences.

    ``loss_fn(tape, vars)`` records a scalar loss given parameter ``Var``s.
    The step for each entry is ``h * max(1, |p|)``; the error per tensor is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` in the Euclidean norm.
    """

    def run(values):
        tape = Tape()
        vs = {k: tape.param(k, v) for k, v in values.items()}
        out = loss_fn(tape, vs)
        return tape, out

    tape, out = run(params)
    analytic = tape.backward(out)
    errors = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            step = h * max(1.0, abs(p[idx]))
            vals = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
            vals[name][idx] = p[idx] + step
            fp = float(run(vals)[1].value)
            vals[name][idx] = p[idx] - step
            fm = float(run(vals)[1].value)
            num[idx] = (fp - fm) / (2 * step)
        denom = max(np.linalg.norm(analytic[name]), np.linalg.norm(num))
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(analytic[name] - num) / denom)
    return errors


# --- differentiable layers -------------------------------------------------


def apply_xi(tape, x, xi):
    if xi == "relu":
        return tape.relu(x)
    if xi == "tanh":
        return tape.tanh(x)
    if xi == "identity":
        return x
    raise ValueError(f"unknown nonlinearity {xi!r}")


def spectral_layer(tape, F, multipliers, basis, xi="identity"):
    """``xi(Phi (w * (Phi^T A F)))`` with multipliers ``(k, p, q)``."""
    C = tape.const(basis.eigenvectors.T * basis.metric) @ F
    return apply_xi(tape, tape.const(basis.eigenvectors) @ tape.einsum("kp,kpq->kq", C, multipliers), xi)


def spline_layer(tape, F, alpha, B, basis, xi="identity"):
    """Spectral layer whose multipliers are ``B alpha`` with ``alpha`` of shape ``(q_b, p, q)``."""
    W = tape.einsum("kb,bpq->kpq", tape.const(B), alpha)
    return spectral_layer(tape, F, W, basis, xi)


def cheb_layer(tape, F, alpha, L, lam_max, xi="identity"):
    """``xi(sum_j T_j(2 L / lam_max - I) F alpha_j)`` with ``alpha`` of shape ``(r, p, q)``."""
    T = tape.cheb_basis(L, 2.0 / lam_max, F, alpha.shape[0])
    return apply_xi(tape, tape.einsum("jnp,jpq->nq", T, alpha), xi)


def gcn_layer(tape, F, Theta, P, xi="identity"):
    """``xi(P F Theta)`` with ``P`` the renormalised propagation matrix."""
    return apply_xi(tape, tape.spmm(P, F @ Theta), xi)


def gnn_layer(tape, F, theta, bias, W, degrees, scales=(1,), xi="relu"):
    """``xi([W^s F ...; D F] theta + b)``; ``theta`` is split row-wise by input block."""
    p = F.shape[1]
    blocks = []
    for s in scales:
        X = F
        for _ in range(s):
            X = tape.spmm(W, X)
        blocks.append(X)
    blocks.append(tape.spmm(sp.diags(degrees), F))
    out = None
    for b, X in enumerate(blocks):
        sel = np.zeros((theta.shape[0], p))
        sel[b * p : (b + 1) * p] = np.eye(p)
        term = X @ (tape.const(sel.T) @ theta)
        out = term if out is None else out + term
    return apply_xi(tape, out + bias, xi)


def patch_layer(tape, F, G, stacked, J, xi="identity"):
    """``xi(sum_j (V_j A F) G_j)`` with ``stacked`` the ``(J n) x n`` matrix of all ``V_j A``."""
    n = F.shape[0]
    R = tape.reshape(tape.spmm(stacked, F), (J, n, F.shape[1]))
    return apply_xi(tape, tape.einsum("jnp,jpq->nq", R, G), xi)


def stack_patch_operator(op: PatchOperator):
    return sp.vstack(op.matrices()).tocsr()


def monet_layer(tape, F, mu, Lfac, G, coords: PseudoCoords, select, aggregate, xi="identity"):
    """Mean over neighbours of ``sum_j w_j(u(x, x')) (F G_j)(x')`` with Gaussian ``w_j``.

    Channels are mixed before gathering so the per-pair tensor is
    ``m x J x q`` rather than ``m x J x p``.
    """
    J, q = G.shape[0], G.shape[2]
    w = tape.gaussian(coords.coords, mu, Lfac)
    FG = tape.reshape(tape.einsum("np,jpq->njq", F, G), (coords.n, J * q))
    Z = tape.reshape(tape.spmm(select, FG), (len(coords.centers), J, q))
    out = tape.spmm(aggregate, tape.einsum("mj,mjq->mq", w, Z))
    return apply_xi(tape, out, xi)


def l2_penalty(tape, vars_, coeff):
    """``coeff / 2 * sum |w|^2`` over the given variables."""
    total = None
    for v in vars_:
        s = tape.sum(v * v)
        total = s if total is None else total + s
    return tape.scale(total, 0.5 * coeff)


def glorot(rng, shape):
    fan_in, fan_out = shape[-2], shape[-1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


# --- models ------------------------------------------------------------------


class Model:
    """Base class: ``init_params``, ``forward`` and the names that get weight decay."""

    name = "model"
    decay = ()

    def init_params(self, rng) -> dict:
        raise NotImplementedError

    def forward(self, tape, p) -> Var:
        raise NotImplementedError

    def hyper(self) -> dict:
        return {}

    def parameter_count(self, params) -> int:
        return int(sum(np.asarray(v).size for v in params.values()))


class GCNModel(Model):
    name = "gcn"
    decay = ("W0",)

    def __init__(self, graph: Graph, X, hidden, classes):
        self.P = gcn_operator(graph)
        self.X = np.asarray(X, dtype=np.float64)
        self.hidden, self.classes = hidden, classes

    def init_params(self, rng):
        f = self.X.shape[1]
        return {
            "W0": glorot(rng, (f, self.hidden)),
            "b0": np.zeros(self.hidden),
            "W1": glorot(rng, (self.hidden, self.classes)),
            "b1": np.zeros(self.classes),
        }

    def forward(self, tape, p):
        X = tape.const(self.X)
        H = tape.relu(tape.spmm(self.P, X @ p["W0"]) + p["b0"])
        return tape.spmm(self.P, H @ p["W1"]) + p["b1"]

    def hyper(self):
        return {"hidden": self.hidden, "classes": self.classes}


class ChebModel(Model):
    name = "cheb"
    decay = ("A0",)

    def __init__(self, graph: Graph, X, hidden, classes, order=3):
        self.L = laplacian_matrix(graph, "sym_normalized")
        self.lam_max = power_iteration_lmax(self.L)
        self.X = np.asarray(X, dtype=np.float64)
        self.hidden, self.classes, self.order = hidden, classes, order

    def init_params(self, rng):
        f = self.X.shape[1]
        return {
            "A0": glorot(rng, (self.order, f, self.hidden)),
            "b0": np.zeros(self.hidden),
            "A1": glorot(rng, (self.order, self.hidden, self.classes)),
            "b1": np.zeros(self.classes),
        }

    def forward(self, tape, p):
        X = tape.const(self.X)
        H = tape.relu(cheb_layer(tape, X, p["A0"], self.L, self.lam_max) + p["b0"])
        return cheb_layer(tape, H, p["A1"], self.L, self.lam_max) + p["b1"]

    def hyper(self):
        return {"hidden": self.hidden, "classes": self.classes, "order": self.order, "lam_max": self.lam_max}


class MoNetModel(Model):
    """Two Gaussian-mixture layers over degree pseudo-coordinates."""

    name = "monet"
    decay = ("G0",)

    def __init__(self, graph: Graph, X, hidden, classes, kernels=3):
        self.coords = graph_pseudo_coords(graph)
        m = len(self.coords.centers)
        self.select = sp.csr_matrix((np.ones(m), (np.arange(m), self.coords.neighbors)), shape=(m, graph.n))
        self.aggregate = mean_aggregation_matrix(self.coords)
        self.X = np.asarray(X, dtype=np.float64)
        self.hidden, self.classes, self.J = hidden, classes, kernels

    def init_params(self, rng):
        f = self.X.shape[1]
        params = {}
        for layer, (p, q) in enumerate([(f, self.hidden), (self.hidden, self.classes)]):
            params[f"mu{layer}"] = rng.uniform(0.0, 1.0, (self.J, 2))
            params[f"L{layer}"] = np.tile(np.eye(2) * 0.5, (self.J, 1, 1))
            params[f"G{layer}"] = glorot(rng, (self.J, p, q))
            params[f"b{layer}"] = np.zeros(q)
        return params

    def forward(self, tape, p):
        X = tape.const(self.X)
        args = (self.coords, self.select, self.aggregate)
        H = tape.relu(monet_layer(tape, X, p["mu0"], p["L0"], p["G0"], *args) + p["b0"])
        return monet_layer(tape, H, p["mu1"], p["L1"], p["G1"], *args) + p["b1"]

    def hyper(self):
        return {"hidden": self.hidden, "classes": self.classes, "kernels": self.J, "pseudo_coords": "degree^-1/2 with self loops"}


def masked_lower(params):
    """Keep covariance factors lower triangular after an optimiser step."""
    return {k: (np.tril(v) if k.startswith("L") and v.ndim == 3 else v) for k, v in params.items()}


# --- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train, self.val, self.test = (np.asarray(x, dtype=np.int64) for x in (self.train, self.val, self.test))
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train/val/test masks must be disjoint")


@dataclass
class TrainResult:
    params: dict
    history: list
    config: TrainConfig
    model: str
    seconds: float = 0.0
    stopped_epoch: int | None = None

    @property
    def final(self) -> dict:
        return self.history[-1] if self.history else {}


METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "test_acc")


def _accuracy(logits, labels, rows):
    if len(rows) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits[rows], axis=1) == labels[rows]))


def _nll(logits, labels, rows):
    if len(rows) == 0:
        return float("nan")
    return loss_multinomial(logits[rows], labels[rows])[0]


def train(model: Model, labels, split: Split, config: TrainConfig) -> TrainResult:
    """Full-batch training with cross-entropy on ``split.train`` plus weight decay.

    Metrics of each epoch are measured on the parameters entering that
    epoch's update.  ``patience`` enables early stopping once the validation
    loss has not improved for that many epochs.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    params = model.init_params(rng)
    opt = make_optimizer(config.optimizer, config.lr)
    history = []
    best, since = np.inf, 0
    stopped = None
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        tape = Tape()
        vs = {k: tape.param(k, v) for k, v in params.items()}
        try:
            logits = model.forward(tape, vs)
            loss = tape.nll(tape.log_softmax(logits), labels, rows=split.train)
            if config.weight_decay and model.decay:
                loss = loss + l2_penalty(tape, [vs[k] for k in model.decay], config.weight_decay)
            grads = tape.backward(loss)
        except TapeError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        L = logits.value
        row = {
            "epoch": epoch,
            "train_loss": float(loss.value),
            "val_loss": _nll(L, labels, split.val),
            "val_acc": _accuracy(L, labels, split.val),
            "test_acc": _accuracy(L, labels, split.test),
        }
        if not np.isfinite(row["train_loss"]):
            raise TrainingDiverged(f"epoch {epoch}: training loss is {row['train_loss']}")
        history.append(row)
        params = masked_lower(opt.step(params, grads))
        if config.patience is not None and len(split.val):
            if row["val_loss"] < best:
                best, since = row["val_loss"], 0
            else:
                since += 1
                if since >= config.patience:
                    stopped = epoch
                    break
    # final evaluation with the trained parameters
    tape = Tape()
    logits = model.forward(tape, {k: tape.param(k, v) for k, v in params.items()}).value
    history.append(
        {
            "epoch": len(history),
            "train_loss": _nll(logits, labels, split.train),
            "val_loss": _nll(logits, labels, split.val),
            "val_acc": _accuracy(logits, labels, split.val),
            "test_acc": _accuracy(logits, labels, split.test),
        }
    )
    return TrainResult(params, history, config, model.name, time.perf_counter() - t0, stopped)


def predict(model: Model, params) -> np.ndarray:
    tape = Tape()
    return model.forward(tape, {k: tape.param(k, v) for k, v in params.items()}).value


# --- provenance -------------------------------------------------------------


def content_id(data: bytes) -> str:
    """Git-style blob id: ``sha1("blob <len>\\0" + data)``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in METRIC_COLUMNS})


def write_run(result: TrainResult, model: Model, out_dir, inputs=(), extra=None):
    """Metrics CSV, checkpoint and run manifest into ``out_dir``; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    metrics = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(result.history, metrics)
    hyper = {"model": model.name, **model.hyper(), "parameters": model.parameter_count(result.params)}
    ckpt_json, ckpt_npz = save_checkpoint(os.path.join(out_dir, "checkpoint"), result.params, hyper)
    with open(metrics, "rb") as fh:
        metrics_id = content_id(fh.read())
    with open(ckpt_npz, "rb") as fh:
        ckpt_id = content_id(fh.read())
    manifest = {
        "config": asdict(result.config),
        "seed": result.config.seed,
        "model": hyper,
        "data": {str(p): file_digest(p) for p in inputs},
        "outputs": {"metrics.csv": metrics_id, "checkpoint.npz": ckpt_id},
        "final": result.final,
        "seconds": result.seconds,
        "stopped_epoch": result.stopped_epoch,
        "backend": BACKEND,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "dropout": None,
        **(extra or {}),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return [metrics, ckpt_json, ckpt_npz, path]


# --- CORA ------------------------------------------------------------------------


@dataclass
class CoraDataset:
    ids: list
    features: np.ndarray
    labels: np.ndarray
    classes: list
    graph: Graph
    raw_citations: int
    files: tuple = ()

    @property
    def n(self) -> int:
        return len(self.ids)


def find_cora_files(root):
    """Locate ``*.content`` and ``*.cites`` in ``root`` (or ``root/cora``)."""
    root = str(root)
    for d in (root, os.path.join(root, "cora")):
        content = os.path.join(d, "cora.content")
        cites = os.path.join(d, "cora.cites")
        if os.path.isfile(content) and os.path.isfile(cites):
            return content, cites
    raise DataError(f"no cora.content / cora.cites found under {root!r}")


def load_cora(root, feature_dim=None) -> CoraDataset:
    """Parse the citation dataset.

    ``.content`` lines are ``id f_1 ... f_m label``; ``.cites`` lines are
    ``cited citing``.  Ids become dense indices in order of first
    appearance in ``.content``; citations are merged into undirected
    unit-weight edges.
    """
    content, cites = find_cora_files(root)
    ids, rows, names = [], [], []
    index = {}
    with open(content) as fh:
        for ln, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) < 3:
                raise DataError(f"{content}:{ln}: expected id, features and label")
            feats = tok[1:-1]
            if feature_dim is None:
                feature_dim = len(feats)
            if len(feats) != feature_dim:
                raise DataError(f"{content}:{ln}: {len(feats)} features, expected {feature_dim}")
            try:
                row = np.array(feats, dtype=np.float64)
            except ValueError:
                raise DataError(f"{content}:{ln}: non-numeric feature") from None
            if tok[0] in index:
                raise DataError(f"{content}:{ln}: duplicate paper id {tok[0]}")
            index[tok[0]] = len(ids)
            ids.append(tok[0])
            rows.append(row)
            names.append(tok[-1])
    if not ids:
        raise DataError(f"{content}: no papers")
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names], dtype=np.int64)
    X = (np.vstack(rows) > 0).astype(np.float64)
    pairs = set()
    raw = 0
    with open(cites) as fh:
        for ln, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 2:
                raise DataError(f"{cites}:{ln}: expected two paper ids")
            raw += 1
            if tok[0] not in index or tok[1] not in index:
                raise DataError(f"{cites}:{ln}: unknown paper id")
            a, b = index[tok[0]], index[tok[1]]
            if a != b:
                pairs.add((min(a, b), max(a, b)))
    e = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    g = graph_from_arrays(len(ids), None, e[:, 0], e[:, 1], np.ones(len(e)))
    return CoraDataset(ids, X, labels, classes, g, raw, (content, cites))


def row_normalize(X):
    s = X.sum(axis=1, keepdims=True)
    return X / np.where(s > 0, s, 1.0)


def standard_split(labels, per_class=20, n_val=500, n_test=1000) -> Split:
    """First ``per_class`` vertices of each class (ascending id) for training,
    then the next ``n_val`` and ``n_test`` remaining ids for validation and test."""
    labels = np.asarray(labels)
    train = []
    for c in np.unique(labels):
        train.extend(np.flatnonzero(labels == c)[:per_class].tolist())
    train = np.sort(np.array(train, dtype=np.int64))
    rest = np.setdiff1d(np.arange(len(labels)), train)
    return Split(train, rest[:n_val], rest[n_val : n_val + n_test])


def load_split_files(train_path, val_path, test_path) -> Split:
    """Split from three text files of 0-based vertex indices, one per line."""
    def read(p):
        try:
            return np.loadtxt(p, dtype=np.int64, ndmin=1, comments="#")
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read mask file {p!r}: {exc}") from None

    return Split(read(train_path), read(val_path), read(test_path))


def write_synthetic_cora(root, n=700, classes=7, feature_dim=200, p_in=0.012, p_out=0.0015, words=12, seed=0):
    """Write a planted-partition citation dataset in the CORA file format.

    Labels follow a stochastic block model; each paper's bag of words mixes
    class-specific and shared vocabulary.  Every vertex gets at least one
    citation.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    labels = np.sort(rng.integers(0, classes, n))
    labels = rng.permutation(labels)
    vocab = np.array_split(np.arange(feature_dim), classes + 1)
    ids = rng.choice(np.arange(10_000, 10_000 + 20 * n), size=n, replace=False)
    names = [f"Topic_{c}" for c in range(classes)]
    with open(os.path.join(root, "cora.content"), "w") as fh:
        for i in range(n):
            x = np.zeros(feature_dim, dtype=int)
            own = vocab[labels[i]]
            shared = vocab[-1]
            k_own = rng.binomial(words, 0.35)
            x[rng.choice(own, size=min(k_own, len(own)), replace=False)] = 1
            x[rng.choice(shared, size=min(words - k_own, len(shared)), replace=False)] = 1
            x[rng.integers(0, feature_dim, 2)] = 1
            fh.write(f"{ids[i]}\t" + "\t".join(map(str, x)) + f"\t{names[labels[i]]}\n")
    same = labels[:, None] == labels[None, :]
    P = np.where(same, p_in, p_out)
    U = rng.random((n, n))
    A = np.triu(U < P, 1)
    for i in np.flatnonzero(~(A | A.T).any(axis=1)):
        j = rng.choice(np.flatnonzero(same[i] & (np.arange(n) != i)))
        A[min(i, j), max(i, j)] = True
    with open(os.path.join(root, "cora.cites"), "w") as fh:
        for i, j in zip(*np.nonzero(A)):
            a, b = (i, j) if rng.random() < 0.5 else (j, i)
            fh.write(f"{ids[a]}\t{ids[b]}\n")
    return root


CORA_DEFAULTS = {"hidden": 16, "optimizer": "adam", "lr": 0.01, "weight_decay": 5e-4, "epochs": 200}


def build_cora_model(kind, data: CoraDataset, hidden=16, order=3, kernels=3):
    X = row_normalize(data.features)
    c = len(data.classes)
    if kind == "gcn":
        return GCNModel(data.graph, X, hidden, c)
    if kind == "cheb":
        return ChebModel(data.graph, X, hidden, c, order=order)
    if kind == "monet":
        return MoNetModel(data.graph, X, hidden, c, kernels=kernels)
    raise ValueError(f"unknown model {kind!r}")


def run_cora(kind, root, config: TrainConfig | None = None, split: Split | None = None, out_dir=None, **model_kw):
    """Load, split, train and (optionally) write the run to ``out_dir``."""
    config = config or TrainConfig()
    data = load_cora(root)
    split = split or standard_split(data.labels)
    model = build_cora_model(kind, data, **model_kw)
    result = train(model, data.labels, split, config)
    if out_dir is not None:
        write_run(
            result,
            model,
            out_dir,
            inputs=data.files,
            extra={"dataset": {"n": data.n, "edges": data.graph.num_edges, "citations": data.raw_citations,
                               "features": data.features.shape[1], "classes": len(data.classes),
                               "split": {"train": len(split.train), "val": len(split.val), "test": len(split.test)},
                               "feature_preprocessing": "binarized, row-normalized"}},
        )
    return result, data, split


# --- mesh correspondence -----------------------------------------------------------


def hks_times(eigenvalues, count=3):
    """``count`` times log-spaced between ``4 ln 10 / lambda_max`` and ``4 ln 10 / lambda_1``."""
    lam = np.asarray(eigenvalues)
    positive = lam[lam > 1e-12]
    if len(positive) == 0:
        raise ValueError("no positive eigenvalue for heat kernel signature times")
    c = 4.0 * np.log(10.0)
    return np.geomspace(c / positive[-1], c / positive[0], count)


def correspondence_features(mesh: TriMesh, k=None, scales=3):
    """Standardised intrinsic per-vertex features.

    Columns: vertex area, mean incident edge length and the heat kernel
    diagonal at ``scales`` diffusion times.  All are functions of edge
    lengths alone.
    """
    g = cotan_laplacian(mesh)
    basis = eigendecompose(g, mesh.n if k is None else min(k, mesh.n))
    times = hks_times(basis.eigenvalues, scales)
    i, j = mesh.edges.T
    l = mesh.edge_lengths
    deg = np.bincount(np.r_[i, j], minlength=mesh.n)
    mean_len = np.bincount(np.r_[i, j], weights=np.r_[l, l], minlength=mesh.n) / deg
    hks = [(basis.eigenvectors**2) @ np.exp(-t * basis.eigenvalues) for t in times]
    F = np.column_stack([mesh.vertex_areas, mean_len] + hks)
    sd = F.std(axis=0)
    return (F - F.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def correspondence_operator(mesh: TriMesh, kind="geodesic_radial", rings=4, k=None):
    """Intrinsic patch operator for the correspondence network."""
    h = float(np.mean(mesh.edge_lengths))
    if kind == "geodesic_radial":
        coords = geodesic_polar_coords(mesh, radius=(rings - 0.5) * h)
        return geodesic_patch_weights(coords, h * np.arange(rings), None, sigma_rho=0.5 * h, metric=mesh.vertex_areas)
    if kind == "heat":
        times = h**2 * np.geomspace(0.25, 4.0, rings)
        return heat_patch_weights(mesh, times, k=k, normalize=True)
    if kind == "geodesic":
        coords = geodesic_polar_coords(mesh, radius=(rings - 0.5) * h)
        return geodesic_patch_weights(coords, h * np.arange(1, rings), np.linspace(0, 2 * np.pi, 4, endpoint=False),
                                      sigma_rho=0.5 * h, sigma_theta=np.pi / 4, metric=mesh.vertex_areas)
    if kind == "anisotropic":
        times = h**2 * np.geomspace(0.5, 4.0, max(rings // 2, 1))
        return anisotropic_patch_weights(mesh, 4.0, [0.0, np.pi / 2], times, k=k, normalize=True)
    raise ValueError(f"unknown patch operator {kind!r}")


class CorrespondenceModel(Model):
    """Stack of intrinsic convolutions followed by a per-vertex softmax over reference vertices."""

    name = "correspondence"
    decay = ()

    def __init__(self, op: PatchOperator, X, n_ref, hidden=48, layers=2):
        self.stacked = stack_patch_operator(op)
        self.J = op.J
        self.X = np.asarray(X, dtype=np.float64)
        if self.X.shape[0] != op.n:
            raise ValueError("features and patch operator disagree on the vertex count")
        self.n_ref, self.hidden, self.layers = n_ref, hidden, layers

    def init_params(self, rng):
        params = {}
        p = self.X.shape[1]
        for l in range(self.layers):
            params[f"G{l}"] = glorot(rng, (self.J, p, self.hidden))
            params[f"b{l}"] = np.zeros(self.hidden)
            p = self.hidden
        params["Wh"] = glorot(rng, (p, self.n_ref))
        params["bh"] = np.zeros(self.n_ref)
        return params

    def forward(self, tape, p):
        H = tape.const(self.X)
        for l in range(self.layers):
            H = tape.tanh(patch_layer(tape, H, p[f"G{l}"], self.stacked, self.J) + p[f"b{l}"])
        return H @ p["Wh"] + p["bh"]

    def hyper(self):
        return {"J": self.J, "hidden": self.hidden, "layers": self.layers, "n_ref": self.n_ref}


@dataclass
class CorrespondenceResult:
    probabilities: np.ndarray
    accuracy: float
    train: TrainResult
    model: CorrespondenceModel = field(repr=False)


def correspondence_pipeline(query: TriMesh, reference: TriMesh, targets=None, config: TrainConfig | None = None,
                            operator="geodesic_radial", features=None, hidden=48, layers=2) -> CorrespondenceResult:
    """Train ``query`` vertex -> ``reference`` vertex classification.

    ``targets[i]`` is the reference vertex matched to query vertex ``i``
    (identity by default, which requires equal vertex counts).  Returns the
    per-vertex distributions over reference vertices and top-1 accuracy.
    """
    if targets is None:
        if query.n != reference.n:
            raise ValueError("identity correspondence needs meshes with equal vertex counts")
        targets = np.arange(query.n)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (query.n,) or targets.min() < 0 or targets.max() >= reference.n:
        raise ValueError("targets must map every query vertex to a reference vertex")
    config = config or TrainConfig(lr=0.01, weight_decay=0.0, epochs=300)
    X = correspondence_features(query) if features is None else features
    op = correspondence_operator(query, operator)
    model = CorrespondenceModel(op, X, reference.n, hidden=hidden, layers=layers)
    split = Split(np.arange(query.n), np.zeros(0), np.zeros(0))
    result = train(model, targets, split, config)
    P = softmax(predict(model, result.params))
    acc = float(np.mean(np.argmax(P, axis=1) == targets))
    return CorrespondenceResult(P, acc, result, model)


# --- gradient-check instances ------------------------------------------------------


def _random_graph(rng, n, p=0.3):
    edges = [(i, j, rng.uniform(0.5, 2.0)) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    edges += [(i, i + 1, 1.0) for i in range(n - 1) if not any(e[0] == i and e[1] == i + 1 for e in edges)]
    return build_graph(n, rng.uniform(0.5, 2.0, n), edges)


def gradcheck_cases():
    """Named builders ``rng -> (loss_fn, params)`` covering every trainable operation."""

    def spectral(rng):
        g = _random_graph(rng, 8)
        basis = eigendecompose(g, 6)
        X, Y = rng.standard_normal((8, 2)), rng.standard_normal((8, 3))
        return (lambda t, v: t.sqerr(spectral_layer(t, t.const(X), v["w"], basis, "tanh"), Y)), {
            "w": rng.standard_normal((6, 2, 3))}

    def spline(rng):
        g = _random_graph(rng, 9)
        basis = eigendecompose(g, 9)
        from geomdl.filters import spline_basis

        B = spline_basis(basis.eigenvalues, 5)
        X, y = rng.standard_normal((9, 2)), rng.integers(0, 2, 9)
        return (lambda t, v: t.nll(t.log_softmax(spline_layer(t, t.const(X), v["alpha"], B, basis)), y)), {
            "alpha": rng.standard_normal((5, 2, 2))}

    def cheb(rng):
        g = _random_graph(rng, 10)
        L = laplacian_matrix(g, "unnormalized")
        lam = power_iteration_lmax(L)
        X, Y = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
        r = int(rng.integers(1, 6))
        return (lambda t, v: t.sqerr(cheb_layer(t, t.const(X), v["alpha"], L, lam, "tanh"), Y)), {
            "alpha": rng.standard_normal((r, 2, 2))}

    def gcn(rng):
        g = _random_graph(rng, 10)
        P = gcn_operator(g)
        X, y = rng.standard_normal((10, 3)), rng.integers(0, 3, 10)
        return (lambda t, v: t.nll(t.log_softmax(gcn_layer(t, t.const(X), v["theta"], P, "tanh")), y)), {
            "theta": rng.standard_normal((3, 3))}

    def gnn(rng):
        g = _random_graph(rng, 9)
        X, Y = rng.standard_normal((9, 2)), rng.standard_normal((9, 2))
        return (lambda t, v: t.sqerr(gnn_layer(t, t.const(X), v["theta"], v["b"], g.weights, g.degrees, (1, 2), "tanh"), Y)), {
            "theta": rng.standard_normal((6, 2)) * 0.3, "b": rng.standard_normal(2)}

    def monet(rng):
        g = _random_graph(rng, 8)
        coords = graph_pseudo_coords(g)
        m = len(coords.centers)
        S = sp.csr_matrix((np.ones(m), (np.arange(m), coords.neighbors)), shape=(m, g.n))
        agg = mean_aggregation_matrix(coords)
        X, Y = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
        Lf = np.tril(rng.uniform(-0.3, 0.3, (2, 2, 2)))
        Lf[:, [0, 1], [0, 1]] = rng.uniform(0.4, 1.0, (2, 2))
        return (lambda t, v: t.sqerr(monet_layer(t, t.const(X), v["mu"], v["L"], v["g"], coords, S, agg, "tanh"), Y)), {
            "mu": rng.uniform(0.2, 1.0, (2, 2)), "L": Lf, "g": rng.standard_normal((2, 2, 2))}

    def dense_relu(rng):
        y = rng.integers(0, 4, 7)
        # relu is not differentiable at 0: resample until every pre-activation is clear of the kink
        while True:
            X, W0 = rng.standard_normal((7, 3)), rng.standard_normal((3, 5))
            if np.min(np.abs(X @ W0)) > 1e-3:
                break
        return (lambda t, v: t.nll(t.log_softmax(t.relu(t.const(X) @ v["W0"]) @ v["W1"]), y)), {
            "W0": W0, "W1": rng.standard_normal((5, 4))}

    def patch(rng):
        from geomdl.mesh import grid_mesh

        mesh = grid_mesh(4, 4, jitter=0.2, seed=int(rng.integers(1 << 30)))
        op = correspondence_operator(mesh, "geodesic_radial", rings=3)
        S = stack_patch_operator(op)
        X, y = rng.standard_normal((16, 2)), rng.integers(0, 3, 16)
        return (lambda t, v: t.nll(t.log_softmax(patch_layer(t, t.const(X), v["g"], S, op.J, "tanh")), y)), {
            "g": rng.standard_normal((op.J, 2, 3))}

    return {
        "spectral_multipliers": spectral,
        "spline_alpha": spline,
        "cheb_alpha": cheb,
        "gcn_theta": gcn,
        "gnn_theta": gnn,
        "monet_mu_sigma_g": monet,
        "dense_relu_softmax": dense_relu,
        "patch_template": patch,
    }


def run_gradchecks(instances=20, seed=0, names=None):
    """Worst relative error per case over ``instances`` random instances."""
    cases = gradcheck_cases()
    rng = np.random.default_rng(seed)
    worst = {}
    for name in names or cases:
        errs = []
        for _ in range(instances):
            fn, params = cases[name](rng)
            errs.extend(gradcheck(fn, params).values())
        worst[name] = max(errs)
    return worst
