"""``geomdl`` command-line entry point.

Every command writes CSV files into ``--out-dir`` and a JSON provenance
sidecar ``<file>.prov.json`` next to each output.  Exit status: 0 on
success, 1 on runtime or data errors, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from geomdl import __version__
from geomdl._backend import BACKEND


class UsageError(Exception):
    """Arguments are well formed but inconsistent with the input."""


# --- output helpers ------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and writes outputs with provenance sidecars."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = {}
        self.outputs = []
        os.makedirs(args.out_dir, exist_ok=True)

    def add_input(self, spec, path=None):
        if path and os.path.isfile(path):
            self.inputs[spec] = _sha256(path)
            side = path + ".vw"
            if os.path.isfile(side):
                self.inputs[side] = _sha256(side)
        else:
            self.inputs[spec] = "builtin"

    def path(self, name):
        return os.path.join(self.args.out_dir, name)

    def write_csv(self, name, header, rows):
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.seal(p)
        return p

    def seal(self, p, extra=None):
        """Write the provenance sidecar for an existing output file."""
        prov = {
            "command": self.args.command,
            "argv": self.argv,
            "seed": self.args.seed,
            "inputs": self.inputs,
            "output_sha256": _sha256(p),
            "version": __version__,
            "backend": BACKEND,
            "numpy": np.__version__,
        }
        if extra:
            prov.update(extra)
        with open(p + ".prov.json", "w") as fh:
            json.dump(prov, fh, indent=2, sort_keys=True, default=str)
        self.outputs.append(p)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _domain(run, spec):
    from geomdl.domains import load_domain

    d = load_domain(spec)
    run.add_input(spec, d.source)
    return d


def _signal(run, args, n):
    """Input signal: ``--signal`` file, a delta at ``--source``, or seeded noise."""
    if getattr(args, "signal", None):
        f = np.loadtxt(args.signal, ndmin=1, comments="#")
        run.add_input(args.signal, args.signal)
        if f.shape != (n,):
            raise UsageError(f"signal has {len(f)} values, domain has {n} vertices")
        return f
    if getattr(args, "source", None) is not None:
        _check_vertex(args.source, n)
        f = np.zeros(n)
        f[args.source] = 1.0
        return f
    return np.random.default_rng(args.seed).standard_normal(n)


def _check_vertex(v, n):
    if not 0 <= v < n:
        raise UsageError(f"vertex {v} out of range [0, {n})")


def _basis(d, k, normalization="weighted"):
    from geomdl.spectral import eigendecompose

    k = d.n if k is None else k
    if not 1 <= k <= d.n:
        raise UsageError(f"k={k} must lie in [1, n={d.n}]")
    return eigendecompose(d.graph, k, normalization=normalization)


# --- commands ----------------------------------------------------------------------


def cmd_eigs(run, args):
    from geomdl.spectral import save_eigenbasis

    d = _domain(run, args.domain)
    b = _basis(d, args.k, args.normalization)
    run.write_csv("eigenvalues.csv", ["index", "lambda"], enumerate(b.eigenvalues))
    p = run.path("eigenbasis.csv")
    save_eigenbasis(b, p, fmt="csv")
    run.seal(p, {"normalization": args.normalization, "k": b.k, "n": b.n})
    run.seal(p + ".json")


def cmd_heat(run, args):
    from geomdl.graph import dirichlet_energy
    from geomdl.spectral import heat_apply, heat_operator

    d = _domain(run, args.domain)
    _check_vertex(args.source, d.n)
    b = _basis(d, args.k, args.normalization)
    delta = np.zeros(d.n)
    delta[args.source] = 1.0
    cols = [heat_apply(delta, b, t) for t in args.t]
    run.write_csv("heat.csv", ["vertex"] + [f"t={t!r}" for t in args.t],
                  ([i] + [c[i] for c in cols] for i in range(d.n)))
    energy = [dirichlet_energy(c, d.graph) for c in cols]
    rows_dev = [float(np.abs(heat_operator(b, t).sum(axis=1) - 1.0).max()) for t in args.t]
    run.write_csv("heat_energy.csv", ["t", "dirichlet_energy", "operator_row_sum_deviation"],
                  zip(args.t, energy, rows_dev))


def cmd_diffdist(run, args):
    from geomdl.spectral import diffusion_distance_matrix

    d = _domain(run, args.domain)
    src = np.arange(d.n) if not args.sources else np.array(args.sources)
    for s in src:
        _check_vertex(int(s), d.n)
    b = _basis(d, args.k)
    D = diffusion_distance_matrix(b, args.t, src)
    run.write_csv("diffdist.csv", ["source"] + [str(s) for s in src], ([s] + list(row) for s, row in zip(src, D)))


def _window(b, args):
    return np.exp(-args.width * b.eigenvalues)


def cmd_wft(run, args):
    from geomdl.spectral import wft

    d = _domain(run, args.domain)
    b = _basis(d, args.k)
    f = _signal(run, args, d.n)
    S = wft(f, _window(b, args), b)
    run.write_csv("wft.csv", ["vertex"] + [f"j={j}" for j in range(b.k)], ([i] + list(S[i]) for i in range(d.n)))


def cmd_filter(run, args):
    from geomdl.filters import cheb_filter_apply, cheb_params_for
    from geomdl.spectral import heat_apply, spectral_convolve

    d = _domain(run, args.domain)
    f = _signal(run, args, d.n)
    if args.kind == "cheb":
        if not args.alpha:
            raise UsageError("--alpha is required for Chebyshev filters")
        out = cheb_filter_apply(f, cheb_params_for(d.graph, args.alpha), d.graph)
    elif args.kind == "heat":
        out = heat_apply(f, _basis(d, args.k), args.t)
    else:
        b = _basis(d, args.k)
        if args.ghat:
            g = np.asarray(args.ghat, dtype=float)
            if len(g) != b.k:
                raise UsageError(f"--ghat has {len(g)} coefficients, basis has k={b.k}")
        else:
            g = np.exp(-args.t * b.eigenvalues)
        out = spectral_convolve(f, g, b)
    run.write_csv("filtered.csv", ["vertex", "input", "output"], zip(range(d.n), f, out))


def cmd_coarsen(run, args):
    from geomdl.graph import coarsen

    d = _domain(run, args.domain)
    g = d.graph
    labels = [np.arange(g.n)]
    sizes = [g.n]
    for _ in range(args.levels):
        g, cmap = coarsen(g, args.ratio)
        labels.append(cmap.labels[labels[-1]])
        sizes.append(g.n)
    run.write_csv("coarsen.csv", ["vertex"] + [f"level{l}" for l in range(1, len(labels))],
                  ([i] + [lab[i] for lab in labels[1:]] for i in range(d.n)))
    run.write_csv("coarsen_sizes.csv", ["level", "vertices"], enumerate(sizes))


def basis_demo(mesh_a, mesh_b, f, ghat=None, order=4, k=None, perm=None, seed=0):
    """Carry one filter from mesh A to mesh B and compare outputs.

    The spectral filter is a free multiplier vector ``ghat`` indexed by
    eigenpair (seeded Gaussian by default), reused verbatim with B's own
    eigenbasis.  The Chebyshev filter for the same task is the order-``order``
    least-squares fit of ``ghat`` over A's eigenvalues, re-evaluated on B's
    Laplacian.  With ``perm``, B is a relabelled copy and outputs are
    compared after undoing the relabelling.  Discrepancy is
    ``|out_A - out_B| / |out_A|``.
    """
    from geomdl.filters import ChebParams, cheb_filter_apply, chebyshev_t, power_iteration_lmax
    from geomdl.graph import laplacian_matrix
    from geomdl.mesh import cotan_laplacian
    from geomdl.spectral import eigendecompose, spectral_convolve

    ga, gb = cotan_laplacian(mesh_a), cotan_laplacian(mesh_b)
    k = mesh_a.n if k is None else k
    ba, bb = eigendecompose(ga, k), eigendecompose(gb, k)
    if ghat is None:
        ghat = np.random.default_rng(seed).standard_normal(k)
    ghat = np.asarray(ghat, dtype=np.float64)
    lam_max = power_iteration_lmax(laplacian_matrix(ga))
    x = 2.0 * ba.eigenvalues / lam_max - 1.0
    V = np.column_stack([chebyshev_t(j, x) for j in range(order)])
    alpha = np.linalg.lstsq(V, ghat, rcond=None)[0]
    fb = f if perm is None else f[perm]
    spec_a, spec_b = spectral_convolve(f, ghat, ba), spectral_convolve(fb, ghat, bb)
    params = ChebParams(alpha, lam_max)
    cheb_a, cheb_b = cheb_filter_apply(f, params, ga), cheb_filter_apply(fb, params, gb)
    if perm is not None:
        inv = np.argsort(perm)
        spec_b, cheb_b = spec_b[inv], cheb_b[inv]

    def disc(a, b):
        return float(np.linalg.norm(a - b) / np.linalg.norm(a))

    return {
        "spectral_discrepancy": disc(spec_a, spec_b),
        "cheb_discrepancy": disc(cheb_a, cheb_b),
        "alpha": alpha,
        "ghat": ghat,
        "outputs": (spec_a, spec_b, cheb_a, cheb_b),
    }


def cmd_basis_demo(run, args):
    from geomdl.mesh import TriMesh

    a = _domain(run, args.mesh_a)
    if a.mesh is None:
        raise UsageError("basis-demo needs mesh domains")
    if args.mesh_b:
        b = _domain(run, args.mesh_b)
        if b.mesh is None or b.n != a.n:
            raise UsageError("mesh B must be a mesh with the same vertex count as A")
        mesh_b = b.mesh
    else:
        rng = np.random.default_rng(args.seed)
        scale = args.jitter * float(np.mean(a.mesh.edge_lengths))
        mesh_b = TriMesh(a.mesh.vertices + scale * rng.standard_normal(a.mesh.vertices.shape), a.mesh.faces)
    perm = None
    if args.permute:
        perm = np.random.default_rng(args.seed + 1).permutation(a.n)
        mesh_b = mesh_b.permuted(perm)
    f = _signal(run, args, a.n)
    k = a.n if args.k is None else args.k
    if not 1 <= k <= a.n:
        raise UsageError(f"k={k} must lie in [1, n={a.n}]")
    if args.ghat and len(args.ghat) != k:
        raise UsageError(f"--ghat has {len(args.ghat)} coefficients, basis has k={k}")
    res = basis_demo(a.mesh, mesh_b, f, args.ghat, order=args.order, k=args.k, perm=perm, seed=args.seed)
    sa, sb, ca, cb = res["outputs"]
    run.write_csv("basis_demo_A.csv", ["vertex", "input", "spectral", "cheb"], zip(range(a.n), f, sa, ca))
    run.write_csv("basis_demo_B.csv", ["vertex", "input", "spectral", "cheb"], zip(range(a.n), f, sb, cb))
    run.write_csv("basis_demo_score.csv", ["method", "discrepancy"],
                  [("spectral", res["spectral_discrepancy"]), ("cheb", res["cheb_discrepancy"])])


def _train_config(args):
    from geomdl.train import TrainConfig

    return TrainConfig(args.optimizer, args.lr, args.weight_decay, args.epochs, args.seed, args.patience)


def _cora_command(kind):
    def cmd(run, args):
        from geomdl.train import load_split_files, run_cora

        root = args.cora_dir or os.environ.get("GEOMDL_CORA_DIR")
        if not root:
            raise UsageError("no dataset directory: pass --cora-dir or set GEOMDL_CORA_DIR")
        split = load_split_files(*args.split_files) if args.split_files else None
        kw = {"hidden": args.hidden}
        if kind == "cheb":
            kw["order"] = args.order
        if kind == "monet":
            kw["kernels"] = args.kernels
        result, data, split = run_cora(kind, root, _train_config(args), split, out_dir=args.out_dir, **kw)
        for p in data.files:
            run.add_input(p, p)
        for name in ("metrics.csv", "checkpoint.json", "checkpoint.npz", "manifest.json"):
            run.seal(run.path(name))
        print(f"{kind}: test accuracy {result.final['test_acc']:.4f} "
              f"(val {result.final['val_acc']:.4f}) in {result.seconds:.1f}s")

    return cmd


def cmd_correspond(run, args):
    from geomdl.train import correspondence_pipeline, write_run

    q = _domain(run, args.query)
    r = _domain(run, args.reference)
    if q.mesh is None or r.mesh is None:
        raise UsageError("correspond needs mesh domains")
    targets = None
    if args.targets:
        targets = np.loadtxt(args.targets, dtype=np.int64, ndmin=1, comments="#")
        run.add_input(args.targets, args.targets)
    elif q.n != r.n:
        raise UsageError("meshes differ in size: --targets is required")
    res = correspondence_pipeline(q.mesh, r.mesh, targets, _train_config(args), operator=args.operator,
                                  hidden=args.hidden, layers=args.layers)
    truth = np.arange(q.n) if targets is None else targets
    pred = np.argmax(res.probabilities, axis=1)
    run.write_csv("correspondence.csv", ["vertex", "predicted", "probability", "target"],
                  zip(range(q.n), pred, res.probabilities[np.arange(q.n), pred], truth))
    for p in write_run(res.train, res.model, args.out_dir, extra={"top1": res.accuracy, "operator": args.operator}):
        run.seal(p)
    print(f"correspond: top-1 accuracy {res.accuracy:.4f}")


def cmd_gradcheck(run, args):
    from geomdl.train import run_gradchecks

    worst = run_gradchecks(args.instances, args.seed)
    run.write_csv("gradcheck.csv", ["operation", "max_rel_error", "passed"],
                  ((k, v, int(v < args.tol)) for k, v in worst.items()))
    failed = [k for k, v in worst.items() if not v < args.tol]
    for k, v in worst.items():
        print(f"{'PASS' if v < args.tol else 'FAIL'} {k}: {v:.3e}")
    if failed:
        raise RuntimeError(f"gradient check failed for {', '.join(failed)}")


# --- parser --------------------------------------------------------------------------


def _add_train_args(p, epochs=200, lr=0.01, weight_decay=5e-4, hidden=16):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--weight-decay", type=float, default=weight_decay)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--hidden", type=int, default=hidden)
    p.add_argument("--patience", type=int, default=None)


def build_parser():
    ap = argparse.ArgumentParser(prog="geomdl", description="Geometric deep learning toolkit.")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default=".")
    ap.add_argument("--format", choices=["csv"], default="csv")
    ap.add_argument("--threads", type=int, default=None, help="limit BLAS/OpenMP threads")
    ap.add_argument("--version", action="version", version=f"geomdl {__version__} ({BACKEND})")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("eigs", help="Laplacian eigenpairs")
    p.add_argument("domain")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--normalization", choices=["weighted", "unnormalized", "random_walk", "sym_normalized"],
                   default="weighted")
    p.set_defaults(func=cmd_eigs)

    p = sub.add_parser("heat", help="heat diffusion of a delta")
    p.add_argument("domain")
    p.add_argument("--t", type=float, nargs="+", required=True)
    p.add_argument("--source", type=int, default=0)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--normalization", choices=["weighted", "unnormalized", "random_walk"], default="weighted")
    p.set_defaults(func=cmd_heat)

    p = sub.add_parser("diffdist", help="diffusion distance matrix")
    p.add_argument("domain")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--sources", type=int, nargs="*")
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_diffdist)

    p = sub.add_parser("wft", help="windowed Fourier transform")
    p.add_argument("domain")
    p.add_argument("--width", type=float, default=1.0, help="window g_i = exp(-width * lambda_i)")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--signal")
    p.add_argument("--source", type=int)
    p.set_defaults(func=cmd_wft)

    p = sub.add_parser("filter", help="apply a spectral, heat or Chebyshev filter")
    p.add_argument("domain")
    p.add_argument("--kind", choices=["spectral", "heat", "cheb"], default="cheb")
    p.add_argument("--alpha", type=float, nargs="*")
    p.add_argument("--ghat", type=float, nargs="*")
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--signal")
    p.add_argument("--source", type=int)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("coarsen", help="heavy-edge matching coarsening")
    p.add_argument("domain")
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--levels", type=int, default=1)
    p.set_defaults(func=cmd_coarsen)

    p = sub.add_parser("basis-demo", help="spectral vs Chebyshev filtering across two meshes")
    p.add_argument("mesh_a")
    p.add_argument("mesh_b", nargs="?")
    p.add_argument("--jitter", type=float, default=0.01, help="vertex noise for B, relative to mean edge length")
    p.add_argument("--ghat", type=float, nargs="+", help="spectral multipliers (default: seeded Gaussian)")
    p.add_argument("--order", type=int, default=4, help="Chebyshev order fitted to the multipliers")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--permute", action="store_true", help="relabel B's vertices randomly")
    p.add_argument("--signal")
    p.add_argument("--source", type=int)
    p.set_defaults(func=cmd_basis_demo)

    for kind, extra in (("gcn", None), ("cheb", "order"), ("monet", "kernels")):
        p = sub.add_parser(f"train-{kind}", help=f"{kind} node classification on the citation dataset")
        p.add_argument("--cora-dir")
        p.add_argument("--split-files", nargs=3, metavar=("TRAIN", "VAL", "TEST"))
        _add_train_args(p)
        if extra == "order":
            p.add_argument("--order", type=int, default=3)
        if extra == "kernels":
            p.add_argument("--kernels", type=int, default=3)
        p.set_defaults(func=_cora_command(kind))

    p = sub.add_parser("correspond", help="train intrinsic mesh correspondence")
    p.add_argument("query")
    p.add_argument("reference")
    p.add_argument("--targets")
    p.add_argument("--operator", choices=["geodesic_radial", "heat", "geodesic", "anisotropic"], default="geodesic_radial")
    p.add_argument("--layers", type=int, default=2)
    _add_train_args(p, epochs=300, weight_decay=0.0, hidden=48)
    p.set_defaults(func=cmd_correspond)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable operation")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on malformed arguments
    from threadpoolctl import threadpool_limits

    from geomdl.domains import DomainError
    from geomdl.train import DataError

    try:
        with threadpool_limits(limits=args.threads):
            run = Run(args, argv)
            args.func(run, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"geomdl: error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, DataError, OSError, ValueError, RuntimeError) as exc:
        print(f"geomdl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
