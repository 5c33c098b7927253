import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from geomdl.graph import build_graph
from geomdl.mesh import grid_mesh, strip_mesh
from geomdl.train import (
    Adam,
    DataError,
    GCNModel,
    SGD,
    Split,
    TrainConfig,
    TrainingDiverged,
    content_id,
    correspondence_features,
    correspondence_operator,
    CorrespondenceModel,
    correspondence_pipeline,
    gradcheck_cases,
    hks_times,
    load_cora,
    load_split_files,
    loss_multinomial,
    loss_squared,
    predict,
    run_cora,
    run_gradchecks,
    softmax,
    standard_split,
    train,
    write_run,
    write_synthetic_cora,
)


def two_cluster_graph():
    # two cliques joined by one edge, features carry a noisy class signal
    edges = [(i, j, 1.0) for c in (0, 5) for i in range(c, c + 5) for j in range(i + 1, c + 5)]
    edges.append((4, 5, 1.0))
    g = build_graph(10, None, edges)
    labels = np.array([0] * 5 + [1] * 5)
    X = np.random.default_rng(0).standard_normal((10, 4))
    X[:, 0] += 2.0 * labels - 1.0
    return g, X, labels


class TestLosses:
    def test_squared(self):
        assert loss_squared([1.0, 2.0], [1.0, 2.0])[0] == 0.0
        loss, grad = loss_squared([1.0, 0.0], [0.0, 0.0])
        assert loss == 1.0
        assert_array_equal(grad, [2.0, 0.0])

    def test_multinomial_confident(self):
        z = np.zeros((2, 4))
        z[0, 1] = z[1, 3] = 40.0
        assert loss_multinomial(z, [1, 3])[0] < 1e-9

    def test_multinomial_uniform(self):
        assert_allclose(loss_multinomial(np.zeros((3, 5)), [0, 1, 4])[0], np.log(5), rtol=1e-15)

    def test_label_range(self):
        with pytest.raises(ValueError):
            loss_multinomial(np.zeros((1, 2)), [2])

    def test_softmax_rows(self, rng):
        assert_allclose(softmax(rng.standard_normal((4, 6)) * 50).sum(1), 1.0, rtol=1e-14)


class TestOptimizers:
    def test_sgd(self):
        out = SGD(0.1).step({"w": np.array([1.0])}, {"w": np.array([2.0])})
        assert_allclose(out["w"], [0.8])

    def test_adam_first_step_is_lr_sign(self):
        out = Adam(0.01).step({"w": np.array([1.0, 1.0])}, {"w": np.array([3.0, -0.2])})
        assert_allclose(out["w"], [0.99, 1.01], rtol=1e-6)

    def test_negative_lr(self):
        with pytest.raises(ValueError):
            SGD(-1.0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-0.1)


class TestTraining:
    def test_separable_toy(self):
        g, X, labels = two_cluster_graph()
        split = Split(np.arange(10), [], [])
        res = train(GCNModel(g, X, 8, 2), labels, split, TrainConfig(epochs=200, weight_decay=0.0))
        assert np.all(np.argmax(predict(GCNModel(g, X, 8, 2), res.params), 1) == labels)

    def test_zero_lr_unchanged(self):
        g, X, labels = two_cluster_graph()
        model = GCNModel(g, X, 4, 2)
        init = model.init_params(np.random.default_rng(3))
        res = train(model, labels, Split(np.arange(10), [], []), TrainConfig(lr=0.0, epochs=5, seed=3))
        for k in init:
            assert_array_equal(res.params[k], init[k])

    def test_deterministic(self):
        g, X, labels = two_cluster_graph()
        split = Split([0, 1, 5, 6], [2, 7], [3, 4, 8, 9])
        runs = [train(GCNModel(g, X, 4, 2), labels, split, TrainConfig(epochs=20, seed=7)) for _ in range(2)]
        assert runs[0].history == runs[1].history

    def test_history_layout(self):
        g, X, labels = two_cluster_graph()
        res = train(GCNModel(g, X, 4, 2), labels, Split([0, 5], [1, 6], [2, 7]), TrainConfig(epochs=3))
        assert [r["epoch"] for r in res.history] == [0, 1, 2, 3]

    def test_divergence_raises(self):
        g, X, labels = two_cluster_graph()
        with pytest.raises(TrainingDiverged):
            train(GCNModel(g, X * np.nan, 4, 2), labels, Split([0, 5], [], []), TrainConfig(epochs=2))

    def test_overlapping_split(self):
        with pytest.raises(ValueError):
            Split([0, 1], [1], [2])

    def test_early_stopping(self):
        g, X, labels = two_cluster_graph()
        res = train(GCNModel(g, X, 4, 2), labels, Split([0, 5], [1, 6], [2, 7]),
                    TrainConfig(epochs=500, lr=0.5, patience=3))
        assert res.stopped_epoch is not None and res.stopped_epoch < 499


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return write_synthetic_cora(str(tmp_path_factory.mktemp("cora")), n=300, seed=2)


class TestCora:
    def test_loader(self, root):
        data = load_cora(root)
        assert data.n == 300
        assert set(np.unique(data.features)) <= {0.0, 1.0}
        assert data.graph.num_edges <= data.raw_citations
        assert len(data.classes) == 7

    def test_unknown_id(self, tmp_path):
        (tmp_path / "cora.content").write_text("1 0 1 A\n2 1 0 B\n")
        (tmp_path / "cora.cites").write_text("1 3\n")
        with pytest.raises(DataError, match="unknown"):
            load_cora(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_cora(tmp_path)

    def test_standard_split(self, root):
        data = load_cora(root)
        s = standard_split(data.labels, per_class=5, n_val=50, n_test=100)
        assert len(s.train) == 35 and len(s.val) == 50 and len(s.test) == 100
        assert np.all(np.bincount(data.labels[s.train]) == 5)

    def test_split_files(self, tmp_path):
        for name, idx in (("tr", [0, 1]), ("va", [2]), ("te", [3, 4])):
            (tmp_path / name).write_text("\n".join(map(str, idx)) + "\n")
        s = load_split_files(tmp_path / "tr", tmp_path / "va", tmp_path / "te")
        assert_array_equal(s.test, [3, 4])
        with pytest.raises(DataError):
            load_split_files(tmp_path / "missing", tmp_path / "va", tmp_path / "te")

    def test_run_writes_manifest(self, root, tmp_path):
        cfg = TrainConfig(epochs=30)
        res, data, split = run_cora("gcn", root, cfg, standard_split(load_cora(root).labels, 5, 50, 100),
                                    out_dir=str(tmp_path))
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 30
        with open(tmp_path / "metrics.csv", "rb") as fh:
            assert manifest["outputs"]["metrics.csv"] == content_id(fh.read())
        assert res.final["test_acc"] > 0.5

    @pytest.mark.parametrize("kind", ["cheb", "monet"])
    def test_other_models_learn(self, root, kind):
        cfg = TrainConfig(epochs=60)
        res, _, _ = run_cora(kind, root, cfg, standard_split(load_cora(root).labels, 5, 50, 100))
        assert res.final["test_acc"] > 0.5


def test_content_id_matches_git():
    assert content_id(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


class TestCorrespondence:
    def test_hks_times(self):
        t = hks_times([0.0, 0.5, 2.0, 8.0])
        assert_allclose(t[[0, -1]], [4 * np.log(10) / 8, 4 * np.log(10) / 0.5])

    def test_features_standardized(self):
        F = correspondence_features(grid_mesh(6, 6, jitter=0.2, seed=1))
        assert F.shape == (36, 5)
        assert_allclose(F.mean(0), 0.0, atol=1e-12)

    def test_untrained_distributions(self):
        m = grid_mesh(6, 6, jitter=0.2, seed=1)
        model = CorrespondenceModel(correspondence_operator(m), correspondence_features(m), m.n, hidden=8)
        P = softmax(predict(model, model.init_params(np.random.default_rng(0))))
        assert np.all(P >= 0)
        assert_allclose(P.sum(1), 1.0, atol=1e-8)

    def test_self_correspondence(self):
        m = grid_mesh(12, 12, jitter=0.3, seed=4)
        res = correspondence_pipeline(m, m)
        assert res.accuracy >= 0.95

    def test_bent_copy_same_prediction(self):
        flat = strip_mesh(8, 5)
        bent = strip_mesh(8, 5, turn_angles=[0.4, -0.3, 0.6, 0.2, -0.5, 0.3, 0.1])
        model = CorrespondenceModel(correspondence_operator(flat), correspondence_features(flat), flat.n, hidden=8)
        params = model.init_params(np.random.default_rng(1))
        twin = CorrespondenceModel(correspondence_operator(bent), correspondence_features(bent), bent.n, hidden=8)
        assert_allclose(predict(twin, params), predict(model, params), atol=1e-8)


def test_gradcheck_cases_quick():
    worst = run_gradchecks(instances=2, seed=11)
    assert set(worst) == set(gradcheck_cases())
    assert max(worst.values()) < 1e-5
