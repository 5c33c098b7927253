import numpy as np
import pytest
from hypothesis import settings

from geomdl.graph import build_graph, graph_from_adjacency

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_graph(rng, n, p=0.3, weighted=True, connected=True):
    """Erdos-Renyi graph with random positive weights and vertex measure."""
    W = np.triu(rng.random((n, n)) < p, 1).astype(float)
    if connected:
        for i in range(n - 1):
            W[i, i + 1] = 1.0
    if weighted:
        W *= rng.uniform(0.2, 2.0, size=W.shape)
    W = W + W.T
    a = rng.uniform(0.5, 2.0, size=n) if weighted else None
    return graph_from_adjacency(W, a)


@pytest.fixture
def g2():
    return build_graph(2, [1.0, 1.0], [(0, 1, 1.0)])


@pytest.fixture
def g3():
    return build_graph(3, [1.0, 1.0, 1.0], [(0, 1, 1.0), (1, 2, 1.0)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting ----------------------------------------------------

_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record a one-line detail for the acceptance summary."""
    rec = {"name": request.node.get_closest_marker("criterion").args[0], "detail": ""}
    request.node._criterion = rec
    return rec


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rec = getattr(item, "_criterion", None)
    if rec is None or rep.when != "call":
        return
    status = "PASS" if rep.passed else "FAIL"
    detail = rec["detail"]
    if rep.failed and call.excinfo is not None:
        msg = str(call.excinfo.value).strip().splitlines()
        detail = (detail + " | " if detail else "") + (msg[0] if msg else call.excinfo.typename)
    _ACCEPTANCE.append(f"{status}  {rec['name']}: {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
