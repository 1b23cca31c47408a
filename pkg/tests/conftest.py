import numpy as np
import pytest

from ctp import autodiff as ad
from ctp.graph import Graph, gen_planted_partition, gen_relational


@pytest.fixture
def f64():
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def sbm_small():
    return gen_planted_partition(4, 20, 0.3, 0.02, 6, 2.0, seed=3)


@pytest.fixture(scope="session")
def relational_small():
    return gen_relational(60, 4, 300, 6, seed=5)


def path_graph(n: int, d: int = 2) -> Graph:
    src = np.arange(n - 1)
    return Graph(np.arange(n * d, dtype=float).reshape(n, d), src, np.zeros(n - 1, dtype=int), src + 1, 1)


def star_graph(leaves: int, d: int = 2) -> Graph:
    src = np.zeros(leaves, dtype=int)
    return Graph(np.ones((leaves + 1, d)), src, np.zeros(leaves, dtype=int), np.arange(1, leaves + 1), 1)


def grad_check(fn, tensors, probes=20, delta=1e-5, seed=0):
    """Largest relative error between backward() and central differences over random probes."""
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.zero_grad()
    ad.backward(fn())
    worst = 0.0
    for t in tensors:
        idx = [tuple(int(rng.integers(0, s)) for s in t.shape) for _ in range(probes)]
        num = ad.numerical_gradient(fn, t, delta, idx)
        for i, g in num.items():
            a = t.grad[i]
            denom = max(abs(a), abs(g), 1e-6)
            worst = max(worst, abs(a - g) / denom)
    return worst


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, passed: bool, detail: str) -> bool:
        results.append((number, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(results):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
