import numpy as np
import pytest

from ramrestore import model as modelmod


def finite_diff(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def tiny_model():
    m = modelmod.build(modelmod.ModelConfig(width=4, blocks=1), seed=3)
    rng = np.random.default_rng(5)
    for layer in m.layers.values():
        layer.bias.data = rng.normal(0, 0.1, layer.bias.shape)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
