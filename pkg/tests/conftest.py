import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tsastat import autodiff as ad
from tsastat import data, models

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function of one array."""
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
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def graph_grad_check(build, inputs: dict, wrt, h=1e-5):
    """Max relative error between graph gradients and finite differences.

    ``build(graph, leaves)`` returns a scalar node; every name in ``inputs`` is
    bound as a leaf.
    """
    g = ad.Graph()
    leaves = {k: g.leaf(k, differentiable=k in wrt) for k in inputs}
    g.output("loss", build(g, leaves))
    g.forward(inputs)
    analytic = g.gradient("loss", wrt)
    worst = 0.0
    for name in wrt:
        def f(v, name=name):
            return float(g.forward({**inputs, name: v})["loss"])
        numeric = fd_gradient(f, inputs[name], h)
        worst = max(worst, rel_err(analytic[name], numeric))
    return worst


@pytest.fixture(scope="session")
def cbf_small():
    ds = data.split(data.znormalize(data.gen_cbf(30, T=64, seed=3)), (0.5, 0.0, 0.5), seed=3)
    return ds


@pytest.fixture(scope="session")
def small_net(cbf_small):
    Xtr, ytr = cbf_small.arrays("train")
    net = models.init_network("A1", cbf_small.shape, 3, seed=0)
    net, _ = models.train(net, Xtr, ytr, epochs=8, seed=0)
    return net
