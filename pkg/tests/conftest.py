import numpy as np
import pytest

from lcqp_gnn.core import LcqpInstance
from lcqp_gnn.datasets import GenConfig, generate


def tiny_simplex_qp():
    """min 1/2 |x|^2 s.t. x1 + x2 = 1, x >= 0."""
    return LcqpInstance.from_dense(np.eye(2), [[1.0, 1.0]], [1.0], [0.0, 0.0])


def random_instance(n=6, m=3, seed=0, family="generic", **kw):
    return generate(GenConfig(family, n=n, m=m, seed=seed, **kw))


@pytest.fixture
def simplex_qp():
    return tiny_simplex_qp()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_max_rel_error(model, graph, x_prev, target, h=1e-5, floor=1e-6):
    """Largest relative gap between backprop and central differences of the MSE loss."""
    from lcqp_gnn import mpnn

    grads = mpnn.backward(model, graph, x_prev, target)
    worst = 0.0
    for key, P in model.params.items():
        flat = P.reshape(-1)
        g = grads[key].reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = mpnn.loss_mse(mpnn.predict(model, graph, x_prev), target)
            flat[k] = old - h
            down = mpnn.loss_mse(mpnn.predict(model, graph, x_prev), target)
            flat[k] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g[k]) / max(abs(fd), abs(g[k]), floor))
    return worst


def random_small_graph(seed, mode="feas", n=4, m=2):
    from lcqp_gnn.graph import encode

    inst = random_instance(n=n, m=m, seed=seed)
    return inst, encode(inst, has_global=(mode == "ipm"))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
