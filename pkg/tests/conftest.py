import numpy as np
import pytest

from graphvrnn import diffmath as dm
from graphvrnn.graph import ScaledLaplacian, build_grid_graph
from graphvrnn.model import GraphVRNN, ModelConfig, init_params


def rel_err(a, b, floor=1e-6):
    """Entrywise relative error with an absolute floor for near-zero entries."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference(fn, params, h=1e-5):
    """Central differences of scalar ``fn(params)`` for every entry of every array."""
    out = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (fn(plus) - fn(minus)) / (2 * h)
        out[name] = g
    return out


def analytic_gradient(fn, params):
    with dm.Tape() as tape:
        tracked = {k: tape.watch(v) for k, v in params.items()}
        out = fn(tracked)
    return dm.gradient(tape, out, tracked)


@pytest.fixture
def tiny_model():
    """2x2 grid, one channel: the configuration used for exact gradient checks."""
    cfg = ModelConfig(
        n_nodes=4, channels=1, cheb_order=2, graph_features=2, latent_dim=2, hidden_dim=8, ext_dim=26
    )
    return GraphVRNN(cfg, ScaledLaplacian.from_graph(build_grid_graph(2, 2)))


def perturbed_params(model, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    params = init_params(model.config, seed)
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}


VERDICTS: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
