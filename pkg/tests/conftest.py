import numpy as np
import pytest

# criterion number -> "ACCEPTANCE n: PASS|FAIL - detail", filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(f, x, eps=1e-4):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / den


def check_layer(layer, x, rng, eps=1e-5, max_coords=40):
    """Compare a layer's analytic gradients with central differences.

    Uses the scalar probe loss ``sum(r * layer(x))`` with a fixed random
    ``r``. Returns the worst relative error over the input and every
    parameter array (sampling at most ``max_coords`` entries per array).
    """
    layer.clear()
    y = layer.forward(x)
    r = rng.standard_normal(y.shape)

    def loss():
        out = layer.forward(x)
        layer.clear()
        return float(np.sum(r * out))

    layer.clear()
    layer.zero_grad()
    layer.forward(x)
    gx = layer.backward(r)
    worst = 0.0
    arrays = [(x, gx)]
    for block in layer.params():
        arrays += [(v, g) for v, g, _, _ in block.slots()]
    for value, grad in arrays:
        flat = value.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = loss()
            flat[i] = old - eps
            fm = loss()
            flat[i] = old
            num[j] = (fp - fm) / (2 * eps)
        worst = max(worst, rel_err(grad.reshape(-1)[idx], num))
    return worst
