import numpy as np
import pytest

from robust_ate.data_model import Dataset, ParameterBlocks, validate_dataset


def central_difference(f, x, h=1e-6):
    """Jacobian of ``f`` at ``x`` by central differences, shape ``f(x).shape + x.shape``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    out = np.empty(f0.shape + x.shape)
    for j in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[j] = h
        out[(...,) + j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def linear_dataset(n, p, seed, beta=None, beta2=None, noise=1.0):
    """Logistic treatment and a linear outcome with common slope ``beta``."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta = np.ones(p) if beta is None else np.asarray(beta, dtype=float)
    beta2 = 0.5 * np.ones(p) / p if beta2 is None else np.asarray(beta2, dtype=float)
    T = (rng.random(n) < 1 / (1 + np.exp(-X @ beta2))).astype(float)
    Y = X @ beta + 0.5 * T + noise * rng.standard_normal(n)
    return validate_dataset(Dataset(X, T, Y))


@pytest.fixture
def small_dataset():
    return linear_dataset(200, 3, seed=11)


@pytest.fixture
def random_blocks():
    def make(p, seed, sigma=1.0, a=1.5):
        rng = np.random.default_rng(seed)
        return ParameterBlocks(*(0.5 * rng.standard_normal(p) for _ in range(3)), sigma, a)
    return make


# acceptance criteria report their verdicts here; printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
