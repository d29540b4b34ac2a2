import numpy as np
import pytest

from hydramix import autodiff as ad
from hydramix import data

SEEDS = (0, 1, 2, 3, 4)


def numeric_grad(f, x, eps=1e-3):
    """Central differences of scalar ``f()`` w.r.t. every entry of the float64 array ``x``."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = f()
        x[i] = orig - eps
        lo = f()
        x[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def assert_grad_close(analytic, numeric, tol=1e-3):
    analytic = np.asarray(analytic, dtype=np.float64)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    # entries with a vanishing true gradient are compared absolutely
    ok = (rel < tol) | (np.abs(analytic - numeric) < 1e-7)
    assert ok.all(), f"max rel err {rel[~ok].max():.3g} at {np.argwhere(~ok)[:3].tolist()}"


def check_op(build_loss, *arrays, eps=1e-3, tol=1e-3):
    """Compare backward() with central differences for every input array (float64 context)."""
    with ad.default_dtype(np.float64):
        tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
        loss = build_loss(*tensors)
        ad.backward(loss)
        for t in tensors:
            def f(t=t):
                with ad.no_grad():
                    return float(build_loss(*tensors).data)
            assert_grad_close(t.grad, numeric_grad(f, t.data, eps), tol)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    data.generate(data.DatasetSpec(n_train=60, n_test=30, seed=3), root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return data.load(tiny_dataset_dir)


@pytest.fixture(scope="session")
def protocol_dataset(tmp_path_factory):
    """The 2000 train / 600 test set used by the slow learnability and acceptance runs."""
    root = tmp_path_factory.mktemp("protocol")
    data.generate(data.DatasetSpec(n_train=2000, n_test=600, seed=0), root)
    return data.load(root)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one verdict line per acceptance criterion; all lines are echoed in the terminal summary."""

    def emit(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
