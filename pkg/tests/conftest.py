import numpy as np
import pytest
import torch


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at tensor ``x`` (evaluated in place, restored after)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(torch.as_tensor(f()).detach())
        flat[i] = orig - step
        down = float(torch.as_tensor(f()).detach())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


_acceptance = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if not item.module.__name__.endswith("test_acceptance"):
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        label = (item.function.__doc__ or item.name).strip().splitlines()[0]
        measured = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _acceptance.append((rep.passed, label, measured))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for ok, label, measured in _acceptance:
        line = f"{'PASS' if ok else 'FAIL'}  {label}"
        terminalreporter.write_line(line + (f"  [{measured}]" if measured else ""))
