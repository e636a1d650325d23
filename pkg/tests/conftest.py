import numpy as np
import pytest

from caperec import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def fd_check(build_loss, tensors, h=1e-5):
    """Max elementwise relative error of backprop vs central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    build_loss().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()

        def f():
            with ad.no_grad():
                return float(build_loss().data)

        numeric = ad.numerical_gradient(f, t.data, h)
        worst = max(worst, float(ad.relative_error(analytic, numeric).max()))
    return worst


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
