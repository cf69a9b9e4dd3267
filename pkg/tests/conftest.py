import numpy as np
import pytest

from mmfl.autograd import Tensor, finite_difference_grad, relative_error


def assert_grad_matches(f, x: Tensor, h: float = 1e-6, tol: float = 1e-4):
    """Compare the autograd gradient of scalar f at x with central differences."""
    x64 = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    loss = f(x64)
    loss.backward()
    numeric = finite_difference_grad(f, x64, h=h)
    err = relative_error(x64.grad, numeric).max()
    assert err < tol, f"max relative error {err:.3g}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance.RESULTS):
            terminalreporter.write_line(acceptance.RESULTS[n])
