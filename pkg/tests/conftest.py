import numpy as np
import pytest

from nqprop import lindblad as lb
from nqprop.integrators import TimeGrid


@pytest.fixture(scope="session")
def fmo():
    return lb.fmo_system()


@pytest.fixture(scope="session")
def fmo_liouvillian(fmo):
    return fmo.liouvillian()


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(30.0, 50)


def random_hermitian(n, rng, scale=1.0):
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return scale * 0.5 * (z + z.conj().T)


def random_density(n, rng):
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    rho = z @ z.conj().T
    return rho / np.trace(rho).real


_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    labels = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for name in sorted(_acceptance, key=lambda n: int(n.split("_")[1][1:])):
        terminalreporter.write_line(f"{labels.get(_acceptance[name], _acceptance[name]):4}  {name}")
