import numpy as np
import pytest

from critspine.model import fixture


@pytest.fixture(scope="session")
def m1():
    return fixture("M1")


@pytest.fixture(scope="session")
def m2():
    return fixture("M2")


@pytest.fixture(scope="session")
def m3():
    return fixture("M3")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import SUMMARY

    if SUMMARY:
        terminalreporter.section("acceptance criteria")
        for n in sorted(SUMMARY):
            terminalreporter.write_line(SUMMARY[n])
