"""Acceptance criteria A1-A9 at their stated tolerances.

Each test prints one PASS/FAIL line. A5-A9 share a session-scoped suite so
the default model is trained once; the ablation and receptive-field models
are trained on demand.
"""
import pytest

from matter.acceptance import CRITERIA, Suite


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    return Suite(tmp_path_factory.mktemp("acceptance"))


@pytest.mark.parametrize("key", CRITERIA)
def test_criterion(key, suite, capsys):
    res = suite.run([key], report=None)[0]
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()
