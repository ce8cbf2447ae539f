"""
Selfcheck runner
"""
import pytest

from app.exceptions import ConfigurationError
from app.services import selfcheck
from app.services.selfcheck import CHECKS, run_selfcheck


class TestSelfcheck:
    def test_every_check_passes(self):
        results = run_selfcheck()
        assert [r.name for r in results] == list(CHECKS)
        failed = {r.name: r.detail for r in results if not r.passed}
        assert not failed

    def test_unknown_check(self):
        with pytest.raises(ConfigurationError, match="unknown selfcheck"):
            run_selfcheck(["bogus"])

    def test_failure_does_not_stop_the_rest(self, monkeypatch):
        def broken():
            raise AssertionError("forced")

        monkeypatch.setitem(selfcheck.CHECKS, "infonce_bound", broken)
        results = run_selfcheck(["infonce_bound", "view_arithmetic"])
        assert [r.passed for r in results] == [False, True]
        assert "forced" in results[0].detail
        assert all(r.seconds >= 0.0 for r in results)
