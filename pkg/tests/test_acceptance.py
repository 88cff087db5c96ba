"""Every acceptance criterion at its stated tolerance, one pass/fail line each."""
import pytest

from freedbm import acceptance


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(acceptance.CRITERIA))
def test_criterion(number, record_line):
    r = acceptance.CRITERIA[number](acceptance.DEFAULT_SEED, 1)
    line = r.line()
    print(line)
    record_line(line)
    assert r.passed, line
