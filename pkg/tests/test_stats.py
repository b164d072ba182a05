import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpv.stats import HOLDS, INCONCLUSIVE, VIOLATED, combine_verdicts, default_tol, fit_loglog, mean_se, verdict


def test_mean_se_matches_formula():
    a = np.array([1.0, 2.0, 4.0, 7.0])
    m, s = mean_se(a)
    assert m == pytest.approx(3.5)
    assert s == pytest.approx(np.std(a, ddof=1) / 2)
    assert mean_se(np.array([3.0]))[1] == 0.0


def test_default_tol():
    assert default_tol(0.01, 10000) == pytest.approx(5 * (0.01 + 0.01))
    assert default_tol(0.01, 10000, scale=1.0) == pytest.approx(0.02)


def test_verdict_bands():
    assert verdict([0.0, -1.0], [0.1, 0.1], 0.5) == HOLDS
    assert verdict([1.0], [0.1], 0.5) == VIOLATED
    assert verdict([0.45], [0.1], 0.5) == INCONCLUSIVE
    assert verdict([], [], 0.1) == HOLDS


def test_combine_priority():
    assert combine_verdicts([HOLDS, INCONCLUSIVE, VIOLATED]) == VIOLATED
    assert combine_verdicts([HOLDS, INCONCLUSIVE]) == INCONCLUSIVE
    assert combine_verdicts([HOLDS]) == HOLDS


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-2, 2))
def test_fit_loglog_recovers_power_law(slope, logc):
    x = np.array([0.2, 0.1, 0.05, 0.025])
    y = np.exp(logc) * x ** slope
    fit = fit_loglog(x, y)
    assert fit["slope"] == pytest.approx(slope, abs=1e-9)
    assert fit["intercept"] == pytest.approx(logc, abs=1e-9)
    w = fit_loglog(x, y, y_se=0.01 * y)
    assert w["slope"] == pytest.approx(slope, abs=1e-9)
    assert w["slope_stderr"] > 0


def test_fit_needs_two_points():
    with pytest.raises(ValueError):
        fit_loglog([1.0], [1.0])
