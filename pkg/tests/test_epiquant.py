import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from privepi import epiquant as eq

import oracles


def test_serial_interval_matches_quadrature():
    si = eq.discretize_serial_interval(6.48, 3.83, 20)
    np.testing.assert_allclose(si.weights, oracles.gamma_si_weights(6.48, 3.83, 20), atol=1e-9)
    assert abs(si.weights.sum() - 1) < 1e-9
    assert si.weights[0] == 0 and np.all(si.weights >= 0)
    assert int(np.argmax(si.weights)) in (4, 5, 6)


def test_serial_interval_concentrates_for_small_sd():
    si = eq.discretize_serial_interval(6.48, 0.1, 20)
    # day s collects the mass in (s-1, s], so a tight 6.48 lands on day 7
    assert si.weights[math.ceil(6.48)] > 0.99


def test_serial_interval_errors():
    with pytest.raises(ValueError):
        eq.discretize_serial_interval(0.0, 1.0)
    with pytest.raises(ValueError):
        eq.discretize_serial_interval(5.0, -1.0)
    with pytest.raises(ValueError):
        eq.discretize_serial_interval(5.0, 1.0, 1)


def test_posterior_matches_loop_oracle():
    inc = eq.renewal_simulation(1.3, 60, seed=4)
    si = eq.discretize_serial_interval()
    est = eq.estimate_rt(inc, si, 7, 1.0, 5.0)
    ref = oracles.cori_posterior_mean(inc.tolist(), si.weights.tolist(), 7, 1.0, 5.0)
    np.testing.assert_array_equal(np.isnan(ref), ~est.available)
    np.testing.assert_allclose(est.mean[est.available], ref[est.available], rtol=1e-10)
    assert np.all(est.q025[est.available] <= est.mean[est.available])
    assert np.all(est.mean[est.available] <= est.q975[est.available])


def test_constant_r_recovered_from_renewal_process():
    inc = eq.renewal_simulation(1.5, 200, seed=0)
    est = eq.estimate_rt(inc)
    avg = np.mean(est.mean[29:200])
    assert 1.425 <= avg <= 1.575
    doubled = eq.estimate_rt(2 * inc)
    assert abs(np.mean(doubled.mean[29:200]) / 1.5 - 1) < 0.05


def test_steady_state_constant_incidence():
    est = eq.estimate_rt(np.full(120, 200.0))
    assert abs(np.mean(est.mean[60:]) - 1) < 0.05


def test_zero_incidence_is_unavailable(tmp_path):
    est = eq.estimate_rt(np.zeros(40))
    assert not est.available.any()
    assert np.all(np.isnan(est.mean))
    est.write_csv(tmp_path / "rt.csv")
    lines = (tmp_path / "rt.csv").read_text().splitlines()
    assert lines[0] == "date,rt_mean,rt_q025,rt_q975,available"
    assert lines[1] == "1,,,,0"


def test_rt_input_errors():
    with pytest.raises(ValueError):
        eq.estimate_rt(np.array([1.0, -2.0, 3.0]))
    with pytest.raises(ValueError):
        eq.estimate_rt(np.ones(10), window=0)


def test_first_estimate_day():
    est = eq.estimate_rt(np.full(30, 5.0), window=7)
    assert not est.available[:6].any() and est.available[6:].all()
    est1 = eq.estimate_rt(np.full(30, 5.0), window=1)
    assert not est1.available[0] and est1.available[1]


@given(bump=st.floats(0.5, 500.0), day=st.integers(10, 59))
def test_posterior_mean_increases_with_window_incidence(bump, day):
    inc = eq.renewal_simulation(1.2, 60, seed=1)
    more = inc.copy()
    more[day] += bump            # Lambda up to and including this day is unchanged
    a, b = eq.estimate_rt(inc), eq.estimate_rt(more)
    assert b.mean[day] > a.mean[day]


def test_metric_examples():
    assert (eq.rmse([3, 4], [3, 4]), eq.mae([3, 4], [3, 4]), eq.mape([3, 4], [3, 4])) == (0, 0, 0)
    assert eq.rmse([1, 2], [2, 4]) == pytest.approx(math.sqrt(2.5), abs=1e-12)
    assert eq.mae([1, 2], [2, 4]) == 1.5
    assert eq.mape([1, 2], [2, 4]) == 100.0
    with pytest.raises(ValueError, match="index 1"):
        eq.mape([1, 0, 2], [1, 1, 1])
    with pytest.raises(ValueError):
        eq.rmse([1, 2], [1])


pairs = st.integers(1, 30).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, n, elements=st.floats(0.5, 1e4)),
    hnp.arrays(np.float64, n, elements=st.floats(-1e4, 1e4)),
    st.permutations(list(range(n)))))


@given(p=pairs)
def test_metric_properties(p):
    truth, pred, perm = p
    perm = np.array(perm)
    assert eq.rmse(truth, pred) >= eq.mae(truth, pred) * (1 - 1e-12)
    for f in (eq.rmse, eq.mae, eq.mape):
        assert f(truth[perm], pred[perm]) == pytest.approx(f(truth, pred), rel=1e-12)
