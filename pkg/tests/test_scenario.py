import numpy as np
import pytest
from hypothesis import given, strategies as st

from privepi import metapop as mp
from privepi import scenario as sc
from privepi import training as tr

from test_training import small_config, small_data


def test_intervention_validation():
    with pytest.raises(ValueError):
        sc.Intervention(10, -1, 0.1)
    with pytest.raises(ValueError):
        sc.Intervention(10, 1, 1.0)
    assert sc.Intervention(10, 2, 0.05).start == 24


def test_intervene_beta_examples():
    np.testing.assert_array_equal(sc.intervene_beta(0.4, sc.Intervention(20, 3, 0.0), 60), np.full(60, 0.4))
    b = sc.intervene_beta(0.4, sc.Intervention(20, 1, 0.05), 30)
    np.testing.assert_array_equal(b[:6], 0.4)            # days 21..26
    assert b[6] == pytest.approx(0.95 * 0.4)              # day 27 = T' + 7
    np.testing.assert_array_equal(b[6:], b[6])
    with pytest.raises(ValueError):
        sc.intervene_beta(0.4, sc.Intervention(20, 5, 0.05), 30)


@given(d1=st.integers(0, 4), d2=st.integers(0, 4), x=st.floats(-0.9, 0.9), beta=st.floats(0.01, 2.0))
def test_schedules_agree_before_the_earlier_start(d1, d2, x, beta):
    a = sc.intervene_beta(beta, sc.Intervention(50, d1, x), 40)
    b = sc.intervene_beta(beta, sc.Intervention(50, d2, x), 40)
    n = 7 * min(d1, d2) - 1  # days T'+1 .. T'+7*min(d)-1
    if n > 0:
        np.testing.assert_array_equal(a[:n], b[:n])


@pytest.fixture(scope="module")
def model():
    data, C, N = small_data(T=35)
    return tr.train(small_config(epochs=20), data, C, N), data


def test_projection_continues_from_fitted_state(model):
    m, data = model
    p = sc.project(m, data.public, data.private, sc.Intervention(28, 1, 0.0), 21)
    rates, _, sim = m.fit_window(data.public, data.private)
    params = mp.EpidemicParams(rates[[3]], np.zeros(21, dtype=int))
    ref = mp.simulate(sim.states[28], m.contact, m.population, params)
    np.testing.assert_allclose(p.new_infections, ref.values(), rtol=1e-12)
    np.testing.assert_array_equal(p.days, np.arange(29, 50))
    np.testing.assert_allclose(p.cumulative[-1], p.new_infections.sum())


def test_null_intervention_ignores_lead(model):
    m, data = model
    a = sc.project(m, data.public, data.private, sc.Intervention(28, 1, 0.0), 30)
    b = sc.project(m, data.public, data.private, sc.Intervention(28, 3, 0.0), 30)
    assert a.new_infections.tobytes() == b.new_infections.tobytes()


def test_grid_is_monotone(model):
    m, data = model
    grid = sc.scenario_grid(m, data.public, data.private, 28, [0.0, 0.01, 0.05], [1, 2], 42)
    cum = {k: v.cumulative[-1] for k, v in grid.items()}
    for d in (1, 2):
        assert cum[(0.05, d)] <= cum[(0.01, d)] <= cum[(0.0, d)]
    for x in (0.01, 0.05):
        assert cum[(x, 1)] <= cum[(x, 2)]


def test_project_errors(model, tmp_path):
    m, data = model
    fresh = tr.build_model(small_config(), data, m.contact, m.population)
    with pytest.raises(RuntimeError):
        sc.project(fresh, data.public, data.private, sc.Intervention(28, 1, 0.01), 20)
    with pytest.raises(ValueError):
        sc.project(m, data.public, data.private, sc.Intervention(60, 1, 0.01), 20)
    p = sc.project(m, data.public, data.private, sc.Intervention(28, 1, 0.01), 20)
    p.write_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "day,new_infections,cumulative"
