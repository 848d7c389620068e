import numpy as np
import pytest

from dddm.ddm import (DdmParams, PathResult, RaceParams, hit_probability_analytic,
                      mean_rt_analytic, race_drift, race_statistics, save_paths_csv,
                      simulate_ddm_path, simulate_ddm_paths, simulate_race)
from dddm.exceptions import ParameterError


def test_hit_probability_symmetric_at_zero_drift():
    assert hit_probability_analytic(0.0) == 0.5


def test_hit_probability_hand_value():
    # 1 / (1 + exp(-2)) for mu = A = sigma = 1
    assert hit_probability_analytic(1.0) == pytest.approx(1 / (1 + np.exp(-2.0)), rel=1e-15)
    assert hit_probability_analytic(-1.0) == pytest.approx(1 / (1 + np.exp(2.0)), rel=1e-15)


def test_mean_rt_hand_values():
    assert mean_rt_analytic(1.0) == pytest.approx(np.tanh(1.0), rel=1e-15)
    assert mean_rt_analytic(0.5) == pytest.approx(2 * np.tanh(0.5), rel=1e-15)
    assert mean_rt_analytic(0.0) == 1.0
    # symmetric in the drift sign
    assert mean_rt_analytic(-0.5) == pytest.approx(mean_rt_analytic(0.5))


def test_mean_rt_continuous_at_zero_drift():
    assert mean_rt_analytic(1e-6, sigma=2.0, A=1.5) == pytest.approx(1.5**2 / 4, rel=1e-9)


def test_tau_rescales_time():
    # tau dX = mu dt + sigma dW is the tau = 1 model with mu/tau, sigma/tau
    p = DdmParams(mu=0.8, sigma=1.2, tau=2.0, A=1.0)
    assert hit_probability_analytic(p) == pytest.approx(hit_probability_analytic(0.4, 0.6, 1.0))
    assert mean_rt_analytic(p) == pytest.approx(mean_rt_analytic(0.4, 0.6, 1.0))


def test_params_validate():
    with pytest.raises(ParameterError):
        DdmParams(sigma=0)
    with pytest.raises(ParameterError):
        DdmParams(A=-1)
    with pytest.raises(ParameterError):
        DdmParams(dt=0)


def test_single_path_is_seeded_and_absorbs_at_bound():
    p = DdmParams(mu=0.5, dt=1e-3)
    a = simulate_ddm_path(p, seed=3, record_path=True)
    b = simulate_ddm_path(p, seed=3, record_path=True)
    np.testing.assert_array_equal(a.path, b.path)
    assert a.choice in ("upper", "lower")
    assert abs(a.path[-1]) >= 1.0 and (np.abs(a.path[:-1]) < 1.0).all()
    assert a.rt == pytest.approx((len(a.path) - 1) * p.dt)


def test_single_path_chunking_is_invisible():
    p = DdmParams(mu=0.2, dt=1e-3)
    a = simulate_ddm_path(p, seed=9, record_path=True, chunk=7)
    b = simulate_ddm_path(p, seed=9, record_path=True, chunk=4096)
    assert a.rt == b.rt and a.choice == b.choice
    np.testing.assert_allclose(a.path, b.path, rtol=0, atol=1e-12)


def test_horizon_exhaustion_reports_none():
    res = simulate_ddm_path(DdmParams(mu=0.0, A=10.0, dt=1e-2, t_max=0.05), seed=0)
    assert res.choice == "none" and np.isnan(res.rt)


def test_path_result_invariant():
    with pytest.raises(ParameterError):
        PathResult("upper", float("nan"))


def test_zero_noise_limit_is_deterministic():
    # with tiny noise the path is a straight line: rt ~= A tau / mu
    p = DdmParams(mu=2.0, sigma=1e-6, tau=1.0, A=1.0, dt=1e-4)
    res = simulate_ddm_path(p, seed=0)
    assert res.choice == "upper" and res.rt == pytest.approx(0.5, abs=2e-4)


def test_vectorized_paths_match_analytics_small():
    p = DdmParams(mu=0.5, dt=1e-3)
    choices, rts = simulate_ddm_paths(p, 20000, seed=1)
    hit = choices != 0
    p_up = (choices == 1).mean()
    se = np.sqrt(p_up * (1 - p_up) / len(choices))
    assert hit.all()
    assert abs(p_up - hit_probability_analytic(p)) < 4 * se
    # coarse dt overshoots the bound, biasing rt upward by O(sqrt(dt))
    assert np.nanmean(rts) == pytest.approx(mean_rt_analytic(p), rel=0.1)


def test_vectorized_paths_seeded():
    p = DdmParams(mu=-0.3, dt=1e-3)
    a = simulate_ddm_paths(p, 500, seed=4)
    b = simulate_ddm_paths(p, 500, seed=4)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_race_statistics_hand_case():
    y = np.array([1.0, 2.0, 4.0])
    # X_1 = y1 - y2, X_2 = y1 + y2 - 2 y3
    np.testing.assert_allclose(race_statistics(y), [-1.0, -5.0])


def test_race_drift_values():
    np.testing.assert_allclose(race_drift((3, 2, 1)), [1.0, 3.0])
    np.testing.assert_allclose(race_drift((1, 1, 1, 1)), [0.0, 0.0, 0.0])


def test_race_shapes_and_start():
    t, X = simulate_race(RaceParams((3, 2, 1), dt=0.01, t_max=1.0), seed=0, n_paths=4)
    assert t.shape == (101,) and X.shape == (4, 101, 2)
    np.testing.assert_array_equal(X[:, 0], 0.0)


def test_race_increment_means():
    rp = RaceParams((3.0, 2.0, 1.0), sigma=1.0, dt=0.01, t_max=1.0)
    _, X = simulate_race(rp, seed=2, n_paths=2000)
    inc = np.diff(X, axis=1).reshape(-1, 2) / rp.dt
    se = inc.std(axis=0, ddof=1) / np.sqrt(len(inc))
    assert (np.abs(inc.mean(axis=0) - race_drift(rp.means)) < 3 * se).all()


def test_race_increment_variance_scales_with_dt():
    # Var(dX_1) = 2 sigma^2 dt, Var(dX_2) = (1 + 1 + 4) sigma^2 dt
    rp = RaceParams((0.0, 0.0, 0.0), sigma=1.0, dt=0.01, t_max=1.0)
    _, X = simulate_race(rp, seed=3, n_paths=2000)
    inc = np.diff(X, axis=1).reshape(-1, 2)
    np.testing.assert_allclose(inc.var(axis=0) / rp.dt, [2.0, 6.0], rtol=0.02)


def test_race_needs_two_alternatives():
    with pytest.raises(ParameterError):
        RaceParams((1.0,))


def test_save_paths_csv(tmp_path):
    t, X = simulate_race(RaceParams((1, 0, 0), dt=0.5, t_max=1.0), seed=0)
    save_paths_csv(tmp_path / "p.csv", t, X[0])
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,X_1,X_2" and len(lines) == 4
