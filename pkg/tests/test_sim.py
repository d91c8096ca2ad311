import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_case
from stablefreq.controller import TabulatedController, droop_params, init_params
from stablefreq.lyapunov import LyapunovContext, epsilon_search, lyapunov_V
from stablefreq.power_net import coi_transform, solve_equilibrium
from stablefreq.sim import (DisturbanceEvent, injection_schedule, rollout, rollout_batch,
                            sample_initial_states, step, write_trajectory_csv)


def test_step_examples():
    one = make_case([[0.0]], [0.0])
    th, w, u = step(one, np.array([0.2]), np.array([0.1]), None, 0.01)
    assert w[0] == pytest.approx(0.099, abs=1e-15)
    assert th[0] == pytest.approx(0.201, abs=1e-15)
    assert u[0] == 0


def test_step_rejects_bad_dt():
    one = make_case([[0.0]], [0.0])
    with pytest.raises(ValueError):
        step(one, np.zeros(1), np.zeros(1), None, 0.0)


def test_step_fixed_point(case3):
    p = droop_params(np.full(3, 3.0), case3.u_min, case3.u_max)
    c = case3.with_p_m(case3.p_m + 0.01)
    eq = solve_equilibrium(c, p)
    w0 = np.full(3, eq.omega_star)
    th, w, _ = step(c, eq.delta_star, w0, p, 0.01)
    assert np.allclose(w, w0, atol=1e-12)
    assert np.allclose(coi_transform(th), eq.delta_star, atol=1e-12)


def test_rest_stays_at_rest(case3):
    c = case3.with_p_m(np.zeros(3))
    tr = rollout(c, (np.zeros(3), np.zeros(3)), droop_params(np.ones(3), c.u_min, c.u_max), 50, 0.01)
    assert np.all(tr.theta == 0) and np.all(tr.omega == 0) and np.all(tr.u == 0)
    assert tr.theta.shape == tr.omega.shape == tr.u.shape == (51, 3)


def test_droop_tail_decreasing(case3):
    th, w = sample_initial_states(case3, 20, 3)
    p = droop_params(np.full(3, 5.0), case3.u_min, case3.u_max)
    eq = solve_equilibrium(case3, p)
    _, W, _, div = rollout_batch(case3, th, w, p, 600, 0.01)
    assert not div.any()
    dev = np.max(np.abs(W - eq.omega_star), axis=(1, 2))
    windows = dev[:600].reshape(6, 100).max(axis=1)
    assert np.all(np.diff(windows) < 0)


def test_event_stage_indices(case3):
    ev = DisturbanceEvent(0, 0.05, 0.3, 5.3)
    P = injection_schedule(case3, [ev], 1000, 0.01)
    on = np.flatnonzero(P[:, 0] != case3.p_m[0])
    assert on[0] == math.ceil(0.3 / 0.01 - 1e-9) == 30
    assert on[-1] == 529
    assert np.allclose(P[on, 0], case3.p_m[0] + 0.05)


def test_event_validation():
    with pytest.raises(ValueError):
        DisturbanceEvent(0, 0.1, 2.0, 1.0)


def test_sampling_ranges(case3):
    eq = solve_equilibrium(case3)
    th, w = sample_initial_states(case3, 1000, 11)
    assert np.all(np.abs(th - eq.delta_star) <= 0.05)
    assert np.all(np.abs(w - eq.omega_star) <= 0.1 * 2 * math.pi)
    th2, w2 = sample_initial_states(case3, 1000, 11)
    assert np.array_equal(th, th2) and np.array_equal(w, w2)
    z, zw = sample_initial_states(case3, 5, 1, delta_range=0, omega_range_hz=0,
                                  center=solve_equilibrium(case3.with_p_m(np.zeros(3))))
    assert np.all(z == 0) and np.all(zw == 0)


@given(st.integers(0, 2**32 - 1))
def test_bound_respect(seed):
    c = make_case([[0, 2], [2, 0]], [0.3, -0.3], M=[0.1, 0.2], D=[0.05, 0.1], u=0.2)
    wild = TabulatedController.from_function(lambda w: 40 * np.sin(9 * w), 2)
    rng = np.random.default_rng(seed)
    th, w = rng.uniform(-0.5, 0.5, (4, 2)), rng.uniform(-2, 2, (4, 2))
    _, _, U, _ = rollout_batch(c, th, w, wild, 100, 0.01)
    assert np.all(U >= c.u_min) and np.all(U <= c.u_max)


def test_divergence_flag_freezes():
    c = make_case([[0, 1], [1, 0]], [0, 0], M=[0.1, 0.1], D=[0.01, 0.01], u=1e6)
    neg = lambda w: -50.0 * w  # noqa: E731
    _, W, _, div = rollout_batch(c, np.zeros((1, 2)), np.array([[0.1, -0.1]]), neg, 500, 0.01)
    assert div[0]
    assert np.all(np.isfinite(W))
    last = W[-1, 0]
    assert np.max(np.abs(last)) <= 100.0
    assert np.array_equal(W[-2, 0], last)


def test_euler_first_order(case3):
    p = droop_params(np.full(3, 2.0), case3.u_min, case3.u_max)
    th, w = sample_initial_states(case3, 1, 0)
    T = 1.0
    finals = []
    for dt in (0.01, 0.005, 0.0025):
        K = int(round(T / dt))
        _, W, _, _ = rollout_batch(case3, th, w, p, K, dt)
        finals.append(W[-1, 0])
    e1 = np.linalg.norm(finals[0] - finals[1])
    e2 = np.linalg.norm(finals[1] - finals[2])
    assert 0.3 <= e2 / e1 <= 0.7


def test_energy_nonincreasing(case3):
    p = droop_params(np.full(3, 4.0), case3.u_min, case3.u_max)
    eq = solve_equilibrium(case3, p)
    eps, _ = epsilon_search(case3, eq, samples=300)
    ctx = LyapunovContext(case3, eq, eps / 8)
    th, w = sample_initial_states(case3, 10, 5)
    dt = 1e-3
    T, W, _, _ = rollout_batch(case3, th, w, p, 3000, dt)
    V = lyapunov_V(ctx, coi_transform(T), W)
    assert np.all(np.diff(V, axis=0) <= 10 * dt ** 2)


def test_rk4_option(case3):
    p = droop_params(np.full(3, 2.0), case3.u_min, case3.u_max)
    th, w = sample_initial_states(case3, 2, 0)
    a = rollout_batch(case3, th, w, p, 200, 0.001, method="rk4")[1][-1]
    b = rollout_batch(case3, th, w, p, 200, 0.001)[1][-1]
    assert np.allclose(a, b, atol=1e-2)
    with pytest.raises(ValueError):
        rollout_batch(case3, th, w, p, 10, 0.01, method="heun")


def test_trajectory_csv(tmp_path, case3):
    p = init_params(3, 3, case3.u_min, case3.u_max, np.random.default_rng(0))
    ev = DisturbanceEvent(1, -0.05, 0.3, 0.6)
    th, w = sample_initial_states(case3, 1, 0)
    tr = rollout(case3, (th[0], w[0]), p, 100, 0.01, [ev])
    path, side = write_trajectory_csv(tr, tmp_path / "t.csv", case3.base_freq, {"label": "x"})
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "theta_0", "theta_1", "theta_2", "omega_0", "omega_1", "omega_2", "u_0", "u_1", "u_2"]
    assert len(rows) == 102
    assert float(rows[1][4]) == pytest.approx(tr.omega[0, 0] / (2 * math.pi))
    meta = json.loads(side.read_text())
    assert meta["scenario"]["events"][0]["bus"] == 1 and meta["omega_unit"] == "Hz"
