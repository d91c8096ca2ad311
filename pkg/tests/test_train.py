import numpy as np
import pytest

from conftest import make_case
from stablefreq.controller import HATS, MonotoneParams, droop_as_stack, droop_params, init_params
from stablefreq.power_net import solve_equilibrium
from stablefreq.sim import rollout_batch, sample_initial_states
from stablefreq.train import (AdamState, TrainConfig, adam_step, bptt_grad, episode_batch, evaluate_loss,
                              fit_droop, learning_rate, loss, pg_gradient, sweep_losses, train, train_pg)


# ---- loss ----------------------------------------------------------------

def test_loss_examples():
    assert loss(np.zeros((3, 2)), np.zeros((3, 2)), 0.01).total == 0
    w = np.array([[0.1], [-0.2], [0.05]])
    assert loss(w, np.zeros((3, 1)), 0.01).total == pytest.approx(0.2, abs=1e-15)
    u = np.array([[7.0], [1.0], [1.0]])
    assert loss(w, u, 0.01).total == pytest.approx(0.21, abs=1e-15)


def test_loss_decomposition_per_bus_gamma():
    rng = np.random.default_rng(0)
    w, u = rng.normal(size=(11, 5, 3)), rng.normal(size=(11, 5, 3))
    br = loss(w, u, [0.0, 0.5, 2.0])
    assert br.check(1e-12)
    assert br.maxdev.shape == (3,)


# ---- exact gradient --------------------------------------------------------

def _rel_err(g, fd):
    a = np.concatenate([g[k].ravel() for k in HATS])
    b = np.concatenate([fd[k].ravel() for k in HATS])
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def fd_grad(case, p, th, w, K, dt, gamma, h=1e-6):
    out = {}
    for name, arr in p.hats().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            if name in ("b_hat", "c_hat") and idx[1] == 0:
                continue
            plus = {k: v.copy() for k, v in p.hats().items()}
            minus = {k: v.copy() for k, v in p.hats().items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            if minus[name][idx] < 0:
                minus[name][idx] = 0.0
            step = plus[name][idx] - minus[name][idx]
            g[idx] = (evaluate_loss(case, p.replace_hats(**plus), th, w, K, dt, gamma).total
                      - evaluate_loss(case, p.replace_hats(**minus), th, w, K, dt, gamma).total) / step
        out[name] = g
    return out


def gradient_check_points(case, count=20, seed=0, K=50):
    """(rel_err list) at ``count`` random parameter points; kink/tie points are
    nudged by 1e-4 in the hats before measuring."""
    rng = np.random.default_rng(seed)
    errs = []
    th, w = sample_initial_states(case, 6, seed + 1)
    for _ in range(count):
        p = init_params(case.n, 3, case.u_min, case.u_max, rng, k0=rng.uniform(1, 6))
        for _attempt in range(5):
            g, _, _ = bptt_grad(case, p, th, w, K, 0.01, 0.01)
            fd = fd_grad(case, p, th, w, K, 0.01, 0.01)
            e = _rel_err(g, fd)
            if e <= 1e-4:
                break
            bumped = {k: v + 1e-4 * rng.choice([-1, 1], v.shape) for k, v in p.hats().items()}
            bumped = {k: np.maximum(v, 0) for k, v in bumped.items()}
            bumped["b_hat"][:, 0] = 0
            bumped["c_hat"][:, 0] = 0
            p = p.replace_hats(**bumped)
        errs.append(e)
    return errs


def test_bptt_matches_finite_differences(case3):
    errs = gradient_check_points(case3, count=5, seed=3)
    assert max(errs) <= 1e-4


def test_zero_gradient_at_rest(case3):
    c = case3.with_p_m(np.zeros(3))
    p = init_params(3, 4, c.u_min, c.u_max, np.random.default_rng(0))
    g, br, _ = bptt_grad(c, p, np.zeros((4, 3)), np.zeros((4, 3)), 30, 0.01, 0.01)
    assert br.total == 0
    assert all(np.all(v == 0) for v in g.values())


def test_one_step_hand_chain_rule():
    # one bus, K = 1, m = 1, unsaturated: w1 = w0 + dt/M (p - D w0 - k w0)
    M, D, p_m, dt, gamma, k, w0 = 2.0, 0.5, 1.0, 0.1, 0.3, 0.7, 0.2
    c = make_case([[0.0]], [p_m], M=[M], D=[D], u=100.0)
    p = droop_params([k], [-100.0], [100.0])
    g, br, _ = bptt_grad(c, p, np.zeros((1, 1)), np.array([[w0]]), 1, dt, gamma)
    w1 = w0 + dt / M * (p_m - D * w0 - k * w0)
    assert w1 > w0
    u1 = k * w1
    assert br.total == pytest.approx(w1 + gamma * u1 ** 2)
    dw1 = -dt / M * w0
    expected = dw1 + gamma * 2 * u1 * (w1 + k * dw1)
    assert g["q_hat"][0, 0] == pytest.approx(expected, rel=1e-12)
    assert g["z_hat"][0, 0] == 0


def test_argmax_subgradient_single_term():
    # gamma = 0 and a unique peak: gradient equals d|w(k*)|
    c = make_case([[0.0]], [0.5], M=[0.2], D=[0.1], u=5.0)
    p = init_params(1, 3, [-5.0], [5.0], np.random.default_rng(2))
    w0 = np.array([[0.05]])
    g, _, _ = bptt_grad(c, p, np.zeros((1, 1)), w0, 40, 0.01, 0.0)
    _, W, _, _ = rollout_batch(c, np.zeros((1, 1)), w0, p, 40, 0.01)
    kstar = int(np.argmax(np.abs(W[:, 0, 0])))
    assert 0 < kstar

    def peak(pp):
        return abs(rollout_batch(c, np.zeros((1, 1)), w0, pp, 40, 0.01)[1][kstar, 0, 0])

    h = 1e-7
    hats = p.hats()
    plus = {k: v.copy() for k, v in hats.items()}
    minus = {k: v.copy() for k, v in hats.items()}
    plus["q_hat"][0, 1] += h
    minus["q_hat"][0, 1] -= h
    fd = (peak(p.replace_hats(**plus)) - peak(p.replace_hats(**minus))) / (2 * h)
    assert g["q_hat"][0, 1] == pytest.approx(fd, rel=1e-5)


def test_diverged_elements_excluded():
    c = make_case([[0, 1], [1, 0]], [0, 0], M=[0.1, 0.1], D=[0.01, 0.01], u=1e6)
    p = init_params(2, 2, c.u_min, c.u_max, np.random.default_rng(0))
    th = np.zeros((2, 2))
    w = np.array([[0.1, -0.1], [200.0, 0.0]])  # second element starts beyond the limit
    g, _, info = bptt_grad(c, p, th, w, 20, 0.01, 0.01)
    assert info["diverged"] == 1
    assert all(np.all(np.isfinite(v)) for v in g.values())


# ---- Adam -------------------------------------------------------------------

def test_adam_first_step():
    st = AdamState.zeros_like({"x": np.array([1.0])})
    out = adam_step(st, {"x": np.array([1.0])}, {"x": np.array([1.0])}, 0.01)
    assert out["x"][0] == pytest.approx(0.99, abs=1e-8)
    assert st.step == 1


def test_adam_zero_gradient_and_projection():
    p = init_params(2, 3, -np.ones(2), np.ones(2), np.random.default_rng(0))
    st = AdamState.zeros_like(p)
    zero = {k: np.zeros_like(v) for k, v in p.hats().items()}
    q = adam_step(st, p, zero, 0.1)
    assert all(np.array_equal(q.hats()[k], p.hats()[k]) for k in HATS)
    big = {k: np.full_like(v, 1e3) for k, v in p.hats().items()}
    r = adam_step(AdamState.zeros_like(p), p, big, 10.0)
    assert all(np.all(v == 0) for v in r.hats().values())
    assert np.all(r.b_hat[:, 0] == 0) and np.all(r.c_hat[:, 0] == 0)


def test_lr_schedule():
    assert learning_rate(0.05, 0.7, 30, 29) == 0.05
    assert learning_rate(0.05, 0.7, 30, 30) == pytest.approx(0.035)


# ---- training loops ---------------------------------------------------------

def small(**kw):
    base = dict(episodes=40, batch=16, stages=100, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_episodes(case3):
    cfg = small(episodes=0)
    res = train(case3, cfg)
    from stablefreq.train import initial_params
    init = initial_params(case3, cfg)
    assert all(np.array_equal(res.params.hats()[k], init.hats()[k]) for k in HATS)
    assert res.history == []


def test_train_reduces_loss(case3):
    res = train(case3, TrainConfig(episodes=200, batch=64, stages=200, seed=0))
    curve = res.loss_curve()
    assert curve[-10:].mean() < curve[0]
    for br in res.history:
        assert br.check(1e-12)
    res.params.validate()


def test_train_deterministic(case3):
    a = train(case3, small(episodes=5))
    b = train(case3, small(episodes=5))
    assert np.array_equal(a.loss_curve(), b.loss_curve())
    assert all(np.array_equal(a.params.hats()[k], b.params.hats()[k]) for k in HATS)


def test_droop_init_matches_droop_loss(case3):
    cfg = small(episodes=8)
    dr = fit_droop(case3, cfg)
    res = train(case3, TrainConfig(**{**cfg.to_dict(), "episodes": 1}), params=dr.params)
    assert abs(res.history[0].total - dr.loss) <= 1e-10


def test_droop_endpoint_dominance(case3):
    cfg = small(episodes=10)
    dr = fit_droop(case3, cfg)
    th, w = episode_batch(case3, cfg, 0)
    for k in (0.0, 100.0):
        ref = evaluate_loss(case3, droop_params(np.full(3, k), case3.u_min, case3.u_max), th, w,
                            cfg.stages, cfg.dt, cfg.gamma).total
        assert dr.loss <= ref
    assert np.all(dr.gains >= 0)


def test_droop_no_excitation():
    c = make_case([[0, 1], [1, 0]], [0.0, 0.0], M=[0.1, 0.1], D=[0.05, 0.05])
    dr = fit_droop(c, small(episodes=3, delta_range=0.0, omega_range_hz=0.0))
    assert dr.loss == 0


def test_droop_generic_evaluator_equivalence(case3):
    k = np.array([2.0, 7.0, 12.0])
    th, w = sample_initial_states(case3, 8, 0)
    a = rollout_batch(case3, th, w, droop_params(k, case3.u_min, case3.u_max), 300, 0.01)
    b = rollout_batch(case3, th, w, lambda x: np.clip(k * x, case3.u_min, case3.u_max), 300, 0.01)
    c = rollout_batch(case3, th, w, droop_as_stack(k, 5, case3.u_min, case3.u_max), 300, 0.01)
    for x, y, z in zip(a[:3], b[:3], c[:3]):
        assert np.max(np.abs(x - y)) <= 1e-12 and np.max(np.abs(x - z)) <= 1e-12


# ---- policy gradient ----------------------------------------------------------

def test_pg_degenerate_policy():
    c = make_case([[0, 1], [1, 0]], [0.1, -0.1], M=[0.1, 0.1], D=[0.05, 0.05], u=0.0)
    p = init_params(2, 3, np.zeros(2), np.zeros(2), np.random.default_rng(0))
    th, w = sample_initial_states(c, 32, 0)
    g, _ = pg_gradient(c, p, th, w, 20, 0.01, 0.01, 1e-6, np.random.default_rng(1))
    assert all(np.all(v == 0) for v in g.values())
    with pytest.raises(ValueError):
        pg_gradient(c, p, th, w, 20, 0.01, 0.01, 0.0, np.random.default_rng(1))


def test_pg_direction_monte_carlo():
    c = make_case([[0.0]], [1.0], M=[1.0], D=[1.0], u=10.0)
    p = MonotoneParams([[0.7, 1.5]], [[0.0, 0.05]], [[0.4, 0.9]], [[0.0, 0.1]], [-10.0], [10.0])
    N = 100_000
    th, w = np.zeros((N, 1)), np.full((N, 1), 0.1)
    g_bptt, _, _ = bptt_grad(c, p, th[:1], w[:1], 1, 0.1, 0.5)
    g_pg, _ = pg_gradient(c, p, th, w, 1, 0.1, 0.5, 0.01, np.random.default_rng(7))
    a = np.concatenate([g_bptt[k].ravel() for k in HATS])
    b = np.concatenate([g_pg[k].ravel() for k in HATS])
    assert np.linalg.norm(a - b) <= 0.1 * np.linalg.norm(a)


def test_pg_vs_bptt_small(case3):
    cfg = TrainConfig(episodes=60, batch=32, stages=100, seed=2)
    pg = train_pg(case3, cfg)
    bp = train(case3, cfg)
    curve = pg.loss_curve()
    assert curve[-10:].mean() < curve[0]
    table = sweep_losses(case3, {"bptt": bp.params, "pg": pg.params}, sweep_hz=[0.1], batch=200,
                         K=cfg.stages)
    assert table["pg"][0] >= table["bptt"][0]


def test_sweep_zero_column(case3):
    c = case3.with_p_m(np.zeros(3))
    ctl = {"droop": droop_params(np.full(3, 3.0), c.u_min, c.u_max), "none": None}
    table = sweep_losses(c, ctl, sweep_hz=[0.0, 0.05], batch=20, K=50)
    assert table["droop"][0] == 0 and table["none"][0] == 0
    assert table["droop"][1] > 0
    assert solve_equilibrium(c).omega_star == 0
