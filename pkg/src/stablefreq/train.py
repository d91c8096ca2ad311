"""Training: loss, backpropagation through the unrolled dynamics, Adam,
and the two baselines (optimized droop and REINFORCE on the same
controller structure).

All randomness comes from one integer seed split into named substreams so
that e.g. changing the policy-gradient noise does not change the initial
states.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .controller import HATS, MonotoneParams, droop_params, init_params, local_derivatives
from .power_net import Equilibrium, NetworkCase, solve_equilibrium
from .sim import DisturbanceEvent, injection_schedule, rollout_batch, sample_initial_states

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "AdamState",
    "TrainResult",
    "DroopResult",
    "TrainingError",
    "loss",
    "trajectory_loss",
    "bptt_grad",
    "adam_step",
    "learning_rate",
    "episode_batch",
    "evaluate_loss",
    "train",
    "fit_droop",
    "train_pg",
    "pg_gradient",
    "initial_params",
    "sweep_losses",
    "DEFAULT_SWEEP_HZ",
]

log = logging.getLogger(__name__)

# named random substreams
STREAM_INIT_STATES = 0
STREAM_PARAM_INIT = 1
STREAM_PG_NOISE = 2
STREAM_EVAL = 3


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults are the full-size settings."""

    episodes: int = 600
    batch: int = 800
    stages: int = 200
    dt: float = 0.01
    gamma: object = 0.01  # scalar or per-bus list
    lr: float = 0.05
    lr_decay: float = 0.7
    lr_interval: int = 30
    m: int = 20
    seed: int = 0
    k0: float = 5.0
    omega_span: float = 1.0
    deadband: float = 0.0
    delta_range: float = 0.05  # rad
    omega_range_hz: float = 0.1  # Hz
    pg_lr: float = 0.01
    pg_sigma: float = 0.05
    droop_lr: float = 0.5
    droop_episodes: Optional[int] = None

    def __post_init__(self):
        for name in ("batch", "stages", "m", "lr_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if np.any(np.asarray(self.gamma, dtype=float) < 0):
            raise ValueError("gamma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["gamma"], np.ndarray):
            d["gamma"] = d["gamma"].tolist()
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LossBreakdown:
    total: float
    maxdev: np.ndarray
    action: np.ndarray
    gamma: np.ndarray

    def check(self, atol: float = 1e-12) -> bool:
        return abs(self.total - float(np.sum(self.maxdev + self.gamma * self.action))) <= atol


def loss(omega, u, gamma, mask=None) -> LossBreakdown:
    """Batch-averaged objective.

    ``omega`` and ``u`` have shape ``(K+1, H, n)`` (or ``(K+1, n)`` for a
    single trajectory).  Per bus: max over all stages of ``|omega|`` plus
    ``gamma`` times the mean squared action over stages ``1..K``.
    """
    omega = np.asarray(omega, dtype=float)
    u = np.asarray(u, dtype=float)
    if omega.ndim == 2:
        omega, u = omega[:, None, :], u[:, None, :]
    K = omega.shape[0] - 1
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), omega.shape[-1:])
    maxdev = np.max(np.abs(omega), axis=0)
    action = np.sum(u[1:] ** 2, axis=0) / K if K > 0 else np.zeros_like(maxdev)
    if mask is not None:
        maxdev, action = maxdev[mask], action[mask]
    maxdev = maxdev.mean(axis=0)
    action = action.mean(axis=0)
    total = float(np.sum(maxdev + gamma * action))
    return LossBreakdown(total, maxdev, action, np.array(gamma))


def trajectory_loss(omega, u, gamma):
    """Per-trajectory scalar losses, shape ``(H,)``."""
    K = omega.shape[0] - 1
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), omega.shape[-1:])
    return np.sum(np.max(np.abs(omega), axis=0) + gamma * np.sum(u[1:] ** 2, axis=0) / K, axis=-1)


def _hv(case, theta, v):
    """Batched product of the electrical-power Jacobian with ``v``."""
    C = case.B * np.cos(theta[..., :, None] - theta[..., None, :])
    return np.sum(C, axis=-1) * v - np.einsum("...ij,...j->...i", C, v)


def _check_bounds(case, params):
    if np.any(params.u_min < case.u_min) or np.any(params.u_max > case.u_max):
        raise ValueError("controller bounds must lie within the case actuation bounds")


def bptt_grad(case: NetworkCase, params: MonotoneParams, theta0, omega0, K: int, dt: float, gamma,
              events: Sequence[DisturbanceEvent] = ()):
    """Exact gradient of the batch loss with respect to the hat parameters.

    Reverse sweep through the ``K``-stage Euler recurrence.  The max over
    stages back-propagates only through the first maximizing stage.
    Diverged batch elements are dropped from the gradient.

    Returns ``(grads, breakdown, info)``; ``info`` has ``diverged`` (count).
    """
    _check_bounds(case, params)
    theta, omega, u, diverged = rollout_batch(case, theta0, omega0, params, K, dt, events)
    H, n = omega.shape[1:]
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (n,))
    br = loss(omega, u, gamma)
    keep = (~diverged).astype(float)[:, None]

    # seeds of the loss
    kstar = np.argmax(np.abs(omega), axis=0)  # (H, n), first maximizer
    g_omega = np.zeros_like(omega)
    hh, ii = np.meshgrid(np.arange(H), np.arange(n), indexing="ij")
    g_omega[kstar, hh, ii] = np.sign(omega[kstar, hh, ii]) / H
    g_omega *= keep
    g_u = (2.0 * gamma / (K * H)) * u * keep
    g_u[0] = 0.0

    grads = {k: np.zeros((n, params.m)) for k in HATS}
    c = dt / case.M

    _, du, G = local_derivatives(params, omega[K])
    lam_w = g_omega[K] + g_u[K] * du
    lam_th = np.zeros((H, n))
    for name in HATS:
        grads[name] += np.einsum("hi,hil->il", g_u[K], G[name])
    for k in range(K, 0, -1):
        w_prev, th_prev = omega[k - 1], theta[k - 1]
        _, du, G = local_derivatives(params, w_prev)
        a = -c * lam_w + g_u[k - 1]
        for name in HATS:
            grads[name] += np.einsum("hi,hil->il", a, G[name])
        new_th = lam_th - _hv(case, th_prev, c * lam_w)
        lam_w = dt * lam_th + (1.0 - c * case.D) * lam_w + a * du + g_omega[k - 1]
        lam_th = new_th
    return grads, br, {"diverged": int(diverged.sum())}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        src = params.hats() if isinstance(params, MonotoneParams) else params
        return cls({k: np.zeros_like(v) for k, v in src.items()},
                   {k: np.zeros_like(v) for k, v in src.items()})


def adam_step(state: AdamState, params, grads: dict, lr: float):
    """Bias-corrected Adam update followed by projection onto ``hats >= 0``.

    ``params`` is a :class:`MonotoneParams` (a new instance is returned) or a
    plain dict of non-negative arrays.
    """
    state.step += 1
    t = state.step
    src = params.hats() if isinstance(params, MonotoneParams) else params
    new = {}
    for k, x in src.items():
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        mhat = state.m[k] / (1.0 - state.beta1 ** t)
        vhat = state.v[k] / (1.0 - state.beta2 ** t)
        new[k] = np.maximum(x - lr * mhat / (np.sqrt(vhat) + state.eps), 0.0)
    if isinstance(params, MonotoneParams):
        new["b_hat"][:, 0] = 0.0
        new["c_hat"][:, 0] = 0.0
        return params.replace_hats(**new)
    return new


def learning_rate(lr0: float, decay: float, interval: int, episode: int) -> float:
    return lr0 * decay ** (episode // interval)


def _rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *extra])


def episode_batch(case: NetworkCase, config: TrainConfig, episode: int,
                  center: Optional[Equilibrium] = None):
    """Initial states for one episode (deterministic in seed and episode)."""
    return sample_initial_states(case, config.batch, None, delta_range=config.delta_range,
                                 omega_range_hz=config.omega_range_hz, center=center,
                                 rng=_rng(config.seed, STREAM_INIT_STATES, episode))


def evaluate_loss(case: NetworkCase, controller: Optional[Callable], theta0, omega0, K: int, dt: float,
                  gamma, events: Sequence[DisturbanceEvent] = ()) -> LossBreakdown:
    _, omega, u, _ = rollout_batch(case, theta0, omega0, controller, K, dt, events)
    return loss(omega, u, gamma)


@dataclass
class TrainResult:
    params: MonotoneParams
    history: list = field(default_factory=list)  # LossBreakdown per episode
    elapsed: float = 0.0

    def loss_curve(self) -> np.ndarray:
        return np.array([b.total for b in self.history])


def initial_params(case: NetworkCase, config: TrainConfig) -> MonotoneParams:
    return init_params(case.n, config.m, case.u_min, case.u_max,
                       _rng(config.seed, STREAM_PARAM_INIT), k0=config.k0,
                       omega_span=config.omega_span, deadband=config.deadband)


def train(case: NetworkCase, config: TrainConfig, params: Optional[MonotoneParams] = None,
          callback: Optional[Callable] = None) -> TrainResult:
    """Episodes of: sample batch, roll out, loss, exact gradient, Adam step."""
    t0 = time.perf_counter()
    if params is None:
        params = initial_params(case, config)
    params = params.copy()
    center = solve_equilibrium(case)
    state = AdamState.zeros_like(params)
    history = []
    for ep in range(config.episodes):
        th0, w0 = episode_batch(case, config, ep, center)
        grads, br, info = bptt_grad(case, params, th0, w0, config.stages, config.dt, config.gamma)
        if info["diverged"] == config.batch:
            raise TrainingError(f"episode {ep}: every rollout diverged (loss {br.total:.4g})")
        if info["diverged"]:
            log.warning("episode %d: %d diverged rollouts excluded", ep, info["diverged"])
        history.append(br)
        lr = learning_rate(config.lr, config.lr_decay, config.lr_interval, ep)
        params = adam_step(state, params, grads, lr)
        if callback is not None:
            callback(ep, br, params)
    return TrainResult(params, history, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# droop baseline
# --------------------------------------------------------------------------

@dataclass
class DroopResult:
    gains: np.ndarray
    loss: float
    params: MonotoneParams
    history: list = field(default_factory=list)


def fit_droop(case: NetworkCase, config: TrainConfig, k_grid=None) -> DroopResult:
    """Optimize per-bus droop gains ``u_i = clip(k_i w_i)`` on the training loss.

    A scan over a shared gain gives the starting point; per-bus gains are
    then refined with projected Adam steps using the same exact gradient as
    :func:`train` (droop is the one-unit monotone stack with tied slopes).
    The reported loss is on the episode-0 batch; the best gains seen on that
    batch are returned.
    """
    center = solve_equilibrium(case)
    th_eval, w_eval = episode_batch(case, config, 0, center)
    K, dt, gamma = config.stages, config.dt, config.gamma

    def eval_gains(k):
        return evaluate_loss(case, droop_params(k, case.u_min, case.u_max), th_eval, w_eval, K, dt, gamma).total

    if k_grid is None:
        k_grid = np.concatenate([[0.0], np.geomspace(0.1, 200.0, 25)])
    scan = [eval_gains(np.full(case.n, k)) for k in k_grid]
    best_k = np.full(case.n, float(k_grid[int(np.argmin(scan))]))
    best_loss = float(min(scan))
    gains = {"k": best_k.copy()}
    state = AdamState.zeros_like(gains)
    episodes = config.episodes if config.droop_episodes is None else config.droop_episodes
    history = []
    for ep in range(episodes):
        th0, w0 = episode_batch(case, config, ep, center)
        p = droop_params(gains["k"], case.u_min, case.u_max)
        g, br, _ = bptt_grad(case, p, th0, w0, K, dt, gamma)
        history.append(br)
        lr = learning_rate(config.droop_lr, config.lr_decay, config.lr_interval, ep)
        gains = adam_step(state, gains, {"k": g["q_hat"][:, 0] + g["z_hat"][:, 0]}, lr)
        cand = eval_gains(gains["k"])
        if cand < best_loss:
            best_loss, best_k = cand, gains["k"].copy()
    return DroopResult(best_k, best_loss, droop_params(best_k, case.u_min, case.u_max), history)


# --------------------------------------------------------------------------
# REINFORCE baseline
# --------------------------------------------------------------------------

def pg_gradient(case: NetworkCase, params: MonotoneParams, theta0, omega0, K: int, dt: float, gamma,
                sigma: float, rng: np.random.Generator, events: Sequence[DisturbanceEvent] = ()):
    """Score-function estimate of the loss gradient under Gaussian exploration.

    Actions are ``clip(u(w) + sigma * xi)`` at every stage; the log-density
    of the pre-clip Gaussian sample gives the score.  The batch-mean loss is
    used as baseline.  Returns ``(grads, per-trajectory losses)``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    _check_bounds(case, params)
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=float))
    omega0 = np.atleast_2d(np.asarray(omega0, dtype=float))
    H, n = theta0.shape
    P = injection_schedule(case, events, K, dt)
    theta, omega = theta0.copy(), omega0.copy()
    omegas = np.empty((K + 1, H, n))
    acts = np.empty((K + 1, H, n))
    score = {k: np.zeros((H, n, params.m)) for k in HATS}
    alive = np.ones(H, dtype=bool)
    for k in range(K + 1):
        omegas[k] = omega
        mu, _, G = local_derivatives(params, omega)
        xi = rng.standard_normal((H, n))
        a = np.clip(mu + sigma * xi, case.u_min, case.u_max)
        acts[k] = a
        for name in HATS:
            score[name] += (xi / sigma)[..., None] * G[name]
        if k == K:
            break
        pe = np.sum(case.B * np.sin(theta[:, :, None] - theta[:, None, :]), axis=-1)
        new_w = omega + (dt / case.M) * (P[k] - case.D * omega - a - pe)
        theta = theta + dt * omega
        ok = np.all(np.isfinite(new_w), axis=-1) & np.all(np.abs(new_w) <= 100.0, axis=-1)
        alive &= ok
        omega = np.where(alive[:, None], new_w, omega)
    L = trajectory_loss(omegas, acts, gamma)
    Lk = L[alive]
    base = Lk.mean() if Lk.size else 0.0
    w = np.where(alive, L - base, 0.0) / max(int(alive.sum()), 1)
    grads = {name: np.einsum("h,hil->il", w, score[name]) for name in HATS}
    return grads, L


def train_pg(case: NetworkCase, config: TrainConfig, sigma: Optional[float] = None,
             params: Optional[MonotoneParams] = None) -> TrainResult:
    """REINFORCE training of the same monotone structure (noise-free mean at evaluation)."""
    t0 = time.perf_counter()
    sigma = config.pg_sigma if sigma is None else sigma
    if params is None:
        params = initial_params(case, config)
    params = params.copy()
    center = solve_equilibrium(case)
    state = AdamState.zeros_like(params)
    noise = _rng(config.seed, STREAM_PG_NOISE)
    history = []
    for ep in range(config.episodes):
        th0, w0 = episode_batch(case, config, ep, center)
        grads, L = pg_gradient(case, params, th0, w0, config.stages, config.dt, config.gamma, sigma, noise)
        _, omega, u, _ = rollout_batch(case, th0, w0, params, config.stages, config.dt)
        history.append(loss(omega, u, config.gamma))
        lr = learning_rate(config.pg_lr, config.lr_decay, config.lr_interval, ep)
        params = adam_step(state, params, grads, lr)
    return TrainResult(params, history, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# evaluation sweep
# --------------------------------------------------------------------------

DEFAULT_SWEEP_HZ = (0.0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15)


def sweep_losses(case: NetworkCase, controllers: dict, *, sweep_hz=DEFAULT_SWEEP_HZ, batch: int = 500,
                 seed: int = 0, delta_per_hz: float = 0.5, K: int = 200, dt: float = 0.01, gamma=0.01):
    """Loss of each controller over a widening range of initial conditions.

    Column ``w`` draws frequencies uniformly in ``[-w, w]`` Hz and angles in
    ``[-delta_per_hz * w, delta_per_hz * w]`` rad around the uncontrolled
    equilibrium, so ``w = 0`` is an equilibrium start.  Every controller
    sees the same test set.  Returns ``{name: [loss per column]}``.
    """
    center = solve_equilibrium(case)
    out = {name: [] for name in controllers}
    for j, wb in enumerate(sweep_hz):
        th0, w0 = sample_initial_states(case, batch, None, delta_range=delta_per_hz * wb,
                                        omega_range_hz=wb, center=center,
                                        rng=_rng(seed, STREAM_EVAL, j))
        for name, ctl in controllers.items():
            out[name].append(evaluate_loss(case, ctl, th0, w0, K, dt, gamma).total)
    return out
