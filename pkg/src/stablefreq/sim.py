"""Discrete-time rollouts of the swing dynamics.

The update is explicit Euler with the control evaluated at the previous
frequency::

    theta(k) = theta(k-1) + dt * omega(k-1)
    omega(k) = omega(k-1) + dt / M * (p_m - D omega(k-1) - u(omega(k-1)) - p_e(theta(k-1)))

Controller outputs are always clipped to the case bounds before they are
applied or recorded.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .power_net import Equilibrium, NetworkCase, electrical_power, solve_equilibrium

__all__ = [
    "DIVERGENCE_LIMIT",
    "DisturbanceEvent",
    "Trajectory",
    "injection_schedule",
    "step",
    "rollout",
    "rollout_batch",
    "sample_initial_states",
    "write_trajectory_csv",
]

DIVERGENCE_LIMIT = 100.0  # rad/s


@dataclass(frozen=True)
class DisturbanceEvent:
    """Step change ``delta_p`` of the net injection at ``bus`` on ``[t_on, t_off)``."""

    bus: int
    delta_p: float
    t_on: float
    t_off: float

    def __post_init__(self):
        if not 0 <= self.t_on < self.t_off:
            raise ValueError("need 0 <= t_on < t_off")

    def stage_range(self, dt: float) -> range:
        # guard against 0.3 / 0.01 = 29.999999999999996 style rounding
        on = math.ceil(self.t_on / dt - 1e-9)
        off = math.ceil(self.t_off / dt - 1e-9)
        return range(on, off)

    def to_dict(self):
        return {"bus": self.bus, "delta_p": self.delta_p, "t_on": self.t_on, "t_off": self.t_off}


@dataclass
class Trajectory:
    dt: float
    theta: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    scenario: dict = field(default_factory=dict)
    diverged: bool = False

    def __post_init__(self):
        if not (self.theta.shape == self.omega.shape == self.u.shape):
            raise ValueError("theta, omega and u must share their shape")

    @property
    def K(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.K + 1)


def injection_schedule(case: NetworkCase, events: Sequence[DisturbanceEvent], K: int, dt: float):
    """Net injection at each stage index ``0..K``, shape ``(K+1, n)``."""
    p = np.tile(case.p_m, (K + 1, 1))
    for ev in events:
        r = ev.stage_range(dt)
        lo, hi = max(r.start, 0), min(r.stop, K + 1)
        if lo < hi:
            p[lo:hi, ev.bus] += ev.delta_p
    return p


def _control(case, controller, omega):
    if controller is None:
        return np.zeros_like(omega)
    return np.clip(np.asarray(controller(omega), dtype=float), case.u_min, case.u_max)


def step(case: NetworkCase, theta_prev, omega_prev, controller: Optional[Callable], dt: float,
         p_m=None):
    """One Euler stage.  Returns ``(theta, omega, u_prev)`` with ``u_prev = u(omega_prev)``."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    p_m = case.p_m if p_m is None else p_m
    theta_prev = np.asarray(theta_prev, dtype=float)
    omega_prev = np.asarray(omega_prev, dtype=float)
    u = _control(case, controller, omega_prev)
    pe = electrical_power(case, theta_prev)
    theta = theta_prev + dt * omega_prev
    omega = omega_prev + (dt / case.M) * (p_m - case.D * omega_prev - u - pe)
    return theta, omega, u


def _rk4_step(case, controller, theta, omega, dt, p_m):
    def f(th, w):
        u = _control(case, controller, w)
        return w, (p_m - case.D * w - u - electrical_power(case, th)) / case.M

    k1 = f(theta, omega)
    k2 = f(theta + 0.5 * dt * k1[0], omega + 0.5 * dt * k1[1])
    k3 = f(theta + 0.5 * dt * k2[0], omega + 0.5 * dt * k2[1])
    k4 = f(theta + dt * k3[0], omega + dt * k3[1])
    return (theta + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            omega + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))


def rollout_batch(case: NetworkCase, theta0, omega0, controller: Optional[Callable], K: int, dt: float,
                  events: Sequence[DisturbanceEvent] = (), method: str = "euler"):
    """Simulate a batch of initial states.

    ``theta0``/``omega0`` have shape ``(H, n)``.  Returns
    ``(theta, omega, u, diverged)`` with arrays of shape ``(K+1, H, n)``.
    A batch element whose frequency leaves ``[-100, 100]`` rad/s or becomes
    non-finite is marked diverged and frozen at its last finite state.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown integrator {method!r}")
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=float))
    omega0 = np.atleast_2d(np.asarray(omega0, dtype=float))
    H, n = theta0.shape
    P = injection_schedule(case, events, K, dt)
    theta = np.empty((K + 1, H, n))
    omega = np.empty((K + 1, H, n))
    u = np.empty((K + 1, H, n))
    theta[0], omega[0] = theta0, omega0
    diverged = np.zeros(H, dtype=bool)
    for k in range(1, K + 1):
        th_prev, w_prev = theta[k - 1], omega[k - 1]
        if method == "euler":
            th, w, u[k - 1] = step(case, th_prev, w_prev, controller, dt, P[k - 1])
        else:
            u[k - 1] = _control(case, controller, w_prev)
            th, w = _rk4_step(case, controller, th_prev, w_prev, dt, P[k - 1])
        bad = ~np.all(np.isfinite(w), axis=-1) | ~np.all(np.isfinite(th), axis=-1)
        bad |= np.any(np.abs(w) > DIVERGENCE_LIMIT, axis=-1)
        bad |= diverged
        th = np.where(bad[:, None], th_prev, th)
        w = np.where(bad[:, None], w_prev, w)
        diverged |= bad
        theta[k], omega[k] = th, w
    u[K] = _control(case, controller, omega[K])
    return theta, omega, u, diverged


def rollout(case: NetworkCase, init, controller: Optional[Callable], K: int, dt: float,
            events: Sequence[DisturbanceEvent] = (), method: str = "euler") -> Trajectory:
    """Single rollout from ``init = (theta0, omega0)``."""
    theta0, omega0 = init
    th, w, u, div = rollout_batch(case, np.asarray(theta0)[None], np.asarray(omega0)[None],
                                  controller, K, dt, events, method)
    scenario = {"events": [e.to_dict() for e in events], "integrator": method}
    return Trajectory(dt, th[:, 0], w[:, 0], u[:, 0], scenario, bool(div[0]))


def sample_initial_states(case: NetworkCase, batch: int, seed, *, delta_range: float = 0.05,
                          omega_range_hz: float = 0.1, center: Optional[Equilibrium] = None,
                          rng: Optional[np.random.Generator] = None):
    """Uniform initial angles and frequencies around an equilibrium.

    ``delta_range`` is in rad, ``omega_range_hz`` in Hz (converted to rad/s
    internally).  ``center`` defaults to the uncontrolled equilibrium.
    Returns ``(theta0, omega0)`` of shape ``(batch, n)``.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if center is None:
        center = solve_equilibrium(case)
    n = case.n
    w_range = 2.0 * math.pi * omega_range_hz
    d = rng.uniform(-delta_range, delta_range, size=(batch, n)) if delta_range > 0 else np.zeros((batch, n))
    w = rng.uniform(-w_range, w_range, size=(batch, n)) if w_range > 0 else np.zeros((batch, n))
    return center.delta_star + d, center.omega_star + w


def write_trajectory_csv(traj: Trajectory, path, base_freq: float, metadata: Optional[dict] = None):
    """CSV with columns ``t, theta_*, omega_* (Hz), u_*`` plus a JSON sidecar."""
    path = Path(path)
    n = traj.theta.shape[1]
    header = (["t"] + [f"theta_{i}" for i in range(n)] + [f"omega_{i}" for i in range(n)]
              + [f"u_{i}" for i in range(n)])
    omega_hz = traj.omega / (2.0 * math.pi)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(traj.K + 1):
            row = [traj.t[k], *traj.theta[k], *omega_hz[k], *traj.u[k]]
            w.writerow([repr(float(x)) for x in row])
    side = {"scenario": traj.scenario, "dt": traj.dt, "K": traj.K, "diverged": traj.diverged,
            "omega_unit": "Hz", "base_freq": base_freq}
    if metadata:
        side.update(metadata)
    sidecar = path.with_suffix(".meta.json")
    sidecar.write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return [path, sidecar]
