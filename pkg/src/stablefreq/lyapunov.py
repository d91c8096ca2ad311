"""Executable Lyapunov certificate for monotone frequency controllers.

The energy function is

    V = 1/2 sum M_i (w_i - w*)^2 + W_p(delta) + eps * W_c(delta, w)

with the potential ``W_p`` and the cross term
``W_c = (p_e(delta) - p_e(delta*))^T M (w - w*)``.  Its time derivative is a
quadratic form in ``(p_e - p_e*, w - w*)`` with the ``2n x 2n`` matrix ``Q``
(see :func:`q_matrix`) minus a control cross term that is non-negative for
monotone controllers.  Everything here is evaluated numerically on samples;
nothing is a symbolic proof.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.stats import qmc

from .controller import MonotoneParams, TabulatedController
from .power_net import (
    Equilibrium,
    EquilibriumError,
    NetworkCase,
    coi_transform,
    edge_list,
    electrical_power,
    solve_equilibrium,
)

__all__ = [
    "jacobi_eigh",
    "hessian_H",
    "electrical_power",
    "LyapunovContext",
    "LyapunovReport",
    "lyapunov_V",
    "q_matrix",
    "critical_epsilon",
    "epsilon_search",
    "vdot_analytic",
    "vdot_numeric",
    "continuous_rhs",
    "sample_theta_region",
    "sample_states",
    "empirical_constants",
    "certify_controller",
]


# --------------------------------------------------------------------------
# symmetric eigensolver
# --------------------------------------------------------------------------

def jacobi_eigh(A, tol: float = 1e-10, max_sweeps: int = 60, vectors: bool = False):
    """Cyclic Jacobi eigenvalue iteration for (batches of) symmetric matrices.

    Sweeps rotate every off-diagonal pair ``(p, q)`` to zero until the
    largest off-diagonal magnitude falls below ``tol`` times
    ``max(1, ||A||_F)``.  Eigenvalues are returned in ascending order.
    """
    A = np.array(A, dtype=float)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError("matrix must be square")
    batch_shape = A.shape[:-2]
    N = A.shape[-1]
    A = A.reshape((-1, N, N))
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    V = np.broadcast_to(np.eye(N), A.shape).copy() if vectors else None
    scale = np.maximum(1.0, np.sqrt(np.sum(A * A, axis=(-1, -2))))
    offmask = ~np.eye(N, dtype=bool)
    for _ in range(max_sweeps):
        off = np.max(np.abs(A[:, offmask]), axis=-1) if N > 1 else np.zeros(A.shape[0])
        if np.all(off <= tol * scale):
            break
        for p in range(N - 1):
            for q in range(p + 1, N):
                apq = A[:, p, q]
                active = np.abs(apq) > 1e-300
                if not np.any(active):
                    continue
                app = A[:, p, p]
                aqq = A[:, q, q]
                safe = np.where(active, apq, 1.0)
                theta = (aqq - app) / (2.0 * safe)
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(theta == 0.0, 1.0, t)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c = np.where(active, c, 1.0)
                s = np.where(active, s, 0.0)
                cc = c[:, None]
                ss = s[:, None]
                colp = A[:, :, p].copy()
                colq = A[:, :, q].copy()
                A[:, :, p] = cc * colp - ss * colq
                A[:, :, q] = ss * colp + cc * colq
                rowp = A[:, p, :].copy()
                rowq = A[:, q, :].copy()
                A[:, p, :] = cc * rowp - ss * rowq
                A[:, q, :] = ss * rowp + cc * rowq
                A[:, p, q] = np.where(active, 0.0, A[:, p, q])
                A[:, q, p] = A[:, p, q]
                if vectors:
                    vp = V[:, :, p].copy()
                    vq = V[:, :, q].copy()
                    V[:, :, p] = cc * vp - ss * vq
                    V[:, :, q] = ss * vp + cc * vq
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    w = np.diagonal(A, axis1=-2, axis2=-1)
    order = np.argsort(w, axis=-1)
    w = np.take_along_axis(w, order, axis=-1).reshape(batch_shape + (N,))
    if not vectors:
        return w
    V = np.take_along_axis(V, order[:, None, :], axis=-1).reshape(batch_shape + (N, N))
    return w, V


# --------------------------------------------------------------------------
# energy function pieces
# --------------------------------------------------------------------------

def hessian_H(case: NetworkCase, delta):
    """Jacobian of ``p_e``: ``H_ij = -B_ij cos(delta_ij)``, rows summing to zero."""
    delta = np.asarray(delta, dtype=float)
    C = case.B * np.cos(delta[..., :, None] - delta[..., None, :])
    H = -C
    idx = np.arange(case.n)
    H[..., idx, idx] = np.sum(C, axis=-1) - C[..., idx, idx]
    return H


@dataclass(frozen=True)
class LyapunovContext:
    case: NetworkCase
    eq: Equilibrium
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")

    @property
    def pe_star(self):
        return electrical_power(self.case, self.eq.delta_star)

    @property
    def u_star(self):
        if self.eq.u_star is None:
            return np.zeros(self.case.n)
        return self.eq.u_star


def lyapunov_V(ctx: LyapunovContext, delta, omega):
    """Energy function value; batch dimensions allowed on ``delta``/``omega``."""
    case, eq = ctx.case, ctx.eq
    delta = np.asarray(delta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    dw = omega - eq.omega_star
    kinetic = 0.5 * np.sum(case.M * dw * dw, axis=-1)
    dij = delta[..., :, None] - delta[..., None, :]
    ds = eq.delta_star
    dij_s = ds[:, None] - ds[None, :]
    wp = (-0.5 * np.sum(case.B * (np.cos(dij) - np.cos(dij_s)), axis=(-1, -2))
          - np.sum(np.sum(case.B * np.sin(dij_s), axis=-1) * (delta - ds), axis=-1))
    dpe = electrical_power(case, delta) - ctx.pe_star
    wc = np.sum(dpe * case.M * dw, axis=-1)
    return kinetic + wp + ctx.epsilon * wc


def q_matrix(ctx_or_case, delta, epsilon: Optional[float] = None, with_eig: bool = True):
    """Assemble ``Q(delta)`` and (optionally) its smallest eigenvalue.

    ``Q = [[eps I, eps/2 D], [eps/2 D, D - eps/2 (H M + M H)]]``.
    Accepts a :class:`LyapunovContext` or a bare case plus ``epsilon``.
    """
    if isinstance(ctx_or_case, LyapunovContext):
        case = ctx_or_case.case
        eps = ctx_or_case.epsilon if epsilon is None else epsilon
    else:
        case = ctx_or_case
        eps = epsilon
    delta = np.asarray(delta, dtype=float)
    n = case.n
    H = hessian_H(case, delta)
    Mm = np.diag(case.M)
    Dm = np.diag(case.D)
    batch = delta.shape[:-1]
    Q = np.zeros(batch + (2 * n, 2 * n))
    Q[..., :n, :n] = eps * np.eye(n)
    Q[..., :n, n:] = 0.5 * eps * Dm
    Q[..., n:, :n] = 0.5 * eps * Dm
    Q[..., n:, n:] = Dm - 0.5 * eps * (H @ Mm + Mm @ H)
    if not with_eig:
        return Q
    lam = jacobi_eigh(Q)[..., 0]
    return Q, lam


def _is_pd(Q):
    """Batched positive-definiteness test via Cholesky."""
    Q = np.asarray(Q)
    flat = Q.reshape((-1,) + Q.shape[-2:])
    ok = np.ones(flat.shape[0], dtype=bool)
    try:
        np.linalg.cholesky(flat)
        return ok.reshape(Q.shape[:-2])
    except np.linalg.LinAlgError:
        for k in range(flat.shape[0]):
            try:
                np.linalg.cholesky(flat[k])
            except np.linalg.LinAlgError:
                ok[k] = False
        return ok.reshape(Q.shape[:-2])


def critical_epsilon(case: NetworkCase, delta):
    """Closed-form supremum of admissible ``eps`` per sample.

    ``Q`` is positive definite iff the Schur complement
    ``D - eps (S + D^2 / 4)`` is, where ``S = (H M + M H) / 2``; so the
    threshold is ``1 / lambda_max(D^-1/2 (S + D^2/4) D^-1/2)``.  Used as an
    independent oracle for :func:`epsilon_search`.
    """
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    H = hessian_H(case, delta)
    Mm = np.diag(case.M)
    S = 0.5 * (H @ Mm + Mm @ H) + 0.25 * np.diag(case.D ** 2)
    dinv = 1.0 / np.sqrt(case.D)
    N = dinv[:, None] * S * dinv[None, :]
    lam_max = np.linalg.eigvalsh(N)[..., -1]
    return np.where(lam_max > 0, 1.0 / np.where(lam_max > 0, lam_max, 1.0), np.inf)


def epsilon_search(case: NetworkCase, eq: Equilibrium, samples: int = 1000, seed: int = 0, *,
                   lo: float = 1e-8, hi: float = 1.0, tol: float = 1e-9, deltas=None):
    """Largest ``eps`` with ``Q(delta)`` positive definite at all sampled ``delta``.

    Bisection on ``[lo, hi]``; the upper end is doubled while still feasible
    so that cases whose threshold exceeds ``hi`` are handled.  Returns
    ``(eps_star, deltas)``.
    """
    if deltas is None:
        deltas = sample_theta_region(case, samples, seed)
        deltas = np.vstack([eq.delta_star[None, :], deltas])
    deltas = np.atleast_2d(deltas)

    def feasible(eps):
        return bool(np.all(_is_pd(q_matrix(case, deltas, eps, with_eig=False))))

    if not feasible(lo):
        raise EquilibriumError(f"no valid epsilon: Q not positive definite even at eps={lo}")
    for _ in range(60):
        if not feasible(hi):
            break
        lo, hi = hi, 2.0 * hi
    else:
        return lo, deltas
    while hi - lo > tol * max(1.0, lo):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo, deltas


def continuous_rhs(case: NetworkCase, controller: Callable, theta, omega, p_m=None):
    """Right-hand side of the continuous swing dynamics (angles, frequencies)."""
    p_m = case.p_m if p_m is None else p_m
    u = np.clip(controller(omega), case.u_min, case.u_max)
    domega = (p_m - case.D * omega - u - electrical_power(case, theta)) / case.M
    return omega, domega


def vdot_analytic(ctx: LyapunovContext, delta, omega, u_values):
    """Time derivative of V from the quadratic-form expression."""
    case = ctx.case
    delta = np.asarray(delta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    x = electrical_power(case, delta) - ctx.pe_star
    y = omega - ctx.eq.omega_star
    z = np.concatenate([x, y], axis=-1)
    Q = q_matrix(ctx, delta, with_eig=False)
    quad = np.einsum("...i,...ij,...j->...", z, Q, z)
    cross = np.sum((y + ctx.epsilon * x) * (np.asarray(u_values) - ctx.u_star), axis=-1)
    return -quad - cross


def _rk4(case, controller, theta, omega, h):
    def f(th, w):
        return continuous_rhs(case, controller, th, w)

    k1 = f(theta, omega)
    k2 = f(theta + 0.5 * h * k1[0], omega + 0.5 * h * k1[1])
    k3 = f(theta + 0.5 * h * k2[0], omega + 0.5 * h * k2[1])
    k4 = f(theta + h * k3[0], omega + h * k3[1])
    th = theta + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    w = omega + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return th, w


def vdot_numeric(ctx: LyapunovContext, controller: Callable, delta, omega, h: float = 1e-5):
    """Central difference of V along the continuous dynamics (RK4 steps of +-h)."""
    thp, wp = _rk4(ctx.case, controller, delta, omega, h)
    thm, wm = _rk4(ctx.case, controller, delta, omega, -h)
    vp = lyapunov_V(ctx, coi_transform(thp), wp)
    vm = lyapunov_V(ctx, coi_transform(thm), wm)
    return (vp - vm) / (2.0 * h)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

MARGIN = 0.01


def _spanning_tree(case: NetworkCase):
    """BFS tree edges ``(parent, child)`` rooted at bus 0."""
    n = case.n
    seen = [False] * n
    seen[0] = True
    order = [0]
    edges = []
    for i in order:
        for j in np.flatnonzero(case.B[i]):
            j = int(j)
            if not seen[j]:
                seen[j] = True
                order.append(j)
                edges.append((i, j))
    return edges


def sample_theta_region(case: NetworkCase, count: int, seed: int = 0):
    """Latin-hypercube samples of COI angles inside the admissible region.

    Tree-edge differences are drawn on ``[-pi/2 + 0.01, pi/2 - 0.01]`` and
    propagated along a BFS spanning tree; if a non-tree edge then exceeds the
    bound, the sample is scaled toward zero until the worst edge sits on it.
    """
    n = case.n
    if n == 1:
        return np.zeros((count, 1))
    tree = _spanning_tree(case)
    bound = math.pi / 2 - MARGIN
    lhs = qmc.LatinHypercube(d=len(tree), seed=seed).random(count)
    diffs = (2.0 * lhs - 1.0) * bound
    theta = np.zeros((count, n))
    for k, (parent, child) in enumerate(tree):
        theta[:, child] = theta[:, parent] + diffs[:, k]
    edges = np.array(edge_list(case))
    worst = np.max(np.abs(theta[:, edges[:, 0]] - theta[:, edges[:, 1]]), axis=-1)
    scale = np.minimum(1.0, bound / np.maximum(worst, 1e-300))
    theta *= scale[:, None]
    return coi_transform(theta)


def sample_states(case: NetworkCase, eq: Equilibrium, count: int, seed: int = 0,
                  omega_radius: float = 1.0):
    """States in the region of attraction: admissible angles and frequencies
    within ``omega_radius`` rad/s of the synchronous value.

    A quarter of the samples are drawn close to the equilibrium so that
    small-deviation behaviour is exercised as well.
    """
    rng = np.random.default_rng(seed)
    delta = sample_theta_region(case, count, seed)
    omega = eq.omega_star + rng.uniform(-omega_radius, omega_radius, size=(count, case.n))
    near = rng.random(count) < 0.25
    shrink = 10.0 ** rng.uniform(-6, -1, size=count)
    delta[near] = eq.delta_star + shrink[near, None] * (delta[near] - eq.delta_star)
    omega[near] = eq.omega_star + shrink[near, None] * (omega[near] - eq.omega_star)
    return delta, omega


def empirical_constants(ctx: LyapunovContext, delta, omega, u_values):
    """Sampled stand-ins for the quadratic bounds on V and the decay rate.

    Returns ``alpha1``, ``alpha2`` (min/max of V over squared distance),
    ``c_hat`` (min of ``-Vdot / V``) and the minimum sampled algebraic
    connectivity ``lambda_2(H)``.
    """
    V = lyapunov_V(ctx, delta, omega)
    Vd = vdot_analytic(ctx, delta, omega, u_values)
    dist = (np.sum((delta - ctx.eq.delta_star) ** 2, axis=-1)
            + np.sum((omega - ctx.eq.omega_star) ** 2, axis=-1))
    ok = dist > 1e-12
    ratio = V[ok] / dist[ok]
    H = hessian_H(ctx.case, delta)
    lam2 = np.linalg.eigvalsh(H)[..., 1] if ctx.case.n > 1 else np.zeros(len(delta))
    return {
        "alpha1": float(np.min(ratio)),
        "alpha2": float(np.max(ratio)),
        "c_hat": float(np.min(-Vd[ok] / V[ok])),
        "lambda2_H_min": float(np.min(lam2)),
    }


# --------------------------------------------------------------------------
# certification
# --------------------------------------------------------------------------

@dataclass
class LyapunovReport:
    verdict: str
    reason: str = ""
    epsilon_star: Optional[float] = None
    epsilon_used: Optional[float] = None
    lambda_min_Q: Optional[float] = None
    checks: dict = field(default_factory=dict)
    monotone_check: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    equilibrium: Optional[dict] = None
    t: Optional[np.ndarray] = None
    V_series: Optional[np.ndarray] = None
    Vdot_series: Optional[np.ndarray] = None

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"

    def to_dict(self) -> dict:
        out = {
            "verdict": self.verdict,
            "reason": self.reason,
            "epsilon_star": self.epsilon_star,
            "epsilon_used": self.epsilon_used,
            "lambda_min_Q": self.lambda_min_Q,
            "checks": self.checks,
            "monotone_check": self.monotone_check,
            "constants": self.constants,
            "equilibrium": self.equilibrium,
        }
        return out


def _check_monotone(controller, n, rng, grid_points=10_000, pairs=10_000, omega_max=10.0):
    grid = np.linspace(-omega_max, omega_max, grid_points)
    U = np.asarray(controller(np.repeat(grid[:, None], n, axis=1)))
    d = np.diff(U, axis=0)
    if np.any(d < 0):
        k, i = np.argwhere(d < 0)[0]
        return {"passed": False, "bus": int(i), "omega_1": float(grid[k]), "omega_2": float(grid[k + 1]),
                "u_1": float(U[k, i]), "u_2": float(U[k + 1, i])}
    a = rng.uniform(-omega_max, omega_max, size=(pairs, n))
    b = rng.uniform(-omega_max, omega_max, size=(pairs, n))
    w1, w2 = np.minimum(a, b), np.maximum(a, b)
    u1, u2 = controller(w1), controller(w2)
    bad = np.argwhere(u1 > u2)
    if bad.size:
        k, i = bad[0]
        return {"passed": False, "bus": int(i), "omega_1": float(w1[k, i]), "omega_2": float(w2[k, i]),
                "u_1": float(u1[k, i]), "u_2": float(u2[k, i])}
    return {"passed": True}


def certify_controller(case: NetworkCase, controller: Union[MonotoneParams, TabulatedController, Callable],
                       *, samples: int = 1000, seed: int = 0, omega_radius: float = 1.0,
                       series_steps: int = 500, dt: float = 0.01) -> LyapunovReport:
    """Collect the evidence that ``controller`` is stabilizing for ``case``.

    Checks, in order: monotonicity (grid and random pairs on [-10, 10]
    rad/s), ``u(0) = 0``, bound respect, existence of an admissible ``eps``,
    and ``V > 0``, ``Vdot < 0`` at sampled non-equilibrium states.  The first
    failing check is the refutation reason.  ``eps`` starts at half the
    sampled maximum and is halved until the sampled checks pass (at most 40
    times).
    """
    rng = np.random.default_rng(seed)
    n = case.n
    checks = {}
    if isinstance(controller, MonotoneParams):
        if controller.n != n:
            raise ValueError(f"controller has {controller.n} buses, case has {n}")
        try:
            controller.validate()
            structural = True
        except Exception:
            structural = False
        checks["structure"] = structural

    mono = _check_monotone(controller, n, rng)
    checks["monotone"] = mono["passed"]
    u0 = np.asarray(controller(np.zeros(n)))
    checks["origin"] = bool(np.all(u0 == 0.0))
    grid = np.linspace(-10.0, 10.0, 2001)
    Ug = np.asarray(controller(np.repeat(grid[:, None], n, axis=1)))
    checks["bounds"] = bool(np.all(Ug >= case.u_min) and np.all(Ug <= case.u_max))

    report = LyapunovReport(verdict="refuted", checks=checks, monotone_check=mono)
    for name in ("structure", "monotone", "origin", "bounds"):
        if name in checks and not checks[name]:
            report.reason = name if name != "monotone" else "monotonicity"
            if name == "origin":
                report.monotone_check = dict(mono, u_at_origin=u0.tolist())
            return report

    try:
        eq = solve_equilibrium(case, controller)
    except EquilibriumError as exc:
        report.reason = f"equilibrium: {exc}"
        return report
    report.equilibrium = {"omega_star": eq.omega_star, "delta_star": eq.delta_star.tolist(),
                          "residual": eq.residual}
    try:
        eps_star, deltas = epsilon_search(case, eq, samples, seed)
    except EquilibriumError as exc:
        checks["epsilon"] = False
        report.reason = f"epsilon: {exc}"
        return report
    checks["epsilon"] = True
    report.epsilon_star = eps_star
    _, lam = q_matrix(case, deltas, eps_star / 2.0)
    report.lambda_min_Q = float(np.min(lam))

    delta, omega = sample_states(case, eq, samples, seed + 1, omega_radius)
    nonzero = (np.sum((delta - eq.delta_star) ** 2, axis=-1)
               + np.sum((omega - eq.omega_star) ** 2, axis=-1)) > 0
    delta, omega = delta[nonzero], omega[nonzero]
    u_vals = np.clip(controller(omega), case.u_min, case.u_max)
    eps = eps_star / 2.0
    for _ in range(40):
        ctx = LyapunovContext(case, eq, eps)
        V = lyapunov_V(ctx, delta, omega)
        Vd = vdot_analytic(ctx, delta, omega, u_vals)
        if np.all(V > 0) and np.all(Vd < 0):
            break
        eps /= 2.0
    checks["V_positive"] = bool(np.all(V > 0))
    checks["Vdot_negative"] = bool(np.all(Vd < 0))
    report.epsilon_used = eps
    if not (checks["V_positive"] and checks["Vdot_negative"]):
        report.reason = "V_positive" if not checks["V_positive"] else "Vdot_negative"
        return report
    report.constants = empirical_constants(ctx, delta, omega, u_vals)

    if series_steps:
        from .sim import rollout, sample_initial_states

        th0, w0 = sample_initial_states(case, 1, seed, center=eq)
        traj = rollout(case, (th0[0], w0[0]), controller, series_steps, dt)
        d = coi_transform(traj.theta)
        report.t = traj.t
        report.V_series = lyapunov_V(ctx, d, traj.omega)
        report.Vdot_series = vdot_analytic(ctx, d, traj.omega, traj.u)
    report.verdict = "certified"
    return report
