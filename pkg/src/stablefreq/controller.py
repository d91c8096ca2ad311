"""Monotone stacked-ReLU controllers.

Each bus ``i`` carries a positive-side and a negative-side stack of ``m``
ReLU units.  Training works on non-negative "hat" parameters:

* ``q_hat[i, l]`` - slope of the positive-side piece ``l`` (cumulative slope)
* ``b_hat[i, l]`` - width of the gap between breakpoints ``l-1`` and ``l``
  (``b_hat[i, 0]`` is fixed to 0, the first unit activates at the origin)
* ``z_hat``, ``c_hat`` - the same for the negative side.

The raw single-hidden-layer weights ``(q, b, z, c)`` are derived views, see
:func:`build_raw_weights`.  Evaluation uses the equivalent clipped-segment
form, which is a sum of non-negative monotone terms and therefore monotone
even in floating point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

__all__ = [
    "ParamError",
    "MonotoneParams",
    "TabulatedController",
    "build_raw_weights",
    "eval_fplus",
    "eval_fminus",
    "eval_controller",
    "eval_raw",
    "evaluate",
    "local_derivatives",
    "grad_params",
    "init_params",
    "droop_params",
    "droop_as_stack",
    "fit_monotone",
    "fit_error",
    "load_controller",
    "save_params",
    "params_from_dict",
]

HATS = ("q_hat", "b_hat", "z_hat", "c_hat")


class ParamError(ValueError):
    """Controller parameters violate the monotone-structure invariants."""


def _as_matrix(name, a):
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ParamError(f"{name}: expected a 2-D (bus x unit) array")
    return a


@dataclass
class MonotoneParams:
    """Per-bus stacked-ReLU parameters, arrays of shape ``(n, m)``."""

    q_hat: np.ndarray
    b_hat: np.ndarray
    z_hat: np.ndarray
    c_hat: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    deadband: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in HATS:
            setattr(self, name, _as_matrix(name, getattr(self, name)))
        shape = self.q_hat.shape
        for name in HATS:
            if getattr(self, name).shape != shape:
                raise ParamError(f"{name}: shape {getattr(self, name).shape} != {shape}")
        n = shape[0]
        self.u_min = np.broadcast_to(np.asarray(self.u_min, dtype=float), (n,)).copy()
        self.u_max = np.broadcast_to(np.asarray(self.u_max, dtype=float), (n,)).copy()
        db = 0.0 if self.deadband is None else self.deadband
        self.deadband = np.broadcast_to(np.asarray(db, dtype=float), (n,)).copy()
        self.validate()

    @property
    def n(self) -> int:
        return self.q_hat.shape[0]

    @property
    def m(self) -> int:
        return self.q_hat.shape[1]

    def validate(self):
        for name in HATS:
            a = getattr(self, name)
            if not np.all(np.isfinite(a)):
                raise ParamError(f"{name} has non-finite entries")
            bad = np.argwhere(a < 0)
            if bad.size:
                i, l = bad[0]
                raise ParamError(f"{name}[{i}][{l}]={a[i, l]} is negative")
        for name in ("b_hat", "c_hat"):
            a = getattr(self, name)
            nz = np.flatnonzero(a[:, 0] != 0)
            if nz.size:
                raise ParamError(f"{name}[{nz[0]}][0] must be 0")
        for i in range(self.n):
            if not self.u_min[i] <= 0.0 <= self.u_max[i]:
                raise ParamError(f"bounds at bus {i}: need u_min <= 0 <= u_max, got "
                                 f"[{self.u_min[i]}, {self.u_max[i]}]")
        if np.any(self.deadband < 0):
            raise ParamError("deadband must be >= 0")
        if np.any(self.deadband > 0) and self.m < 2:
            raise ParamError("a deadband needs m >= 2 units per side")

    def copy(self) -> "MonotoneParams":
        return MonotoneParams(self.q_hat.copy(), self.b_hat.copy(), self.z_hat.copy(),
                              self.c_hat.copy(), self.u_min.copy(), self.u_max.copy(),
                              self.deadband.copy())

    def hats(self) -> dict:
        return {k: getattr(self, k) for k in HATS}

    def replace_hats(self, **hats) -> "MonotoneParams":
        new = self.copy()
        for k, v in hats.items():
            setattr(new, k, np.array(v, dtype=float))
        new.validate()
        return new

    def __call__(self, omega):
        return evaluate(self, omega)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "q_hat": self.q_hat.tolist(),
            "b_hat": self.b_hat.tolist(),
            "z_hat": self.z_hat.tolist(),
            "c_hat": self.c_hat.tolist(),
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
            "deadband": self.deadband.tolist(),
        }


def _effective(p: MonotoneParams):
    """Hat arrays with the fixed entries and deadband overrides applied."""
    qh, bh, zh, ch = (a.copy() for a in (p.q_hat, p.b_hat, p.z_hat, p.c_hat))
    bh[:, 0] = 0.0
    ch[:, 0] = 0.0
    db = p.deadband > 0
    if np.any(db):
        qh[db, 0] = 0.0
        zh[db, 0] = 0.0
        bh[db, 1] = p.deadband[db]
        ch[db, 1] = p.deadband[db]
    return qh, bh, zh, ch


def _trainable_mask(p: MonotoneParams):
    """Boolean masks of entries that are free parameters (not pinned)."""
    mask = np.ones((p.n, p.m), dtype=bool)
    first = mask.copy()
    first[:, 0] = False
    masks = {"q_hat": mask.copy(), "b_hat": first.copy(), "z_hat": mask.copy(), "c_hat": first.copy()}
    db = p.deadband > 0
    if np.any(db):
        for k in ("q_hat", "z_hat"):
            masks[k][db, 0] = False
        for k in ("b_hat", "c_hat"):
            masks[k][db, 1] = False
    return masks


def build_raw_weights(p: MonotoneParams, bus: int):
    """Raw hidden-layer weights ``(q, b, z, c)`` of one bus.

    ``q[0] = q_hat[0]``, ``q[l] = q_hat[l] - q_hat[l-1]``; ``b[l]`` is minus
    the cumulative breakpoint spacing.  ``z`` and ``c`` mirror this with the
    sign of ``z`` flipped.
    """
    qh, bh, zh, ch = (a[bus] for a in _effective(p))
    q = np.diff(qh, prepend=0.0)
    z = -np.diff(zh, prepend=0.0)
    b = -np.cumsum(bh)
    c = -np.cumsum(ch)
    b[0] = 0.0
    c[0] = 0.0
    return q, b, z, c


def _segments(slopes, gaps, x):
    """sum_l slopes[..., l] * clip(x - t_l, 0, w_l) with breakpoints from gaps."""
    t = np.cumsum(gaps, axis=-1)
    w = np.concatenate([gaps[..., 1:], np.full(gaps.shape[:-1] + (1,), np.inf)], axis=-1)
    s = np.clip(x[..., None] - t, 0.0, w)
    return np.sum(slopes * s, axis=-1)


def _fplus_all(qh, bh, omega):
    return _segments(qh, bh, omega)


def _fminus_all(zh, ch, omega):
    return -_segments(zh, ch, -omega)


def evaluate(p: MonotoneParams, omega):
    """Controller output for every bus; ``omega`` has shape ``(..., n)``."""
    omega = np.asarray(omega, dtype=float)
    qh, bh, zh, ch = _effective(p)
    f = _fplus_all(qh, bh, omega) + _fminus_all(zh, ch, omega)
    return np.clip(f, p.u_min, p.u_max)


def _bus_slice(p: MonotoneParams, bus: int):
    qh, bh, zh, ch = _effective(p)
    return qh[bus], bh[bus], zh[bus], ch[bus]


def eval_fplus(p: MonotoneParams, bus: int, omega):
    qh, bh, _, _ = _bus_slice(p, bus)
    return _fplus_all(qh, bh, np.asarray(omega, dtype=float))


def eval_fminus(p: MonotoneParams, bus: int, omega):
    _, _, zh, ch = _bus_slice(p, bus)
    return _fminus_all(zh, ch, np.asarray(omega, dtype=float))


def eval_controller(p: MonotoneParams, bus: int, omega):
    omega = np.asarray(omega, dtype=float)
    f = eval_fplus(p, bus, omega) + eval_fminus(p, bus, omega)
    return np.clip(f, p.u_min[bus], p.u_max[bus])


def _relu(x):
    return np.maximum(x, 0.0)


def eval_raw(p: MonotoneParams, bus: int, omega):
    """Literal single-hidden-layer evaluation from the raw weights.

    ``u = u_max - relu(u_max - f) + relu(u_min - f)`` with
    ``f = q . relu(w + b) + z . relu(-w + c)``.  Used to cross-check
    :func:`eval_controller`.
    """
    omega = np.asarray(omega, dtype=float)
    q, b, z, c = build_raw_weights(p, bus)
    fp = np.sum(q * _relu(omega[..., None] + b), axis=-1)
    fm = np.sum(z * _relu(-omega[..., None] + c), axis=-1)
    f = fp + fm
    return p.u_max[bus] - _relu(p.u_max[bus] - f) + _relu(p.u_min[bus] - f)


def local_derivatives(p: MonotoneParams, omega):
    """Output, input slope and parameter partials at ``omega`` (shape ``(..., n)``).

    Returns ``(u, du_domega, grads)`` where ``grads[name]`` has shape
    ``(..., n, m)``.  ReLU kinks use the inactive branch (derivative 0), so the
    clamp has derivative ``1[f < u_max] - 1[f < u_min]``.  Pinned entries
    (first gaps, deadband overrides) receive zero gradient.
    """
    omega = np.asarray(omega, dtype=float)
    qh, bh, zh, ch = _effective(p)
    x = omega[..., None]

    # positive side
    t = np.cumsum(bh, axis=-1)
    r = _relu(x - t)
    act = (x - t) > 0.0
    r_next = np.concatenate([r[..., 1:], np.zeros_like(r[..., :1])], axis=-1)
    d_qh = r - r_next
    q = np.diff(qh, prepend=0.0, axis=-1)
    qa = q * act
    d_bh = -np.flip(np.cumsum(np.flip(qa, -1), -1), -1)
    dfp_dw = np.sum(qa, axis=-1)
    fp = np.sum(qh * d_qh, axis=-1)

    # negative side, mirrored in omega
    s = np.cumsum(ch, axis=-1)
    rn = _relu(-x - s)
    actn = (-x - s) > 0.0
    rn_next = np.concatenate([rn[..., 1:], np.zeros_like(rn[..., :1])], axis=-1)
    d_zh = -(rn - rn_next)
    zdiff = np.diff(zh, prepend=0.0, axis=-1)  # = -z
    za = zdiff * actn
    # f- = -sum zdiff * relu(-w - s); d/d s_l = +zdiff_l * act_l
    d_ch = np.flip(np.cumsum(np.flip(za, -1), -1), -1)
    dfm_dw = np.sum(za, axis=-1)
    fm = np.sum(zh * d_zh, axis=-1)

    f = fp + fm
    gate = (f < p.u_max).astype(float) - (f < p.u_min).astype(float)
    u = np.clip(f, p.u_min, p.u_max)
    du_dw = gate * (dfp_dw + dfm_dw)
    g = gate[..., None]
    masks = _trainable_mask(p)
    grads = {
        "q_hat": g * d_qh * masks["q_hat"],
        "b_hat": g * d_bh * masks["b_hat"],
        "z_hat": g * d_zh * masks["z_hat"],
        "c_hat": g * d_ch * masks["c_hat"],
    }
    return u, du_dw, grads


def grad_params(p: MonotoneParams, bus: int, omega: float) -> dict:
    """Gradient of the bus-``bus`` output with respect to its hat vectors."""
    w = np.zeros(p.n)
    w[bus] = omega
    _, _, grads = local_derivatives(p, w)
    return {k: v[bus].copy() for k, v in grads.items()}


# --------------------------------------------------------------------------
# construction helpers
# --------------------------------------------------------------------------

def init_params(n: int, m: int, u_min, u_max, rng: np.random.Generator, *,
                k0: float = 5.0, omega_span: float = 1.0, deadband=0.0) -> MonotoneParams:
    """Random droop-like initialization.

    Slopes are uniform on ``[0, 2 k0 / m]`` and breakpoint gaps uniform on
    ``[0, omega_span / m]``.
    """
    qh = rng.uniform(0.0, 2.0 * k0 / m, size=(n, m))
    zh = rng.uniform(0.0, 2.0 * k0 / m, size=(n, m))
    bh = rng.uniform(0.0, omega_span / m, size=(n, m))
    ch = rng.uniform(0.0, omega_span / m, size=(n, m))
    bh[:, 0] = 0.0
    ch[:, 0] = 0.0
    return MonotoneParams(qh, bh, zh, ch, u_min, u_max, deadband)


def droop_params(k, u_min, u_max) -> MonotoneParams:
    """Saturated linear droop ``clip(k w, u_min, u_max)`` as an ``m = 1`` stack."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    n = k.shape[0]
    zeros = np.zeros((n, 1))
    return MonotoneParams(k[:, None].copy(), zeros, k[:, None].copy(), zeros.copy(), u_min, u_max)


def droop_as_stack(k, m: int, u_min, u_max, omega_span: float = 1.0) -> MonotoneParams:
    """Droop gains written as an ``m``-unit stack (every piece has slope ``k``).

    Evaluates identically to :func:`droop_params`; the extra zero-slope units
    give training room to bend the curve.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    n = k.shape[0]
    q = np.repeat(k[:, None], m, axis=1)
    gaps = np.full((n, m), omega_span / m)
    gaps[:, 0] = 0.0
    return MonotoneParams(q, gaps, q.copy(), gaps.copy(), u_min, u_max)


def _one_side(r, nodes):
    """Slopes and gaps of the interpolant through r on increasing nodes starting at 0."""
    vals = np.array([float(r(x)) for x in nodes])
    gaps = np.diff(nodes)
    slopes = np.diff(vals) / gaps
    return slopes, gaps


def fit_monotone(r: Callable[[float], float], x_lo: float, x_hi: float, grid_n: int, *,
                 u_min: Optional[float] = None, u_max: Optional[float] = None) -> MonotoneParams:
    """Represent the grid interpolant of a monotone ``r`` (with ``r(0) = 0``).

    The grid is ``x_lo + k (x_hi - x_lo) / grid_n``; the origin is added as a
    node if it is not already one.  Outside ``[x_lo, x_hi]`` the fit is held
    constant.  Returns a one-bus :class:`MonotoneParams`.
    """
    if not x_lo < x_hi:
        raise ValueError("need x_lo < x_hi")
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    grid = x_lo + (x_hi - x_lo) * np.arange(grid_n + 1) / grid_n
    samples = np.array([float(r(x)) for x in grid])
    if np.any(np.diff(samples) < 0):
        k = int(np.flatnonzero(np.diff(samples) < 0)[0])
        raise ValueError(f"target is not monotone between x={grid[k]} and x={grid[k + 1]}")
    r0 = float(r(0.0))
    if abs(r0) > 1e-12 * max(1.0, np.abs(samples).max()):
        raise ValueError(f"target must pass through the origin, r(0)={r0}")

    pos = np.concatenate([[0.0], grid[grid > 0]])
    neg = np.concatenate([[0.0], -grid[grid < 0][::-1]])
    rpos = lambda x: 0.0 if x == 0 else r(x)
    rneg = lambda x: 0.0 if x == 0 else -r(-x)
    sides = []
    for nodes, fn in ((pos, rpos), (neg, rneg)):
        if nodes.size > 1:
            slopes, gaps = _one_side(fn, nodes)
            # trailing zero-slope unit holds the value beyond the last node
            slopes = np.concatenate([slopes, [0.0]])
            gaps = np.concatenate([[0.0], gaps])
        else:
            slopes, gaps = np.zeros(1), np.zeros(1)
        sides.append((slopes, gaps))
    m = max(len(s) for s, _ in sides)

    def pad(a):
        return np.concatenate([a, np.zeros(m - a.size)])

    (qs, bg), (zs, cg) = sides
    # zero-width padding units sit before the final zero-slope unit
    qh, bh = pad(qs), pad(bg)
    zh, ch = pad(zs), pad(cg)
    lo = float(min(samples.min(), 0.0)) if u_min is None else u_min
    hi = float(max(samples.max(), 0.0)) if u_max is None else u_max
    return MonotoneParams(qh[None], bh[None], zh[None], ch[None], [lo], [hi])


def fit_error(params: MonotoneParams, r: Callable, x_lo: float, x_hi: float, grid_n: int,
              density: int = 10):
    """Sup-norm fit error on a ``density``-times finer grid and the ``alpha * beta`` bound.

    ``alpha`` is the largest sampled slope of ``r`` on the fitting grid.
    """
    beta = (x_hi - x_lo) / grid_n
    grid = x_lo + beta * np.arange(grid_n + 1)
    vals = np.array([float(r(x)) for x in grid])
    alpha = float(np.max(np.abs(np.diff(vals))) / beta)
    dense = np.linspace(x_lo, x_hi, grid_n * density + 1)
    target = np.array([float(r(x)) for x in dense])
    approx = eval_controller(params, 0, dense)
    return float(np.max(np.abs(approx - target))), alpha * beta


# --------------------------------------------------------------------------
# tabulated (arbitrary) controllers and file I/O
# --------------------------------------------------------------------------

@dataclass
class TabulatedController:
    """Arbitrary per-bus controller given as a table, linearly interpolated.

    ``u`` has shape ``(n, len(omega))``.  No structure is assumed; this is the
    representation used to certify (or refute) controllers that were not
    built from :class:`MonotoneParams`.
    """

    omega: np.ndarray
    u: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if self.omega.ndim != 1 or self.u.shape[1] != self.omega.shape[0]:
            raise ParamError("table: u must have shape (n, len(omega))")
        if np.any(np.diff(self.omega) <= 0):
            raise ParamError("table: omega grid must be strictly increasing")

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @classmethod
    def from_function(cls, fn: Callable, n: int, omega_max: float = 10.0, points: int = 2001,
                      label: str = ""):
        grid = np.linspace(-omega_max, omega_max, points)
        vals = np.array([np.broadcast_to(fn(grid), grid.shape) for _ in range(n)])
        return cls(grid, vals, label)

    def __call__(self, omega):
        omega = np.asarray(omega, dtype=float)
        out = np.empty(np.broadcast_shapes(omega.shape, (self.n,)))
        w = np.broadcast_to(omega, out.shape)
        for i in range(self.n):
            out[..., i] = np.interp(w[..., i], self.omega, self.u[i])
        return out

    def to_dict(self) -> dict:
        return {"type": "table", "label": self.label, "omega": self.omega.tolist(),
                "u": self.u.tolist()}


def params_from_dict(raw: dict) -> MonotoneParams:
    missing = [k for k in HATS + ("u_min", "u_max") if k not in raw]
    if missing:
        raise ParamError(f"controller file missing field(s) {', '.join(missing)}")
    p = MonotoneParams(raw["q_hat"], raw["b_hat"], raw["z_hat"], raw["c_hat"],
                       raw["u_min"], raw["u_max"], raw.get("deadband"))
    if "m" in raw and raw["m"] != p.m:
        raise ParamError(f"m={raw['m']} does not match array width {p.m}")
    return p


def save_params(params: Union[MonotoneParams, TabulatedController], path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=1) + "\n")


def load_controller(path) -> Union[MonotoneParams, TabulatedController]:
    """Read a controller file: either hat parameters or a ``"type": "table"`` file."""
    raw = json.loads(Path(path).read_text())
    if raw.get("type") == "table":
        return TabulatedController(raw["omega"], raw["u"], raw.get("label", ""))
    return params_from_dict(raw)
