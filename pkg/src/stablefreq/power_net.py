"""Network case model, coordinate transforms and equilibrium computation.

Units used throughout the package: angles in rad, frequency deviations in
rad/s, powers in per-unit.  ``base_freq`` (Hz) is only used at I/O
boundaries.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "CaseError",
    "EquilibriumError",
    "NetworkCase",
    "Equilibrium",
    "load_case",
    "save_case",
    "bundled_case",
    "coi_transform",
    "electrical_power",
    "edge_list",
    "solve_omega_star",
    "solve_delta_star",
    "solve_equilibrium",
]

DATA_DIR = Path(__file__).parent / "data"


class CaseError(ValueError):
    """Raised when a case file fails to parse or violates an invariant."""


class EquilibriumError(RuntimeError):
    """Raised when no admissible equilibrium can be computed."""


def _vector(name, values, n):
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n,):
        raise CaseError(f"{name}: expected length {n}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise CaseError(f"{name}[{bad}] is not finite")
    return arr


@dataclass(frozen=True)
class NetworkCase:
    """Lossless swing-equation network.

    ``B`` is the susceptance matrix; its diagonal is forced to zero on
    construction.  ``rating`` is the optional per-bus machine rating used to
    draw actuation limits.
    """

    M: np.ndarray
    D: np.ndarray
    B: np.ndarray
    p_m: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    base_freq: float = 60.0
    rating: Optional[np.ndarray] = None
    name: str = ""
    provenance: str = ""

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        n = M.shape[0] if M.ndim == 1 else -1
        if n < 1:
            raise CaseError("M must be a non-empty vector")
        M = _vector("M", M, n)
        D = _vector("D", self.D, n)
        B = np.array(self.B, dtype=float)
        if B.shape != (n, n):
            raise CaseError(f"B: expected {n}x{n}, got shape {B.shape}")
        if not np.all(np.isfinite(B)):
            raise CaseError("B contains non-finite entries")
        for i in range(n):
            for j in range(i + 1, n):
                if B[i, j] != B[j, i]:
                    raise CaseError(f"B not symmetric: B[{i}][{j}]={B[i, j]} != B[{j}][{i}]={B[j, i]}")
                if B[i, j] < 0:
                    raise CaseError(f"B[{i}][{j}]={B[i, j]} is negative")
        np.fill_diagonal(B, 0.0)
        p_m = _vector("p_m", self.p_m, n)
        u_min = _vector("u_min", self.u_min, n)
        u_max = _vector("u_max", self.u_max, n)
        for i in range(n):
            if not M[i] > 0:
                raise CaseError(f"M[{i}]={M[i]} must be > 0")
            if not D[i] > 0:
                raise CaseError(f"D[{i}]={D[i]} must be > 0")
            if u_min[i] > 0:
                raise CaseError(f"u_min[{i}]={u_min[i]} must be <= 0")
            if u_max[i] < 0:
                raise CaseError(f"u_max[{i}]={u_max[i]} must be >= 0")
        if not _connected(B):
            raise CaseError("B: network graph is not connected")
        if not self.base_freq > 0:
            raise CaseError("base_freq must be > 0")
        rating = None if self.rating is None else _vector("rating", self.rating, n)
        for arr in (M, D, B, p_m, u_min, u_max):
            arr.setflags(write=False)
        if rating is not None:
            rating.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "p_m", p_m)
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)
        object.__setattr__(self, "rating", rating)
        object.__setattr__(self, "base_freq", float(self.base_freq))

    @property
    def n(self) -> int:
        return self.M.shape[0]

    def with_p_m(self, p_m) -> "NetworkCase":
        return NetworkCase(self.M, self.D, self.B, p_m, self.u_min, self.u_max,
                           self.base_freq, self.rating, self.name, self.provenance)

    def with_bounds(self, u_min, u_max) -> "NetworkCase":
        return NetworkCase(self.M, self.D, self.B, self.p_m, u_min, u_max,
                           self.base_freq, self.rating, self.name, self.provenance)

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "M": self.M.tolist(),
            "D": self.D.tolist(),
            "B": self.B.tolist(),
            "p_m": self.p_m.tolist(),
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
            "base_freq": self.base_freq,
        }
        if self.rating is not None:
            out["rating"] = self.rating.tolist()
        if self.name:
            out["name"] = self.name
        if self.provenance:
            out["provenance"] = self.provenance
        return out


def _connected(B):
    n = B.shape[0]
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(B[i]):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == n


def edge_list(case: NetworkCase) -> list[tuple[int, int]]:
    """Unordered edges ``(i, j)`` with ``i < j`` and nonzero susceptance."""
    i, j = np.nonzero(np.triu(case.B, 1))
    return list(zip(i.tolist(), j.tolist()))


def load_case(path: Union[str, Path]) -> NetworkCase:
    """Read and validate a JSON case file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CaseError(f"case file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: invalid JSON ({exc})") from exc
    return case_from_dict(raw, source=str(path))


def case_from_dict(raw: dict, source: str = "<dict>") -> NetworkCase:
    if not isinstance(raw, dict):
        raise CaseError(f"{source}: top level must be an object")
    missing = [k for k in ("n", "M", "D", "B", "p_m", "u_min", "u_max", "base_freq") if k not in raw]
    if missing:
        raise CaseError(f"{source}: missing field(s) {', '.join(missing)}")
    n = raw["n"]
    if not isinstance(n, int) or n < 1:
        raise CaseError(f"{source}: n must be a positive integer")
    M = _vector("M", raw["M"], n)
    return NetworkCase(
        M=M,
        D=raw["D"],
        B=raw["B"],
        p_m=raw["p_m"],
        u_min=raw["u_min"],
        u_max=raw["u_max"],
        base_freq=raw["base_freq"],
        rating=raw.get("rating"),
        name=raw.get("name", ""),
        provenance=raw.get("provenance", ""),
    )


def save_case(case: NetworkCase, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(case.to_dict(), indent=1) + "\n")


def bundled_case(name: str) -> NetworkCase:
    """Load one of the bundled cases (``case3`` or ``case39kron``)."""
    stem = name[:-5] if name.endswith(".json") else name
    return load_case(DATA_DIR / f"{stem}.json")


def coi_transform(theta):
    """Shift angles by their uniform mean (center-of-inertia coordinates).

    Works on the last axis, so batches of angle vectors are accepted.
    """
    theta = np.asarray(theta, dtype=float)
    return theta - theta.mean(axis=-1, keepdims=True)


def electrical_power(case: NetworkCase, delta):
    """Per-bus electrical power ``sum_j B_ij sin(delta_i - delta_j)``.

    ``delta`` may carry leading batch dimensions.
    """
    delta = np.asarray(delta, dtype=float)
    diff = delta[..., :, None] - delta[..., None, :]
    return np.sum(case.B * np.sin(diff), axis=-1)


# --------------------------------------------------------------------------
# equilibrium
# --------------------------------------------------------------------------

ControllerFn = Callable[[np.ndarray], np.ndarray]


def _total_control(u: Optional[ControllerFn], omega: float, n: int) -> float:
    if u is None:
        return 0.0
    return float(np.sum(u(np.full(n, omega))))


def solve_omega_star(case: NetworkCase, u: Optional[ControllerFn] = None, *,
                     bracket=(-10.0, 10.0), expansions: int = 4, tol: float = 1e-12) -> float:
    """Synchronous frequency from the scalar balance ``sum p_m = sum u(w) + w sum D``.

    ``u`` maps a length-``n`` vector of frequency deviations to the vector of
    control outputs (``None`` means no control).  The right-hand side is
    strictly increasing for monotone ``u``, so bisection applies.
    """
    n = case.n
    total_p = float(np.sum(case.p_m))
    total_d = float(np.sum(case.D))

    def g(w):
        return _total_control(u, w, n) + w * total_d - total_p

    lo, hi = float(bracket[0]), float(bracket[1])
    glo, ghi = g(lo), g(hi)
    tries = 0
    while not (glo <= 0.0 <= ghi):
        if tries >= expansions:
            raise EquilibriumError(
                f"bisection bracket [{lo}, {hi}] does not enclose a root "
                f"(g(lo)={glo:.3e}, g(hi)={ghi:.3e}); is the controller monotone?")
        lo, hi = 2.0 * lo, 2.0 * hi
        glo, ghi = g(lo), g(hi)
        tries += 1
    if glo == 0.0:
        return lo
    if ghi == 0.0:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        gm = g(mid)
        if gm == 0.0:
            return mid
        if gm < 0.0:
            lo = mid
        else:
            hi = mid
    # pick the endpoint with the smaller residual
    return lo if abs(g(lo)) <= abs(g(hi)) else hi


@dataclass(frozen=True)
class Equilibrium:
    omega_star: float
    delta_star: np.ndarray
    residual: float
    u_star: np.ndarray = field(default=None)

    def __post_init__(self):
        d = np.asarray(self.delta_star, dtype=float)
        d.setflags(write=False)
        object.__setattr__(self, "delta_star", d)
        if self.u_star is not None:
            us = np.asarray(self.u_star, dtype=float)
            us.setflags(write=False)
            object.__setattr__(self, "u_star", us)

    @property
    def omega_vec(self) -> np.ndarray:
        return np.full(self.delta_star.shape[0], self.omega_star)


def solve_delta_star(case: NetworkCase, omega_star: float, u: Optional[ControllerFn] = None, *,
                     tol: float = 1e-8, max_iter: int = 50) -> Equilibrium:
    """Equilibrium angles by Newton iteration on the reduced power-flow system.

    Bus 0 is used as the angle reference during iteration; the result is
    mapped to center-of-inertia coordinates.  Raises :class:`EquilibriumError`
    on divergence or when an edge angle difference leaves ``(-pi/2, pi/2)``.
    """
    n = case.n
    u_star = np.zeros(n) if u is None else np.asarray(u(np.full(n, omega_star)), dtype=float)
    inj = case.p_m - case.D * omega_star - u_star
    if abs(inj.sum()) > 1e-8 * max(1.0, np.abs(inj).max()):
        raise EquilibriumError(f"effective injections do not balance (sum={inj.sum():.3e})")

    def mismatch(delta):
        return inj - electrical_power(case, delta)

    delta = np.zeros(n)
    if n == 1:
        return Equilibrium(omega_star, delta, float(abs(mismatch(delta)[0])), u_star)

    from .lyapunov import hessian_H  # local import keeps the module graph acyclic

    res = mismatch(delta)
    for _ in range(max_iter):
        if np.max(np.abs(res)) <= tol:
            break
        J = hessian_H(case, delta)
        # reduced system: drop bus 0 row/column, reference angle fixed
        try:
            step = np.linalg.solve(J[1:, 1:], res[1:])
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError(f"singular power-flow Jacobian: {exc}") from exc
        delta[1:] += step
        res = mismatch(delta)
        if not np.all(np.isfinite(res)):
            raise EquilibriumError("Newton iteration produced non-finite values")
    else:
        if np.max(np.abs(res)) > tol:
            raise EquilibriumError(
                f"Newton did not converge in {max_iter} iterations "
                f"(residual {np.max(np.abs(res)):.3e}); power flow may be infeasible")
    delta = coi_transform(delta)
    for i, j in edge_list(case):
        if abs(delta[i] - delta[j]) >= math.pi / 2:
            raise EquilibriumError(
                f"edge ({i},{j}) angle difference {delta[i] - delta[j]:.4f} rad outside (-pi/2, pi/2)")
    residual = float(np.max(np.abs(mismatch(delta))))
    return Equilibrium(omega_star, delta, residual, u_star)


def solve_equilibrium(case: NetworkCase, u: Optional[ControllerFn] = None) -> Equilibrium:
    """Convenience wrapper: :func:`solve_omega_star` then :func:`solve_delta_star`."""
    w = solve_omega_star(case, u)
    return solve_delta_star(case, w, u)
