"""Command-line entry point: ``stablefreq <command> --config c.json --seed N --out DIR``.

Each command reads an optional JSON config (top-level ``case``, ``seed``,
``out`` plus a section named after the command), applies flag overrides,
writes its artifacts into ``--out`` and a ``metadata.json`` with the config
hash and a sha256 manifest, and prints the manifest as JSON.

Exit status: 0 success or certified, 1 refuted, 2 usage/config/runtime error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import platform
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .controller import (ParamError, TabulatedController, droop_as_stack, fit_error, fit_monotone,
                         load_controller, save_params)
from .lyapunov import certify_controller
from .power_net import CaseError, EquilibriumError, bundled_case, load_case, solve_equilibrium
from .sim import DisturbanceEvent, rollout, sample_initial_states, write_trajectory_csv
from .train import (DEFAULT_SWEEP_HZ, TrainConfig, TrainingError, fit_droop, sweep_losses, train,
                    train_pg)

EXIT_OK, EXIT_REFUTED, EXIT_ERROR = 0, 1, 2


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "train": {"case": "case3", "train": {}},
    "pg-train": {"case": "case3", "pg-train": {}},
    "droop-fit": {"case": "case3", "droop-fit": {}},
    "certify": {"case": "case3", "certify": {"params": None, "samples": 1000, "omega_radius": 1.0,
                                             "series_steps": 500, "dt": 0.01}},
    "simulate": {"case": "case3", "simulate": {"params": None, "count": 1, "K": 1000, "dt": 0.01,
                                               "method": "euler", "events": [], "delta_range": 0.05,
                                               "omega_range_hz": 0.1}},
    "compare": {"case": "case39kron", "compare": {
        "params": {"bptt": None, "droop": None, "pg": None},
        "train": {"episodes": 200, "batch": 64, "stages": 200},
        "warm_start": True,
        "sweep_hz": list(DEFAULT_SWEEP_HZ),
        "delta_per_hz": 0.5,
        "test_batch": 500,
        "step_load": {"bus": 0, "delta_p": -0.05, "t_on": 0.3, "t_off": 5.3, "t_end": 10.0},
    }},
    "approx-fit": {"approx-fit": {"target": "tanh", "scale": 2.0, "x_lo": -1.0, "x_hi": 1.0,
                                  "grid_n": 100}},
}
STOCHASTIC = {"train", "pg-train", "droop-fit", "certify", "simulate", "compare"}
TARGETS = {
    "tanh": lambda s: (lambda x: math.tanh(s * x)),
    "linear": lambda s: (lambda x: s * x),
    "arctan": lambda s: (lambda x: math.atan(s * x)),
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(command: str, config_path: Optional[str], seed, out) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    base_dir = Path.cwd()
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, raw)
        base_dir = path.parent
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if command in STOCHASTIC and cfg.get("seed") is None:
        raise ConfigError(f"{command}: a seed is required (--seed or \"seed\" in the config)")
    if cfg.get("seed") is not None:
        if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
    cfg.setdefault("out", "out")
    cfg["_base_dir"] = str(base_dir)
    return cfg


def _resolve_path(cfg, value) -> Path:
    p = Path(value)
    if not p.is_absolute() and not p.exists():
        alt = Path(cfg["_base_dir"]) / p
        if alt.exists():
            return alt
    return p


def _case(cfg):
    ref = cfg.get("case")
    if ref is None:
        raise ConfigError("no case given")
    p = _resolve_path(cfg, ref)
    if p.is_file():
        return load_case(p)
    if ref in ("case3", "case39kron"):
        return bundled_case(ref)
    raise CaseError(f"case file not found: {ref}")


def _controller(cfg, ref):
    p = _resolve_path(cfg, ref)
    if not p.is_file():
        raise ConfigError(f"controller file not found: {ref}")
    return load_controller(p)


def _train_config(cfg, section: dict) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    bad = sorted(set(section) - known)
    if bad:
        raise ConfigError(f"unknown training option(s): {', '.join(bad)}")
    return TrainConfig(**{**section, "seed": cfg["seed"]})


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _public(cfg):
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def _finish(command, cfg, out: Path, files) -> list:
    manifest = [{"file": f.name, "sha256": _sha256(f)} for f in files]
    public = _public(cfg)
    blob = json.dumps(public, sort_keys=True).encode()
    meta = {
        "command": command,
        "config": public,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": cfg.get("seed"),
        "versions": {"stablefreq": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "manifest": manifest,
    }
    meta_path = out / "metadata.json"
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    manifest = manifest + [{"file": meta_path.name, "sha256": _sha256(meta_path)}]
    print(json.dumps({"out": str(out), "manifest": manifest}, indent=1))
    return manifest


def _write_loss_csv(path: Path, history):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "total", "maxdev", "action"])
        for ep, br in enumerate(history):
            w.writerow([ep, repr(br.total), repr(float(br.maxdev.sum())),
                        repr(float(np.sum(br.gamma * br.action)))])


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(cfg, out: Path, pg: bool = False):
    case = _case(cfg)
    section = "pg-train" if pg else "train"
    tc = _train_config(cfg, cfg.get(section, {}))
    res = train_pg(case, tc) if pg else train(case, tc)
    files = [out / "params.json", out / "loss.csv"]
    save_params(res.params, files[0])
    _write_loss_csv(files[1], res.history)
    return EXIT_OK, files


def cmd_droop(cfg, out: Path):
    case = _case(cfg)
    tc = _train_config(cfg, cfg.get("droop-fit", {}))
    res = fit_droop(case, tc)
    files = [out / "droop.json", out / "params.json", out / "loss.csv"]
    _write_json(files[0], {"gains": res.gains.tolist(), "loss": res.loss})
    save_params(res.params, files[1])
    _write_loss_csv(files[2], res.history)
    return EXIT_OK, files


def cmd_certify(cfg, out: Path):
    case = _case(cfg)
    sec = cfg["certify"]
    if not sec.get("params"):
        raise ConfigError("certify: \"params\" (controller file) is required")
    ctl = _controller(cfg, sec["params"])
    rep = certify_controller(case, ctl, samples=int(sec["samples"]), seed=cfg["seed"],
                             omega_radius=float(sec["omega_radius"]),
                             series_steps=int(sec["series_steps"]), dt=float(sec["dt"]))
    files = [out / "report.json"]
    _write_json(files[0], rep.to_dict())
    if rep.t is not None:
        files.append(out / "vseries.csv")
        with files[1].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "V", "Vdot"])
            for row in zip(rep.t, rep.V_series, rep.Vdot_series):
                w.writerow([repr(float(x)) for x in row])
    print(f"verdict: {rep.verdict}" + (f" ({rep.reason})" if rep.reason else ""), file=sys.stderr)
    return (EXIT_OK if rep.certified else EXIT_REFUTED), files


def _events(raw_events):
    try:
        return [DisturbanceEvent(int(e["bus"]), float(e["delta_p"]), float(e["t_on"]), float(e["t_off"]))
                for e in raw_events]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad event entry: {exc}") from None


def cmd_simulate(cfg, out: Path):
    case = _case(cfg)
    sec = cfg["simulate"]
    ctl = _controller(cfg, sec["params"]) if sec.get("params") else None
    events = _events(sec.get("events", []))
    for ev in events:
        if not 0 <= ev.bus < case.n:
            raise ConfigError(f"event bus {ev.bus} out of range")
    count, K, dt = int(sec["count"]), int(sec["K"]), float(sec["dt"])
    if "theta0" in sec and "omega0" in sec:
        th0 = np.atleast_2d(np.asarray(sec["theta0"], dtype=float))
        w0 = np.atleast_2d(np.asarray(sec["omega0"], dtype=float))
    else:
        th0, w0 = sample_initial_states(case, count, cfg["seed"], delta_range=float(sec["delta_range"]),
                                        omega_range_hz=float(sec["omega_range_hz"]))
    files = []
    for j in range(th0.shape[0]):
        traj = rollout(case, (th0[j], w0[j]), ctl, K, dt, events, sec.get("method", "euler"))
        files += write_trajectory_csv(traj, out / f"traj_{j:03d}.csv", case.base_freq,
                                      {"rollout": j, "controller": sec.get("params")})
    return EXIT_OK, files


def run_compare(case, sec: dict, seed: int, log=print):
    """Train or load the three controllers, run the sweep and the step-load scenario."""
    tc = TrainConfig(**{**sec["train"], "seed": seed})
    ctls, trained = {}, {}
    droop = None
    if sec["params"].get("droop"):
        ctls["droop"] = sec["params"]["droop"]
    else:
        droop = fit_droop(case, tc)
        ctls["droop"] = trained["droop"] = droop.params
        log(f"droop gains {np.round(droop.gains, 4).tolist()} loss {droop.loss:.6g}")
    start = None
    if sec.get("warm_start", True) and droop is not None:
        start = droop_as_stack(droop.gains, tc.m, case.u_min, case.u_max, tc.omega_span)
    for name, fn in (("bptt", train), ("pg", train_pg)):
        if sec["params"].get(name):
            ctls[name] = sec["params"][name]
        else:
            res = fn(case, tc, params=start)
            ctls[name] = trained[name] = res.params
            log(f"{name}: first loss {res.history[0].total:.6g} last {res.history[-1].total:.6g}")
    ordered = {k: ctls[k] for k in ("bptt", "droop", "pg")}
    table = sweep_losses(case, ordered, sweep_hz=sec["sweep_hz"], batch=int(sec["test_batch"]),
                         seed=seed, delta_per_hz=float(sec["delta_per_hz"]), K=tc.stages, dt=tc.dt,
                         gamma=tc.gamma)
    sl = sec["step_load"]
    ev = DisturbanceEvent(int(sl["bus"]), float(sl["delta_p"]), float(sl["t_on"]), float(sl["t_off"]))
    K = int(math.ceil(float(sl["t_end"]) / tc.dt - 1e-9))
    eq = solve_equilibrium(case)
    trajs = {name: rollout(case, (eq.delta_star, np.full(case.n, eq.omega_star)), c, K, tc.dt, [ev])
             for name, c in ordered.items()}
    return table, trajs, trained


def cmd_compare(cfg, out: Path):
    case = _case(cfg)
    sec = copy.deepcopy(cfg["compare"])
    for name, ref in list(sec["params"].items()):
        if ref:
            sec["params"][name] = _controller(cfg, ref)
    table, trajs, trained = run_compare(case, sec, cfg["seed"], log=lambda m: print(m, file=sys.stderr))
    files = []
    loss_csv = out / "compare_losses.csv"
    with loss_csv.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["omega_bar_hz", "bptt", "droop", "pg"])
        for j, wb in enumerate(sec["sweep_hz"]):
            w.writerow([repr(float(wb))] + [repr(table[k][j]) for k in ("bptt", "droop", "pg")])
    files.append(loss_csv)
    tot = {k: float(np.mean(v)) for k, v in table.items()}
    summary = {"mean_loss": tot,
               "improvement_vs_droop": 1.0 - tot["bptt"] / tot["droop"] if tot["droop"] > 0 else 0.0,
               "improvement_vs_pg": 1.0 - tot["bptt"] / tot["pg"] if tot["pg"] > 0 else 0.0}
    _write_json(out / "compare_summary.json", summary)
    files.append(out / "compare_summary.json")
    for name, traj in trajs.items():
        files += write_trajectory_csv(traj, out / f"step_load_{name}.csv", case.base_freq, {"method": name})
    for name, p in trained.items():
        save_params(p, out / f"{name}_params.json")
        files.append(out / f"{name}_params.json")
    return EXIT_OK, files


def cmd_approx(cfg, out: Path):
    sec = cfg["approx-fit"]
    name = sec["target"]
    if name not in TARGETS:
        raise ConfigError(f"unknown target {name!r}; choose from {', '.join(TARGETS)}")
    r = TARGETS[name](float(sec.get("scale", 1.0)))
    x_lo, x_hi, grid_n = float(sec["x_lo"]), float(sec["x_hi"]), int(sec["grid_n"])
    params = fit_monotone(r, x_lo, x_hi, grid_n)
    err, bound = fit_error(params, r, x_lo, x_hi, grid_n)
    files = [out / "params.json", out / "fit.json"]
    save_params(params, files[0])
    _write_json(files[1], {"target": name, "scale": sec.get("scale", 1.0), "grid_n": grid_n,
                           "m": params.m, "sup_error": err, "bound": bound})
    return EXIT_OK, files


COMMANDS = {
    "train": cmd_train,
    "pg-train": lambda cfg, out: cmd_train(cfg, out, pg=True),
    "droop-fit": cmd_droop,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "approx-fit": cmd_approx,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stablefreq", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        cfg = resolve_config(args.command, args.config, args.seed, args.out)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        status, files = COMMANDS[args.command](cfg, out)
        _finish(args.command, cfg, out, files)
        return status
    except (ConfigError, CaseError, ParamError, EquilibriumError, TrainingError, ValueError,
            OSError) as exc:
        print(f"stablefreq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
