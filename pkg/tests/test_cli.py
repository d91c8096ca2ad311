import json

import numpy as np
import pytest

from stablefreq.cli import main
from stablefreq.controller import TabulatedController, save_params
from stablefreq.power_net import bundled_case, save_case

SMALL_TRAIN = {"episodes": 3, "batch": 8, "stages": 40}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(capsys, *args):
    code = main(list(args))
    out, err = capsys.readouterr()
    return code, out, err


def test_train_manifest(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"case": "case3", "train": SMALL_TRAIN})
    code, out, _ = run(capsys, "train", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "r"))
    assert code == 0
    manifest = json.loads(out)["manifest"]
    assert [m["file"] for m in manifest] == ["params.json", "loss.csv", "metadata.json"]
    meta = json.loads((tmp_path / "r" / "metadata.json").read_text())
    assert meta["seed"] == 1 and len(meta["config_hash"]) == 64
    header = (tmp_path / "r" / "loss.csv").read_text().splitlines()[0]
    assert header == "episode,total,maxdev,action"


def test_train_repeatable(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"case": "case3", "seed": 9, "train": SMALL_TRAIN})
    hashes = []
    for name in ("a", "b"):
        run(capsys, "train", "--config", cfg, "--out", str(tmp_path / name))
        m = json.loads((tmp_path / name / "metadata.json").read_text())["manifest"]
        hashes.append([x["sha256"] for x in m])
    assert hashes[0] == hashes[1]


def test_missing_case_named(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"case": "no_such_case.json", "train": SMALL_TRAIN})
    code, _, err = run(capsys, "train", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "r"))
    assert code == 2 and "no_such_case.json" in err


def test_missing_seed(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", str(tmp_path / "r"))
    assert code == 2 and "seed" in err


def test_bad_usage(capsys):
    assert main(["fly"]) == 2
    assert main(["train", "--seed", "x"]) == 2
    capsys.readouterr()


def test_unknown_train_option(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"train": {"epochs": 3}})
    code, _, err = run(capsys, "train", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "r"))
    assert code == 2 and "epochs" in err


def test_certify_exit_codes(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"case": "case3", "train": SMALL_TRAIN})
    run(capsys, "train", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "t"))
    good = write(tmp_path / "g.json", {"certify": {"params": str(tmp_path / "t" / "params.json"),
                                                   "samples": 100, "series_steps": 50}})
    code, _, _ = run(capsys, "certify", "--config", good, "--seed", "0", "--out", str(tmp_path / "c1"))
    assert code == 0
    rep = json.loads((tmp_path / "c1" / "report.json").read_text())
    assert rep["verdict"] == "certified"
    assert (tmp_path / "c1" / "vseries.csv").read_text().startswith("t,V,Vdot")

    save_params(TabulatedController.from_function(lambda w: -5 * w, 3), tmp_path / "neg.json")
    bad = write(tmp_path / "b.json", {"certify": {"params": str(tmp_path / "neg.json"), "samples": 50}})
    code, _, _ = run(capsys, "certify", "--config", bad, "--seed", "0", "--out", str(tmp_path / "c2"))
    assert code == 1
    rep = json.loads((tmp_path / "c2" / "report.json").read_text())
    assert rep["reason"] == "monotonicity" and not rep["monotone_check"]["passed"]

    raw = json.loads((tmp_path / "t" / "params.json").read_text())
    raw["q_hat"][0][0] = -1.0
    edited = write(tmp_path / "edited.json", raw)
    cfg3 = write(tmp_path / "e.json", {"certify": {"params": edited}})
    code, _, err = run(capsys, "certify", "--config", cfg3, "--seed", "0", "--out", str(tmp_path / "c3"))
    assert code == 2 and "q_hat" in err
    assert not (tmp_path / "c3" / "report.json").exists()


def test_simulate(tmp_path, capsys):
    cfg = write(tmp_path / "s.json", {"simulate": {"count": 2, "K": 50,
                                                   "events": [{"bus": 0, "delta_p": 0.05, "t_on": 0.1,
                                                               "t_off": 0.3}]}})
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "s"))
    assert code == 0
    files = [m["file"] for m in json.loads(out)["manifest"]]
    assert files == ["traj_000.csv", "traj_000.meta.json", "traj_001.csv", "traj_001.meta.json", "metadata.json"]


def test_simulate_bad_event_bus(tmp_path, capsys):
    cfg = write(tmp_path / "s.json", {"simulate": {"events": [{"bus": 7, "delta_p": 0.1, "t_on": 0, "t_off": 1}]}})
    code, _, _ = run(capsys, "simulate", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "s"))
    assert code == 2


def test_droop_fit(tmp_path, capsys):
    cfg = write(tmp_path / "d.json", {"droop-fit": SMALL_TRAIN})
    code, _, _ = run(capsys, "droop-fit", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "d"))
    assert code == 0
    d = json.loads((tmp_path / "d" / "droop.json").read_text())
    assert len(d["gains"]) == 3 and d["loss"] >= 0


def test_pg_train(tmp_path, capsys):
    cfg = write(tmp_path / "p.json", {"pg-train": SMALL_TRAIN})
    code, _, _ = run(capsys, "pg-train", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "p"))
    assert code == 0 and (tmp_path / "p" / "params.json").exists()


def test_approx_fit(tmp_path, capsys):
    code, _, _ = run(capsys, "approx-fit", "--out", str(tmp_path / "a"))
    assert code == 0
    fit = json.loads((tmp_path / "a" / "fit.json").read_text())
    assert fit["sup_error"] <= 2 / 100
    cfg = write(tmp_path / "x.json", {"approx-fit": {"target": "cosh"}})
    assert run(capsys, "approx-fit", "--config", cfg, "--out", str(tmp_path / "b"))[0] == 2


def test_compare_zero_column(tmp_path, capsys):
    case = bundled_case("case3").with_p_m(np.zeros(3))
    save_case(case, tmp_path / "flat.json")
    cfg = write(tmp_path / "cmp.json", {
        "case": "flat.json",
        "compare": {"train": {"episodes": 2, "batch": 8, "stages": 40}, "sweep_hz": [0.0, 0.05],
                    "test_batch": 20, "step_load": {"t_end": 1.0}}})
    code, out, _ = run(capsys, "compare", "--config", cfg, "--seed", "0", "--out", str(tmp_path / "c"))
    assert code == 0
    rows = (tmp_path / "c" / "compare_losses.csv").read_text().splitlines()
    assert rows[0] == "omega_bar_hz,bptt,droop,pg"
    assert all(abs(float(x)) < 1e-12 for x in rows[1].split(",")[1:])
    files = [m["file"] for m in json.loads(out)["manifest"]]
    for name in ("bptt", "droop", "pg"):
        assert f"step_load_{name}.csv" in files
