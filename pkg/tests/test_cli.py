import json
import math
import subprocess
import sys

import numpy as np
import pytest

from crbmo.cli import main
from crbmo.crb import AngleGrid, evaluate_grid
from crbmo.geometry import UpaGeometry
from crbmo.io import load_combiners, read_table, save_combiners

from conftest import random_combiner

BASE = """seed = 3

[array]
p_rows = 4
q_cols = 4
n_rf = 2
n_snapshots = 2
n_ue = 2

[prior]
theta_deg = [-60.0, 60.0]
phi_deg = [75.0, 105.0]
grid = [4, 4]

[optimizer]
restarts = 2
max_iters = {max_iters}
{extra_opt}

[simulation]
snr_db = [0, 20]
trials = 6
estimator_grid = [10, 10]
combiner_source = "both"
combiner_file = "comb/combiner.json"

[beampattern]
samples = 7

[crb_eval]
grid = [3, 2]
sigma2 = {sigma2}
"""


def scenario(tmp_path, name="s.toml", max_iters=30, extra_opt="", sigma2=1.0, text=None):
    p = tmp_path / name
    p.write_text(text or BASE.format(max_iters=max_iters, extra_opt=extra_opt, sigma2=sigma2))
    return p


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def optimized(tmp_path):
    sc = scenario(tmp_path)
    code = run("optimize", "--scenario", sc, "--out", tmp_path / "comb", "--threads", 1)
    assert code in (0, 2)
    return sc


def test_optimize_writes_combiner_trace_and_manifest(optimized, tmp_path):
    out = tmp_path / "comb"
    comb, geom = load_combiners(out / "combiner.json")
    assert geom == UpaGeometry(4, 4) and comb.n_rf == 2 and comb.n_snapshots == 2
    header, rows = read_table(out / "trace.csv")
    assert header == ["restart", "iteration", "objective", "step", "grad_norm"]
    assert {r["restart"] for r in rows} == {"0", "1"}
    man = json.loads((out / "manifest_optimize.json").read_text())
    assert man["command"] == "optimize" and man["seed"] == 3
    assert set(man["outputs"]) == {"combiner.json", "trace.csv"}


def test_optimize_rerun_is_byte_identical(optimized, tmp_path):
    assert run("optimize", "--scenario", optimized, "--out", tmp_path / "again", "--threads", 2) in (0, 2)
    for name in ("combiner.json", "trace.csv"):
        assert (tmp_path / "comb" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_seed_override_changes_result(optimized, tmp_path):
    run("optimize", "--scenario", optimized, "--out", tmp_path / "other", "--seed", 4)
    assert (tmp_path / "comb" / "combiner.json").read_bytes() != (tmp_path / "other" / "combiner.json").read_bytes()
    assert json.loads((tmp_path / "other" / "manifest_optimize.json").read_text())["seed"] == 4


def test_exit_codes_for_termination(tmp_path):
    assert run("optimize", "--scenario", scenario(tmp_path, "a.toml", 1000, "epsilon = 1e30"), "--out", tmp_path / "a") == 0
    assert run("optimize", "--scenario", scenario(tmp_path, "b.toml", 2, "epsilon = 0.0"), "--out", tmp_path / "b") == 2
    _, rows = read_table(tmp_path / "b" / "trace.csv")
    assert max(int(r["iteration"]) for r in rows) == 2


def test_replay_ok_and_mismatch(optimized, tmp_path, capsys):
    man = tmp_path / "comb" / "manifest_optimize.json"
    assert run("optimize", "--replay", man) == 0
    assert "replay ok" in capsys.readouterr().out
    trace = tmp_path / "comb" / "trace.csv"
    trace.write_text(trace.read_text() + "0,0,0,0,0\n")
    assert run("optimize", "--replay", man) == 5
    assert "trace.csv" in capsys.readouterr().err
    assert run("simulate", "--replay", man) == 1


def test_simulate_rows_and_replay(optimized, tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--scenario", optimized, "--out", out, "--threads", 2) == 0
    header, rows = read_table(out / "sweep.csv")
    assert header[:5] == ["snr_db", "combiner", "mse_theta", "mse_phi", "crb_mean"]
    assert [(r["snr_db"], r["combiner"]) for r in rows] == [
        ("0", "optimized"), ("20", "optimized"), ("0", "random"), ("20", "random")]
    assert run("simulate", "--replay", out / "manifest_simulate.json", "--threads", 1) == 0
    # replay flags a changed combiner input
    comb = tmp_path / "comb" / "combiner.json"
    save_combiners(comb, random_combiner(16, 2, 2, 99), UpaGeometry(4, 4))
    assert run("simulate", "--replay", out / "manifest_simulate.json") == 5


def test_crb_eval_matches_library_and_scales(optimized, tmp_path):
    out1, out2 = tmp_path / "e1", tmp_path / "e2"
    assert run("crb-eval", "--scenario", optimized, "--out", out1) == 0
    assert run("crb-eval", "--scenario", scenario(tmp_path, "s2.toml", sigma2=2.0), "--out", out2) == 0
    comb, geom = load_combiners(tmp_path / "comb" / "combiner.json")
    grid = AngleGrid(-math.pi / 3, math.pi / 3, 5 * math.pi / 12, 7 * math.pi / 12, 3, 2)
    ev = evaluate_grid(comb, grid, geom, 1.0)
    _, rows1 = read_table(out1 / "crb.csv")
    _, rows2 = read_table(out2 / "crb.csv")
    assert len(rows1) == 6
    got = np.array([float(r["tr_c11"]) for r in rows1])
    np.testing.assert_allclose(got, ev.traces, rtol=1e-12)
    np.testing.assert_allclose([float(r["theta"]) for r in rows1], ev.thetas, rtol=0, atol=0)
    doubled = np.array([float(r["tr_c11"]) for r in rows2])
    np.testing.assert_allclose(doubled, 2 * got, rtol=1e-12)


def test_crb_eval_singular_sentinel(tmp_path):
    # chain columns cancel at broadside: that point has a singular Fisher matrix
    text = BASE.format(max_iters=1, extra_opt="", sigma2=1.0).replace("p_rows = 4", "p_rows = 2").replace(
        "q_cols = 4", "q_cols = 2").replace("n_snapshots = 2", "n_snapshots = 1").replace(
        "grid = [3, 2]", "grid = [1, 1]\ntheta_deg = [0.0, 10.0]\nphi_deg = [90.0, 100.0]")
    sc = scenario(tmp_path, "sing.toml", text=text)
    from crbmo.combiner import CombinerSet, partially_connected_mask

    m = partially_connected_mask(4, 2, 1)
    w = np.where(m == 1, 1.0 + 0j, 0)
    w[1, 0] = w[3, 1] = -1.0
    (tmp_path / "comb").mkdir()
    save_combiners(tmp_path / "comb" / "combiner.json", CombinerSet(w, m, 2, 1), UpaGeometry(2, 2))
    assert run("crb-eval", "--scenario", sc, "--out", tmp_path / "e") == 0
    _, rows = read_table(tmp_path / "e" / "crb.csv")
    assert rows[0]["singular"] == "1" and rows[0]["tr_c11"] == "nan"


def test_beampattern_output(optimized, tmp_path):
    out = tmp_path / "bp"
    assert run("beampattern", "--scenario", optimized, "--out", out) == 0
    header, rows = read_table(out / "beampattern.csv")
    assert header == ["phi", "g_optimized", "g_random"]
    phis = [float(r["phi"]) for r in rows]
    assert len(phis) == 7 and phis[0] == 0.0 and phis[-1] == math.pi
    assert all(b > a for a, b in zip(phis, phis[1:]))
    assert all(float(r["g_random"]) >= 0 for r in rows)


def test_config_errors_exit_1(tmp_path, capsys):
    bad = scenario(tmp_path, "bad.toml", text=BASE.format(max_iters=5, extra_opt="", sigma2=1.0).replace(
        "q_cols = 4", 'q_cols = "x"'))
    assert run("optimize", "--scenario", bad, "--out", tmp_path / "o") == 1
    assert "line 5" in capsys.readouterr().err
    samples0 = scenario(tmp_path, "z.toml", text=BASE.format(max_iters=5, extra_opt="", sigma2=1.0).replace(
        "samples = 7", "samples = 0"))
    assert run("beampattern", "--scenario", samples0, "--out", tmp_path / "o") == 1
    # missing combiner file
    assert run("simulate", "--scenario", scenario(tmp_path), "--out", tmp_path / "o") == 1
    assert run("optimize", "--out", tmp_path / "o") == 1
    assert run("optimize", "--scenario", tmp_path / "nope.toml", "--out", tmp_path / "o") == 1
    assert run("optimize", "--scenario", scenario(tmp_path), "--out", tmp_path / "o", "--threads", 0) == 1


def test_inputs_are_not_modified(optimized, tmp_path):
    comb = tmp_path / "comb" / "combiner.json"
    before = (optimized.read_bytes(), comb.read_bytes())
    run("simulate", "--scenario", optimized, "--out", tmp_path / "sim")
    run("crb-eval", "--scenario", optimized, "--out", tmp_path / "sim")
    assert (optimized.read_bytes(), comb.read_bytes()) == before
    # writing outputs over the input combiner is refused
    assert run("optimize", "--scenario", optimized, "--out", tmp_path / "comb") == 1
    assert comb.read_bytes() == before[1]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "crbmo", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("crbmo ")
