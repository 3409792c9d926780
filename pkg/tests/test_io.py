import json
import math

import numpy as np
import pytest

from crbmo.combiner import CombinerSet, partially_connected_mask
from crbmo.geometry import UpaGeometry
from crbmo.io import (
    CombinerFileError,
    combiner_text,
    format_float,
    load_combiners,
    read_manifest,
    read_table,
    save_combiners,
    write_table,
)
from crbmo.scenario import ScenarioError, load_scenario, parse_scenario

from conftest import random_block_diag_bb, random_combiner

GEOM = UpaGeometry(4, 4)

MINIMAL = """
[array]
p_rows = 4
q_cols = 4

[prior]
theta_deg = [-60, 60]
phi_deg = [75, 105]
"""


def test_combiner_round_trip_is_byte_identical(tmp_path):
    c = random_combiner(16, 4, 3, 0)
    first = save_combiners(tmp_path / "a.json", c, GEOM)
    back, geom = load_combiners(first)
    assert geom == GEOM
    assert back.w_rf.tobytes() == c.w_rf.tobytes()
    second = save_combiners(tmp_path / "b.json", back, geom)
    assert first.read_bytes() == second.read_bytes()


def test_combiner_file_layout(tmp_path):
    c = random_combiner(16, 2, 2, 1)
    doc = json.loads(combiner_text(c, GEOM))
    assert doc["format"] == "crbmo-combiner" and doc["units"] == "rad"
    snap = doc["snapshots"][1]
    assert len(snap) == 16 and all(len(r) == 2 for r in snap)
    # antenna i feeds chain i // 8 only
    assert snap[3][1] is None and snap[3][0] is not None
    assert snap[12][0] is None and snap[12][1] is not None


def test_digital_stage_not_serialised():
    c = random_combiner(16, 2, 2, 1)
    cb = CombinerSet(c.w_rf, c.mask, 2, 2, w_bb=random_block_diag_bb(2, 2, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        combiner_text(cb, GEOM)
    with pytest.raises(ValueError):
        combiner_text(c, UpaGeometry(2, 4))


def _mutated(tmp_path, edit):
    doc = json.loads(combiner_text(random_combiner(16, 2, 2, 2), GEOM))
    edit(doc)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.mark.parametrize("edit, match", [
    (lambda d: d.update(format="other"), "not a combiner file"),
    (lambda d: d.update(version=2), "unsupported version"),
    (lambda d: d.update(units="deg"), "radians"),
    (lambda d: d["mask"].update(n_rf=3), "divide|n_rf"),
    (lambda d: d["mask"].update(n_bs=8), "geometry has 16"),
    (lambda d: d.pop("snapshots"), "missing field"),
    (lambda d: d["snapshots"].pop(), "2 snapshot"),
    (lambda d: d["snapshots"][0][0].__setitem__(0, None), "finite phase"),
    (lambda d: d["snapshots"][0][0].__setitem__(1, 0.5), "off the mask"),
    (lambda d: d["snapshots"][0].pop(), "16x2"),
    (lambda d: d["geometry"].update(p_rows=0), "positive integer"),
])
def test_bad_combiner_files_rejected(tmp_path, edit, match):
    with pytest.raises(CombinerFileError, match=match):
        load_combiners(_mutated(tmp_path, edit))


def test_non_json_and_missing(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(CombinerFileError, match="not valid JSON"):
        load_combiners(p)
    with pytest.raises(FileNotFoundError):
        load_combiners(tmp_path / "absent.json")


def test_format_float_round_trips():
    rng = np.random.default_rng(0)
    for x in np.concatenate([rng.standard_normal(200) * 10.0 ** rng.integers(-300, 300, 200), [0.1, -0.0, 5e-324]]):
        assert float(format_float(x)) == x
    assert format_float(float("nan")) == "nan"
    assert format_float(-math.inf) == "-inf"


def test_table_round_trip(tmp_path):
    p = write_table(tmp_path / "t.csv", ("a", "b", "name"), [(0.1, 3, "x"), (np.float64(1 / 3), 4, "y")], {"seed": 7})
    text = p.read_text()
    assert text.startswith("# seed: 7\na,b,name\n0.10000000000000001,3,x\n")
    header, rows = read_table(p)
    assert header == ["a", "b", "name"]
    assert float(rows[1]["a"]) == 1 / 3


def test_manifest_requires_core_fields(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"command": "optimize", "outputs": {}}))
    with pytest.raises(ValueError, match="scenario_text"):
        read_manifest(p)


def test_minimal_scenario_defaults():
    sc = parse_scenario(MINIMAL)
    assert (sc.n_rf, sc.n_snapshots, sc.n_ue, sc.trials) == (4, 4, 4, 500)
    assert sc.prior.theta_lo == pytest.approx(-math.pi / 3)
    assert (sc.prior.j_count, sc.prior.k_count) == (30, 30)
    assert len(sc.paths) == 1 and sc.paths[0].theta_hi == pytest.approx(math.pi / 3)
    assert sc.optimizer.restarts == 4 and sc.optimizer.max_iters == 1000
    assert sc.snr_db == (0.0, 5.0, 10.0, 15.0, 20.0)


def test_combiner_path_resolves_against_scenario_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    f = tmp_path / "sub" / "s.toml"
    f.write_text(MINIMAL + '\n[simulation]\ncombiner_file = "c.json"\n')
    assert load_scenario(f).combiner_file == str((tmp_path / "sub" / "c.json").resolve())


@pytest.mark.parametrize("text, match", [
    (MINIMAL.replace("q_cols = 4", 'q_cols = "x"'), r"'array.q_cols' \(line 4\)"),
    (MINIMAL + "\n[array2]\n", "unknown"),
    (MINIMAL.replace("p_rows = 4", "p_rows = 4\nbogus = 1"), r"bogus.*line 4|line 4.*bogus"),
    (MINIMAL.replace("[-60, 60]", "[60, -60]"), "theta_deg"),
    (MINIMAL + "\n[simulation]\nsnr_db = [10, 5]\n", "increasing"),
    (MINIMAL + "\n[simulation]\ntrials = 0\n", "trials"),
    (MINIMAL + "\n[optimizer]\nmax_iters = -1\n", "max_iters"),
    (MINIMAL + "\n[beampattern]\nsamples = 0\n", "samples"),
    (MINIMAL + "\n[[paths]]\ntheta_deg=[0,1]\nphi_deg=[80,90]\ngain='weird'\n", "gain"),
    (MINIMAL.replace("[array]", "[array"), "TOML syntax"),
    ("[prior]\ntheta_deg=[0,1]\nphi_deg=[80,90]\n", "p_rows"),
])
def test_bad_scenarios_name_the_key(text, match):
    with pytest.raises(ScenarioError, match=match):
        parse_scenario(text)


def test_unreadable_scenario(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "none.toml")


def test_n_rf_must_divide_array():
    with pytest.raises(ScenarioError, match="divide"):
        parse_scenario(MINIMAL.replace("q_cols = 4", "q_cols = 4\nn_rf = 3"))


def test_masks_from_files_match_library(tmp_path):
    c, _ = load_combiners(save_combiners(tmp_path / "c.json", random_combiner(16, 4, 2, 5), GEOM))
    assert np.array_equal(c.mask, partially_connected_mask(16, 4, 2))
