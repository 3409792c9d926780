"""TOML scenario files.

Angles are given in degrees (keys ending in ``_deg``) and converted to
radians here; nothing downstream sees degrees. Errors name the offending
field and, where it can be located, the line it sits on.

Example::

    seed = 0

    [array]
    p_rows = 8
    q_cols = 8
    n_rf = 4
    n_snapshots = 4
    n_ue = 4

    [prior]
    theta_deg = [-60.0, 60.0]
    phi_deg = [75.0, 105.0]
    grid = [30, 30]

    [optimizer]
    sigma2 = 1.0
    restarts = 4

    [simulation]
    snr_db = [0, 5, 10, 15, 20]
    trials = 500
    combiner_source = "both"
    combiner_file = "out/combiner.json"

    [[paths]]              # first entry is the LoS path
    theta_deg = [-60.0, 60.0]
    phi_deg = [75.0, 105.0]
    power = 1.0
    gain = "cn"
"""
from __future__ import annotations

import math
import re
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from crbmo.crb import AngleGrid
from crbmo.geometry import UpaGeometry
from crbmo.manifold import OptimizerConfig
from crbmo.simulation import PathSpec, Scenario

__all__ = ["ScenarioError", "load_scenario", "parse_scenario"]

_SECTIONS = {
    "": {"seed", "array", "prior", "optimizer", "simulation", "paths", "beampattern", "crb_eval"},
    "array": {"p_rows", "q_cols", "n_rf", "n_snapshots", "n_ue"},
    "prior": {"theta_deg", "phi_deg", "grid"},
    "optimizer": {"sigma2", "epsilon", "epsilon_rel", "max_iters", "restarts",
                  "armijo_initial_step", "armijo_contraction", "armijo_slope"},
    "simulation": {"snr_db", "trials", "tx_power", "precoder", "combiner_source", "combiner_file",
                   "estimator_grid", "refine_levels", "refine_shrink"},
    "paths": {"theta_deg", "phi_deg", "power", "gain"},
    "beampattern": {"theta_deg", "samples"},
    "crb_eval": {"theta_deg", "phi_deg", "grid", "sigma2"},
}


class ScenarioError(ValueError):
    """Invalid scenario file; the message carries the field and line."""


class _Locator:
    """Best-effort ``section.key -> line`` lookup for diagnostics."""

    _header = re.compile(r"^\s*\[\[?\s*([A-Za-z0-9_.]+)\s*\]\]?")
    _key = re.compile(r"^\s*([A-Za-z0-9_]+)\s*=")

    def __init__(self, text: str):
        self.lines: dict[tuple[str, str], int] = {}
        section = ""
        for no, line in enumerate(text.splitlines(), start=1):
            m = self._header.match(line)
            if m:
                section = m.group(1)
                self.lines.setdefault((section, ""), no)
                continue
            m = self._key.match(line)
            if m:
                self.lines.setdefault((section, m.group(1)), no)

    def where(self, section: str, key: str = "") -> str:
        name = f"{section}.{key}" if section and key else (section or key)
        line = self.lines.get((section, key)) or self.lines.get((section, ""))
        return f"'{name}' (line {line})" if line else f"'{name}'"


class _Reader:
    def __init__(self, loc: _Locator):
        self.loc = loc

    def fail(self, section, key, msg):
        raise ScenarioError(f"{self.loc.where(section, key)}: {msg}")

    def number(self, table, section, key, default=None, *, positive=False, nonneg=False):
        if key not in table:
            if default is None:
                self.fail(section, key, "required field is missing")
            return default
        v = table[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.fail(section, key, f"expected a finite number, got {v!r}")
        if positive and not v > 0:
            self.fail(section, key, f"must be > 0, got {v!r}")
        if nonneg and not v >= 0:
            self.fail(section, key, f"must be >= 0, got {v!r}")
        return float(v)

    def integer(self, table, section, key, default=None, *, minimum=1):
        if key not in table:
            if default is None:
                self.fail(section, key, "required field is missing")
            return default
        v = table[key]
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(section, key, f"expected an integer, got {v!r}")
        if v < minimum:
            self.fail(section, key, f"must be >= {minimum}, got {v}")
        return v

    def pair(self, table, section, key, default=None, *, ints=False):
        if key not in table:
            if default is None:
                self.fail(section, key, "required field is missing")
            return default
        v = table[key]
        if not isinstance(v, list) or len(v) != 2:
            self.fail(section, key, f"expected a two-element list, got {v!r}")
        for x in v:
            bad = isinstance(x, bool) or not isinstance(x, int if ints else (int, float))
            if bad or (not ints and not math.isfinite(x)):
                self.fail(section, key, f"expected {'integers' if ints else 'finite numbers'}, got {v!r}")
            if ints and x < 1:
                self.fail(section, key, f"counts must be >= 1, got {v!r}")
        return tuple(v)

    def angle_range(self, table, section, key, default=None):
        lo, hi = self.pair(table, section, key, default)
        if hi < lo:
            self.fail(section, key, f"range must satisfy lo <= hi, got [{lo}, {hi}]")
        return math.radians(lo), math.radians(hi)

    def choice(self, table, section, key, options, default):
        v = table.get(key, default)
        if v not in options:
            self.fail(section, key, f"must be one of {', '.join(options)}; got {v!r}")
        return v

    def check_keys(self, table, section):
        if not isinstance(table, dict):
            self.fail(section, "", "expected a table")
        allowed = _SECTIONS[section]
        for key in table:
            if key not in allowed:
                self.fail(section, key, f"unknown field (allowed: {', '.join(sorted(allowed))})")


def parse_scenario(text: str, base_dir=".") -> Scenario:
    """Build a :class:`Scenario` from TOML text; relative paths resolve against ``base_dir``."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"TOML syntax error: {exc}") from None
    r = _Reader(_Locator(text))
    r.check_keys(doc, "")

    arr = doc.get("array", {})
    r.check_keys(arr, "array")
    geom = UpaGeometry(r.integer(arr, "array", "p_rows"), r.integer(arr, "array", "q_cols"))
    n_rf = r.integer(arr, "array", "n_rf", 4)
    n_snap = r.integer(arr, "array", "n_snapshots", 4)
    n_ue = r.integer(arr, "array", "n_ue", 4)
    if geom.n_bs % n_rf:
        r.fail("array", "n_rf", f"must divide p_rows*q_cols={geom.n_bs}")

    pr = doc.get("prior")
    if pr is None:
        r.fail("prior", "", "section is required")
    r.check_keys(pr, "prior")
    t_lo, t_hi = r.angle_range(pr, "prior", "theta_deg")
    p_lo, p_hi = r.angle_range(pr, "prior", "phi_deg")
    j, k = r.pair(pr, "prior", "grid", (30, 30), ints=True)
    prior = AngleGrid(t_lo, t_hi, p_lo, p_hi, j, k)

    opt = doc.get("optimizer", {})
    r.check_keys(opt, "optimizer")
    eps = r.number(opt, "optimizer", "epsilon", float("nan"), nonneg=True)
    try:
        optimizer = OptimizerConfig(
            epsilon=None if math.isnan(eps) else eps,
            epsilon_rel=r.number(opt, "optimizer", "epsilon_rel", 1e-6, nonneg=True),
            max_iters=r.integer(opt, "optimizer", "max_iters", 1000, minimum=0),
            armijo_initial_step=r.number(opt, "optimizer", "armijo_initial_step", 1.0, positive=True),
            armijo_contraction=r.number(opt, "optimizer", "armijo_contraction", 0.5, positive=True),
            armijo_slope=r.number(opt, "optimizer", "armijo_slope", 1e-4, positive=True),
            restarts=r.integer(opt, "optimizer", "restarts", 4),
            seed=r.integer(doc, "", "seed", 0, minimum=0),
        )
    except ValueError as exc:
        r.fail("optimizer", "", str(exc))
    opt_sigma2 = r.number(opt, "optimizer", "sigma2", 1.0, positive=True)

    sim = doc.get("simulation", {})
    r.check_keys(sim, "simulation")
    snr = sim.get("snr_db", [0, 5, 10, 15, 20])
    if not isinstance(snr, list) or not snr or any(
        isinstance(s, bool) or not isinstance(s, (int, float)) or not math.isfinite(s) for s in snr
    ):
        r.fail("simulation", "snr_db", f"expected a non-empty list of numbers, got {snr!r}")
    if any(b <= a for a, b in zip(snr, snr[1:])):
        r.fail("simulation", "snr_db", "must be strictly increasing")
    combiner_file = sim.get("combiner_file")
    if combiner_file is not None:
        if not isinstance(combiner_file, str) or not combiner_file:
            r.fail("simulation", "combiner_file", "expected a file path string")
        combiner_file = str((Path(base_dir) / combiner_file).resolve())
    ej, ek = r.pair(sim, "simulation", "estimator_grid", (30, 30), ints=True)

    raw_paths = doc.get("paths")
    if raw_paths is None:
        paths = (PathSpec(t_lo, t_hi, p_lo, p_hi),)
    else:
        if not isinstance(raw_paths, list) or not raw_paths:
            r.fail("paths", "", "expected one or more [[paths]] tables")
        paths = []
        for i, p in enumerate(raw_paths):
            r.check_keys(p, "paths")
            pt = r.angle_range(p, "paths", "theta_deg")
            pp = r.angle_range(p, "paths", "phi_deg")
            power = r.number(p, "paths", "power", 1.0, nonneg=True)
            gain = r.choice(p, "paths", "gain", ("cn", "fixed"), "cn")
            if i == 0 and power == 0:
                r.fail("paths", "power", "the first (LoS) path needs positive power")
            paths.append(PathSpec(pt[0], pt[1], pp[0], pp[1], power, gain))
        paths = tuple(paths)

    bp = doc.get("beampattern", {})
    r.check_keys(bp, "beampattern")
    bp_theta = math.radians(r.number(bp, "beampattern", "theta_deg", 0.0))
    bp_samples = r.integer(bp, "beampattern", "samples", 181)

    ce = doc.get("crb_eval")
    crb_grid, crb_sigma2 = None, 1.0
    if ce is not None:
        r.check_keys(ce, "crb_eval")
        ct = r.angle_range(ce, "crb_eval", "theta_deg", (math.degrees(t_lo), math.degrees(t_hi)))
        cp = r.angle_range(ce, "crb_eval", "phi_deg", (math.degrees(p_lo), math.degrees(p_hi)))
        cj, ck = r.pair(ce, "crb_eval", "grid", (10, 10), ints=True)
        crb_grid = AngleGrid(ct[0], ct[1], cp[0], cp[1], cj, ck)
        crb_sigma2 = r.number(ce, "crb_eval", "sigma2", 1.0, positive=True)

    try:
        return Scenario(
            geom=geom, prior=prior, paths=paths, n_ue=n_ue, n_rf=n_rf, n_snapshots=n_snap,
            snr_db=tuple(float(s) for s in snr),
            trials=r.integer(sim, "simulation", "trials", 500),
            tx_power=r.number(sim, "simulation", "tx_power", 1.0, positive=True),
            precoder=r.choice(sim, "simulation", "precoder", ("matched", "random"), "matched"),
            combiner_source=r.choice(sim, "simulation", "combiner_source", ("random", "optimized", "both"), "both"),
            combiner_file=combiner_file,
            seed=optimizer.seed,
            opt_sigma2=opt_sigma2,
            optimizer=optimizer,
            estimator_j=ej, estimator_k=ek,
            refine_levels=r.integer(sim, "simulation", "refine_levels", 4, minimum=0),
            refine_shrink=r.number(sim, "simulation", "refine_shrink", 0.2, positive=True),
            beampattern_theta=bp_theta,
            beampattern_samples=bp_samples,
            crb_eval_grid=crb_grid,
            crb_eval_sigma2=crb_sigma2,
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc.strerror or exc}") from None
    try:
        return parse_scenario(text, base_dir=path.parent)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
