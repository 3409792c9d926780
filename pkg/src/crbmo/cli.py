"""``crbmo`` command line: optimize, simulate, crb-eval, beampattern.

Every run writes its outputs plus ``manifest_<command>.json`` into ``--out``.
``--replay <manifest>`` re-runs the recorded command from the recorded
scenario text and compares each output byte-for-byte (via SHA-256).

Exit codes: 0 success/converged, 1 usage or configuration error,
2 max_iters, 3 step failure, 4 singular Fisher, 5 replay mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from crbmo import __version__, kernels
from crbmo.crb import SingularFisher, evaluate_grid
from crbmo.io import (
    CombinerFileError,
    load_combiners,
    read_manifest,
    save_combiners,
    sha256_file,
    write_manifest,
    write_table,
)
from crbmo.manifold import TerminationReason, crb_mo_chains, random_feasible_init
from crbmo.scenario import ScenarioError, parse_scenario
from crbmo.simulation import Scenario, array_power_response, run_mse_sweep, run_two_path_sweep

log = logging.getLogger("crbmo")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MAX_ITERS = 2
EXIT_STEP_FAILURE = 3
EXIT_SINGULAR = 4
EXIT_REPLAY_MISMATCH = 5

_TERMINATION_EXIT = {
    TerminationReason.CONVERGED: EXIT_OK,
    TerminationReason.MAX_ITERS: EXIT_MAX_ITERS,
    TerminationReason.STEP_FAILURE: EXIT_STEP_FAILURE,
    TerminationReason.SINGULAR_FISHER: EXIT_SINGULAR,
}

COMMANDS = ("optimize", "simulate", "crb-eval", "beampattern")
# seed stream used by beampattern for its random reference combiner
_BEAMPATTERN_SLOT = 99


class ConfigError(Exception):
    pass


def _meta(scenario: Scenario, command: str) -> dict:
    return {"command": command, "crbmo": __version__, "seed": scenario.seed, "angles": "rad"}


def _combiner_for(scenario: Scenario, required: bool):
    if scenario.combiner_file is None:
        if required:
            raise ConfigError("scenario names no [simulation] combiner_file")
        return None
    path = Path(scenario.combiner_file)
    if not path.is_file():
        raise ConfigError(f"combiner file not found: {path}")
    comb, geom = load_combiners(path)
    if geom != scenario.geom or comb.n_rf != scenario.n_rf or comb.n_snapshots != scenario.n_snapshots:
        raise ConfigError(f"combiner file {path} does not match the scenario's array layout")
    return comb


def cmd_optimize(scenario: Scenario, out: Path, threads: int) -> tuple[int, list[Path]]:
    comb, best, chains = crb_mo_chains(
        scenario.prior, scenario.geom, scenario.opt_sigma2, scenario.mask, scenario.optimizer, threads
    )
    rows = []
    for ch in chains:
        tr = ch.trace
        for i, f in enumerate(tr.objective_history):
            step = tr.step_sizes[i - 1] if i > 0 else float("nan")
            gn = tr.gradient_norms[i] if i < len(tr.gradient_norms) else float("nan")
            rows.append((tr.restart, i, float(f), float(step), float(gn)))
    meta = _meta(scenario, "optimize")
    meta["best_restart"] = best.restart
    meta["termination"] = best.termination_reason.value
    meta["iterations"] = best.iterations
    meta["objective"] = repr(float(best.objective_history[-1]))
    paths = [
        save_combiners(out / "combiner.json", comb, scenario.geom),
        write_table(out / "trace.csv", ("restart", "iteration", "objective", "step", "grad_norm"), rows, meta),
    ]
    log.info("restart %d won: objective %.6g after %d iterations (%s)", best.restart,
             best.objective_history[-1], best.iterations, best.termination_reason.value)
    return _TERMINATION_EXIT[best.termination_reason], paths


def cmd_simulate(scenario: Scenario, out: Path, threads: int) -> tuple[int, list[Path]]:
    optimized = _combiner_for(scenario, "optimized" in scenario.combiner_types)
    sweep = run_two_path_sweep if len(scenario.paths) == 2 else run_mse_sweep
    res = sweep(scenario, optimized, threads)
    header = ("snr_db", "combiner", "mse_theta", "mse_phi", "crb_mean", "trials", "failures", "crb_theta", "crb_phi")
    rows = [(r.snr_db, r.combiner, r.mse_theta, r.mse_phi, r.crb_mean, r.trials, r.failures, r.crb_theta, r.crb_phi)
            for r in res.rows]
    meta = _meta(scenario, "simulate")
    meta["redraws"] = res.redraws
    meta["paths"] = len(scenario.paths)
    return EXIT_OK, [write_table(out / "sweep.csv", header, rows, meta)]


def cmd_crb_eval(scenario: Scenario, out: Path, threads: int) -> tuple[int, list[Path]]:
    del threads
    comb = _combiner_for(scenario, True)
    grid = scenario.crb_eval_grid or scenario.prior
    ev = evaluate_grid(comb, grid, scenario.geom, scenario.crb_eval_sigma2)
    rows = []
    for t, p, tr, c, bad in zip(ev.thetas, ev.phis, ev.traces, ev.c11, ev.singular):
        if bad:
            rows.append((float(t), float(p), float("nan"), float("nan"), float("nan"), 1))
        else:
            rows.append((float(t), float(p), float(tr), float(c[0, 0]), float(c[1, 1]), 0))
    meta = _meta(scenario, "crb-eval")
    meta["sigma2"] = repr(scenario.crb_eval_sigma2)
    meta["singular_points"] = int(np.count_nonzero(ev.singular))
    header = ("theta", "phi", "tr_c11", "c11_theta", "c11_phi", "singular")
    return EXIT_OK, [write_table(out / "crb.csv", header, rows, meta)]


def cmd_beampattern(scenario: Scenario, out: Path, threads: int) -> tuple[int, list[Path]]:
    del threads
    columns, curves = [], []
    if "optimized" in scenario.combiner_types:
        comb = _combiner_for(scenario, True)
        columns.append("g_optimized")
        curves.append(array_power_response(comb, scenario.geom, scenario.beampattern_theta,
                                           scenario.beampattern_samples))
    if "random" in scenario.combiner_types:
        rand = random_feasible_init(scenario.mask, scenario.stream(0, _BEAMPATTERN_SLOT))
        columns.append("g_random")
        curves.append(array_power_response(rand, scenario.geom, scenario.beampattern_theta,
                                           scenario.beampattern_samples))
    phis = [phi for phi, _ in curves[0]]
    rows = [(phi, *(float(c[i][1]) for c in curves)) for i, phi in enumerate(phis)]
    meta = _meta(scenario, "beampattern")
    meta["theta_fixed"] = repr(scenario.beampattern_theta)
    return EXIT_OK, [write_table(out / "beampattern.csv", ("phi", *columns), rows, meta)]


HANDLERS = {
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "crb-eval": cmd_crb_eval,
    "beampattern": cmd_beampattern,
}


def _inputs(scenario: Scenario, scenario_path: Path | None) -> dict[str, str]:
    found = {}
    if scenario_path is not None:
        found[str(scenario_path.resolve())] = sha256_file(scenario_path)
    if scenario.combiner_file and Path(scenario.combiner_file).is_file():
        found[str(Path(scenario.combiner_file).resolve())] = sha256_file(scenario.combiner_file)
    return found


def _guard_inputs(command: str, out: Path, inputs: dict[str, str]) -> None:
    names = {"optimize": ("combiner.json", "trace.csv"), "simulate": ("sweep.csv",),
             "crb-eval": ("crb.csv",), "beampattern": ("beampattern.csv",)}[command]
    for name in (*names, f"manifest_{command}.json"):
        target = str((out / name).resolve())
        if target in inputs:
            raise ConfigError(f"output {target} would overwrite an input file")


def _execute(command: str, scenario: Scenario, scenario_text: str, scenario_path: Path | None,
             out: Path, threads: int, inputs: dict[str, str]) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _guard_inputs(command, out, inputs)
    code, paths = HANDLERS[command](scenario, out, threads)
    manifest = {
        "command": command,
        "crbmo_version": __version__,
        "backend": kernels.backend,
        "seed": scenario.seed,
        "scenario_file": str(scenario_path.resolve()) if scenario_path else None,
        "scenario_text": scenario_text,
        "inputs": inputs,
        "outputs": {p.name: sha256_file(p) for p in paths},
        "exit_code": code,
    }
    write_manifest(out / f"manifest_{command}.json", manifest)
    return code


def _with_seed(scenario: Scenario, seed: int | None) -> Scenario:
    if seed is None:
        return scenario
    opt = dataclasses.replace(scenario.optimizer, seed=seed)
    return dataclasses.replace(scenario, seed=seed, optimizer=opt)


def _replay(args) -> int:
    man = read_manifest(args.replay)
    if man["command"] != args.command:
        raise ConfigError(f"manifest records '{man['command']}', not '{args.command}'")
    if man.get("backend") != kernels.backend:
        log.warning("manifest was produced with the %s kernels, replaying with %s",
                    man.get("backend"), kernels.backend)
    scen_file = Path(man["scenario_file"]) if man.get("scenario_file") else None
    base = scen_file.parent if scen_file else Path(args.replay).parent
    scenario = parse_scenario(man["scenario_text"], base_dir=base)
    scenario = _with_seed(scenario, man.get("seed"))
    mismatches = []
    for path, digest in man.get("inputs", {}).items():
        if scen_file is not None and path == str(scen_file.resolve()):
            continue  # the recorded text is what gets replayed
        if not Path(path).is_file() or sha256_file(path) != digest:
            mismatches.append(f"input changed: {path}")
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(args.out) if args.out else Path(tmp)
        code = _execute(args.command, scenario, man["scenario_text"], None, out, args.threads, {})
        recorded_dir = Path(args.replay).parent
        for name, digest in man["outputs"].items():
            got = out / name
            if not got.is_file():
                mismatches.append(f"missing output: {name}")
                continue
            if sha256_file(got) != digest:
                mismatches.append(f"output differs from manifest: {name}")
            old = recorded_dir / name
            if old.is_file() and old.resolve() != got.resolve() and old.read_bytes() != got.read_bytes():
                mismatches.append(f"output differs from {old}")
        if code != man.get("exit_code", code):
            mismatches.append(f"exit code {code} != recorded {man['exit_code']}")
    for m in mismatches:
        print(f"replay mismatch: {m}", file=sys.stderr)
    if mismatches:
        return EXIT_REPLAY_MISMATCH
    print(f"replay ok: {len(man['outputs'])} output(s) identical")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crbmo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"crbmo {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", type=Path, help="TOML scenario file")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    p.add_argument("--replay", type=Path, help="re-run a manifest and compare outputs")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.replay is not None:
            return _replay(args)
        if args.scenario is None or args.out is None:
            raise ConfigError("--scenario and --out are required (unless --replay is given)")
        try:
            text = args.scenario.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read scenario file {args.scenario}: {exc.strerror or exc}") from None
        try:
            scenario = parse_scenario(text, base_dir=args.scenario.parent)
        except ScenarioError as exc:
            raise ConfigError(f"{args.scenario}: {exc}") from None
        scenario = _with_seed(scenario, args.seed)
        inputs = _inputs(scenario, args.scenario)
        return _execute(args.command, scenario, text, args.scenario, args.out, args.threads, inputs)
    except (ConfigError, ScenarioError, CombinerFileError, FileNotFoundError, ValueError) as exc:
        print(f"crbmo: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SingularFisher as exc:
        print(f"crbmo: singular Fisher information: {exc}", file=sys.stderr)
        return EXIT_SINGULAR


if __name__ == "__main__":
    sys.exit(main())
