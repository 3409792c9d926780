"""On-disk formats: combiner files, result tables and run manifests.

All floats are written with 17 significant digits so every value parses
back to the identical double.

Combiner file (JSON)::

    {"format": "crbmo-combiner", "version": 1,
     "geometry": {"p_rows": P, "q_cols": Q},
     "mask": {"layout": "partially-connected", "n_bs": ..., "n_rf": ..., "n_snapshots": ...},
     "units": "rad",
     "snapshots": [[[phase or null, ...] per antenna row] per snapshot]}

Each snapshot is an ``n_bs x n_rf`` phase matrix stored row-major; entries
off the mask are ``null``.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from crbmo.combiner import CombinerSet, partially_connected_mask
from crbmo.geometry import UpaGeometry

__all__ = [
    "CombinerFileError",
    "format_float",
    "save_combiners",
    "load_combiners",
    "combiner_text",
    "write_table",
    "read_table",
    "sha256_file",
    "write_manifest",
    "read_manifest",
]

FORMAT_NAME = "crbmo-combiner"
FORMAT_VERSION = 1


class CombinerFileError(ValueError):
    """A combiner file is missing fields or violates the combiner invariants."""


def format_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def combiner_text(combiners: CombinerSet, geom: UpaGeometry) -> str:
    if combiners.w_bb is not None:
        raise ValueError("only analog combiners (w_bb = identity) are serialised")
    if geom.n_bs != combiners.n_bs:
        raise ValueError(f"geometry has {geom.n_bs} antennas, combiner has {combiners.n_bs}")
    head = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "geometry": {"p_rows": geom.p_rows, "q_cols": geom.q_cols},
        "mask": {
            "layout": "partially-connected",
            "n_bs": combiners.n_bs,
            "n_rf": combiners.n_rf,
            "n_snapshots": combiners.n_snapshots,
        },
        "units": "rad",
    }
    phases, mask = combiners.phases, combiners.mask
    snaps = []
    for n in range(combiners.n_snapshots):
        cols = slice(n * combiners.n_rf, (n + 1) * combiners.n_rf)
        rows = []
        for ph, m in zip(phases[:, cols], mask[:, cols]):
            rows.append("[" + ", ".join(format_float(v) if k else "null" for v, k in zip(ph, m)) + "]")
        snaps.append("    [\n      " + ",\n      ".join(rows) + "\n    ]")
    body = json.dumps(head, indent=2)[:-2]  # reopen the object to append snapshots
    return body + ',\n  "snapshots": [\n' + ",\n".join(snaps) + "\n  ]\n}\n"


def save_combiners(path, combiners: CombinerSet, geom: UpaGeometry) -> Path:
    path = Path(path)
    path.write_text(combiner_text(combiners, geom), encoding="utf-8")
    return path


def _need(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise CombinerFileError(f"{where}: missing field '{key}'")
    return obj[key]


def _as_int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise CombinerFileError(f"{where}: expected a positive integer, got {v!r}")
    return v


def load_combiners(path) -> tuple[CombinerSet, UpaGeometry]:
    """Parse and validate a combiner file written by :func:`save_combiners`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CombinerFileError(f"{path}: not valid JSON ({exc})") from None
    if _need(doc, "format", str(path)) != FORMAT_NAME:
        raise CombinerFileError(f"{path}: not a combiner file (format={doc.get('format')!r})")
    if _need(doc, "version", str(path)) != FORMAT_VERSION:
        raise CombinerFileError(f"{path}: unsupported version {doc['version']!r}")
    if doc.get("units", "rad") != "rad":
        raise CombinerFileError(f"{path}: phases must be in radians")
    g = _need(doc, "geometry", str(path))
    geom = UpaGeometry(_as_int(_need(g, "p_rows", "geometry"), "geometry.p_rows"),
                       _as_int(_need(g, "q_cols", "geometry"), "geometry.q_cols"))
    m = _need(doc, "mask", str(path))
    if _need(m, "layout", "mask") != "partially-connected":
        raise CombinerFileError(f"{path}: unknown mask layout {m['layout']!r}")
    n_bs = _as_int(_need(m, "n_bs", "mask"), "mask.n_bs")
    n_rf = _as_int(_need(m, "n_rf", "mask"), "mask.n_rf")
    n_snap = _as_int(_need(m, "n_snapshots", "mask"), "mask.n_snapshots")
    if n_bs != geom.n_bs:
        raise CombinerFileError(f"{path}: mask.n_bs={n_bs} but geometry has {geom.n_bs} antennas")
    try:
        mask = partially_connected_mask(n_bs, n_rf, n_snap)
    except ValueError as exc:
        raise CombinerFileError(f"{path}: {exc}") from None

    snaps = _need(doc, "snapshots", str(path))
    if not isinstance(snaps, list) or len(snaps) != n_snap:
        raise CombinerFileError(f"{path}: expected {n_snap} snapshot matrices")
    phases = np.zeros(mask.shape)
    for n, snap in enumerate(snaps):
        if not isinstance(snap, list) or len(snap) != n_bs or any(
            not isinstance(r, list) or len(r) != n_rf for r in snap
        ):
            raise CombinerFileError(f"{path}: snapshot {n} must be a {n_bs}x{n_rf} matrix")
        for i, row in enumerate(snap):
            for j, v in enumerate(row):
                col = n * n_rf + j
                on = mask[i, col] == 1
                if on and (isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v)):
                    raise CombinerFileError(f"{path}: snapshot {n} entry ({i},{j}) must be a finite phase")
                if not on and v is not None:
                    raise CombinerFileError(f"{path}: snapshot {n} entry ({i},{j}) is off the mask and must be null")
                if on:
                    phases[i, col] = float(v)
    return CombinerSet.from_phases(phases, mask), geom


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], meta: dict | None = None) -> Path:
    """CSV with ``#`` metadata lines, one header line and 17-digit floats."""
    buf = _io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_table(path) -> tuple[list[str], list[dict[str, str]]]:
    """Inverse of :func:`write_table`; values are left as strings."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = list(reader)
    return list(reader.fieldnames or []), rows


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("command", "scenario_text", "outputs"):
        if key not in doc:
            raise ValueError(f"{path}: manifest lacks '{key}'")
    return doc


def relpath_or_abs(target, base) -> str:
    try:
        return os.path.relpath(target, base)
    except ValueError:
        return str(Path(target).resolve())
