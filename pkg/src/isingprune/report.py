"""report.json / curves.csv emission."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .trainer import RunReport

CURVE_COLUMNS = ("t", "mean_energy", "best_energy", "kept_rate")


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _clean(obj.item())
    return obj


def report_json(report: RunReport) -> str:
    return json.dumps(_clean(report.to_dict()), indent=2, sort_keys=True) + "\n"


def write_report(report: RunReport, out_dir) -> tuple[Path, Path]:
    """Write ``report.json`` and ``curves.csv`` (one row per training iteration)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rpath, cpath = out / "report.json", out / "curves.csv"
    rpath.write_text(report_json(report))
    with cpath.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in report.iterations:
            w.writerow([r.t, repr(r.mean_energy), repr(r.best_energy), repr(r.kept_rate)])
    return rpath, cpath


def read_curves(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CURVE_COLUMNS:
        raise ValueError(f"{path}: unexpected curves header {rows[:1]}")
    return [{"t": int(r[0]), "mean_energy": float(r[1]), "best_energy": float(r[2]), "kept_rate": float(r[3])}
            for r in rows[1:]]
