"""Result files: per-trial JSON records, sweep summaries and tabular CSVs.

Everything except the per-trial records omits wall-clock timings so that
rerunning a sweep with the same master seed reproduces the files byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from ..io import atomic_write_json, atomic_write_text

if TYPE_CHECKING:
    from .experiment import ExperimentSpec, TrialResult
    from .search import AblationRow, AggregateReport, BenchmarkResult

TABLE_HEADER = ["duration", "baseline_mse", "saf_mse", "delta_percent"]


def trial_filename(spec: "ExperimentSpec", trial: "TrialResult", tag: str | None = None) -> str:
    variant = spec.variant if tag is None else f"{spec.variant}-{tag}"
    seed = spec.seeds[0] if len(spec.seeds) == 1 else f"{spec.seeds[0]}x{len(spec.seeds)}"
    return f"{spec.dataset_label}_{variant}_{seed}.json"


def write_trial(out_dir: str | os.PathLike, spec: "ExperimentSpec", trial: "TrialResult",
                tag: str | None = None, timing: bool = True) -> Path:
    path = Path(out_dir) / trial_filename(spec, trial, tag)
    atomic_write_json(path, json_safe(trial.to_dict(timing=timing)))
    return path


def json_safe(obj):
    """JSON-safe copy: non-finite floats become null, tuples become lists."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def table_csv(report: "AggregateReport") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for d, b, s, delta in zip(report.durations, report.baseline, report.saf, report.per_duration_delta):
        w.writerow([d, repr(b), repr(s), repr(delta)])
    w.writerow(["mean", repr(report.baseline_mean), repr(report.saf_mean), repr(report.delta_percent)])
    w.writerow(["std", repr(report.baseline_std), repr(report.saf_std), ""])
    return buf.getvalue()


def read_table_csv(path: str | os.PathLike) -> dict[int, tuple[float, float]]:
    """Per-duration ``(baseline, saf)`` pairs from a table CSV."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["duration"].isdigit():
                out[int(row["duration"])] = (float(row["baseline_mse"]), float(row["saf_mse"]))
    return out


def write_benchmark(out_dir: str | os.PathLike, result: "BenchmarkResult") -> tuple[Path, Path]:
    out = Path(out_dir)
    summary = {
        "dataset": result.variant,
        "aggregate": result.report.to_dict(),
        "selected": {
            v: {str(d): t.to_dict(timing=False) for d, t in sorted(per.items())}
            for v, per in result.selected.items()
        },
        "trials": {
            v: {str(d): [t.to_dict(timing=False) for t in s.trials] for d, s in sorted(per.items())}
            for v, per in result.searches.items()
        },
    }
    spath = out / f"{result.variant}_summary.json"
    cpath = out / f"{result.variant}_table.csv"
    atomic_write_json(spath, json_safe(summary))
    atomic_write_text(cpath, table_csv(result.report))
    return spath, cpath


def ablation_table(rows: Iterable["AblationRow"]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["configuration", "val_metric", "test_metric", "median_test_metric"])
    for r in rows:
        w.writerow([r.label, repr(r.trial.val_metric), repr(r.trial.test_metric), repr(r.trial.median_test)])
    return buf.getvalue()


def write_ablation(out_dir: str | os.PathLike, spec: "ExperimentSpec", rows: list["AblationRow"]) -> Path:
    out = Path(out_dir)
    for r in rows:
        write_trial(out, spec.replace(baseline=False, ablation=r.ablation), r.trial, timing=False)
    path = out / f"{spec.dataset_label}_ablation.csv"
    atomic_write_text(path, ablation_table(rows))
    return path


def summarize_directory(sweep_dir: str | os.PathLike) -> "AggregateReport":
    """Rebuild the duration table from per-trial records in ``sweep_dir``.

    Within each (duration, variant) the record with the lowest validation
    metric is selected, ties going to the lexicographically first file.
    """
    from .search import aggregate_durations

    best: dict[str, dict[int, tuple[float, str, float]]] = {"baseline": {}, "saf": {}}
    for path in sorted(Path(sweep_dir).glob("*.json")):
        try:
            rec = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError):
            continue
        spec = rec.get("spec") if isinstance(rec, dict) else None
        if not spec or rec.get("failed") or rec.get("val_metric") is None:
            continue
        if spec.get("ablation"):
            continue
        variant = "baseline" if spec.get("baseline") else "saf"
        dur = int(spec["duration"])
        cand = (rec["val_metric"], path.name, rec["test_metric"])
        if dur not in best[variant] or cand[:2] < best[variant][dur][:2]:
            best[variant][dur] = cand
    if not best["saf"] or not best["baseline"]:
        raise ValueError(f"{sweep_dir}: need both baseline and SAF trial records")
    return aggregate_durations({d: v[2] for d, v in best["saf"].items()},
                               {d: v[2] for d, v in best["baseline"].items()})
