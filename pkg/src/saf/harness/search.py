"""Grid search, multi-duration benchmarks and ablation batteries."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .experiment import ExperimentSpec, SeedResult, TrialResult, collect, run_seed
from .metrics import percent_change

log = logging.getLogger(__name__)

GRID_CAP = 256
RANDOM_TRIALS = 100

ABLATION_LABELS = {
    "no-decoder-update": "SAF without updating the decoder",
    "no-encoder-update": "SAF without updating the encoder",
    "no-error-signal": "SAF without error signal",
    None: "SAF",
}

# Appendix search space for the synthetic AR datasets (LSTM-relevant entries).
AR_SEARCH_SPACE: dict[str, list] = {
    "batch_size": [32, 64, 128, 256],
    "learning_rate": [0.0001, 0.0003, 0.001],
    "alpha": [0.00003, 0.0001, 0.0003, 0.001],
    "hidden": [16, 32, 64],
    "window": [10, 30, 50],
    "merge_mode": ["additive", "concatenation"],
    "use_error_signal": [True, False],
}
SAF_ONLY_KEYS = ("alpha", "use_error_signal")


def derive_seeds(master: int, count: int) -> list[int]:
    """Per-trial seeds: child ``i`` of ``numpy.random.SeedSequence(master)``,
    reduced to its first 32-bit state word."""
    return [int(s.generate_state(1, np.uint32)[0]) for s in np.random.SeedSequence(master).spawn(count)]


def worker_count() -> int:
    try:
        cap = int(os.environ.get("SAF_WORKERS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, os.cpu_count() or 1))


def _run_unit(args: tuple[ExperimentSpec, int]) -> SeedResult:
    spec, seed = args
    return run_seed(spec, seed)


def run_many(specs: Sequence[ExperimentSpec], assignments: Sequence[dict] | None = None,
             workers: int | None = None) -> list[TrialResult]:
    """Run every (spec, seed) unit, in a process pool when ``workers > 1``."""
    workers = worker_count() if workers is None else workers
    units = [(i, s) for i, spec in enumerate(specs) for s in spec.seeds]
    start = time.perf_counter()
    args = [(specs[i], s) for i, s in units]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            seed_results = list(pool.map(_run_unit, args))
    else:
        seed_results = [_run_unit(a) for a in args]
    wall = time.perf_counter() - start
    grouped: dict[int, list[SeedResult]] = {i: [] for i in range(len(specs))}
    for (i, _), res in zip(units, seed_results):
        grouped[i].append(res)
    out = []
    for i, spec in enumerate(specs):
        share = wall * len(spec.seeds) / max(1, len(units))
        out.append(collect(spec, grouped[i], share, (assignments or [{}] * len(specs))[i], index=i))
    return out


def expand_space(space: Mapping[str, Sequence[Any]], master_seed: int = 0,
                 cap: int = GRID_CAP, sample: int = RANDOM_TRIALS) -> list[dict[str, Any]]:
    """Cartesian product of ``space``; above ``cap`` combinations, a seeded
    uniform sample (without replacement) of ``sample`` of them in grid order."""
    if not space:
        raise ValueError("search space is empty")
    keys = list(space)
    sizes = [len(space[k]) for k in keys]
    if any(s == 0 for s in sizes):
        raise ValueError("every hyperparameter needs at least one candidate")
    total = math.prod(sizes)
    if total <= cap:
        chosen = range(total)
    else:
        rng = np.random.Generator(np.random.Philox(master_seed))
        chosen = sorted(rng.choice(total, size=min(sample, total), replace=False).tolist())
    out = []
    for flat in chosen:
        idx, rem = [], flat
        for s in reversed(sizes):
            idx.append(rem % s)
            rem //= s
        idx.reverse()
        out.append({k: space[k][i] for k, i in zip(keys, idx)})
    return out


def rank_trials(trials: Iterable[TrialResult]) -> list[TrialResult]:
    """Successful trials by validation metric ascending; ties keep trial order."""
    ok = [t for t in trials if not t.failed and math.isfinite(t.val_metric)]
    return sorted(ok, key=lambda t: (t.val_metric, t.index))


@dataclass
class SearchResult:
    trials: list[TrialResult]
    ranked: list[TrialResult]

    @property
    def best(self) -> TrialResult | None:
        return self.ranked[0] if self.ranked else None

    @property
    def failed(self) -> list[TrialResult]:
        return [t for t in self.trials if t.failed]


def grid_search(space: Mapping[str, Sequence[Any]], template: ExperimentSpec, master_seed: int = 0,
                workers: int | None = None, cap: int = GRID_CAP, sample: int = RANDOM_TRIALS) -> SearchResult:
    """Run every assignment of ``expand_space`` on top of ``template``.

    Baseline templates drop SAF-only keys from the space before expansion.
    """
    if not space:
        raise ValueError("search space is empty")
    if template.baseline:
        space = {k: v for k, v in space.items() if k not in SAF_ONLY_KEYS}
    assignments = expand_space(space, master_seed, cap, sample) if space else [{}]
    specs = [template.replace(**a) for a in assignments]
    trials = run_many(specs, assignments, workers)
    if template.output_dir:
        from .report import write_trial
        for spec, trial in zip(specs, trials):
            write_trial(template.output_dir, spec, trial, tag=f"t{trial.index:03d}")
    return SearchResult(trials, rank_trials(trials))


# -- aggregation ---------------------------------------------------------------

@dataclass
class AggregateReport:
    durations: list[int]
    saf: list[float]
    baseline: list[float]
    saf_mean: float
    saf_std: float
    baseline_mean: float
    baseline_std: float
    delta_percent: float
    per_duration_delta: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def aggregate_durations(saf: Mapping[int, float], baseline: Mapping[int, float]) -> AggregateReport:
    """Mean and population std across durations, and the percent change of
    the SAF mean relative to the baseline mean."""
    if not saf:
        raise ValueError("need at least one duration")
    if set(saf) != set(baseline):
        raise ValueError(f"duration sets differ: {sorted(saf)} vs {sorted(baseline)}")
    durs = sorted(saf)
    s = np.array([saf[d] for d in durs], dtype=np.float64)
    b = np.array([baseline[d] for d in durs], dtype=np.float64)
    return AggregateReport(
        durations=durs,
        saf=s.tolist(),
        baseline=b.tolist(),
        saf_mean=float(s.mean()),
        saf_std=float(s.std()),
        baseline_mean=float(b.mean()),
        baseline_std=float(b.std()),
        delta_percent=percent_change(float(s.mean()), float(b.mean())),
        per_duration_delta=[percent_change(x, y) for x, y in zip(s, b)],
    )


@dataclass
class BenchmarkResult:
    variant: str
    report: AggregateReport
    selected: dict[str, dict[int, TrialResult]]
    searches: dict[str, dict[int, SearchResult]]


def benchmark(dataset: str, durations: Sequence[int], space: Mapping[str, Sequence[Any]],
              template: ExperimentSpec, master_seed: int = 0, workers: int | None = None,
              output_dir: str | None = None) -> BenchmarkResult:
    """Baseline and SAF grid searches per duration; the validation-selected
    trial's test metric enters the aggregate."""
    selected: dict[str, dict[int, TrialResult]] = {"baseline": {}, "saf": {}}
    searches: dict[str, dict[int, SearchResult]] = {"baseline": {}, "saf": {}}
    for dur in durations:
        for variant in ("baseline", "saf"):
            tmpl = template.replace(dataset=dataset, duration=dur, baseline=(variant == "baseline"),
                                    output_dir=None)
            res = grid_search(space, tmpl, master_seed, workers)
            searches[variant][dur] = res
            if res.best is None:
                raise RuntimeError(f"every {variant} trial failed for {dataset}-{dur}")
            selected[variant][dur] = res.best
            log.info("%s-%d %s: val %.6g test %.6g", dataset, dur, variant,
                     res.best.val_metric, res.best.test_metric)
    report = aggregate_durations({d: t.test_metric for d, t in selected["saf"].items()},
                                 {d: t.test_metric for d, t in selected["baseline"].items()})
    result = BenchmarkResult(dataset, report, selected, searches)
    if output_dir:
        from .report import write_benchmark
        write_benchmark(output_dir, result)
    return result


# -- ablations -------------------------------------------------------------------

@dataclass
class AblationRow:
    label: str
    ablation: str | None
    trial: TrialResult


def ablation_battery(spec: ExperimentSpec, workers: int | None = None) -> list[AblationRow]:
    """Full SAF and its three ablations with identical data, seeds and settings."""
    kinds = ["no-decoder-update", "no-encoder-update", "no-error-signal", None]
    base = spec.replace(baseline=False, ablation=None, output_dir=None)
    specs = [base.replace(ablation=k) for k in kinds]
    trials = run_many(specs, [{"ablation": k} for k in kinds], workers)
    rows = [AblationRow(ABLATION_LABELS[k], k, t) for k, t in zip(kinds, trials)]
    if spec.output_dir:
        from .report import write_ablation
        write_ablation(spec.output_dir, spec, rows)
    return rows


# -- reduced synthetic protocol ----------------------------------------------------

REDUCED_SPACE: dict[str, list] = {"alpha": [1e-4, 3e-4], "hidden": [16, 32]}
REDUCED_DURATIONS = (1000, 1400, 1800, 2200, 2600, 3000)


def reduced_template(master_seed: int = 0, n_seeds: int = 5, **overrides) -> ExperimentSpec:
    """Desk-scale synthetic protocol: batch 64, learning rate 1e-3, m=30, h=5."""
    base = dict(batch_size=64, learning_rate=1e-3, window=30, horizon=5, validation=100, test=100,
                seeds=tuple(derive_seeds(master_seed, n_seeds)))
    base.update(overrides)
    return ExperimentSpec(**base)


def reduced_benchmark(dataset: str, master_seed: int = 0, durations: Sequence[int] = REDUCED_DURATIONS,
                      workers: int | None = None, output_dir: str | None = None,
                      **overrides) -> BenchmarkResult:
    return benchmark(dataset, durations, REDUCED_SPACE, reduced_template(master_seed, **overrides),
                     master_seed, workers, output_dir)
