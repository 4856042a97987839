"""Training with validation checkpointing, and single-trial execution."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .. import data as D
from ..algorithm import (
    ABLATIONS,
    Batch,
    SafConfig,
    ablation_variant,
    baseline_infer,
    baseline_train_step,
    infer,
    train_step,
)
from ..model import ModelBundle, ModelDims, init_params
from ..tensor import TensorError
from .metrics import metric
from .optim import make_optimizer

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


class SpecError(ValueError):
    pass


class LeakageError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to train and score one configuration over several seeds."""

    dataset: str = "ar3"
    duration: int = 1000
    panel_csv: str | None = None
    static_csv: str | None = None
    schema: str | None = None
    validation: int = 100
    test: int = 100
    normalization: str = "global"
    baseline: bool = False
    ablation: str | None = None
    window: int = 30
    horizon: int = 5
    mask: int | None = None
    hidden: int = 16
    batch_size: int = 64
    learning_rate: float = 1e-3
    alpha: float = 1e-4
    adapt_steps: int = 1
    use_error_signal: bool = True
    masked_only_loss: bool = False
    merge_mode: str = "additive"
    loss: str = "mse"
    metric: str | None = None
    optimizer: str = "adam"
    backcast_optimizer: str = "sgd"
    max_iterations: int = 300
    eval_every: int = 25
    seeds: tuple[int, ...] = (0,)
    output_dir: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise SpecError("seed list must be non-empty")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.max_iterations <= 0:
            raise SpecError("max_iterations must be positive")
        if self.eval_every <= 0:
            raise SpecError("eval_every must be positive")
        if self.batch_size <= 0:
            raise SpecError("batch_size must be positive")
        if self.dataset not in D.AR_VARIANTS + ("csv",):
            raise SpecError(f"dataset must be one of {D.AR_VARIANTS + ('csv',)}")
        if self.dataset == "csv" and not self.panel_csv:
            raise SpecError("csv dataset needs panel_csv")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise SpecError(f"ablation must be one of {ABLATIONS}")
        if self.baseline and self.ablation:
            raise SpecError("ablations apply to SAF runs only")
        if self.metric is None:
            object.__setattr__(self, "metric", self.loss)
        if self.metric not in ("mse", "mae"):
            raise SpecError("metric must be mse or mae")
        if self.normalization not in ("global", "per-entity", "none"):
            raise SpecError("normalization must be global, per-entity or none")
        if self.optimizer not in ("sgd", "adam") or self.backcast_optimizer not in ("sgd", "adam"):
            raise SpecError("optimizers must be sgd or adam")
        self.saf_config()

    @property
    def variant(self) -> str:
        if self.baseline:
            return "baseline"
        return self.ablation or "saf"

    @property
    def dataset_label(self) -> str:
        return f"{self.dataset}-{self.duration}" if self.dataset != "csv" else "csv"

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)

    def saf_config(self) -> SafConfig:
        cfg = SafConfig(window=self.window, horizon=self.horizon, alpha=self.alpha,
                        gamma=self.learning_rate, mask=self.mask, adapt_steps=self.adapt_steps,
                        use_error_signal=self.use_error_signal, masked_only_loss=self.masked_only_loss,
                        loss=self.loss, merge_mode=self.merge_mode)
        return ablation_variant(self.ablation, cfg) if self.ablation else cfg

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise SpecError(f"unknown config key {unknown[0]!r}")
        d = dict(raw)
        if "seeds" in d:
            if not isinstance(d["seeds"], (list, tuple)):
                raise SpecError("seeds must be a list of integers")
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# -- data preparation ---------------------------------------------------------

class SplitAccessLog:
    """Hands out split windows and records which phase asked for them.

    With ``strict`` the test split cannot be read during model selection.
    """

    def __init__(self, windows: dict[str, list[D.WindowSample]], strict: bool = True):
        self._windows = windows
        self.phase = "selection"
        self.strict = strict
        self.events: list[tuple[str, str]] = []

    def get(self, split: str) -> list[D.WindowSample]:
        self.events.append((split, self.phase))
        if self.strict and split == "test" and self.phase == "selection":
            raise LeakageError("test split requested during model selection")
        return self._windows[split]

    def count(self, split: str, phase: str) -> int:
        return sum(1 for s, p in self.events if s == split and p == phase)


@dataclass
class PreparedData:
    dataset: D.PanelDataset          # normalized
    stats: D.NormStats | None
    splits: SplitAccessLog

    def denormalize_target(self, values: np.ndarray, entities: list[str]) -> np.ndarray:
        if self.stats is None:
            return values
        idx = self.dataset.target_index
        index = {e: i for i, e in enumerate(self.dataset.entities)}
        mu = np.empty((len(entities), 1))
        sd = np.empty((len(entities), 1))
        for row, ent in enumerate(entities):
            mu[row, 0], sd[row, 0] = self.stats.target(index[ent], idx)
        return values * sd + mu


def load_dataset(spec: ExperimentSpec, seed: int) -> D.PanelDataset:
    if spec.dataset == "csv":
        return D.load_csv(spec.panel_csv, spec.static_csv, spec.schema)
    return D.ar_dataset(D.ArProcessSpec(spec.dataset, spec.duration, seed=seed))


def prepare(spec: ExperimentSpec, seed: int, raw: D.PanelDataset | None = None) -> PreparedData:
    raw = raw if raw is not None else load_dataset(spec, seed)
    split_spec = D.SplitSpec(spec.validation, spec.test)
    views = D.split(raw, split_spec)
    stats = None
    ds = raw
    if spec.normalization != "none":
        ds, stats = D.normalize(raw, spec.normalization, views["train"])
    views = D.split(ds, split_spec)
    windows = {name: D.make_windows(view, spec.window, spec.horizon) for name, view in views.items()}
    for name, w in windows.items():
        if not w:
            raise SpecError(f"{name} split yields no windows for m={spec.window}, h={spec.horizon}")
    return PreparedData(ds, stats, SplitAccessLog(windows))


# -- training -----------------------------------------------------------------

def build_model(spec: ExperimentSpec, ds: D.PanelDataset, seed: int) -> ModelBundle:
    dims = ModelDims(n_features=ds.n_features, hidden=spec.hidden, horizon=spec.horizon,
                     window=spec.window, n_static=ds.n_static, target_index=ds.target_index,
                     error_channel=not spec.baseline, merge_mode=spec.merge_mode)
    return init_params(dims, seed)


def predict(bundle: ModelBundle, spec: ExperimentSpec, samples: list[D.WindowSample]) -> np.ndarray:
    """Normalized-space forecasts (N, h), computed in chunks."""
    cfg = spec.saf_config()
    out = []
    for lo in range(0, len(samples), EVAL_CHUNK):
        x, _, static = D.stack_windows(samples[lo:lo + EVAL_CHUNK])
        if spec.baseline:
            out.append(baseline_infer(bundle, cfg, x, static))
        else:
            out.append(infer(bundle, cfg, x, static))
    return np.concatenate(out, axis=0)


def score(bundle: ModelBundle, spec: ExperimentSpec, prepared: PreparedData,
          samples: list[D.WindowSample]) -> tuple[float, np.ndarray, np.ndarray]:
    """Metric in the original data scale, plus the de-normalized forecasts and targets."""
    ents = [s.entity for s in samples]
    f = prepared.denormalize_target(predict(bundle, spec, samples), ents)
    y = prepared.denormalize_target(np.stack([s.y for s in samples]), ents)
    return metric(spec.metric, f, y), f, y


@dataclass
class SeedResult:
    seed: int
    val_metric: float
    test_metric: float
    best_iteration: int
    final_train_loss: float
    failed: bool = False
    error: str | None = None
    history: list[tuple[int, float, float]] = field(default_factory=list)
    test_reads_during_selection: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainOutcome:
    bundle: ModelBundle
    result: SeedResult
    prepared: PreparedData


def train_model(spec: ExperimentSpec, seed: int, raw: D.PanelDataset | None = None) -> TrainOutcome:
    """Train one seed, keeping the bundle with the best validation metric.

    Only the training and validation splits are read until the best
    checkpoint is fixed; the test split is scored once afterwards.
    """
    prepared = prepare(spec, seed, raw)
    train_w = prepared.splits.get("train")
    x_all, y_all, s_all = D.stack_windows(train_w)
    bundle = build_model(spec, prepared.dataset, seed)
    cfg = spec.saf_config()
    opt = make_optimizer(spec.optimizer, spec.learning_rate)
    bopt = make_optimizer(spec.backcast_optimizer, spec.alpha) if spec.alpha > 0 else None
    rng = D.make_rng(seed + 0x5AF)
    n = len(train_w)
    bsz = min(spec.batch_size, n)

    best_val, best_bundle, best_it = math.inf, bundle.clone(), 0
    history: list[tuple[int, float, float]] = []
    loss = math.nan
    error = None
    try:
        for it in range(1, spec.max_iterations + 1):
            idx = rng.choice(n, size=bsz, replace=False)
            b = Batch(x_all[idx], y_all[idx], s_all[idx] if s_all is not None else None)
            if spec.baseline:
                loss = baseline_train_step(bundle, cfg, b, optimizer=opt)
            else:
                loss = train_step(bundle, cfg, b, optimizer=opt, backcast_optimizer=bopt)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at iteration {it}")
            if it % spec.eval_every == 0 or it == spec.max_iterations:
                val, _, _ = score(bundle, spec, prepared, prepared.splits.get("validation"))
                history.append((it, loss, val))
                if val < best_val:
                    best_val, best_bundle, best_it = val, bundle.clone(), it
    except (FloatingPointError, TensorError, ArithmeticError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        log.warning("seed %d diverged: %s", seed, error)

    test_reads = prepared.splits.count("test", "selection")
    if error is not None and best_it == 0:
        res = SeedResult(seed, math.nan, math.nan, 0, loss, True, error, history, test_reads)
        return TrainOutcome(best_bundle, res, prepared)
    prepared.splits.phase = "final"
    test, _, _ = score(best_bundle, spec, prepared, prepared.splits.get("test"))
    res = SeedResult(seed, best_val, test, best_it, loss, False, error, history, test_reads)
    return TrainOutcome(best_bundle, res, prepared)


@dataclass
class TrialResult:
    assignment: dict[str, Any]
    spec: dict[str, Any]
    val_metric: float
    test_metric: float
    per_seed: list[SeedResult]
    wall_clock: float
    failed: bool = False
    index: int = 0

    @property
    def median_test(self) -> float:
        ok = [r.test_metric for r in self.per_seed if not r.failed]
        return float(np.median(ok)) if ok else math.nan

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "index": self.index,
            "assignment": self.assignment,
            "spec": self.spec,
            "val_metric": self.val_metric,
            "test_metric": self.test_metric,
            "median_test_metric": self.median_test,
            "failed": self.failed,
            "per_seed": [r.to_dict() for r in self.per_seed],
        }
        if timing:
            d["wall_clock"] = self.wall_clock
        return d


def run_seed(spec: ExperimentSpec, seed: int) -> SeedResult:
    return train_model(spec, seed).result


def collect(spec: ExperimentSpec, results: list[SeedResult], wall: float,
            assignment: dict | None = None, index: int = 0) -> TrialResult:
    ok = [r for r in results if not r.failed]
    val = float(np.mean([r.val_metric for r in ok])) if ok else math.nan
    test = float(np.mean([r.test_metric for r in ok])) if ok else math.nan
    return TrialResult(dict(assignment or {}), spec.to_dict(), val, test, list(results), wall,
                       failed=not ok or len(ok) < len(results), index=index)


def run_trial(spec: ExperimentSpec, assignment: dict | None = None, index: int = 0) -> TrialResult:
    """Train every seed of ``spec``; metrics are means over seeds.

    A trial with any diverged seed is marked failed (and later excluded from
    ranking) but still reported.
    """
    start = time.perf_counter()
    results = [run_seed(spec, s) for s in spec.seeds]
    trial = collect(spec, results, time.perf_counter() - start, assignment, index)
    if spec.output_dir:
        from .report import write_trial
        write_trial(spec.output_dir, spec, trial)
    return trial
