"""Synthetic autoregressive benchmarks and panel time-series plumbing.

Random numbers come from numpy's Philox counter-based generator seeded
directly with the user seed, so generated series are reproducible across
runs and platforms.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

AR_VARIANTS = ("ar1", "ar2", "ar3", "ar4")
AR3_STATES = (0.9, -0.5)
AR3_STAY = 0.99995


class DataError(ValueError):
    pass


class SplitError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# -- synthetic processes ------------------------------------------------------

@dataclass(frozen=True)
class ArProcessSpec:
    variant: str
    duration: int
    seed: int = 0
    noise_std: float = 0.03
    initial: float = 0.0
    ar3_stay: float = AR3_STAY
    ar3_initial_state: float = AR3_STATES[0]
    ar1_window: tuple[int, int] = (1000, 2000)
    ar1_values: tuple[float, float] = (0.9, -0.9)
    ar2_scale: float = 1500.0
    ar4_coef: float = -0.5

    def __post_init__(self):
        if self.variant not in AR_VARIANTS:
            raise DataError(f"unknown AR variant {self.variant!r}; expected one of {AR_VARIANTS}")
        if self.duration < 2:
            raise DataError(f"duration ≥ 2 required, got {self.duration}")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")


def ar3_transition_prob(tau: int | np.ndarray, stay: float = AR3_STAY):
    """Probability of switching state after ``tau`` steps in the current one."""
    return -np.expm1(np.asarray(tau, dtype=np.float64) * math.log(stay))


def sample_ar3_moves(tau: int, trials: int, rng: np.random.Generator, stay: float = AR3_STAY) -> np.ndarray:
    """Boolean array: did a state switch happen, for ``trials`` draws at dwell ``tau``."""
    return rng.random(trials) < ar3_transition_prob(tau, stay)


def ar_coefficients(spec: ArProcessSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Coefficient path alpha[t] for t = 0..T-1 (alpha[0] is unused)."""
    t = np.arange(spec.duration, dtype=np.float64)
    if spec.variant == "ar1":
        lo, hi = spec.ar1_window
        outside, inside = spec.ar1_values
        return np.where((t >= lo) & (t <= hi), inside, outside)
    if spec.variant == "ar2":
        return 1.0 - t / spec.ar2_scale
    if spec.variant == "ar4":
        return np.full(spec.duration, spec.ar4_coef)
    if rng is None:
        raise DataError("AR3 coefficients need a random generator")
    states = AR3_STATES if spec.ar3_initial_state == AR3_STATES[0] else AR3_STATES[::-1]
    coef = np.empty(spec.duration)
    current, tau = 0, 0
    coef[0] = states[current]
    for i in range(1, spec.duration):
        if rng.random() < ar3_transition_prob(tau, spec.ar3_stay):
            current, tau = 1 - current, 0
        coef[i] = states[current]
        tau += 1
    return coef


def generate_ar(spec: ArProcessSpec) -> np.ndarray:
    """y[t] = alpha[t] * y[t-1] - eps_t with eps_t ~ N(0, noise_std^2), y[0] = initial."""
    rng = make_rng(spec.seed)
    coef = ar_coefficients(spec, rng)
    eps = rng.normal(0.0, 1.0, size=spec.duration) * spec.noise_std
    y = np.empty(spec.duration)
    y[0] = spec.initial
    for i in range(1, spec.duration):
        y[i] = coef[i] * y[i - 1] - eps[i]
    return y


# -- panel datasets -----------------------------------------------------------

@dataclass
class PanelDataset:
    """Per-entity time-indexed covariates plus static features.

    ``values[e]`` is (T_e, d_x) with column ``target`` the forecast target;
    ``times[e]`` holds strictly increasing integer step indices.
    """

    entities: list[str]
    times: list[np.ndarray]
    values: list[np.ndarray]
    feature_names: list[str]
    target: str
    static: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    static_names: list[str] = field(default_factory=list)
    frequency: str = "step"

    def __post_init__(self):
        n = len(self.entities)
        if len(self.times) != n or len(self.values) != n:
            raise DataError("entities, times and values must have equal length")
        if self.target not in self.feature_names:
            raise DataError(f"target {self.target!r} is not a feature")
        if self.static.size == 0:
            self.static = np.zeros((n, len(self.static_names)))
        if self.static.shape != (n, len(self.static_names)):
            raise DataError(f"static block must be ({n}, {len(self.static_names)})")
        for e, t, v in zip(self.entities, self.times, self.values):
            if v.ndim != 2 or v.shape[1] != len(self.feature_names) or len(t) != v.shape[0]:
                raise DataError(f"entity {e}: values shape {v.shape} does not match schema")
            if len(t) > 1 and np.any(np.diff(t) <= 0):
                raise DataError(f"entity {e}: timestamps not strictly increasing")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_static(self) -> int:
        return len(self.static_names)

    @property
    def target_index(self) -> int:
        return self.feature_names.index(self.target)

    def length(self) -> int:
        """Common series length; panels with ragged entities are rejected."""
        lengths = {v.shape[0] for v in self.values}
        if len(lengths) != 1:
            raise DataError(f"entities have different lengths: {sorted(lengths)}")
        return lengths.pop()


def ar_dataset(spec: ArProcessSpec) -> PanelDataset:
    y = generate_ar(spec)
    return PanelDataset(
        entities=[spec.variant],
        times=[np.arange(spec.duration)],
        values=[y[:, None]],
        feature_names=["y"],
        target="y",
    )


# -- splitting and windows ----------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    validation: int
    test: int

    def __post_init__(self):
        if self.validation <= 0 or self.test <= 0:
            raise SplitError("validation and test lengths must be positive")

    def boundaries(self, length: int) -> dict[str, tuple[int, int]]:
        train_end = length - self.validation - self.test
        if train_end <= 0:
            raise SplitError(
                f"validation ({self.validation}) + test ({self.test}) leave no training data in {length} steps")
        return {
            "train": (0, train_end),
            "validation": (train_end, train_end + self.validation),
            "test": (train_end + self.validation, length),
        }


@dataclass(frozen=True)
class PanelView:
    """Row range [start, stop) of every entity; inputs may reach back to ``context_start``."""

    dataset: PanelDataset
    name: str
    start: int
    stop: int
    context_start: int

    def __len__(self) -> int:
        return self.stop - self.start


def split(dataset: PanelDataset, spec: SplitSpec) -> dict[str, PanelView]:
    """Contiguous time-ordered train/validation/test views.

    Validation and test views may read input history from earlier splits;
    their targets stay inside the view.
    """
    bounds = spec.boundaries(dataset.length())
    return {
        name: PanelView(dataset, name, lo, hi, 0 if name != "train" else lo)
        for name, (lo, hi) in bounds.items()
    }


class WindowSample(NamedTuple):
    x: np.ndarray          # (m, d_x)
    static: np.ndarray     # (d_s,)
    y: np.ndarray          # (h,)
    entity: str
    anchor: int            # index of the last input row


def make_windows(view: PanelView, m: int, h: int, stride: int = 1) -> list[WindowSample]:
    """Every anchor t with inputs rows t-m+1..t and targets t+1..t+h.

    Targets lie inside [view.start, view.stop); inputs start no earlier than
    ``view.context_start``.
    """
    ds = view.dataset
    first = max(view.context_start + m - 1, view.start - 1)
    last = view.stop - h - 1
    if last < first:
        log.warning("view %s of length %d too short for m=%d, h=%d", view.name, len(view), m, h)
        return []
    tgt = ds.target_index
    out = []
    for ei, ent in enumerate(ds.entities):
        vals = ds.values[ei]
        for t in range(first, last + 1, stride):
            out.append(WindowSample(vals[t - m + 1:t + 1].copy(), ds.static[ei].copy(),
                                    vals[t + 1:t + h + 1, tgt].copy(), ent, t))
    return out


def stack_windows(samples: Sequence[WindowSample]):
    x = np.stack([s.x for s in samples])
    y = np.stack([s.y for s in samples])
    static = np.stack([s.static for s in samples]) if samples[0].static.size else None
    return x, y, static


# -- normalization ------------------------------------------------------------

@dataclass
class NormStats:
    mode: str
    mean: np.ndarray      # (d_x,) global or (E, d_x) per entity
    scale: np.ndarray
    static_mean: np.ndarray
    static_scale: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def _rows(self, ei: int):
        if self.mode == "per-entity":
            return self.mean[ei], self.scale[ei]
        return self.mean, self.scale

    def target(self, ei: int, index: int) -> tuple[float, float]:
        mu, sd = self._rows(ei)
        return float(mu[index]), float(sd[index])

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "static_mean": self.static_mean.tolist(), "static_scale": self.static_scale.tolist(),
                "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["mode"], np.asarray(d["mean"]), np.asarray(d["scale"]),
                   np.asarray(d["static_mean"]), np.asarray(d["static_scale"]), list(d.get("warnings", [])))


def _safe_scale(std: np.ndarray, names: Sequence[str], warnings: list[str], where: str) -> np.ndarray:
    std = np.array(std, dtype=np.float64)
    for idx in np.flatnonzero(std == 0):
        msg = f"zero variance in {names[idx % len(names)]!r}{where}; using unit scale"
        warnings.append(msg)
        log.warning(msg)
    std[std == 0] = 1.0
    return std


def fit_normalizer(train: PanelView, mode: str = "global") -> NormStats:
    """Z-score statistics (population std) from the training rows only."""
    if mode not in ("global", "per-entity"):
        raise DataError(f"unknown normalization mode {mode!r}")
    ds = train.dataset
    if train.stop <= train.start:
        raise DataError("training range is empty")
    rows = [v[train.start:train.stop] for v in ds.values]
    warnings: list[str] = []
    if mode == "global":
        pooled = np.concatenate(rows, axis=0)
        mean = pooled.mean(axis=0)
        scale = _safe_scale(pooled.std(axis=0), ds.feature_names, warnings, "")
    else:
        mean = np.stack([r.mean(axis=0) for r in rows])
        scale = np.stack([_safe_scale(r.std(axis=0), ds.feature_names, warnings, f" of entity {e}")
                          for r, e in zip(rows, ds.entities)])
    if ds.n_static:
        smean = ds.static.mean(axis=0)
        sscale = _safe_scale(ds.static.std(axis=0), ds.static_names, warnings, " (static)")
    else:
        smean = sscale = np.zeros(0)
    return NormStats(mode, mean, scale, smean, sscale, warnings)


def apply_normalizer(dataset: PanelDataset, stats: NormStats) -> PanelDataset:
    values = []
    for ei, v in enumerate(dataset.values):
        mu, sd = stats._rows(ei)
        values.append((v - mu) / sd)
    static = (dataset.static - stats.static_mean) / stats.static_scale if dataset.n_static else dataset.static
    return PanelDataset(list(dataset.entities), [t.copy() for t in dataset.times], values,
                        list(dataset.feature_names), dataset.target, static,
                        list(dataset.static_names), dataset.frequency)


def invert_normalizer(dataset: PanelDataset, stats: NormStats) -> PanelDataset:
    values = []
    for ei, v in enumerate(dataset.values):
        mu, sd = stats._rows(ei)
        values.append(v * sd + mu)
    static = dataset.static * stats.static_scale + stats.static_mean if dataset.n_static else dataset.static
    return PanelDataset(list(dataset.entities), [t.copy() for t in dataset.times], values,
                        list(dataset.feature_names), dataset.target, static,
                        list(dataset.static_names), dataset.frequency)


def normalize(dataset: PanelDataset, mode: str, train: PanelView) -> tuple[PanelDataset, NormStats]:
    stats = fit_normalizer(train, mode)
    return apply_normalizer(dataset, stats), stats


# -- CSV ----------------------------------------------------------------------

def _parse_float(text: str, path, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, line, f"column {column!r}: {text!r} is not a number") from None
    if not math.isfinite(value):
        raise ParseError(path, line, f"column {column!r}: non-finite value {text!r}")
    return value


def load_schema(path) -> dict:
    try:
        schema = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    if "target" not in schema:
        raise ParseError(path, None, "schema needs a 'target' entry")
    return schema


def load_csv(panel_path, static_path=None, schema: dict | str | Path | None = None,
             forward_fill: bool = False) -> PanelDataset:
    """Read a panel CSV (``entity_id,timestamp,<features...>``) and optional static CSV.

    Rows may come in any entity order; within an entity, timestamps must be
    strictly increasing in file order. Empty cells are rejected unless
    ``forward_fill`` is set, in which case the previous row's value of the same
    entity is used (a leading empty cell is still an error).
    """
    if schema is None:
        schema_path = Path(str(panel_path) + ".schema.json")
        schema = load_schema(schema_path)
    elif not isinstance(schema, dict):
        schema = load_schema(schema)
    panel_path = Path(panel_path)
    with panel_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(panel_path, 1, "empty file") from None
        if header[:2] != ["entity_id", "timestamp"] or len(header) < 3:
            raise ParseError(panel_path, 1, "header must start with entity_id,timestamp and name features")
        features = header[2:]
        if len(set(features)) != len(features):
            raise ParseError(panel_path, 1, "duplicate feature names")
        if "features" in schema and list(schema["features"]) != features:
            raise ParseError(panel_path, 1, f"features {features} differ from schema {schema['features']}")
        if schema["target"] not in features:
            raise ParseError(panel_path, 1, f"target {schema['target']!r} not among features")
        rows: dict[str, tuple[list[int], list[list[float]]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(panel_path, lineno, f"expected {len(header)} fields, got {len(row)}")
            ent = row[0]
            try:
                ts = int(row[1])
            except ValueError:
                raise ParseError(panel_path, lineno, f"timestamp {row[1]!r} is not an integer") from None
            times, vals = rows.setdefault(ent, ([], []))
            if times and ts <= times[-1]:
                raise ParseError(panel_path, lineno,
                                 f"timestamp {ts} of entity {ent!r} not after previous {times[-1]}")
            parsed = []
            for col, cell in zip(features, row[2:]):
                if cell.strip() == "":
                    if not forward_fill or not vals:
                        raise ParseError(panel_path, lineno, f"missing value in column {col!r}")
                    parsed.append(vals[-1][len(parsed)])
                else:
                    parsed.append(_parse_float(cell, panel_path, lineno, col))
            times.append(ts)
            vals.append(parsed)
    if not rows:
        raise ParseError(panel_path, None, "no data rows")
    entities = sorted(rows)

    static_names: list[str] = []
    static = np.zeros((len(entities), 0))
    if static_path is not None:
        static_path = Path(static_path)
        with static_path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                sheader = next(reader)
            except StopIteration:
                raise ParseError(static_path, 1, "empty file") from None
            if not sheader or sheader[0] != "entity_id":
                raise ParseError(static_path, 1, "header must start with entity_id")
            static_names = sheader[1:]
            found: dict[str, list[float]] = {}
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(sheader):
                    raise ParseError(static_path, lineno, f"expected {len(sheader)} fields, got {len(row)}")
                if row[0] not in rows:
                    raise ParseError(static_path, lineno, f"unknown entity {row[0]!r}")
                if row[0] in found:
                    raise ParseError(static_path, lineno, f"duplicate entity {row[0]!r}")
                found[row[0]] = [_parse_float(c, static_path, lineno, n) for n, c in zip(static_names, row[1:])]
            missing = [e for e in entities if e not in found]
            if missing:
                raise ParseError(static_path, None, f"no static row for entities {missing}")
            static = np.array([found[e] for e in entities], dtype=np.float64).reshape(len(entities), -1)

    return PanelDataset(
        entities=entities,
        times=[np.array(rows[e][0], dtype=np.int64) for e in entities],
        values=[np.array(rows[e][1], dtype=np.float64).reshape(-1, len(features)) for e in entities],
        feature_names=features,
        target=schema["target"],
        static=static,
        static_names=static_names,
        frequency=schema.get("frequency", "step"),
    )


def save_csv(dataset: PanelDataset, panel_path, static_path=None) -> dict:
    """Write the panel CSV, its ``.schema.json`` sidecar and optionally the static CSV.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    from .io import atomic_write_text

    lines = [",".join(["entity_id", "timestamp"] + dataset.feature_names)]
    for ent, times, vals in zip(dataset.entities, dataset.times, dataset.values):
        for t, row in zip(times, vals):
            lines.append(",".join([ent, str(int(t))] + [repr(float(v)) for v in row]))
    atomic_write_text(panel_path, "\n".join(lines) + "\n")
    schema = {"target": dataset.target, "features": dataset.feature_names, "frequency": dataset.frequency}
    if dataset.n_static:
        schema["static_features"] = dataset.static_names
    atomic_write_text(str(panel_path) + ".schema.json", json.dumps(schema, indent=2) + "\n")
    if static_path is not None:
        slines = [",".join(["entity_id"] + dataset.static_names)]
        for ent, row in zip(dataset.entities, dataset.static):
            slines.append(",".join([ent] + [repr(float(v)) for v in row]))
        atomic_write_text(static_path, "\n".join(slines) + "\n")
    return schema
