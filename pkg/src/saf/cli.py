"""Command-line entry point: ``saf <subcommand> ...``.

Every failure prints one line starting with ``error:`` to stderr and exits
with status 2. Warnings are single lines starting with ``warning:``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import data as D
from .harness import report as R
from .harness.experiment import ExperimentSpec, SpecError, collect, prepare, score, train_model
from .harness.search import ABLATION_LABELS, GRID_CAP, RANDOM_TRIALS, ablation_battery, derive_seeds, grid_search
from .io import atomic_write_json, atomic_write_text
from .model import ModelBundle
from .params import load_parameters

SAF_ONLY_FIELDS = ("alpha", "adapt_steps", "use_error_signal", "masked_only_loss", "mask",
                   "backcast_optimizer", "ablation")
# Relative paths in a config file are resolved against the file's directory.
PATH_FIELDS = ("panel_csv", "static_csv", "schema")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Config JSON (an object of ExperimentSpec fields) with ``key=value``
    overrides applied on top; values are parsed as JSON when possible."""
    cfg: dict = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise CliError(f"{path}: config must be a JSON object")
        base = Path(path).resolve().parent
        for key in PATH_FIELDS:
            if isinstance(cfg.get(key), str) and not Path(cfg[key]).is_absolute():
                cfg[key] = str(base / cfg[key])
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"override {item!r} is not of the form key=value")
        cfg[key] = _parse_value(value)
    return cfg


def build_spec(cfg: dict, baseline: bool = False, ablation: str | None = None,
               master_seed: int | None = None) -> ExperimentSpec:
    cfg = dict(cfg)
    if baseline:
        cfg["baseline"] = True
    if cfg.get("baseline"):
        for key in SAF_ONLY_FIELDS:
            if key in cfg:
                _warn(f"unused key {key!r} in a baseline run")
                cfg.pop(key)
    if ablation is not None:
        cfg["ablation"] = ablation
    if master_seed is not None:
        cfg["seeds"] = derive_seeds(master_seed, len(cfg.get("seeds", [0])))
    try:
        return ExperimentSpec.from_dict(cfg)
    except TypeError as exc:
        raise CliError(f"invalid config: {exc}") from None


def bundle_path(out: Path, spec: ExperimentSpec, seed: int) -> Path:
    return out / f"{spec.dataset_label}_{spec.variant}_{seed}.safp"


# -- subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = D.ArProcessSpec(args.dataset, args.duration, seed=args.seed)
    D.save_csv(D.ar_dataset(spec), args.out)
    print(json.dumps({"path": str(args.out), "rows": args.duration}))
    return 0


def cmd_train(args) -> int:
    spec = build_spec(load_config(args.config, args.overrides), args.baseline, args.ablation, args.master_seed)
    out = Path(args.out)
    start = time.perf_counter()
    results = []
    for seed in spec.seeds:
        outcome = train_model(spec, seed)
        results.append(outcome.result)
        outcome.bundle.save(bundle_path(out, spec, seed), extra={"spec": spec.to_dict()})
    trial = collect(spec, results, time.perf_counter() - start)
    path = R.write_trial(out, spec, trial, timing=args.timing)
    if all(r.failed for r in results):
        raise CliError(f"every seed diverged; diagnostics in {path}")
    print(json.dumps({"result": str(path), "val_metric": trial.val_metric, "test_metric": trial.test_metric,
                      "failed": trial.failed}))
    return 0


def cmd_evaluate(args) -> int:
    path = Path(args.bundle)
    if not path.is_file():
        raise CliError(f"bundle not found: {path}")
    bundle = ModelBundle.load(path)
    _, meta = load_parameters(path)
    if "spec" not in meta:
        raise CliError(f"{path}: bundle carries no experiment settings")
    spec = ExperimentSpec.from_dict(meta["spec"])
    raw = None
    if args.data is not None:
        raw = D.load_csv(args.data, args.static, args.schema)
    elif spec.dataset != "csv":
        raw = D.ar_dataset(D.ArProcessSpec(spec.dataset, spec.duration, seed=meta["seed"]))
    prepared = prepare(spec, meta["seed"], raw)
    prepared.splits.phase = "final"
    value, _, _ = score(bundle, spec, prepared, prepared.splits.get(args.split))
    payload = {spec.metric: value, "split": args.split, "bundle": str(path), "variant": spec.variant}
    if args.out:
        atomic_write_json(args.out, payload)
    print(json.dumps(payload))
    return 0


def cmd_hpo(args) -> int:
    spec = build_spec(load_config(args.config, args.overrides), args.baseline, None, args.master_seed)
    try:
        space = json.loads(Path(args.space).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"space file not found: {args.space}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{args.space}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(space, dict) or not all(isinstance(v, list) for v in space.values()):
        raise CliError("space must map hyperparameter names to candidate lists")
    known = set(ExperimentSpec.__dataclass_fields__)
    for key in space:
        if key not in known:
            raise CliError(f"unknown config key {key!r} in space")
    cap, sample = (GRID_CAP, RANDOM_TRIALS) if args.trials is None else (args.trials, args.trials)
    seed = args.master_seed or 0
    res = grid_search(space, spec.replace(output_dir=args.out), seed, cap=cap, sample=sample)
    summary = {
        "ranked": [t.index for t in res.ranked],
        "failed": [t.index for t in res.failed],
        "trials": [t.to_dict(timing=False) for t in res.trials],
    }
    atomic_write_json(Path(args.out) / f"{spec.dataset_label}_{spec.variant}_hpo.json", R.json_safe(summary))
    best = res.best
    print(json.dumps({"trials": len(res.trials), "failed": len(res.failed),
                      "best": None if best is None else {"index": best.index, "assignment": best.assignment,
                                                         "val_metric": best.val_metric,
                                                         "test_metric": best.test_metric}}))
    return 0


def cmd_ablate(args) -> int:
    spec = build_spec(load_config(args.config, args.overrides), False, None, args.master_seed)
    if spec.baseline:
        raise CliError("ablations apply to SAF runs only")
    rows = ablation_battery(spec.replace(output_dir=args.out))
    sys.stdout.write(R.ablation_table(rows))
    return 0


def cmd_report(args) -> int:
    rep = R.summarize_directory(args.sweep)
    text = R.table_csv(rep)
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saf", description="Self-adaptive forecasting experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic AR panel CSV")
    g.add_argument("--dataset", required=True, choices=D.AR_VARIANTS)
    g.add_argument("--duration", required=True, type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def common(sp, baseline=True):
        sp.add_argument("--config", help="JSON object of experiment settings")
        sp.add_argument("--master-seed", type=int, default=None,
                        help="derive the per-trial seeds from this number")
        sp.add_argument("--out", default="runs", help="output directory")
        if baseline:
            sp.add_argument("--baseline", action="store_true", help="train the model without SAF")
        sp.add_argument("overrides", nargs="*", metavar="key=value")

    t = sub.add_parser("train", help="train one configuration over its seeds")
    common(t)
    t.add_argument("--ablation", choices=[k for k in ABLATION_LABELS if k])
    t.add_argument("--no-timing", dest="timing", action="store_false",
                   help="omit wall-clock time from the result file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a saved bundle on one split")
    e.add_argument("--bundle", required=True)
    e.add_argument("--data", help="panel CSV; defaults to the bundle's training data")
    e.add_argument("--static", help="static-feature CSV")
    e.add_argument("--schema", help="schema JSON; defaults to <data>.schema.json")
    e.add_argument("--split", default="test", choices=("train", "validation", "test"))
    e.add_argument("--out", help="write the metric JSON here as well")
    e.set_defaults(func=cmd_evaluate)

    h = sub.add_parser("hpo", help="grid or random search over a hyperparameter space")
    common(h)
    h.add_argument("--space", required=True, help="JSON object mapping names to candidate lists")
    h.add_argument("--trials", type=int, default=None,
                   help="random-subset size; spaces up to this size are swept exhaustively")
    h.set_defaults(func=cmd_hpo)

    a = sub.add_parser("ablate", help="full SAF and its three ablations")
    common(a, baseline=False)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="duration table from a sweep directory")
    r.add_argument("--sweep", required=True)
    r.add_argument("--out", help="CSV path")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "trials", None) is not None and args.trials <= 0:
            raise CliError("--trials must be positive")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, SpecError, D.DataError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
