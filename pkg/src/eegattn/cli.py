"""``eegattn`` command line: synth, preprocess, train, eval, stats, gradcheck, describe.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, dsp, gradcheck, layers, stats, training
from .dataio import SynthSpec
from .layers import ModelConfig
from .training import NumericError, TrainConfig

log = logging.getLogger("eegattn")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SEED_ENV = "EEGATTN_SEED"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --- run configuration ----------------------------------------------------

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": SynthSpec,
    "dsp": dsp.PreprocessConfig,
}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def load_config(path) -> dict:
    """Read a JSON run config: ``{"model": {...}, "train": {...}, "synth": {...}, "dsp": {...}}``."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, values in doc.items():
        bad = set(values) - _field_names(SECTIONS[section])
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
    return doc


def resolve(cls, file_values: dict, overrides: dict):
    """File values, then non-None flag overrides (flags win)."""
    values = dict(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if cls is dsp.PreprocessConfig and "channels" in values:
        values["channels"] = tuple(values["channels"])
    try:
        obj = cls(**values)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc
    return obj


def resolve_seed(flag):
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc


def write_json(doc: dict, path) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _read_trials(path) -> dataio.TrialSet:
    try:
        return dataio.read_trialset(path)
    except (OSError, dataio.FormatError) as exc:
        raise DataError(str(exc)) from exc


def _model_config_for(trials: dataio.TrialSet, file_values: dict, overrides: dict) -> ModelConfig:
    base = {"n_channels": trials.n_channels, "n_samples": trials.n_samples,
            "sampling_rate": trials.sampling_rate, "n_classes": trials.n_classes}
    base.update(file_values)
    return resolve(ModelConfig, base, overrides)


# --- commands -------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed)
    spec = resolve(SynthSpec, cfg.get("synth", {}), {
        "n_classes": args.classes, "trials_per_class": args.trials_per_class,
        "n_channels": args.channels, "n_samples": args.samples, "fs": args.fs,
        "snr_db": args.snr_db, "seed": seed,
    })
    if args.raw:
        rec = dataio.generate_synthetic_recording(spec, n_trials=args.n_markers,
                                                  duration_s=args.duration_s, fs=args.raw_fs)
        dataio.write_recording(rec, args.out)
        print(f"wrote {args.out}: {rec.data.shape[0]} channels x {rec.data.shape[1]} samples "
              f"@ {rec.sampling_rate:g} Hz, {len(rec.markers)} markers")
        return 0
    trials = dataio.generate_synthetic(spec)
    dataio.write_trialset(trials, args.out)
    s = trials.summary()
    print(f"wrote {args.out}: {s['n_trials']} trials x {s['n_channels']} channels x "
          f"{s['n_samples']} samples @ {s['sampling_rate']:g} Hz, {s['n_classes']} classes, "
          f"snr {spec.snr_db:g} dB, seed {spec.seed}")
    print(f"class counts: {s['class_counts']}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    overrides = {"target_fs": args.target_fs, "filter_order": args.order, "low_hz": args.low_hz,
                 "high_hz": args.high_hz, "pre_s": args.pre_s, "dur_s": args.dur_s,
                 "channels": tuple(args.channels) if args.channels else None,
                 "n_classes": args.classes}
    if args.no_filter:
        overrides["apply_filter"] = False
    pcfg = resolve(dsp.PreprocessConfig, cfg.get("dsp", {}), overrides)
    try:
        rec = dataio.read_recording(args.input)
    except (OSError, dataio.FormatError) as exc:
        raise DataError(str(exc)) from exc
    try:
        result, stages = dsp.preprocess(rec, pcfg)
    except KeyError as exc:
        raise DataError(exc.args[0]) from exc
    except (dsp.SignalTooShortError, dsp.FilterDesignError) as exc:
        raise DataError(str(exc)) from exc
    for name, shape in stages:
        print(f"{name:>10s}: {' x '.join(map(str, shape))}")
    for r in result.rejected:
        print(f"rejected trial {r.marker} (sample {r.sample}, label {r.label}): {r.reason}")
    print(f"{result.trials.n_trials} trials kept, {len(result.rejected)} rejected")
    dataio.write_trialset(result.trials, args.out)
    return 0


def _train_overrides(args, seed):
    return {"epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
            "folds": args.folds, "seed": seed, "weight_decay": args.weight_decay}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed)
    tcfg = resolve(TrainConfig, cfg.get("train", {}), _train_overrides(args, seed))
    datasets = [(p, _read_trials(p)) for p in args.data]
    model_overrides = {"use_positional_embeddings": False if args.no_pos else None}
    mcfg = _model_config_for(datasets[0][1], cfg.get("model", {}), model_overrides)
    subjects, timings = [], []
    for path, trials in datasets:
        try:
            result = training.cross_validate(trials, mcfg, tcfg, parallel_folds=args.parallel_folds)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        name = Path(path).stem
        subjects.append({
            "name": name,
            "data": str(path),
            "dataset": trials.summary(),
            "folds": [f.to_dict() for f in result.folds],
            "summary": result.summary(),
        })
        timings.append({"name": name, "fold_seconds": result.fold_seconds})
        print(f"{name}: mean accuracy {result.mean:.4f} +/- {result.std:.4f} "
              f"(chance {result.chance:.4f})")
        if args.confusion_csv:
            out_dir = Path(args.confusion_csv)
            out_dir.mkdir(parents=True, exist_ok=True)
            for f in result.folds:
                np.savetxt(out_dir / f"{name}_fold{f.fold_index}.csv", f.confusion, fmt="%d", delimiter=",")
        if args.weights_dir:
            out_dir = Path(args.weights_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            for fold, params in enumerate(result.fold_params):
                layers.save_params(params, out_dir / f"{name}_fold{fold}.eatw")
    means = [s["summary"]["mean_accuracy"] for s in subjects]
    doc = {
        "kind": "eegattn.cv_results",
        "version": 1,
        "config": {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
        "subjects": subjects,
        "summary": {"mean_accuracy": float(np.mean(means)),
                    "std_accuracy": float(np.std(means, ddof=1)) if len(means) > 1 else 0.0,
                    "chance": 1.0 / mcfg.n_classes, "n_subjects": len(subjects)},
    }
    write_json(doc, args.out)
    if args.out and args.out != "-":
        # wall-clock numbers live beside the results so the results stay reproducible
        write_json({"subjects": timings}, str(args.out) + ".timings.json")
    return 0


def cmd_eval(args) -> int:
    try:
        params = layers.load_params(args.weights)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    trials = _read_trials(args.data)
    try:
        report = training.evaluate(params, trials)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    doc = {"kind": "eegattn.eval", "version": 1, "weights": str(args.weights), "data": str(args.data),
           "config": {"model": params.config.to_dict()}, "accuracy": report.test_accuracy,
           "confusion": report.confusion.tolist(), "chance": 1.0 / params.config.n_classes}
    write_json(doc, args.out)
    print(f"accuracy {report.test_accuracy:.4f} on {trials.n_trials} trials")
    return 0


def cmd_stats(args) -> int:
    docs = []
    for path in (args.a, args.b):
        try:
            docs.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read results {path}: {exc}") from exc
    seed = resolve_seed(args.seed) or 0
    try:
        result = stats.compare_conditions(docs[0], docs[1], level=args.level, n_perm=args.n_perm, seed=seed,
                                          labels=(Path(args.a).stem, Path(args.b).stem))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    result["inputs"] = [str(args.a), str(args.b)]
    result["seed"] = seed
    print(stats.format_comparison(result))
    if args.out:
        write_json(result, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    doc, elapsed = gradcheck.suite_document(range(args.seeds), args.tol, args.eps)
    for op in doc["ops"]:
        mark = "ok  " if op["passed"] else "FAIL"
        print(f"{mark} {op['op']:32s} max_rel_error={op['max_rel_error']:.3e}")
    print(f"{'passed' if doc['passed'] else 'FAILED'} in {elapsed:.1f} s ({len(doc['seeds'])} seeds, tol {args.tol:g})")
    if args.out:
        write_json(doc, args.out)
    return 0 if doc["passed"] else EXIT_NUMERIC


def cmd_describe(args) -> int:
    cfg = load_config(args.config)
    mcfg = resolve(ModelConfig, cfg.get("model", {}), {
        "n_channels": args.channels, "n_samples": args.samples, "n_classes": args.classes,
        "sampling_rate": args.fs})
    desc = layers.describe(mcfg)
    if args.json:
        write_json({"config": mcfg.to_dict(), **desc}, "-")
        return 0
    for stage in desc["stages"]:
        print(f"{stage['name']:>16s}  [{', '.join(map(str, stage['shape']))}]")
    print(f"trainable parameters: {desc['n_parameters']}")
    print(f"buffers: {desc['n_buffers']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic trial set (or raw recording)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--trials-per-class", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--fs", type=float)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--raw", action="store_true", help="write a continuous EEGR recording instead")
    p.add_argument("--raw-fs", type=float, default=1000.0)
    p.add_argument("--duration-s", type=float, default=120.0)
    p.add_argument("--n-markers", type=int, default=50)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="raw recording -> epoched trial set")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--target-fs", type=float)
    p.add_argument("--order", type=int)
    p.add_argument("--low-hz", type=float)
    p.add_argument("--high-hz", type=float)
    p.add_argument("--pre-s", type=float)
    p.add_argument("--dur-s", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--channels", nargs="+")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="stratified k-fold cross-validation")
    p.add_argument("--data", nargs="+", required=True, help="one EEGT file per subject")
    p.add_argument("--out", default="-")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--no-pos", action="store_true", help="disable positional embeddings")
    p.add_argument("--parallel-folds", type=int, default=1)
    p.add_argument("--weights-dir")
    p.add_argument("--confusion-csv", help="directory for per-fold confusion matrices")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved model on a trial set")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="compare two results documents")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out")
    p.add_argument("--level", choices=("auto", "subject", "fold"), default="auto")
    p.add_argument("--n-perm", type=int, default=10_000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and layer")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("describe", help="parameter count and layer shapes")
    p.add_argument("--config")
    p.add_argument("--channels", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--fs", type=float)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
