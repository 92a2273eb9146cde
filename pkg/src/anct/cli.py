"""Command-line entry point: ``anct <subcommand> ...``.

Exit status is 0 on success, 1 for usage or validation problems and 2 for
failures during compute. Settings resolve as flag, then ``--config`` JSON,
then built-in default, and the resolved settings are written as
``config.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .attributes import ATTRIBUTE_NAMES, ATTRIBUTES, RatingError, denormalize_score
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data.augment import make_folds
from .data.formats import FormatError, ManifestError, load_dataset, load_volume, save_stats, write_manifest
from .data.preprocess import DegenerateStatsError, normalize_intensity
from .data.synth import synth_generate
from .evaluation import (
    AnalyticsError,
    attention_report,
    collect_records,
    compare_reports,
    read_errors_csv,
    report_from_records,
    write_attn_json,
    write_errors_csv,
    write_eval_csv,
)
from .model import CHANNEL_PRESETS, ModelConfig, ValidationError
from .train import TrainConfig, TrainingError, run_xval, train_model

log = logging.getLogger("anct")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config resolution

_TRAIN_KEYS = ("epochs", "lr", "beta1", "beta2", "weight_decay", "epsilon", "seed", "augment")
_MODEL_ALIASES = {
    "lambda": "lam",
    "preset": "channel_preset",
    "attributes": "active_attributes",
    "sam": "enable_sam",
    "caam": "enable_caam",
    "ascmm": "enable_ascmm",
}
_MODEL_KEYS = {
    "enable_sam",
    "enable_caam",
    "enable_ascmm",
    "channel_preset",
    "attention_hidden",
    "head_hidden",
    "lam",
    "active_attributes",
}
_RUN_KEYS = ("data", "fold_test", "folds_seed")


def _read_config_file(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: top level must be an object")
    # A persisted run config (``config.json`` of a run directory) is accepted as-is.
    obj = {k: v for k, v in obj.items() if k != "command"}
    if "train" in obj:
        train = obj.pop("train")
        if not isinstance(train, dict):
            raise ValidationError(f"{path}: 'train' must be an object")
        obj.pop("folds", None)
        obj = {**train, **obj}
    flat = {k: v for k, v in obj.items() if k != "model"}
    nested = obj.get("model") or {}
    if not isinstance(nested, dict):
        raise ValidationError(f"{path}: 'model' must be an object")
    flat.update(nested)
    out = {}
    for k, v in flat.items():
        k = _MODEL_ALIASES.get(k, k)
        if k not in _MODEL_KEYS and k not in _TRAIN_KEYS and k not in _RUN_KEYS:
            raise ValidationError(f"{path}: unknown config key {k!r}")
        out[k] = v
    return out


def _flag_values(args) -> dict:
    out = {}
    for key in ("epochs", "lr", "seed", "data", "fold_test", "folds_seed"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "no_augment", False):
        out["augment"] = False
    if getattr(args, "lam", None) is not None:
        out["lam"] = args.lam
    if getattr(args, "preset", None) is not None:
        out["channel_preset"] = args.preset
    if getattr(args, "attributes", None) is not None:
        out["active_attributes"] = [a.strip() for a in args.attributes.split(",") if a.strip()]
    for flag, key in (("no_sam", "enable_sam"), ("no_caam", "enable_caam"), ("no_ascmm", "enable_ascmm")):
        if getattr(args, flag, False):
            out[key] = False
    return out


def resolve_run(args) -> tuple[TrainConfig, dict]:
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(_read_config_file(args.config))
    merged.update(_flag_values(args))
    # ASCMM sits on CAAM, so dropping CAAM drops ASCMM unless it was set explicitly.
    if merged.get("enable_caam") is False:
        merged.setdefault("enable_ascmm", False)
    model_cfg = ModelConfig(**{k: merged[k] for k in _MODEL_KEYS if k in merged})
    train_cfg = TrainConfig(**{k: merged[k] for k in _TRAIN_KEYS if k in merged}, model=model_cfg)
    run = {k: merged.get(k) for k in _RUN_KEYS}
    if run["folds_seed"] is None:
        run["folds_seed"] = 0
    if run["data"] is None:
        raise UsageError("the following arguments are required: --data")
    return train_cfg, run


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _select_split(samples, fold_test, folds_seed):
    """Return (train, test); ``test`` is every sample when no fold is held out."""
    if fold_test is None:
        return list(samples), list(samples)
    split = make_folds([s.id for s in samples], int(folds_seed))
    if not 0 <= int(fold_test) < split.fold_count:
        raise ValidationError(f"--fold-test must be in [0, {split.fold_count - 1}], got {fold_test}")
    test_ids = set(split.test_ids(int(fold_test)))
    return [s for s in samples if s.id not in test_ids], [s for s in samples if s.id in test_ids]


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.count < 1:
        raise ValidationError("--count must be >= 1")
    if args.raters < 1:
        raise ValidationError("--raters must be >= 1")
    out = _out_dir(args.out)
    samples = synth_generate(args.count, args.seed, rater_count=args.raters)
    path = write_manifest(samples, out)
    _write_json(out / "config.json", {"command": "synth", "count": args.count, "seed": args.seed, "raters": args.raters})
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, run = resolve_run(args)
    out = _out_dir(args.out)
    samples = load_dataset(run["data"])
    train_set, test_set = _select_split(samples, run["fold_test"], run["folds_seed"])
    config_obj = {"command": "train", "seed": cfg.seed, "train": cfg.to_dict(), **run}
    _write_json(out / "config.json", config_obj)

    t0 = time.perf_counter()
    report = train_model(
        train_set,
        cfg,
        on_epoch=lambda e, loss: log.info("epoch %d/%d loss %.6f", e + 1, cfg.epochs, loss),
    )
    extra = {"fold_test": run["fold_test"], "folds_seed": run["folds_seed"], "seed": cfg.seed}
    save_checkpoint(out / "model.ckpt", report.model, report.stats, extra)
    save_stats(report.stats, out / "stats.json")
    _write_json(out / "train_log.json", {"epoch_losses": report.epoch_losses})
    if run["fold_test"] is not None:
        rep = report_from_records(collect_records(report.model, test_set, report.stats), test_set)
        write_eval_csv(rep, out / "eval.csv")
        write_errors_csv(rep, out / "errors.csv")
        print(f"held-out mean MAE {rep.mean_mae:.4f} over {rep.count} nodules")
    print(f"trained {cfg.epochs} epochs on {len(train_set)} nodules in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_xval(args) -> int:
    if args.compare:
        return _xval_compare(args)
    cfg, run = resolve_run(args)
    out = _out_dir(args.out)
    samples = load_dataset(run["data"])
    folds = None
    if args.folds:
        try:
            folds = [int(f) for f in args.folds.split(",")]
        except ValueError:
            raise ValidationError(f"--folds must be comma-separated integers, got {args.folds!r}") from None
        if any(not 0 <= f < 5 for f in folds):
            raise ValidationError("--folds entries must lie in [0, 4]")
    _write_json(
        out / "config.json",
        {"command": "xval", "seed": cfg.seed, "train": cfg.to_dict(), "folds": folds, **run},
    )
    result = run_xval(samples, cfg, split_seed=int(run["folds_seed"]), folds=folds)
    for fr in result.folds:
        fdir = _out_dir(out / f"fold{fr.fold}")
        save_checkpoint(
            fdir / "model.ckpt",
            fr.report.model,
            fr.report.stats,
            {"fold_test": fr.fold, "folds_seed": run["folds_seed"], "seed": cfg.seed + fr.fold},
        )
        save_stats(fr.report.stats, fdir / "stats.json")
        write_eval_csv(fr.evaluation, fdir / "eval.csv")
        write_errors_csv(fr.evaluation, fdir / "errors.csv")
    pooled = report_from_records(
        [r for fr in result.folds for r in fr.evaluation.records],
        [s for fr in result.folds for s in _by_ids(samples, fr.test_ids)],
    )
    write_eval_csv(pooled, out / "eval.csv")
    write_errors_csv(pooled, out / "errors.csv")
    _write_json(
        out / "xval.json",
        {
            "fold_mean_mae": result.fold_mean_maes,
            "mean_mae": result.mean_mae,
            "per_attribute_mae": dict(zip(ATTRIBUTE_NAMES, map(float, result.per_attribute_mae))),
            "best_fold": result.folds[result.best_fold()].fold,
        },
    )
    print(f"pooled mean MAE {result.mean_mae:.4f}")
    return EXIT_OK


def _by_ids(samples, ids):
    index = {s.id: s for s in samples}
    return [index[i] for i in ids]


def _xval_compare(args) -> int:
    run_a, run_b = (Path(p) for p in args.compare)
    reports = []
    for run in (run_a, run_b):
        path = run / "errors.csv"
        if not path.exists():
            raise ValidationError(f"{run}: no errors.csv (train with --fold-test, or run xval)")
        reports.append(read_errors_csv(path))
    cmp = compare_reports(*reports)
    cmp["run_a"], cmp["run_b"] = str(run_a), str(run_b)
    out = _out_dir(args.out)
    _write_json(out / "comparison.json", cmp)
    lines = ["attribute,mae_a,mae_b,t,p,significant"]
    rows = [*ATTRIBUTE_NAMES, "mean"]
    for name in rows:
        test = cmp["overall"] if name == "mean" else cmp["per_attribute"][name]
        t, p = ("", "") if test is None else (f"{test['t']:.6f}", f"{test['p']:.6g}")
        star = "*" if test is not None and test["p"] < 0.05 else ""
        lines.append(f"{name},{cmp['mae_a'][name]:.6f},{cmp['mae_b'][name]:.6f},{t},{p},{star}")
    (out / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "config.json", {"command": "xval", "compare": [str(run_a), str(run_b)]})
    print("\n".join(lines))
    return EXIT_OK


def _load_eval_inputs(args):
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.stats is None:
        raise ValidationError(f"{args.ckpt}: checkpoint carries no intensity stats")
    samples = load_dataset(args.data)
    folds_seed = args.folds_seed if args.folds_seed is not None else ckpt.extra.get("folds_seed", 0)
    _, test = _select_split(samples, args.fold_test, folds_seed)
    out = _out_dir(args.out if args.out is not None else Path(args.ckpt).parent)
    run = {"ckpt": str(args.ckpt), "data": str(args.data), "fold_test": args.fold_test, "folds_seed": folds_seed}
    return ckpt, test, out, run


def cmd_eval(args) -> int:
    ckpt, test, out, run = _load_eval_inputs(args)
    records = collect_records(ckpt.model, test, ckpt.stats)
    rep = report_from_records(records, test)
    write_eval_csv(rep, out / "eval.csv")
    write_errors_csv(rep, out / "errors.csv")
    write_attn_json(attention_report(records, test, corr_axis=args.corr_axis), out / "attn.json")
    _write_json(out / "eval_config.json", {"command": "eval", **run})
    for name, v in rep.as_dict().items():
        print(f"{name},{v:.6f}")
    return EXIT_OK


def cmd_attn_export(args) -> int:
    ckpt, test, out, run = _load_eval_inputs(args)
    records = collect_records(ckpt.model, test, ckpt.stats)
    with open(out / "attn_records.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    write_attn_json(attention_report(records, test, corr_axis=args.corr_axis), out / "attn.json")
    _write_json(out / "attn_config.json", {"command": "attn-export", **run})
    print(out / "attn_records.jsonl")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.stats is None:
        raise ValidationError(f"{args.ckpt}: checkpoint carries no intensity stats")
    vol = load_volume(args.volume)
    pred = ckpt.model.predict(normalize_intensity(vol.slices, ckpt.stats))
    scores = {a.name: float(denormalize_score(v, a)) for a, v in zip(ATTRIBUTES, pred)}
    text = json.dumps(scores, indent=2)
    if args.out:
        out = _out_dir(args.out)
        (out / "predict.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_model_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--data", help="dataset manifest (manifest.jsonl)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the auxiliary loss")
    p.add_argument("--attributes", help="comma-separated attributes to train on")
    p.add_argument("--preset", choices=sorted(CHANNEL_PRESETS))
    p.add_argument("--no-sam", action="store_true")
    p.add_argument("--no-caam", action="store_true")
    p.add_argument("--no-ascmm", action="store_true")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--fold-test", type=int, help="hold out this fold (0-4)")
    p.add_argument("--folds-seed", type=int, help="seed of the 5-fold split (default 0)")


def _add_eval_flags(p):
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold-test", type=int)
    p.add_argument("--folds-seed", type=int, help="defaults to the split recorded in the checkpoint")
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")
    p.add_argument("--corr-axis", choices=("rows", "columns"), default="rows")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anct", description="Multi-attribute nodule scoring experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raters", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on one split")
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("xval", help="5-fold cross-validation, or --compare two runs")
    _add_model_flags(p)
    p.add_argument("--folds", help="comma-separated subset of folds to run")
    p.add_argument("--compare", nargs=2, metavar=("RUN_A", "RUN_B"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one NVL1 volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attn-export", help="dump attention records")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_attn_export)
    return parser


_INVALID = (
    UsageError,
    ValidationError,
    RatingError,
    ManifestError,
    FormatError,
    CheckpointError,
    DegenerateStatsError,
    FileNotFoundError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("anct: a subcommand is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, AnalyticsError, Exception) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
