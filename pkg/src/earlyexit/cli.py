"""Command-line surface: datasets, training runs, calibration, reports.

Resolution order for every setting: built-in default, then the --config JSON
file, then explicit flags. The resolved configuration is printed on stdout as
one canonical JSON line and echoed into every artifact the run writes (JSON
artifacts embed it; CSV and text artifacts carry it as a leading "# config:"
comment line).

Exit codes: 0 success, 1 for validation and usage errors, 2 for I/O and
format errors. All randomness descends from --seed (default 42), so identical
argv over identical files reproduce outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import dataset_store
from .branch_heads import head_flops
from .calibration import DISABLED
from .dataset_store import (
    FormatError,
    SYNTH_SPECS,
    ValidationError,
    load_dataset,
    synth_generate,
    verify_dataset,
    write_dataset,
)
from .inference import (
    curve_csv,
    evaluate,
    report_csv,
    report_text,
    selective_infer,
    sweep_curve,
    trace_csv,
    Sample,
)
from .pipeline import (
    ModelBundle,
    PipelineConfig,
    load_bundle,
    recalibrate,
    run_pipeline,
    save_bundle,
)
from .tensor_core import ShapeError
from .trainer import TrainConfig, TrainingError

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
DEFAULT_MARGINS = (-0.02, 0.0, 0.02, 0.05)


class _UsageError(Exception):
    pass


class _MissingFlag(ValidationError):
    """Required setting absent from flags and config file alike."""

    def __init__(self, command: str, message: str):
        super().__init__(message)
        self.command = command


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here is exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


# Built-in defaults per subcommand. argparse runs with SUPPRESS defaults, so
# the namespace holds only flags the user actually typed; merging is then
# defaults <- config file <- explicit flags, later wins.
_DEFAULTS = {
    "synth-data": {"spec": "tiny", "seed": 42, "out": None},
    "train": {"data": None, "out": None, "k": 32, "levels": None,
              "margin": 0.0, "mode": "absolute", "boosted": True,
              "epochs": 200, "batch": 128, "lr": 0.01, "allow_tiny": False,
              "grad_clip": 5.0, "optimizer": "momentum", "momentum": 0.9,
              "seed": 42},
    "calibrate": {"bundle": None, "data": None, "margin": None, "out": None},
    "infer": {"bundle": None, "data": None, "split": "test", "out": None},
    "evaluate": {"bundle": None, "data": None, "split": "test",
                 "format": "text", "out": None, "trace": None},
    "sweep": {"data": None, "out": None, "k": 32, "levels": None,
              "margins": list(DEFAULT_MARGINS), "mode": "absolute",
              "boosted": None, "epochs": 200, "batch": 128, "lr": 0.01,
              "allow_tiny": False, "grad_clip": 5.0, "optimizer": "momentum",
              "momentum": 0.9, "seed": 42},
    "flops-report": {"data": None, "k": 32, "levels": None, "out": None},
    "verify-dataset": {"path": None},
}


def _add_train_flags(p):
    p.add_argument("--k", help="branch width K; a comma list sets one K per branch")
    p.add_argument("--levels", type=int, help="use only the first N branch levels")
    p.add_argument("--mode", choices=("absolute", "distillation"),
                   help="training target: ground truth or backbone argmax")
    p.add_argument("--epochs", type=int, help="training epochs per head")
    p.add_argument("--batch", type=int, help="minibatch size")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--allow-tiny", action="store_true", dest="allow_tiny",
                   help="train full-batch on views smaller than 2*batch")
    p.add_argument("--seed", type=int, help="root seed for all randomness")
    boost = p.add_mutually_exclusive_group()
    boost.add_argument("--boosted", action="store_true", dest="boosted",
                       help="filter downstream branches through upstream exits")
    boost.add_argument("--no-boosted", action="store_false", dest="boosted",
                       help="train every branch on the full splits")


def build_parser() -> _Parser:
    parser = _Parser(prog="earlyexit",
                     description="Train, calibrate, and run early-exit "
                                 "branches over stored feature maps.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                parser_class=_Parser)

    p = sub.add_parser("synth-data",
                       help="generate a synthetic dataset triplet")
    p.add_argument("--spec", choices=sorted(SYNTH_SPECS),
                   help="named synthetic recipe")
    p.add_argument("--seed", type=int, help="generation seed")
    p.add_argument("--out", help="output root; writes train/ validation/ test/")
    p.add_argument("--config", help="JSON config file; flags override it")

    p = sub.add_parser("train",
                       help="train and calibrate a branch bundle")
    p.add_argument("--data", help="dataset root with train/ and validation/")
    p.add_argument("--out", help="bundle output directory")
    p.add_argument("--margin", type=float,
                   help="class precision margin for calibration")
    p.add_argument("--config", help="JSON config file; flags override it")
    _add_train_flags(p)

    p = sub.add_parser("calibrate",
                       help="re-pick thresholds of a non-boosted bundle")
    p.add_argument("--bundle", help="existing bundle directory")
    p.add_argument("--data", help="dataset root providing the validation split")
    p.add_argument("--margin", type=float, help="new class precision margin")
    p.add_argument("--out", help="output bundle directory (default: in place)")
    p.add_argument("--config", help="JSON config file; flags override it")

    p = sub.add_parser("infer",
                       help="run selective inference, optionally dumping a trace")
    p.add_argument("--bundle", help="bundle directory")
    p.add_argument("--data", help="dataset root or a single split directory")
    p.add_argument("--split", choices=SPLITS, help="which split to run")
    p.add_argument("--out", help="per-sample exit trace CSV path")
    p.add_argument("--config", help="JSON config file; flags override it")

    p = sub.add_parser("evaluate",
                       help="accuracy, cost, and exit metrics on a split")
    p.add_argument("--bundle", help="bundle directory")
    p.add_argument("--data", help="dataset root or a single split directory")
    p.add_argument("--split", choices=SPLITS, help="which split to evaluate")
    p.add_argument("--format", choices=("csv", "text"), help="report format")
    p.add_argument("--out", help="report output path (default: stdout only)")
    p.add_argument("--trace", help="also dump the per-sample exit trace here")
    p.add_argument("--config", help="JSON config file; flags override it")

    p = sub.add_parser("sweep",
                       help="accuracy-compute curve over a margin grid")
    p.add_argument("--data", help="dataset root with all three splits")
    p.add_argument("--out", help="curve CSV path (default: stdout)")
    p.add_argument("--margins",
                   help="comma list of precision margins (use --margins=-0.02,0 "
                        "for values starting with a dash)")
    p.add_argument("--config", help="JSON config file; flags override it")
    _add_train_flags(p)

    p = sub.add_parser("flops-report",
                       help="closed-form cost table for a dataset and K")
    p.add_argument("--data", help="dataset root or a single split directory")
    p.add_argument("--k", help="branch width K; a comma list sets one K per branch")
    p.add_argument("--levels", type=int, help="use only the first N branch levels")
    p.add_argument("--out", help="CSV output path (default: stdout text)")
    p.add_argument("--config", help="JSON config file; flags override it")

    p = sub.add_parser("verify-dataset",
                       help="validate dataset files, magics, and sizes")
    p.add_argument("path", nargs="?", help="dataset root or single split directory")
    p.add_argument("--config", help="JSON config file; flags override it")

    for sp in sub.choices.values():
        for action in sp._actions:
            if action.dest != "help" and action.default != argparse.SUPPRESS:
                action.default = argparse.SUPPRESS
    parser.sub_parsers = dict(sub.choices)
    return parser


def _merge_config(command: str, args: argparse.Namespace) -> dict:
    merged = dict(_DEFAULTS[command])
    given = {k: v for k, v in vars(args).items()
             if k not in ("command", "config")}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                from_file = json.load(fh)
        except OSError as exc:
            raise FormatError(f"cannot read config file {config_path}: {exc}")
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(from_file, dict):
            raise ValidationError(f"config file {config_path} must hold a JSON object")
        for key, value in from_file.items():
            norm = key.replace("-", "_")
            if norm not in merged:
                raise ValidationError(
                    f"config file {config_path}: unknown key {key!r} "
                    f"for command {command}")
            merged[norm] = value
    merged.update(given)
    merged["command"] = command
    return merged


def _echo(merged: dict) -> str:
    return json.dumps(merged, sort_keys=True)


def _config_comment(merged: dict) -> str:
    return "# config: " + _echo(merged) + "\n"


def _require(merged: dict, *keys):
    for key in keys:
        if merged[key] is None:
            command = merged["command"]
            flag = "--" + key.replace("_", "-") if key != "path" else "a path"
            raise _MissingFlag(command, f"{command}: {flag} is required")


def _parse_k(value):
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    if isinstance(value, int):
        return value
    parts = str(value).split(",")
    if len(parts) == 1:
        return int(parts[0])
    return [int(p) for p in parts]


def _parse_k_grid(value) -> list:
    """sweep semantics: a comma list is a grid of uniform widths, one cell each."""
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    if isinstance(value, int):
        return [value]
    return [int(p) for p in str(value).split(",")]


def _parse_margins(value) -> list:
    if isinstance(value, (list, tuple)):
        out = [float(v) for v in value]
    else:
        out = [float(p) for p in str(value).split(",")]
    if not out:
        raise ValidationError("at least one margin is required")
    return out


def _train_config(merged: dict) -> TrainConfig:
    grad_clip = merged["grad_clip"]
    return TrainConfig(
        epochs=int(merged["epochs"]), batch_size=int(merged["batch"]),
        lr=float(merged["lr"]), optimizer=str(merged["optimizer"]),
        momentum=float(merged["momentum"]),
        label_mode=str(merged["mode"]),
        allow_tiny=bool(merged["allow_tiny"]),
        grad_clip=None if grad_clip is None else float(grad_clip))


def _split_dir(data: str, split: str) -> str:
    if os.path.exists(os.path.join(data, "manifest.json")):
        return data  # --data points at one split directly
    return os.path.join(data, split)


def _load_split(data: str, split: str):
    return load_dataset(_split_dir(data, split))


def _bundle_summary(bundle: ModelBundle) -> str:
    lines = []
    for rec in bundle.branches:
        if rec.trained:
            enabled = sum(1 for t in rec.thresholds if t is not DISABLED)
            acc = rec.class_report.final_accuracy if rec.class_report else float("nan")
            lines.append(
                f"branch {rec.level}: K={rec.k} train_acc={acc:.4f} "
                f"enabled_classes={enabled}/{len(rec.thresholds)}")
        else:
            lines.append(f"branch {rec.level}: not trained (guard), all disabled")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_synth_data(merged: dict) -> int:
    _require(merged, "out")
    spec = SYNTH_SPECS[merged["spec"]]
    train, val, test = synth_generate(spec, seed=int(merged["seed"]))
    for name, ds in (("train", train), ("validation", val), ("test", test)):
        ds.provenance = dict(ds.provenance)
        ds.provenance["cli_config"] = {k: merged[k] for k in sorted(merged)}
        write_dataset(ds, os.path.join(merged["out"], name))
        print(f"wrote {name}: {ds.num_samples} samples, "
              f"{len(ds.levels)} levels, {ds.num_classes} classes")
    return 0


def _cmd_train(merged: dict) -> int:
    _require(merged, "data", "out")
    train_ds = _load_split(merged["data"], "train")
    val_ds = _load_split(merged["data"], "validation")
    cfg = PipelineConfig(
        k=_parse_k(merged["k"]), margin=float(merged["margin"]),
        label_mode=str(merged["mode"]), boosted=bool(merged["boosted"]),
        seed=int(merged["seed"]), train=_train_config(merged),
        max_levels=merged["levels"],
        extra_config={"cli": {k: merged[k] for k in sorted(merged)}})
    bundle = run_pipeline(cfg, train_ds, val_ds)
    save_bundle(bundle, merged["out"])
    print(_bundle_summary(bundle))
    print(f"saved bundle to {merged['out']}")
    return 0


def _cmd_calibrate(merged: dict) -> int:
    _require(merged, "bundle", "data", "margin")
    bundle = load_bundle(merged["bundle"])
    val_ds = _load_split(merged["data"], "validation")
    cfg = PipelineConfig(
        k=[rec.k for rec in bundle.branches] or 1,
        margin=float(merged["margin"]), label_mode=bundle.label_mode,
        boosted=False,
        extra_config={"cli": {k: merged[k] for k in sorted(merged)}})
    out = merged["out"] if merged["out"] is not None else merged["bundle"]
    moved = recalibrate(bundle, cfg, val_ds)
    save_bundle(moved, out)
    print(_bundle_summary(moved))
    print(f"saved bundle to {out}")
    return 0


def _cmd_infer(merged: dict) -> int:
    _require(merged, "bundle", "data")
    bundle = load_bundle(merged["bundle"])
    ds = _load_split(merged["data"], merged["split"])
    results = []
    for _, feats, _, backbone_pred, logits in dataset_store.iter_samples(ds):
        sample = Sample(features=feats, backbone_pred=backbone_pred,
                        backbone_logits=logits)
        results.append(selective_infer(bundle, sample, ds.levels,
                                       ds.final_classifier_flops))
    levels = [rec.level for rec in bundle.branches if rec.trained]
    counts = {lv: 0 for lv in levels}
    final = 0
    for res in results:
        if res.exit_level is None:
            final += 1
        else:
            counts[res.exit_level] += 1
    for lv in levels:
        print(f"exit at branch {lv}: {counts[lv]}")
    print(f"no early exit: {final}")
    if merged["out"] is not None:
        with open(merged["out"], "w", encoding="utf-8", newline="") as fh:
            fh.write(_config_comment(merged))
            fh.write(trace_csv(results, levels))
        print(f"wrote trace to {merged['out']}")
    return 0


def _cmd_evaluate(merged: dict) -> int:
    _require(merged, "bundle", "data")
    bundle = load_bundle(merged["bundle"])
    ds = _load_split(merged["data"], merged["split"])
    report = evaluate(bundle, ds)
    print(report_text(report), end="")
    if merged["out"] is not None:
        payload = report_csv(report) if merged["format"] == "csv" \
            else report_text(report)
        with open(merged["out"], "w", encoding="utf-8", newline="") as fh:
            fh.write(_config_comment(merged))
            fh.write(payload)
        print(f"wrote report to {merged['out']}")
    if merged["trace"] is not None:
        results = []
        for _, feats, _, backbone_pred, logits in dataset_store.iter_samples(ds):
            sample = Sample(features=feats, backbone_pred=backbone_pred,
                            backbone_logits=logits)
            results.append(selective_infer(bundle, sample, ds.levels,
                                           ds.final_classifier_flops))
        levels = [rec.level for rec in bundle.branches if rec.trained]
        with open(merged["trace"], "w", encoding="utf-8", newline="") as fh:
            fh.write(_config_comment(merged))
            fh.write(trace_csv(results, levels))
        print(f"wrote trace to {merged['trace']}")
    return 0


def _cmd_sweep(merged: dict) -> int:
    _require(merged, "data")
    train_ds = _load_split(merged["data"], "train")
    val_ds = _load_split(merged["data"], "validation")
    test_ds = _load_split(merged["data"], "test")
    margins = _parse_margins(merged["margins"])
    modes = str(merged["mode"]).split(",")
    ks = _parse_k_grid(merged["k"])
    if merged["boosted"] is None:
        schemes = (True, False)
    else:
        schemes = (bool(merged["boosted"]),)
    points = []
    for mode in modes:
        for k in ks:
            for boosted in schemes:
                cfg = PipelineConfig(
                    k=k, label_mode=mode, boosted=boosted,
                    seed=int(merged["seed"]), train=_train_config(merged),
                    max_levels=merged["levels"],
                    extra_config={"cli": {key: merged[key]
                                          for key in sorted(merged)}})
                cell = sweep_curve(cfg, train_ds, val_ds, test_ds, margins)
                points.extend(cell)
                print(f"cell {mode} k={k} "
                      f"{'boosted' if boosted else 'non-boosted'}: "
                      f"{len(cell)} points")
    if merged["out"] is not None:
        with open(merged["out"], "w", encoding="utf-8", newline="") as fh:
            fh.write(_config_comment(merged))
            fh.write(curve_csv(points))
        print(f"wrote curve to {merged['out']}")
    else:
        print(curve_csv(points), end="")
    return 0


def _cmd_flops_report(merged: dict) -> int:
    _require(merged, "data")
    ds = _load_split(merged["data"], "test")
    levels = ds.levels
    if merged["levels"] is not None:
        levels = levels[:int(merged["levels"])]
    ks = _parse_k(merged["k"])
    rows = []
    overhead = 0
    for i, meta in enumerate(levels):
        k = ks[min(i, len(ks) - 1)] if isinstance(ks, list) else ks
        hf = head_flops(k, meta.d, meta.h, meta.w, ds.num_classes)
        overhead += 2 * hf
        rows.append((str(meta.level), k, meta.d, meta.h, meta.w, hf, 2 * hf,
                     meta.cumulative_flops, meta.cumulative_flops + overhead))
    full = ds.levels[-1].cumulative_flops
    baseline = full + ds.final_classifier_flops
    rows.append(("final", "", "", "", "", "", ds.final_classifier_flops,
                 full, baseline + overhead))
    header = ("level", "k", "d", "h", "w", "head_flops", "stage_overhead",
              "cumulative_backbone", "exit_cost")
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    lines.append(f"# backbone baseline (no branches): {baseline}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if merged["out"] is not None:
        with open(merged["out"], "w", encoding="utf-8", newline="") as fh:
            fh.write(_config_comment(merged))
            fh.write(text)
    return 0


def _cmd_verify_dataset(merged: dict) -> int:
    _require(merged, "path")
    root = merged["path"]
    targets = []
    if os.path.exists(os.path.join(root, "manifest.json")):
        targets.append(("dataset", root))
    else:
        for split in SPLITS:
            sub = os.path.join(root, split)
            if os.path.exists(os.path.join(sub, "manifest.json")):
                targets.append((split, sub))
    if not targets:
        raise FormatError(f"no dataset manifest under {root}")
    for name, path in targets:
        summary = verify_dataset(path)
        print(f"{name}: OK " + json.dumps(summary, sort_keys=True))
    return 0


_HANDLERS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "flops-report": _cmd_flops_report,
    "verify-dataset": _cmd_verify_dataset,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("earlyexit: error: a command is required", file=sys.stderr)
        return 1
    try:
        merged = _merge_config(args.command, args)
        print("config: " + _echo(merged))
        return _HANDLERS[args.command](merged)
    except _MissingFlag as exc:
        sub = parser.sub_parsers.get(exc.command)
        if sub is not None:
            sub.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, TrainingError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
