"""``flowvid`` command line: synth, preview, train, eval, compare, count-params.

Settings resolve in three layers: built-in defaults, then an optional JSON
``--config`` file, then explicit command-line flags. The resolved settings
are written to ``config.json`` in the run directory.

Exit codes: 0 success, 1 internal or training error, 2 usage or data error.
"""
import argparse
import json
import os
import sys
from dataclasses import asdict

from . import __version__
from .errors import AuditError, DataError, DivergenceError, FlowvidError, ShapeError, StateError
from .flowdata import (DatasetMeta, FlowRecord, SplitSpec, load_csv, make_synthetic, normalize,
                       prepare, write_csv)
from .model import (ModelSpec, Variant, audit_params, build, load_checkpoint, read_manifest,
                    save_checkpoint)
from .representation import choose_factors, export_png, pack_video, reshape_flow
from .training import (AVERAGINGS, METRICS, TrainConfig, compare_td, comparison_table, evaluate,
                       train)

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

#: Reference totals for 141 classes, checked by ``count-params --check``.
REFERENCE_TOTALS = {Variant.TD: 4_726_189, Variant.VANILLA: 114_925}

DEFAULTS = {
    "data": None,
    "out": None,
    "label_column": "label",
    "feature_columns": None,
    "variant": Variant.TD.value,
    "train_fraction": 0.8,
    "val_fraction": 0.1,
    "test_fraction": 0.1,
    "split_seed": 0,
    "averaging": "macro",
    "repeats": 5,
    **{k: v for k, v in asdict(TrainConfig()).items()},
}


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- configuration


def resolve_config(args):
    """Defaults < JSON config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"{args.config}: unknown setting(s) {', '.join(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if isinstance(cfg["feature_columns"], str):
        cfg["feature_columns"] = [c.strip() for c in cfg["feature_columns"].split(",") if c.strip()]
    try:
        cfg["variant"] = Variant(cfg["variant"]).value
    except ValueError:
        raise UsageError(f"unknown variant {cfg['variant']!r}") from None
    if cfg["averaging"] not in AVERAGINGS:
        raise UsageError(f"unknown averaging {cfg['averaging']!r}")
    return cfg


def train_config(cfg):
    return TrainConfig(**{k: cfg[k] for k in asdict(TrainConfig())})


def split_spec(cfg):
    return SplitSpec(cfg["train_fraction"], cfg["val_fraction"], cfg["test_fraction"],
                     cfg["split_seed"])


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _load_data(cfg):
    if not os.path.isfile(cfg["data"]):
        raise UsageError(f"data file not found: {cfg['data']}")
    return load_csv(cfg["data"], cfg["label_column"], cfg["feature_columns"])


def _prepare_videos(cfg):
    records, meta = _load_data(cfg)
    sp = prepare(records, meta, split_spec(cfg))
    K, W = choose_factors(meta.feature_count)
    _log(f"{len(records)} flows, {meta.class_count} classes, {meta.feature_count} features "
         f"as {K}x{W}; split {sp.sizes}")
    videos = [pack_video(part, K, W) for part in (sp.train, sp.val, sp.test)]
    return sp.meta, (K, W), videos


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    records, meta = make_synthetic(args.classes, args.per_class, args.features, args.seed)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    write_csv(args.out, records, meta)
    _log(f"wrote {len(records)} flows in {meta.class_count} classes to {args.out}")
    return EXIT_OK


def cmd_preview(args):
    cfg = resolve_config(args)
    _require(cfg, "data", "out")
    records, meta = _load_data(cfg)
    for row in args.row:
        if not 0 <= row < len(records):
            raise UsageError(f"row {row} out of range: {cfg['data']} has {len(records)} data rows")
    K, W = choose_factors(meta.feature_count)
    scaled = normalize([records[r] for r in args.row], meta)
    os.makedirs(cfg["out"], exist_ok=True)
    for row, rec in zip(args.row, scaled):
        path = os.path.join(cfg["out"], f"flow_{row:06d}.png")
        export_png(reshape_flow(rec.features, K, W), path)
        print(path)
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    _require(cfg, "data", "out")
    os.makedirs(cfg["out"], exist_ok=True)
    _write_json(os.path.join(cfg["out"], "config.json"), cfg)
    meta, (K, W), (tr, va, te) = _prepare_videos(cfg)
    tcfg = train_config(cfg)
    spec = ModelSpec(Variant(cfg["variant"]), meta.class_count, (1, K, W))
    model = build(spec, seed=tcfg.seed)
    _log(f"{spec.variant.title}: {audit_params(model).total:,} trainable parameters")

    def progress(s):
        _log(f"epoch {s.epoch:3d}  loss {s.train_loss:.4f}  acc {s.train_accuracy:.4f}  "
             f"val_loss {s.val_loss:.4f}  val_acc {s.val_accuracy:.4f}  {s.seconds:.1f}s")

    model, history = train(model, tr, va, tcfg, on_epoch=progress)
    report = evaluate(model, te, cfg["averaging"], tcfg.batch_size, history)
    save_checkpoint(model, cfg["out"], metrics={m: getattr(report, m) for m in METRICS},
                    extra={"meta": meta.to_dict(), "label_column": cfg["label_column"]})
    _write_json(os.path.join(cfg["out"], "history.json"), history.to_dict())
    _write_json(os.path.join(cfg["out"], "report.json"), report.to_dict())
    with open(os.path.join(cfg["out"], "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.summary() + "\n")
    print(report.summary())
    return EXIT_OK


def _relabel(records, file_classes, known_classes, path):
    """Map a file's first-appearance label ids onto the checkpoint's class ids."""
    index = {name: i for i, name in enumerate(known_classes)}
    unknown = [c for c in file_classes if c not in index]
    if unknown:
        raise DataError(f"{path}: label {unknown[0]!r} was not seen in training")
    return [FlowRecord(r.features, index[file_classes[r.label_id]]) for r in records]


def cmd_eval(args):
    cfg = resolve_config(args)
    _require(cfg, "data")
    if not os.path.isdir(args.checkpoint):
        raise UsageError(f"checkpoint directory not found: {args.checkpoint}")
    manifest = read_manifest(args.checkpoint)
    meta = DatasetMeta.from_dict(manifest["extra"]["meta"])
    if args.label_column is None:
        cfg["label_column"] = manifest["extra"].get("label_column", cfg["label_column"])
    if cfg["feature_columns"] is None:
        cfg["feature_columns"] = meta.feature_names
    records, file_meta = _load_data(cfg)
    K, W = manifest["K"], manifest["W"]
    if file_meta.feature_count != K * W:
        raise ShapeError(f"checkpoint expects {K * W} features, {cfg['data']} provides "
                         f"{file_meta.feature_count}")
    records = normalize(_relabel(records, file_meta.class_names, meta.class_names, cfg["data"]),
                        meta)
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, pack_video(records, K, W), cfg["averaging"], cfg["batch_size"])
    out = cfg["out"] or args.checkpoint
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "eval_report.json"), report.to_dict())
    print(report.summary())
    return EXIT_OK


def cmd_compare(args):
    cfg = resolve_config(args)
    _require(cfg, "data", "out")
    os.makedirs(cfg["out"], exist_ok=True)
    _write_json(os.path.join(cfg["out"], "config.json"), cfg)
    meta, (K, W), (tr, va, te) = _prepare_videos(cfg)
    report = compare_td(tr, va, te, train_config(cfg), cfg["repeats"], meta.class_count,
                        (1, K, W), cfg["averaging"], cfg["out"], log=_log)
    print(comparison_table(report))
    return EXIT_OK


def cmd_count_params(args):
    variant = Variant(args.variant)
    audit = audit_params(build(ModelSpec(variant, args.classes)))
    print(f"{variant.title}, {args.classes} classes")
    print(audit.table())
    if variant is Variant.TD:
        vanilla = audit_params(build(ModelSpec(Variant.VANILLA, args.classes))).total
        print(f"{audit.total / vanilla:.2f}x the parameters of {Variant.VANILLA.title} "
              f"({vanilla:,})")
    if args.check:
        if args.classes != 141:
            raise UsageError("--check compares against reference totals for --classes 141")
        if audit.total != REFERENCE_TOTALS[variant]:
            _log(f"check failed: total {audit.total} != {REFERENCE_TOTALS[variant]}")
            return EXIT_INTERNAL
        _log("check passed")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _data_options(p):
    p.add_argument("--config", help="JSON settings file; flags override it")
    p.add_argument("--data", help="flow CSV (header row, comma-separated)")
    p.add_argument("--label-column", dest="label_column")
    p.add_argument("--feature-columns", dest="feature_columns",
                   help="comma-separated feature columns (default: all but the label)")


def _train_options(p):
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--out", help="run directory")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="weight-initialisation and shuffling seed")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--averaging", choices=AVERAGINGS)


def build_parser():
    parser = argparse.ArgumentParser(prog="flowvid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic, separable flow CSV")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", dest="per_class", type=int, required=True)
    p.add_argument("--features", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preview", help="export flows as grayscale PNG images")
    _data_options(p)
    p.add_argument("--row", type=int, nargs="+", default=[0], help="0-based data row(s)")
    p.add_argument("--out", help="directory for flow_NNNNNN.png files")
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("train", help="split, train, evaluate and checkpoint one model")
    _data_options(p)
    _train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a flow CSV")
    _data_options(p)
    p.add_argument("--checkpoint", required=True, help="run directory written by train")
    p.add_argument("--out", help="where to write eval_report.json (default: checkpoint dir)")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--averaging", choices=AVERAGINGS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train both variants repeatedly and summarise")
    _data_options(p)
    _train_options(p)
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("count-params", help="print the per-layer parameter ledger")
    p.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.TD.value)
    p.add_argument("--classes", type=int, default=141)
    p.add_argument("--check", action="store_true",
                   help="exit 1 unless the total matches the 141-class reference")
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"flowvid {args.command}: {exc}")
        return EXIT_USAGE
    except (DivergenceError, AuditError, StateError) as exc:
        _log(f"flowvid {args.command}: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL
    except (FlowvidError, OSError, ValueError) as exc:
        _log(f"flowvid {args.command}: {type(exc).__name__}: {exc}")
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort single-line diagnostic
        _log(f"flowvid {args.command}: internal error: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
