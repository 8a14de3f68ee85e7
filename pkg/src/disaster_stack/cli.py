"""Command-line pipeline: fetch, clean, split, train, stack, evaluate, report.

Every subcommand reads one JSON configuration (optional), lets flags
override it, and writes its artifacts under the output directory with fixed
names so later steps can find them. ``--seed`` replaces every seed in the
configuration at once.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import dataset as ds
from . import ensemble as ens
from . import metrics
from .checkpoint import load_checkpoint
from .errors import DataError
from .gbt import GBTConfig, load_gbt, save_gbt
from .labels import ClassLabel
from .models import BUILDERS, Model
from .synthetic import write_corpus
from .train import CNN_REGIME, RESNET_REGIME, ArraySplit, TrainConfig, fit, write_history_csv

log = logging.getLogger("disaster_stack")

OUTPUT_ENV = "DSTK_OUTPUT_DIR"
MODEL_KINDS = tuple(BUILDERS)
EVAL_TARGETS = MODEL_KINDS + ("stack",)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def _default_models():
    return {"cnn": dict(CNN_REGIME), "resnet": dict(RESNET_REGIME)}


def _default_stacking():
    return {
        "grid": {k: list(v) for k, v in ens.DEFAULT_GRID.items()},
        "k_folds": 5,
        "features": "argmax",
        "base": {},
        "train_fraction": 0.8,
        "seed": 0,
    }


@dataclass
class PipelineConfig:
    raw_root: str | None = None
    manifest: str | None = None
    exclusions: str | None = None
    url_lists: dict = field(default_factory=dict)  # class folder -> URL list file
    similarity_threshold: float = ds.DEFAULT_THRESHOLD
    image_size: int = 64
    train_fraction: float = 0.8
    split_seed: int = 0
    models: dict = field(default_factory=_default_models)
    stacking: dict = field(default_factory=_default_stacking)
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        cfg = cls(**doc)
        models = _default_models()
        for kind, overrides in (doc.get("models") or {}).items():
            if kind not in MODEL_KINDS:
                raise UsageError(f"unknown model {kind!r} in config")
            models[kind].update(overrides)
        cfg.models = models
        stacking = _default_stacking()
        stacking.update(doc.get("stacking") or {})
        cfg.stacking = stacking
        return cfg

    def validate(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise UsageError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0.0 < self.stacking["train_fraction"] < 1.0:
            raise UsageError("stacking.train_fraction must lie in (0, 1)")
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise UsageError("similarity_threshold must lie in [0, 1]")
        if self.image_size < 8:
            raise UsageError(f"image_size must be >= 8, got {self.image_size}")
        if int(self.stacking["k_folds"]) < 2:
            raise UsageError("stacking.k_folds must be >= 2")
        seeds = [self.split_seed, self.stacking["seed"]]
        seeds += [m.get("seed", 0) for m in self.models.values()]
        if any(not isinstance(s, int) or s < 0 for s in seeds):
            raise UsageError("seeds must be non-negative integers")
        return self

    def set_seed(self, seed: int):
        self.split_seed = seed
        self.stacking["seed"] = seed
        for overrides in self.models.values():
            overrides["seed"] = seed

    def train_config(self, kind: str) -> TrainConfig:
        try:
            return TrainConfig(**self.models[kind])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad training config for {kind}: {exc}") from exc

    def gbt_base(self) -> GBTConfig:
        try:
            return GBTConfig(**self.stacking.get("base", {}))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad stacking.base config: {exc}") from exc


def load_config(args) -> PipelineConfig:
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
    cfg = PipelineConfig.from_dict(doc)
    for name in ("raw_root", "manifest", "exclusions", "image_size", "train_fraction",
                 "similarity_threshold"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if cfg.output_dir is None:
        cfg.output_dir = os.environ.get(OUTPUT_ENV, "out")
    kind = getattr(args, "model", None)
    if kind in MODEL_KINDS:
        for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"),
                          ("learning_rate", "learning_rate"), ("patience", "patience")):
            value = getattr(args, flag, None)
            if value is not None:
                cfg.models[kind][key] = value
    if getattr(args, "k_folds", None) is not None:
        cfg.stacking["k_folds"] = args.k_folds
    if args.seed is not None:
        cfg.set_seed(args.seed)
    return cfg.validate()


# ----------------------------------------------------------------- helpers


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _manifest_path(cfg, out: Path) -> Path:
    return Path(cfg.manifest) if cfg.manifest else out / "manifest.jsonl"


def _write_text(path: Path, text: str):
    path.write_text(text)
    log.info("wrote %s", path)


def _load_split_arrays(cfg, out: Path):
    """Train and test arrays from the manifest and split assignment."""
    manifest = ds.read_manifest(_require(_manifest_path(cfg, out), "manifest"))
    split = ds.SplitAssignment.from_json(_require(out / "split.json", "split assignment").read_text())
    root = cfg.raw_root or manifest.root
    by_path = {r.path: r for r in manifest.valid_records()}
    arrays = {}
    for side in ("train", "test"):
        missing = [p for p in split.paths(side) if p not in by_path]
        if missing:
            raise DataError(f"split lists {len(missing)} path(s) not valid in the manifest, "
                            f"e.g. {missing[0]}")
        records = [by_path[p] for p in split.paths(side)]
        try:
            images, labels = ds.load_arrays(records, cfg.image_size, root)
        except ds.DecodeError as exc:
            raise DataError(f"decode failed while loading the {side} split: {exc}") from exc
        arrays[side] = (ArraySplit(images, labels), [r.path for r in records])
    return arrays


def _load_model(out: Path, kind: str) -> Model:
    spec, weights, _, _ = load_checkpoint(_require(out / f"checkpoint_{kind}.bin", "checkpoint"))
    return Model(spec, weights)


# -------------------------------------------------------------- subcommands


def cmd_synth(args, cfg):
    root = Path(args.root or cfg.raw_root or "corpus")
    write_corpus(root, args.per_class, cfg.image_size, args.seed or 0)
    log.info("wrote %d images per class under %s", args.per_class, root)


def cmd_fetch(args, cfg):
    out = _out(cfg)
    if not cfg.raw_root:
        raise UsageError("fetch needs --raw-root or raw_root in the config")
    url_lists = dict(cfg.url_lists)
    for item in args.urls or []:
        name, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--urls expects CLASS=FILE, got {item!r}")
        url_lists[name] = path
    if not url_lists:
        raise UsageError("no URL lists given")
    log_path = out / "fetch_log.jsonl"
    log_path.write_text("")
    for name, path in sorted(url_lists.items()):
        try:
            label = ClassLabel.parse(name)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        urls = ds.read_url_list(_require(path, "URL list"))
        records = ds.fetch_urls(urls, Path(cfg.raw_root) / label.folder, label,
                                timeout=args.timeout, workers=args.threads)
        ds.write_fetch_log(records, log_path)
        failed = sum(r.status == "fetch_failed" for r in records)
        log.info("%s: %d fetched, %d failed", label.folder, len(records) - failed, failed)


def cmd_clean(args, cfg):
    out = _out(cfg)
    if not cfg.raw_root:
        raise UsageError("clean needs --raw-root or raw_root in the config")
    root = _require(cfg.raw_root, "raw image root")
    exclusions = ds.read_exclusions(_require(cfg.exclusions, "exclusion list")) if cfg.exclusions else ()
    fetch_log = out / "fetch_log.jsonl"
    failures = ds.read_records_jsonl(fetch_log) if fetch_log.exists() else []
    manifest = ds.ingest_folders(root, exclusions, failures, cfg.similarity_threshold,
                                 workers=args.threads)
    ds.write_manifest(manifest, _manifest_path(cfg, out))
    table = ds.render_cleaning_table(manifest)
    _write_text(out / "cleaning_summary.txt", table)
    _write_text(out / "cleaning_summary.csv", ds.cleaning_csv(manifest))
    sys.stdout.write(table)


def cmd_split(args, cfg):
    out = _out(cfg)
    manifest = ds.read_manifest(_require(_manifest_path(cfg, out), "manifest"))
    split = ds.stratified_split(manifest, cfg.train_fraction, cfg.split_seed)
    _write_text(out / "split.json", split.to_json())


def cmd_train(args, cfg):
    out = _out(cfg)
    kind = args.model
    config = cfg.train_config(kind)
    config.checkpoint_path = str(out / f"checkpoint_{kind}.bin")
    arrays = _load_split_arrays(cfg, out)
    model = Model.build(kind, (cfg.image_size, cfg.image_size, 3), seed=config.seed)
    _, history = fit(model, arrays["train"][0], arrays["test"][0], config)
    write_history_csv(history, out / f"history_{kind}.csv")
    log.info("%s: best epoch %d of %d, val accuracy %.4f", kind, history.best_epoch,
             history.stopped_epoch, model.weights.val_accuracy)


def cmd_stack(args, cfg):
    out = _out(cfg)
    arrays = _load_split_arrays(cfg, out)
    test, _ = arrays["test"]
    stacked = ens.build_stacked_dataset(_load_model(out, "cnn"), _load_model(out, "resnet"), test)
    argmaxed = ens.argmax_labels(stacked)
    ens.write_stacked_csv(stacked, out / "stacked.csv")
    ens.write_argmax_csv(argmaxed, out / "argmax.csv")
    st = cfg.stacking
    truths = [int(r.truth) for r in stacked]
    train_rows, test_rows = ens.stratified_row_split(truths, st["train_fraction"], st["seed"])
    meta_split = {"train_fraction": st["train_fraction"], "seed": st["seed"],
                  "train": train_rows, "test": test_rows}
    _write_text(out / "meta_split.json", json.dumps(meta_split, indent=1) + "\n")
    source = stacked if st["features"] == "proba" else argmaxed
    result = ens.grid_search_cv([source[i] for i in train_rows], st["grid"], int(st["k_folds"]),
                                cfg.gbt_base(), st["seed"], st["features"])
    ens.write_grid_csv(result.table, out / "gridsearch.csv")
    save_gbt(result.model, out / "meta_model.bin", {"features": st["features"]})
    log.info("meta-model: %s", asdict(result.best_config))


def _base_predictions(cfg, out, kind):
    arrays = _load_split_arrays(cfg, out)
    split, paths = arrays["test"]
    preds = _load_model(out, kind).predict_proba(split.images).argmax(axis=1)
    return list(zip(paths, split.labels.tolist(), preds.tolist()))


def _stack_predictions(out):
    model, header = load_gbt(_require(out / "meta_model.bin", "meta-model"))
    mode = header.get("features", "argmax")
    meta_split = json.loads(_require(out / "meta_split.json", "meta split").read_text())
    stacked = ens.read_stacked_csv(_require(out / "stacked.csv", "stacked predictions"))
    rows = [stacked[i] for i in meta_split["test"]]
    X, y = ens.features(rows if mode == "proba" else ens.argmax_labels(rows), mode)
    preds = model.predict(X)
    return [(f"row{i}", int(t), int(p)) for i, t, p in zip(meta_split["test"], y, preds)]


def cmd_evaluate(args, cfg):
    out = _out(cfg)
    target = args.model
    items = _stack_predictions(out) if target == "stack" else _base_predictions(cfg, out, target)
    if not items:
        raise DataError("nothing to evaluate")
    cm = metrics.confusion_matrix([t for _, t, _ in items], [p for _, _, p in items])
    report = metrics.classification_report(cm, target)
    _write_text(out / f"predictions_{target}.csv", metrics.predictions_csv(items))
    _write_text(out / f"confusion_{target}.csv", metrics.confusion_csv(cm))
    _write_text(out / f"report_{target}.json", metrics.report_to_json(report))
    sys.stdout.write(metrics.render_report(report))


def cmd_report(args, cfg):
    out = _out(cfg)
    names = args.models or [m for m in EVAL_TARGETS if (out / f"report_{m}.json").exists()]
    if not names:
        raise DataError(f"no report_<model>.json files under {out}")
    reports = [metrics.report_from_json(_require(out / f"report_{m}.json", "report").read_text())
               for m in names]
    _write_text(out / "f1_comparison.csv", metrics.compare_f1(reports))
    for report in reports:
        sys.stdout.write(metrics.render_report(report) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "fetch": cmd_fetch,
    "clean": cmd_clean,
    "split": cmd_split,
    "train": cmd_train,
    "stack": cmd_stack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--output-dir", help=f"artifact directory (default ${OUTPUT_ENV} or ./out)")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS and worker threads; 1 is the deterministic mode")
    common.add_argument("--image-size", dest="image_size", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="dstk", description="Disaster image classification pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic pattern corpus")
    p.add_argument("--root")
    p.add_argument("--per-class", dest="per_class", type=int, default=100)

    p = sub.add_parser("fetch", parents=[common], help="download images from URL lists")
    p.add_argument("--raw-root", dest="raw_root")
    p.add_argument("--urls", action="append", metavar="CLASS=FILE")
    p.add_argument("--timeout", type=float, default=10.0)

    p = sub.add_parser("clean", parents=[common], help="validate, hash and deduplicate")
    p.add_argument("--raw-root", dest="raw_root")
    p.add_argument("--manifest")
    p.add_argument("--exclusions")
    p.add_argument("--similarity-threshold", dest="similarity_threshold", type=float)

    p = sub.add_parser("split", parents=[common], help="stratified train/test assignment")
    p.add_argument("--manifest")
    p.add_argument("--train-fraction", dest="train_fraction", type=float)

    p = sub.add_parser("train", parents=[common], help="train one base model")
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--manifest")
    p.add_argument("--raw-root", dest="raw_root")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--patience", type=int)

    p = sub.add_parser("stack", parents=[common], help="stack base predictions, grid-search the meta-model")
    p.add_argument("--manifest")
    p.add_argument("--raw-root", dest="raw_root")
    p.add_argument("--k-folds", dest="k_folds", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="confusion matrix and classification report")
    p.add_argument("--model", choices=EVAL_TARGETS, required=True)
    p.add_argument("--manifest")
    p.add_argument("--raw-root", dest="raw_root")

    p = sub.add_parser("report", parents=[common], help="F1 comparison across reports")
    p.add_argument("--models", nargs="+", choices=EVAL_TARGETS)
    return parser


def _configure_logging(out: Path, verbose: bool):
    root = logging.getLogger("disaster_stack")
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(console)
    out.mkdir(parents=True, exist_ok=True)
    # Timestamps live only in the log file so every other artifact is reproducible.
    handler = logging.FileHandler(out / "pipeline.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root.addHandler(handler)
    return handler


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    handler = None
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = load_config(args)
        handler = _configure_logging(Path(cfg.output_dir), args.verbose)
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (DataError, ValueError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except OSError as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    finally:
        if handler is not None:
            logging.getLogger("disaster_stack").removeHandler(handler)
            handler.close()


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
