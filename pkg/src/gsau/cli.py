"""Command line entry point: preprocess, train, evaluate, sweep-gamma.

Every run option can come from a flat ``key = value`` file (``--config``);
flags given on the command line win over the file, which wins over defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericError
from .checkpoint import CheckpointError
from .data import (
    DELIMITERS,
    DataError,
    build_dataset,
    five_core_filter,
    ingest,
    is_snapshot,
    load_dataset,
    load_snapshot,
    save_snapshot,
    subsample_users,
)
from .evaluation import evaluate, format_table
from .graph import GraphEncoderConfig
from .losses import ABLATIONS, LossConfig
from .model import SCORING_HEADS, GSAUModel, ModelConfig
from .sequential import SeqEncoderConfig
from .trainer import TrainConfig, eval_head, fit, load_checkpoint, restore

log = logging.getLogger("gsau")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GAMMA_GRID = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
REPORT_KS = (10, 20, 50)

CONFIG_FILE = "config.txt"
META_FILE = "meta.json"
EPOCHS_FILE = "epochs.jsonl"
REPORT_FILE = "report.jsonl"
TABLE_FILE = "report.txt"
CHECKPOINT_FILE = "model.ckpt"


class UsageError(ValueError):
    pass


def _opt(cast):
    def parse(text):
        return None if str(text).lower() in ("none", "") else cast(text)

    parse.__name__ = cast.__name__
    return parse


@dataclass(frozen=True)
class Field:
    name: str
    type: object
    default: object
    help: str
    choices: tuple | None = None


FIELDS = (
    # data
    Field("data", str, None, "dataset snapshot or raw interaction log"),
    Field("format", str, "tsv", "raw log format", tuple(DELIMITERS)),
    Field("columns", str, "0,1,2", "user,item,timestamp column positions"),
    Field("delimiter", _opt(str), None, "field delimiter overriding --format"),
    Field("core", int, 5, "k for k-core filtering of raw logs"),
    # model
    Field("dim", int, 64, "embedding size"),
    Field("graph_layers", int, 2, "propagation layers"),
    Field("layer_combination", str, "mean", "how graph layers are combined", ("mean", "last")),
    Field("seq_layers", int, 2, "self-attention blocks"),
    Field("heads", int, 2, "attention heads"),
    Field("ffn_dim", _opt(int), None, "feed-forward width (default 4 * dim)"),
    Field("max_seq_len", int, 50, "longest prefix fed to the sequence encoder"),
    Field("dropout", float, 0.2, "dropout rate in the sequence encoder"),
    Field("activation", str, "gelu", "feed-forward activation", ("gelu", "relu")),
    # loss
    Field("variant", str, "gsau-rec", "gsau-rec uses cross-entropy for the sequence term", ("gsau", "gsau-rec")),
    Field("ablation", str, "none", "comma-separated: " + ", ".join(a.replace("_", "-") for a in ABLATIONS)),
    Field("gamma", float, 0.1, "weight of the uniformity terms"),
    Field("uniformity_pooling", _opt(str), None, "pooling for both uniformity losses", ("average", "union")),
    Field("graph_pooling", str, "average", "pooling of graph uniformity subsets", ("average", "union")),
    Field("seq_pooling", str, "union", "pooling of sequence uniformity subsets", ("average", "union")),
    # training
    Field("epochs", int, 300, "maximum epochs"),
    Field("patience", int, 10, "epochs without validation NDCG@20 gain before stopping"),
    Field("batch_size", int, 1024, "training instances per step"),
    Field("lr", float, 1e-3, "Adam learning rate"),
    Field("clip_norm", _opt(float), None, "global gradient norm clip (5 is a sensible value)"),
    Field("seed", int, 2025, "seed for init, shuffling and dropout"),
    Field("train_instances", str, "per-prefix", "training instances per user", ("per-prefix", "last-only")),
    Field("scoring_head", str, "auto", "evaluation head", ("auto",) + SCORING_HEADS),
    Field("eval_batch_size", int, 256, "users per evaluation batch"),
    Field("eval_workers", int, 1, "evaluation threads (1 keeps runs reproducible)"),
)
FIELD_MAP = {f.name: f for f in FIELDS}


# ---------------------------------------------------------------- config


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_MAP:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(file_values: dict[str, str], flags: dict[str, object]) -> dict[str, object]:
    """Defaults, then file values, then flags; every value cast and checked."""
    cfg = {f.name: f.default for f in FIELDS}
    for key, raw in file_values.items():
        f = FIELD_MAP[key]
        try:
            cfg[key] = f.type(raw)
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from exc
    cfg.update({k: v for k, v in flags.items() if v is not None})
    for f in FIELDS:
        if f.choices and cfg[f.name] is not None and cfg[f.name] not in f.choices:
            raise UsageError(f"{f.name} must be one of {f.choices}, got {cfg[f.name]!r}")
    cfg["_explicit"] = sorted(set(file_values) | {k for k, v in flags.items() if v is not None})
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{f.name} = {'none' if cfg[f.name] is None else cfg[f.name]}\n" for f in FIELDS)


def parse_delimiter(text: str | None) -> str | None:
    if text is None:
        return None
    named = {"tab": "\t", "\\t": "\t", "comma": ",", "space": " ", "semicolon": ";", "pipe": "|"}
    d = named.get(text.lower(), text)
    if len(d) != 1 or d in "\r\n\"":
        raise UsageError(f"delimiter must be a single character, got {text!r}")
    return d


def parse_columns(text: str) -> tuple[int, int, int]:
    try:
        cols = tuple(int(c) for c in text.split(","))
    except ValueError:
        cols = ()
    if len(cols) != 3 or min(cols) < 0 or len(set(cols)) != 3:
        raise UsageError(f"columns must be three distinct nonnegative indices, got {text!r}")
    return cols


def loss_config(cfg: dict) -> LossConfig:
    names = [a.strip().replace("-", "_") for a in cfg["ablation"].split(",") if a.strip()]
    pooling = {}
    for key in ("graph_pooling", "seq_pooling"):
        shared = cfg["uniformity_pooling"]
        pooling[key] = shared if shared is not None and key not in cfg["_explicit"] else cfg[key]
    kwargs = dict(gamma=cfg["gamma"], variant=cfg["variant"].replace("-", "_"), **pooling)
    for name in names:
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}")
        if name == "without_rec":
            if "variant" in cfg["_explicit"] and kwargs["variant"] == "gsau_rec":
                raise UsageError("--ablation without-rec conflicts with --variant gsau-rec")
            kwargs["variant"] = "gsau"
        elif name != "none":
            kwargs[name] = True
    try:
        return LossConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(f"conflicting ablation flags: {exc}") from exc


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(
            cfg["dim"],
            GraphEncoderConfig(cfg["graph_layers"], cfg["layer_combination"]),
            SeqEncoderConfig(cfg["seq_layers"], cfg["heads"], cfg["dim"], cfg["ffn_dim"], cfg["max_seq_len"],
                             cfg["dropout"], cfg["activation"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    for key in ("epochs", "patience", "eval_batch_size", "eval_workers"):
        if cfg[key] < 1:
            raise UsageError(f"{key} must be at least 1")
    if cfg["batch_size"] < 2:
        raise UsageError("batch_size must be at least 2")
    if cfg["lr"] <= 0 or (cfg["clip_norm"] is not None and cfg["clip_norm"] <= 0):
        raise UsageError("lr and clip_norm must be positive")
    return TrainConfig(epochs=cfg["epochs"], patience=cfg["patience"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       seed=cfg["seed"], clip_norm=cfg["clip_norm"], train_instances=cfg["train_instances"],
                       eval_head=cfg["scoring_head"], eval_batch_size=cfg["eval_batch_size"],
                       eval_workers=cfg["eval_workers"])


@dataclass
class RunSpec:
    raw: dict
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig

    @classmethod
    def from_dict(cls, cfg: dict) -> "RunSpec":
        if not cfg.get("data"):
            raise UsageError("no dataset given (--data or 'data = ...' in the config file)")
        if not 0 <= cfg["dropout"] < 1:
            raise UsageError("dropout must lie in [0, 1)")
        parse_columns(cfg["columns"])
        parse_delimiter(cfg["delimiter"])
        loss = loss_config(cfg)
        cfg = dict(cfg, variant=loss.variant.replace("_", "-"))  # record the variant without-rec implies
        return cls(cfg, model_config(cfg), loss, train_config(cfg))

    def dataset(self):
        c = self.raw
        return load_dataset(c["data"], c["format"], parse_columns(c["columns"]), parse_delimiter(c["delimiter"]),
                            c["core"])


# ---------------------------------------------------------------- commands


def _write_json_lines(path: Path, records) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def run_training(spec: RunSpec, out: Path, resume: bool = False) -> dict:
    """Train one configuration into ``out``; returns the valid and test reports."""
    out.mkdir(parents=True, exist_ok=True)
    ds = spec.dataset()
    spec.raw["data"] = str(Path(spec.raw["data"]).resolve())
    config_text = format_config(spec.raw)
    meta = {
        "seed": spec.raw["seed"],
        "dataset_fingerprint": ds.fingerprint(),
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest()[:16],
        "version": __version__,
    }
    (out / CONFIG_FILE).write_text(config_text, encoding="utf-8")
    (out / META_FILE).write_text(json.dumps({**meta, "dataset": ds.summary()}, indent=2, sort_keys=True) + "\n")
    ckpt = out / CHECKPOINT_FILE
    if resume and not ckpt.exists():
        raise UsageError(f"--resume: no checkpoint in {out}")
    if not resume:
        (out / EPOCHS_FILE).write_text("")

    log.info("dataset %s: %s", meta["dataset_fingerprint"], ds.summary())
    model = GSAUModel.for_dataset(ds, spec.model, seed=spec.raw["seed"])

    def on_epoch(rec):
        row = {k: v for k, v in rec.items() if k != "valid"}
        row["valid"] = json.loads(rec["valid"].to_json())
        _write_json_lines(out / EPOCHS_FILE, [row])

    result = fit(ds, model, spec.loss, spec.train, on_epoch=on_epoch, resume=ckpt if resume else None,
                 checkpoint_path=ckpt)
    restore(model, result.best_params)
    meta["best_epoch"] = result.best_epoch
    head, cosine = eval_head(spec.loss, spec.train.eval_head)
    reports = {
        split: evaluate(ds, split, model.scorer(head, cosine), ks=REPORT_KS, batch_size=spec.train.eval_batch_size,
                        workers=spec.train.eval_workers, epoch=result.best_epoch, meta=meta)
        for split in ("valid", "test")
    }
    (out / REPORT_FILE).write_text("".join(r.to_json() + "\n" for r in reports.values()))
    table = format_table({f"{run_label(spec)} ({s})": r for s, r in reports.items()}, ks=(10, 20, 50))
    (out / TABLE_FILE).write_text(table + "\n")
    return reports


def run_label(spec: RunSpec) -> str:
    label = "GSAU (rec)" if spec.loss.variant == "gsau_rec" else "GSAU"
    flags = [a for a in ("without_graph", "without_sequential", "without_ui_uniform") if getattr(spec.loss, a)]
    return label + "".join(f" {f.replace('_', '-')}" for f in flags)


def cmd_preprocess(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    if is_snapshot(src):
        ds = load_snapshot(src)
        if src.resolve() != dst.resolve():
            shutil.copyfile(src, dst)
    else:
        records = ingest(src, args.format, parse_columns(args.columns), parse_delimiter(args.delimiter))
        records = five_core_filter(records, args.core)
        if args.subsample_users:
            records = five_core_filter(subsample_users(records, args.subsample_users, args.subsample_seed), args.core)
        ds = build_dataset(records)
        save_snapshot(ds, dst)
    s = ds.summary()
    print(f"users {s['users']}  items {s['items']}  interactions {s['interactions']}  "
          f"density {s['density']:.6f}  fingerprint {ds.fingerprint()}")
    return EXIT_OK


def _spec_from_args(args) -> RunSpec:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {f.name: getattr(args, f.name) for f in FIELDS}
    return RunSpec.from_dict(resolve(file_values, flags))


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    reports = run_training(spec, Path(args.out), resume=args.resume)
    print((Path(args.out) / TABLE_FILE).read_text(), end="")
    log.debug("%s", reports)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Path(args.run_dir)
    cfg_path = run / CONFIG_FILE
    if not cfg_path.exists():
        raise UsageError(f"{run} has no {CONFIG_FILE}")
    flags = {"data": args.data, "scoring_head": args.scoring_head, "eval_workers": args.eval_workers}
    spec = RunSpec.from_dict(resolve(read_config_file(cfg_path), flags))
    ds = spec.dataset()
    model = GSAUModel.for_dataset(ds, spec.model, seed=spec.raw["seed"])
    ckpt = Path(args.checkpoint) if args.checkpoint else run / CHECKPOINT_FILE
    tensors = load_checkpoint(ckpt, model, prefix="param/")
    if not args.last and "best/emb" in tensors:
        load_checkpoint(ckpt, model, prefix="best/")
    head, cosine = eval_head(spec.loss, spec.train.eval_head)
    meta = {"seed": spec.raw["seed"], "dataset_fingerprint": ds.fingerprint(), "checkpoint": str(ckpt)}
    report = evaluate(ds, args.split, model.scorer(head, cosine), ks=REPORT_KS,
                      batch_size=spec.train.eval_batch_size, workers=spec.train.eval_workers, meta=meta)
    print(report.to_json())
    print(format_table({f"{run_label(spec)} ({args.split})": report}, ks=(10, 20, 50)))
    return EXIT_OK


def _sweep_one(job):
    raw, out = job
    _configure_logging(logging.WARNING)
    return run_training(RunSpec.from_dict(raw), Path(out))["test"]


def cmd_sweep_gamma(args) -> int:
    spec = _spec_from_args(args)
    try:
        grid = [float(g) for g in args.grid.split(",")] if args.grid else list(GAMMA_GRID)
    except ValueError as exc:
        raise UsageError(f"bad --grid: {exc}") from exc
    if not grid or min(grid) < 0:
        raise UsageError("--grid needs nonnegative values")
    out = Path(args.out)
    jobs = []
    for g in grid:
        raw = dict(spec.raw, gamma=g)
        RunSpec.from_dict(raw)  # reject bad combinations before any training
        jobs.append((raw, str(out / f"gamma-{g:g}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_sweep_one, jobs))
    else:
        reports = [run_training(RunSpec.from_dict(raw), Path(d))["test"] for raw, d in jobs]

    header = "gamma\tbest_epoch\t" + "\t".join(f"R@{k}\tN@{k}" for k in REPORT_KS)
    rows = [header]
    for g, r in zip(grid, reports):
        rows.append(f"{g:g}\t{r.epoch}\t" + "\t".join(f"{r.recall[k]:.6f}\t{r.ndcg[k]:.6f}" for k in REPORT_KS))
    (out / "summary.tsv").write_text("\n".join(rows) + "\n")
    print(format_table({f"gamma={g:g}": r for g, r in zip(grid, reports)}, ks=(10, 20, 50)))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    for f in FIELDS:
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=f.type, default=None,
                       choices=f.choices, help=f"{f.help} (default: {f.default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsau", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="filter a raw log into a dataset snapshot")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", choices=tuple(DELIMITERS), default="tsv")
    p.add_argument("--columns", default="0,1,2")
    p.add_argument("--delimiter")
    p.add_argument("--core", type=int, default=5)
    p.add_argument("--subsample-users", type=int, default=0, help="keep this many random users, then re-filter")
    p.add_argument("--subsample-seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one configuration")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained run on a split")
    p.add_argument("run_dir")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset path overriding the run's config")
    p.add_argument("--scoring-head", choices=("auto",) + SCORING_HEADS)
    p.add_argument("--eval-workers", type=int)
    p.add_argument("--last", action="store_true", help="use the last parameters instead of the best")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-gamma", help="train once per gamma value")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="parent directory for the per-gamma runs")
    p.add_argument("--grid", help="comma-separated gamma values (default: %s)" % ",".join(map(str, GAMMA_GRID)))
    p.add_argument("--jobs", type=int, default=1, help="parallel processes")
    p.set_defaults(func=cmd_sweep_gamma)
    return parser


def _configure_logging(level: int) -> None:
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    _configure_logging(logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING)
    np.seterr(all="ignore")  # non-finite values are caught by the tensor ops themselves
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gsau: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"gsau: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"gsau: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
