"""Command-line front end: prepare, train, evaluate, predict, synth, report.

Exit codes: 0 success, 2 usage or validation error, 3 data error (unreadable
or malformed inputs, bad checkpoints), 4 internal invariant violation.

Every option can also come from a key=value config file (--config); values
given as flags win. Commands that write into --out also write run_config.txt
echoing the fully resolved option set. Output files never embed timestamps,
so identical inputs and seeds reproduce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (
    DataError,
    SyntheticSpec,
    Vocabulary,
    binarize_for_inference,
    build_vocab_and_binarize,
    clean,
    generate_synthetic,
    ingest,
    label_frequency_report,
    load_dataset,
    save_dataset,
    stratified_split,
)
from .linalg import InvariantError
from .metrics import MetricError, render_group_table, render_summary_row
from .nn import BASELINE_IDS, CollabResConfig, build_baseline, build_collabres
from .training import (
    CheckpointError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

MODEL_IDS = BASELINE_IDS + ("collabres",)
SPLIT_NAMES = ("train", "dev", "test")
METRIC_NAMES = ("primary_accuracy", "subset_accuracy", "sample_f1")


# ---------------------------------------------------------------------------
# option plumbing: argparse defaults stay None so config-file values can fill
# anything the command line left unset; real defaults are applied last
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Opt:
    dest: str
    default: object
    convert: object  # str -> value, also validates config-file input


def _boolean(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _float_list(text: str):
    if not text.strip():
        return ()
    try:
        return tuple(float(tok) for tok in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}")


def _int_pair(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected LO,HI, got {text!r}")
    return (int(parts[0]), int(parts[1]))


def _str_list(text: str):
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


def _choice(valid, what: str):
    def convert(text: str):
        if text not in valid:
            raise ValueError(f"invalid {what} {text!r}; choose from "
                             f"{', '.join(valid)}")
        return text
    return convert


class _Command:
    """One subcommand: its argparse parser plus the option table."""

    def __init__(self, subparsers, name: str, help_text: str, handler):
        self.parser = subparsers.add_parser(name, help=help_text,
                                            description=help_text)
        self.opts: list = []
        self.handler = handler

    def positional(self, dest: str, help_text: str):
        self.parser.add_argument(dest, help=help_text)

    def opt(self, flag: str, default, convert=str, help_text: str = "",
            required: bool = False, metavar=None):
        dest = flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, dest=dest, default=None, type=convert,
                                 required=required, help=help_text,
                                 metavar=metavar)
        if not required:
            self.opts.append(_Opt(dest=dest, default=default, convert=convert))

    def flag(self, name: str, help_text: str):
        dest = name.lstrip("-").replace("-", "_")
        self.parser.add_argument(name, dest=dest, action="store_const",
                                 const=True, default=None, help=help_text)
        self.opts.append(_Opt(dest=dest, default=False, convert=_boolean))

    def add_shared(self, with_out: bool = True, out_required: bool = False):
        if with_out:
            self.opt("--out", None, str, "output directory",
                     required=out_required)
        self.opt("--seed", 0, int, "seed for every random choice")
        self.opt("--threads", 1, int,
                 "BLAS thread cap (1 keeps runs bitwise reproducible)")
        self.parser.add_argument("--config", default=None,
                                 help="key=value file supplying option "
                                      "defaults; flags win")


def _load_config_file(path) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise DataError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve_options(args, command: _Command) -> None:
    file_values = _load_config_file(args.config) if args.config else {}
    known = {o.dest: o for o in command.opts}
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise ValueError(f"config file: unknown keys {', '.join(unknown)}")
    for opt in command.opts:
        value = getattr(args, opt.dest, None)
        if value is None:
            if opt.dest in file_values:
                value = opt.convert(file_values[opt.dest])
            else:
                value = opt.default
        setattr(args, opt.dest, value)


def _echo_config(args, command: _Command, out_dir) -> None:
    lines = []
    for opt in sorted(command.opts, key=lambda o: o.dest):
        if opt.dest == "out":  # the location is not a run parameter
            continue
        value = getattr(args, opt.dest)
        if isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        else:
            rendered = str(value)
        lines.append(f"{opt.dest}={rendered}")
    _write(os.path.join(out_dir, "run_config.txt"), "\n".join(lines) + "\n")


def _write(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_prepare(args) -> int:
    records = ingest(args.raw_csv)
    cleaned, report = clean(records, min_instances=args.min_instances,
                            cancelled_statuses=args.cancelled_statuses)
    if not cleaned:
        raise DataError(f"{args.raw_csv}: no episodes survive cleaning")
    ds = build_vocab_and_binarize(cleaned)
    splits = stratified_split(ds, ratios=args.ratios, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for name, split in zip(SPLIT_NAMES, splits):
        save_dataset(split, os.path.join(args.out, name))
    _write(os.path.join(args.out, "cleaning_report.txt"),
           "\n".join(report.summary_lines()) + "\n")
    _echo_config(args, COMMANDS["prepare"], args.out)
    sizes = "/".join(str(s.n_samples) for s in splits)
    print(f"prepared {ds.n_samples} episodes "
          f"({len(ds.feature_vocab)} medication tokens, "
          f"{len(ds.label_vocab)} categories) into {sizes} at {args.out}")
    return 0


def _scaled(width: int, scale: float) -> int:
    return max(1, int(round(width * scale)))


def _build_model_spec(args, input_dim: int, output_dim: int):
    if args.model == "collabres":
        cfg = CollabResConfig(
            n_branches=args.branches,
            branch_hidden=_scaled(args.branch_hidden, args.width_scale),
            branch_out=_scaled(args.branch_out, args.width_scale),
            dropout_rates=args.dropouts or None,
            fusion_dim=_scaled(args.fusion_dim, args.width_scale),
            fusion_dropout=args.fusion_dropout,
        )
        return build_collabres(input_dim, output_dim, cfg)
    return build_baseline(args.model, input_dim, output_dim,
                          width_scale=args.width_scale)


def _cmd_train(args) -> int:
    train_ds = load_dataset(os.path.join(args.data_dir, "train"))
    dev_ds = load_dataset(os.path.join(args.data_dir, "dev"))
    spec = _build_model_spec(args, len(train_ds.feature_vocab),
                             len(train_ds.label_vocab))
    cfg = TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        early_stop_patience=args.patience,
        early_stop_metric=args.metric,
        seed=args.seed,
        shuffle=not args.no_shuffle,
        learning_rate=args.learning_rate,
        beta1=args.beta1,
        beta2=args.beta2,
        epsilon=args.epsilon,
        threshold=args.threshold,
    )
    ckpt, history = train(spec, train_ds, dev_ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(ckpt, os.path.join(args.out, "model.ckpt"))
    rows = ["epoch\ttrain_loss\tval_metric"]
    rows += [f"{e.epoch}\t{e.train_loss!r}\t{e.val_metric!r}"
             for e in history.epochs]
    _write(os.path.join(args.out, "history.tsv"), "\n".join(rows) + "\n")
    _echo_config(args, COMMANDS["train"], args.out)
    best = history.epochs[history.best_epoch - 1]
    print(f"trained {spec.name}: epochs={len(history.epochs)} "
          f"best_epoch={history.best_epoch} "
          f"val_{cfg.early_stop_metric}={best.val_metric:.4f} "
          f"stop={history.stop_reason}")
    return 0


def _resolve_dataset_dir(data_path: str, split: str) -> str:
    if os.path.isfile(os.path.join(data_path, "meta.json")):
        return data_path
    return os.path.join(data_path, split)


def _cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(_resolve_dataset_dir(args.data_dir, args.split))
    group_columns = args.group_by
    try:
        report, demo_report = evaluate(
            ckpt, ds, group_columns=group_columns,
            threshold=args.threshold, include_f1_variants=args.f1_variants)
    except ValueError as exc:
        if group_columns and args.keep_going:
            print(f"warning: {exc}; continuing without --group-by",
                  file=sys.stderr)
            report, demo_report = evaluate(
                ckpt, ds, threshold=args.threshold,
                include_f1_variants=args.f1_variants)
        else:
            raise
    summary = render_summary_row(report, ckpt.spec.name)
    chapters = render_group_table(report, top_k=args.top_k)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "summary.tsv"), summary)
        _write(os.path.join(args.out, "chapters.tsv"), chapters)
        if demo_report is not None:
            _write(os.path.join(args.out, "groups.tsv"),
                   render_group_table(demo_report))
        _echo_config(args, COMMANDS["evaluate"], args.out)
        print(f"evaluated {ds.n_samples} samples; reports in {args.out}")
    else:
        sys.stdout.write(summary)
        sys.stdout.write(f"\ntop {args.top_k} chapters by primary accuracy:\n")
        sys.stdout.write(chapters)
        if demo_report is not None:
            sys.stdout.write("\ngrouped by " + ",".join(group_columns) + ":\n")
            sys.stdout.write(render_group_table(demo_report))
    return 0


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    records = ingest(args.input_csv)
    if not records:
        raise DataError(f"{args.input_csv}: no episodes")
    x, episode_ids, unknown = binarize_for_inference(
        records, _feature_vocab(ckpt), drop_cancelled=not args.keep_cancelled)
    if unknown:
        print(f"warning: skipped {unknown} medication tokens absent from the "
              f"model vocabulary", file=sys.stderr)
    result = predict(ckpt, x, threshold=args.threshold)
    labels = ckpt.label_vocab
    pred_lines = ["episode_id\trank\tcode\tscore"]
    set_lines = ["episode_id\tcodes"]
    top = max(1, args.top)
    for i, eid in enumerate(episode_ids):
        order = np.argsort(-result.scores[i], kind="stable")[:top]
        for rank, j in enumerate(order, start=1):
            pred_lines.append(f"{eid}\t{rank}\t{labels[j]}\t"
                              f"{result.scores[i, j]:.6f}")
        codes = " ".join(labels[j] for j in result.label_sets[i])
        set_lines.append(f"{eid}\t{codes}")
    predictions = "\n".join(pred_lines) + "\n"
    sets = "\n".join(set_lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "predictions.tsv"), predictions)
        _write(os.path.join(args.out, "sets.tsv"), sets)
        _echo_config(args, COMMANDS["predict"], args.out)
        print(f"wrote predictions for {len(episode_ids)} episodes to {args.out}")
    else:
        sys.stdout.write(predictions)
    return 0


def _feature_vocab(ckpt) -> Vocabulary:
    return Vocabulary(tokens=tuple(ckpt.feature_vocab), kind="medication-dose")


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_samples=args.samples,
        n_med_tokens=args.tokens,
        n_labels=args.labels,
        noise=args.noise,
        seed=args.seed,
        meds_per_sample=args.meds_per_sample,
        support_size=args.support_size,
    )
    ds, oracle = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, os.path.join(args.out, "full"))
    if not args.no_split:
        splits = stratified_split(ds, ratios=args.ratios, seed=args.seed)
        for name, split in zip(SPLIT_NAMES, splits):
            save_dataset(split, os.path.join(args.out, name))
    oracle_doc = {
        "generator": {
            "n_samples": spec.n_samples,
            "n_med_tokens": spec.n_med_tokens,
            "n_labels": spec.n_labels,
            "noise": spec.noise,
            "seed": spec.seed,
            "meds_per_sample": list(spec.meds_per_sample),
            "support_size": list(spec.support_size),
        },
        "supports": [list(s) for s in oracle.supports],
    }
    _write(os.path.join(args.out, "oracle.json"),
           json.dumps(oracle_doc, sort_keys=True, indent=2) + "\n")
    _echo_config(args, COMMANDS["synth"], args.out)
    print(f"generated {ds.n_samples} synthetic episodes at {args.out}")
    return 0


def _cmd_report(args) -> int:
    ds = load_dataset(_resolve_dataset_dir(args.data_dir, args.split))
    freq = label_frequency_report(ds, top_k=args.top_k,
                                  min_instances=args.min_instances)
    text = freq.render()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "label_frequency.tsv"), text)
        _echo_config(args, COMMANDS["report"], args.out)
        print(f"wrote label frequencies to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser assembly and entry point
# ---------------------------------------------------------------------------

COMMANDS: dict = {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collabres",
        description="Multi-label diagnosis-code prediction from prescribed "
                    "medications: data preparation, training, evaluation.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    c = _Command(subparsers, "prepare",
                 "ingest a raw episode CSV, clean, binarize and split",
                 _cmd_prepare)
    c.positional("raw_csv", "episode CSV in the documented long format")
    c.opt("--min-instances", 3, int,
          "drop diagnosis categories seen in fewer episodes than this")
    c.opt("--cancelled-statuses", ("cancelled",), _str_list,
          "comma-separated statuses treated as cancelled prescriptions")
    c.opt("--ratios", (0.70, 0.10, 0.20), _float_list,
          "train,dev,test fractions; must sum to 1")
    c.add_shared(out_required=True)
    COMMANDS["prepare"] = c

    c = _Command(subparsers, "train",
                 "train a model on a prepared dataset directory", _cmd_train)
    c.positional("data_dir", "directory holding train/ and dev/ datasets")
    c.opt("--model", "collabres", _choice(MODEL_IDS, "model id"),
          f"one of {', '.join(MODEL_IDS)}")
    c.opt("--batch-size", 2048, int, "minibatch size")
    c.opt("--max-epochs", 100, int, "epoch cap")
    c.opt("--patience", 10, int,
          "stop after this many non-improving validation epochs")
    c.opt("--metric", "primary_accuracy", _choice(METRIC_NAMES, "metric"),
          "validation metric for early stopping")
    c.opt("--learning-rate", 1e-3, float, "Adam learning rate")
    c.opt("--beta1", 0.9, float, "Adam first-moment decay")
    c.opt("--beta2", 0.999, float, "Adam second-moment decay")
    c.opt("--epsilon", 1e-8, float, "Adam denominator offset")
    c.opt("--threshold", 0.5, float, "decision threshold stored for inference")
    c.opt("--width-scale", 1.0, float,
          "multiply every hidden width (small values for smoke tests)")
    c.opt("--branches", 4, int, "collabres: number of parallel branches")
    c.opt("--branch-hidden", 600, int, "collabres: branch hidden width")
    c.opt("--branch-out", 400, int, "collabres: branch output width")
    c.opt("--dropouts", (), _float_list,
          "collabres: per-branch dropout rates (default spread 0.1-0.4)")
    c.opt("--fusion-dim", 600, int, "collabres: fusion block width")
    c.opt("--fusion-dropout", 0.0, float, "collabres: fusion dropout rate")
    c.flag("--no-shuffle", "keep epoch order fixed (diagnostics only)")
    c.add_shared(out_required=True)
    COMMANDS["train"] = c

    c = _Command(subparsers, "evaluate",
                 "score a checkpoint on a labelled split", _cmd_evaluate)
    c.positional("checkpoint", "checkpoint file from train")
    c.positional("data_dir", "dataset directory, or a parent with splits")
    c.opt("--split", "test", _choice(SPLIT_NAMES, "split"),
          "which split to use when data_dir holds several")
    c.opt("--group-by", (), _str_list,
          "demographic grouping columns: gender,age")
    c.opt("--top-k", 5, int, "chapter rows in the ranked accuracy table")
    c.opt("--threshold", None, float, "override the stored decision threshold")
    c.flag("--f1-variants", "also compute micro and macro F1")
    c.flag("--keep-going", "demographic grouping failures become warnings")
    c.add_shared()
    COMMANDS["evaluate"] = c

    c = _Command(subparsers, "predict",
                 "rank diagnosis codes for new episodes", _cmd_predict)
    c.positional("checkpoint", "checkpoint file from train")
    c.positional("input_csv", "episode CSV (MED rows; DX rows are ignored)")
    c.opt("--threshold", None, float, "override the stored decision threshold")
    c.opt("--top", 10, int, "ranked codes per episode")
    c.flag("--keep-cancelled", "binarize cancelled prescriptions too")
    c.add_shared()
    COMMANDS["predict"] = c

    c = _Command(subparsers, "synth",
                 "generate a synthetic dataset with a known generator",
                 _cmd_synth)
    c.opt("--samples", 10_000, int, "number of episodes")
    c.opt("--tokens", 300, int, "medication vocabulary size")
    c.opt("--labels", 50, int, "label count")
    c.opt("--noise", 0.05, float, "per-label flip probability, in [0, 0.5)")
    c.opt("--meds-per-sample", (10, 20), _int_pair,
          "inclusive range LO,HI of medications per episode")
    c.opt("--support-size", (8, 14), _int_pair,
          "inclusive range LO,HI of medications activating a label")
    c.opt("--ratios", (0.70, 0.10, 0.20), _float_list,
          "train,dev,test fractions for the emitted splits")
    c.flag("--no-split", "emit only the full dataset")
    c.add_shared(out_required=True)
    COMMANDS["synth"] = c

    c = _Command(subparsers, "report",
                 "label-frequency table for a dataset", _cmd_report)
    c.positional("data_dir", "dataset directory, or a parent with splits")
    c.opt("--split", "train", _choice(SPLIT_NAMES, "split"),
          "which split to use when data_dir holds several")
    c.opt("--top-k", 30, int, "rows in the frequency table")
    c.opt("--min-instances", 3, int, "long-tail threshold")
    c.add_shared()
    COMMANDS["report"] = c

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = COMMANDS[args.command]
    try:
        _resolve_options(args, command)
        if args.threads < 1:
            raise ValueError(f"--threads must be >= 1, got {args.threads}")
        with threadpool_limits(limits=args.threads):
            return command.handler(args)
    except (DataError, MetricError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - the CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
