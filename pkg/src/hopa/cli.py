"""Command-line surface: gen / train / eval / ablate / analyze / report.

Exit codes: 0 success, 1 configuration or validation failure (message on
stderr names the offending field or file), 2 usage errors (argparse).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import backbone_config, stage_metadata
from .config import (
    ConfigError,
    apply_overrides,
    dataset_spec_from,
    infer_config_from,
    load_config_file,
    load_dataset_spec,
    model_config_from,
    train_config_from,
)
from .data import GenerationError, builtin_spec, gen_synthetic, load_dataset, read_meta_classes
from .model import load_model
from .paired_aspp import PairedAsppConfig, scale_coverage
from .pipeline import InferConfig, evaluate, iou_table, train_model

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# helpers


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


def _write_resolved_config(out_dir: Path, values: dict):
    lines = [f"{key} = {_format_value(values[key])}" for key in sorted(values)]
    (out_dir / "run.cfg").write_text("\n".join(lines) + "\n")


def _run_values(args) -> dict:
    values = load_config_file(args.config) if args.config else {}
    values = apply_overrides(values, args.set or [])
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return values


def _load_splits(data_dir):
    data_dir = Path(data_dir)
    train_dir = data_dir / "train"
    val_dir = data_dir / "val"
    if not (train_dir / "index.txt").exists():
        raise ConfigError(f"no train split found at {train_dir / 'index.txt'}")
    train = load_dataset(train_dir)
    val = load_dataset(val_dir) if (val_dir / "index.txt").exists() else None
    return train, val, read_meta_classes(train_dir)


def _parse_int_list(text: str, flag: str):
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated integers, got {text!r}") from None


def _progress_printer(max_iter: int, quiet: bool):
    if quiet:
        return None
    step = max(1, max_iter // 20)

    def emit(record):
        it = record["iter"]
        if it % step == 0 or it == max_iter - 1:
            print(f"iter {it:>6d}/{max_iter}  lr {record['lr']:.5f}  loss {record['loss']:.4f}")

    return emit


def _train_once(data_dir, out_dir, values: dict, quiet: bool = True):
    train, val, meta_classes = _load_splits(data_dir)
    model_cfg = model_config_from(values, num_classes=meta_classes)
    train_cfg = train_config_from(values)
    infer_cfg = infer_config_from(values)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out_dir, values)
    result = train_model(
        train, model_cfg, train_cfg,
        val_samples=val, out_dir=out_dir, infer_cfg=infer_cfg,
        progress=_progress_printer(train_cfg.max_iter, quiet),
    )
    return result


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    if args.spec:
        spec = load_dataset_spec(args.spec)
    else:
        spec = builtin_spec(args.preset)
    replacements = {}
    if args.train_count is not None:
        replacements["train_count"] = args.train_count
    if args.val_count is not None:
        replacements["val_count"] = args.val_count
    if replacements:
        spec = dataclasses.replace(spec, **replacements)
    train_dir, val_dir = gen_synthetic(spec, args.seed, args.out)
    print(f"wrote {spec.train_count} train samples to {train_dir}")
    print(f"wrote {spec.val_count} val samples to {val_dir}")
    return EXIT_OK


def _cmd_train(args) -> int:
    values = _run_values(args)
    result = _train_once(args.data, args.out, values, quiet=args.quiet)
    print(f"checkpoint written to {Path(args.out) / 'checkpoint'}")
    if result.val_miou is not None:
        print(f"val mIoU {result.val_miou:.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    data_dir = Path(args.data)
    split_dir = data_dir / args.split if (data_dir / args.split / "index.txt").exists() else data_dir
    samples = load_dataset(split_dir, num_classes=model.cfg.num_classes)
    kwargs = {}
    if args.scales:
        kwargs["scales"] = tuple(float(s) for s in args.scales.replace(",", " ").split())
    if args.flip:
        kwargs["flip"] = True
    per_class, mean, _cm = evaluate(samples, model, model.cfg.num_classes, InferConfig(**kwargs))
    text, csv_text = iou_table(per_class, mean)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(csv_text if args.out.endswith(".csv") else text)
    return EXIT_OK


def _ablate(args, axis: str, levels, set_key) -> int:
    """Shared driver: train one model per (level, seed), emit mean-mIoU rows."""
    values = _run_values(args)
    seeds = _parse_int_list(args.seeds, "--seeds")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_rows = [f"{axis},seed,miou"]
    summary = []
    for level in levels:
        scores = []
        for seed in seeds:
            run_values = dict(values)
            run_values[set_key] = level
            run_values["seed"] = seed
            run_out = out_dir / "runs" / f"{axis}{level}_seed{seed}"
            result = _train_once(args.data, run_out, run_values, quiet=True)
            if result.val_miou is None:
                raise ConfigError(f"{args.data}: ablation needs a val split to score against")
            scores.append(result.val_miou)
            run_rows.append(f"{level},{seed},{result.val_miou:.6f}")
            if not args.quiet:
                print(f"{axis}={level} seed={seed} mIoU {result.val_miou:.4f}")
        summary.append((level, float(np.mean(scores))))

    table = [f"{axis},miou"] + [f"{level},{score:.6f}" for level, score in summary]
    (out_dir / f"{axis}s.csv").write_text("\n".join(table) + "\n")
    (out_dir / f"{axis}s_runs.csv").write_text("\n".join(run_rows) + "\n")
    width = max(len(axis), 5)
    lines = [f"{axis:<{width}}  mean mIoU over seeds {seeds}"]
    lines += [f"{level:<{width}}  {score:.6f}" for level, score in summary]
    text = "\n".join(lines)
    (out_dir / f"{axis}s.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_ablate_orders(args) -> int:
    levels = _parse_int_list(args.orders, "--orders")
    bad = [r for r in levels if r < 1]
    if bad:
        raise ConfigError(f"--orders: orders must be >= 1, got {bad}")
    return _ablate(args, "order", levels, "model.order")


def _cmd_ablate_pairing(args) -> int:
    return _ablate(args, "combination", [1, 2], "model.combination")


def _cmd_analyze_scales(args) -> int:
    cfg = backbone_config(args.backbone)
    md = stage_metadata(cfg)
    jumps = ",".join(str(j) for j in md.jumps)
    rfs = ",".join(str(r) for r in md.rfs)
    lines = [f"backbone={args.backbone} jumps={jumps} rfs={rfs}"]
    csv_rows = [["combination", "branch", "stage", "rate", "lo", "hi", "union_span", "overlap"]]
    summaries = {}
    for combination in (1, 2):
        cov = scale_coverage(
            PairedAsppConfig(in_channels=(1, 1, 1, 1), combination=combination), md
        )
        summaries[combination] = cov
        for b in cov.branches:
            rate = "global" if b.rate is None else str(b.rate)
            hi = "-" if b.hi is None else str(b.hi)
            lines.append(
                f"combination={combination} branch={b.label} stage={b.stage} "
                f"rate={rate} lo={b.lo} hi={hi}"
            )
            csv_rows.append(
                [combination, b.label, b.stage, rate, b.lo,
                 "" if b.hi is None else b.hi, cov.union_span, cov.overlap]
            )
        lines.append(
            f"combination={combination} union_span={cov.union_span} overlap={cov.overlap}"
        )
    wider = max((1, 2), key=lambda c: summaries[c].union_span)
    tighter = min((1, 2), key=lambda c: summaries[c].overlap)
    lines.append(f"wider_union=combination{wider} lower_overlap=combination{tighter}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.csv:
        # branch labels contain commas, so quote fields properly
        with open(args.csv, "w", newline="") as f:
            csv.writer(f).writerows(csv_rows)
    return EXIT_OK


def _report_rows(path: Path):
    """(source, metric, value) rows from one run directory or metric file."""
    rows = []

    def from_iou_csv(p: Path, source: str):
        for line in p.read_text().splitlines()[1:]:
            name, value = line.split(",")
            if value:
                rows.append((source, f"iou.{name}" if name != "mean" else "iou.mean", value))

    def from_axis_csv(p: Path, source: str):
        header = p.read_text().splitlines()
        axis = header[0].split(",")[0]
        for line in header[1:]:
            level, value = line.split(",")[:2]
            rows.append((source, f"miou.{axis}{level}", value))

    def from_metrics(p: Path, source: str):
        records = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
        if records:
            rows.append((source, "loss.first", f"{records[0]['loss']:.6f}"))
            rows.append((source, "loss.final", f"{records[-1]['loss']:.6f}"))

    if path.is_dir():
        source = path.name
        if (path / "iou.csv").exists():
            from_iou_csv(path / "iou.csv", source)
        for axis in ("order", "combination"):
            table = path / f"{axis}s.csv"
            if table.exists():
                from_axis_csv(table, source)
        if (path / "metrics.jsonl").exists():
            from_metrics(path / "metrics.jsonl", source)
        if not rows:
            raise ConfigError(f"{path}: no metric files (iou.csv, *s.csv, metrics.jsonl) found")
    elif path.suffix == ".jsonl":
        from_metrics(path, path.stem)
    elif path.suffix == ".csv":
        first = path.read_text().splitlines()[0]
        if first.startswith("class,"):
            from_iou_csv(path, path.stem)
        else:
            from_axis_csv(path, path.stem)
    else:
        raise ConfigError(f"{path}: cannot interpret as a metrics source")
    return rows


def _cmd_report(args) -> int:
    rows = []
    for raw in args.inputs:
        path = Path(raw)
        if not path.exists():
            raise ConfigError(f"report input does not exist: {path}")
        rows.extend(_report_rows(path))
    if not rows:
        raise ConfigError("no metrics found in any input")
    src_w = max(len("source"), max(len(r[0]) for r in rows))
    met_w = max(len("metric"), max(len(r[1]) for r in rows))
    lines = [f"{'source':<{src_w}}  {'metric':<{met_w}}  value"]
    lines += [f"{s:<{src_w}}  {m:<{met_w}}  {v}" for s, m, v in rows]
    text = "\n".join(lines)
    csv_text = "\n".join(["source,metric,value"] + [f"{s},{m},{v}" for s, m, v in rows])
    print(text)
    if args.out:
        base = Path(args.out)
        base.with_suffix(".txt").write_text(text + "\n")
        base.with_suffix(".csv").write_text(csv_text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, help="root seed override")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hopa",
        description="High-order paired-pyramid segmentation: data synthesis, training, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a train/val dataset")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", help="builtin dataset name (colors2, order2, order3)")
    group.add_argument("--spec", help="dataset spec file")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-count", type=int, help="override training sample count")
    p.add_argument("--val-count", type=int, help="override validation sample count")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset root with train/ and val/")
    p.add_argument("--out", required=True, help="run directory for checkpoint + metrics")
    _add_run_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset root or split directory")
    p.add_argument("--split", default="val")
    p.add_argument("--scales", help="comma-separated inference scales")
    p.add_argument("--flip", action="store_true", help="average with mirrored inputs")
    p.add_argument("--out", help="write the IoU table here (.csv for CSV)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="comparative training sweeps")
    ablate_sub = p.add_subparsers(dest="ablation", required=True)

    q = ablate_sub.add_parser("orders", help="sweep the polynomial order")
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    q.add_argument("--orders", default="1,2,3", help="comma-separated orders to sweep")
    _add_run_flags(q)
    q.set_defaults(func=_cmd_ablate_orders)

    q = ablate_sub.add_parser("pairing", help="combination 1 versus combination 2")
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seeds", default="0,1,2")
    _add_run_flags(q)
    q.set_defaults(func=_cmd_ablate_pairing)

    p = sub.add_parser("analyze", help="structural analyses (no training)")
    analyze_sub = p.add_subparsers(dest="analysis", required=True)
    q = analyze_sub.add_parser("scales", help="receptive-field coverage per wiring")
    q.add_argument("--backbone", default="toy")
    q.add_argument("--out", help="also write the text table here")
    q.add_argument("--csv", help="also write branch rows as CSV here")
    q.set_defaults(func=_cmd_analyze_scales)

    p = sub.add_parser("report", help="merge metric files into one table")
    p.add_argument("inputs", nargs="+", help="run directories or metric files")
    p.add_argument("--out", help="basename for .txt and .csv outputs")
    p.set_defaults(func=_cmd_report)

    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, GenerationError, FileNotFoundError, NotADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main():
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
