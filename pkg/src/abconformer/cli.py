"""Command-line pipeline: labeling, folds, encoding, training, prediction,
evaluation, threshold sweeps, attention export, and gradient checking.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import train as train_mod
from .core import ChainRole, Config, DataError, NumericsError, parse_config
from .encoding import one_hot_context, write_matrix

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_ROLES = [role.value for role in ChainRole]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(parser: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    parser.add_argument("--threads", type=int, default=1, help="torch CPU threads (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abconformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("label", help="derive interface labels from a structure file")
    p.add_argument("--structure", required=True, help="fixed-column ATOM record file")
    p.add_argument("--antigen", required=True, help="antigen chain id")
    p.add_argument("--antibody", required=True, help="comma-separated antibody chain ids")
    p.add_argument("--out", required=True, help="output JSON path")
    _add_common(p, config=False)

    p = sub.add_parser("folds", help="build cluster-stratified cross-validation folds")
    p.add_argument("--manifest", required=True, help="JSONL dataset manifest")
    p.add_argument("--clusters", help="TSV id<TAB>cluster (optional if manifest has clusters)")
    p.add_argument("--k", type=int, default=5, help="fold count (default 5)")
    p.add_argument("--out", required=True, help="output TSV path")
    _add_common(p, config=False)

    p = sub.add_parser("encode", help="contextual one-hot encode sequences to matrix files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--window", type=int, default=15, help="context half-width (default 15)")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p, config=False)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", choices=["external", "onehot"], default="external")
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fold-file", help="TSV id<TAB>fold; train on records outside --fold")
    p.add_argument("--fold", type=int, help="validation fold index excluded from training")
    defaults = Config()
    p.add_argument("--epochs", type=int, help=f"override config epochs (default {defaults.epochs})")
    p.add_argument(
        "--batch-size", type=int, help=f"override config batch_size (default {defaults.batch_size})"
    )
    p.add_argument(
        "--learning-rate",
        type=float,
        help=f"override config learning_rate (default {defaults.learning_rate})",
    )
    p.add_argument(
        "--max-steps",
        type=int,
        help=f"override config max_steps; 0 = no cap (default {defaults.max_steps})",
    )
    p.add_argument(
        "--final-only", action="store_true", help="skip per-epoch checkpoints, keep finals"
    )
    _add_common(p)

    for name, help_text in (
        ("predict", "antibody-specific interface prediction"),
        ("pan-epitope", "antibody-agnostic epitope prediction"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--ckpt", required=True, help="checkpoint file")
        p.add_argument("--encoder", choices=["external", "onehot"], default="external")
        p.add_argument("--window", type=int, default=15)
        p.add_argument("--out", required=True, help="output directory for prediction JSON")
        if name == "pan-epitope":
            p.add_argument("--threshold", type=float, help="epitope call cutoff")
        else:
            p.add_argument("--export-attn", action="store_true", help="also write attention maps")
        _add_common(p)

    p = sub.add_parser("evaluate", help="metrics over predictions and manifest labels")
    p.add_argument("--predictions", required=True, help="directory of prediction JSON files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_common(p, config=False)

    p = sub.add_parser("sweep", help="confusion metrics across a threshold grid")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", default="0:1:0.05", help="start:stop:step (default 0:1:0.05)")
    p.add_argument("--out", required=True, help="output CSV path")
    _add_common(p, config=False)

    p = sub.add_parser("export-attn", help="write final-step attention maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--encoder", choices=["external", "onehot"], default="external")
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    p.add_argument("--step", type=float, default=1e-5, help="central difference step")
    p.add_argument("--in-width", type=int, default=8, help="synthetic feature width")
    p.add_argument(
        "--lengths", default="6,5,4", help="ag,abh,abl synthetic chain lengths (default 6,5,4)"
    )
    _add_common(p)

    return parser


def _load_config(args) -> Config:
    config = parse_config(args.config) if getattr(args, "config", None) else Config()
    overrides = {}
    for flag, key in (
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("learning_rate", "learning_rate"),
        ("max_steps", "max_steps"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        config = config.replace(**overrides)
    config.validate()
    return config


def _build_model_from_ckpt(config: Config, ckpt: str) -> model_mod.ABConformer:
    header = train_mod.read_checkpoint_header(ckpt)
    in_width = header.get("in_width")
    if not isinstance(in_width, int) or in_width < 1:
        raise DataError(f"{ckpt}: checkpoint header missing input width", module="train")
    model = model_mod.ABConformer(config, in_width)
    train_mod.load_checkpoint(ckpt, model, config)
    return model


def _cmd_label(args) -> int:
    chains = data_mod.parse_structure(args.structure)
    if args.antigen not in chains:
        raise DataError(f"antigen chain '{args.antigen}' not in structure", module="data")
    ab_ids = [c for c in args.antibody.split(",") if c]
    if not ab_ids:
        raise DataError("no antibody chain ids given", module="data")
    for cid in ab_ids:
        if cid not in chains:
            raise DataError(f"antibody chain '{cid}' not in structure", module="data")
    ag_atoms = chains[args.antigen]
    ag_combined = None
    ab_labels = {}
    for cid in ab_ids:
        ag_l, ab_l = data_mod.label_interfaces(ag_atoms, chains[cid])
        ab_labels[cid] = [int(v) for v in ab_l]
        ag_combined = ag_l if ag_combined is None else np.maximum(ag_combined, ag_l)
    out = {
        "antigen": {"chain": args.antigen, "labels": [int(v) for v in ag_combined]},
        "antibody": ab_labels,
    }
    Path(args.out).write_text(json.dumps(out, sort_keys=True) + "\n")
    print(f"labeled {len(ag_combined)} antigen residues vs {len(ab_ids)} antibody chain(s)")
    return EXIT_OK


def _cmd_folds(args) -> int:
    records = data_mod.load_manifest(args.manifest)
    if args.clusters:
        records = data_mod.attach_clusters(records, data_mod.load_clusters(args.clusters))
    folds = data_mod.build_folds(records, k=args.k, seed=args.seed)
    data_mod.write_folds(folds, args.out)
    sizes = [sum(1 for f in folds.values() if f == i) for i in range(args.k)]
    print(f"assigned {len(folds)} records to {args.k} folds: sizes {sizes}")
    return EXIT_OK


def _cmd_encode(args) -> int:
    records = data_mod.load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    updated = []
    n_files = 0
    for record in records:
        emb_path = dict(record.emb_path)
        for role in ChainRole:
            seq = record.seq[role]
            if seq is None:
                continue
            encoded = one_hot_context(seq, args.window)
            name = f"{record.id}.{role.value}.emb"
            write_matrix(out_dir / name, encoded.features)
            emb_path[role] = name
            n_files += 1
        updated.append(
            data_mod.ComplexRecord(
                record.id, dict(record.seq), dict(record.labels), emb_path, record.cluster
            )
        )
    data_mod.write_manifest(updated, out_dir / "manifest.jsonl")
    print(f"encoded {n_files} chains into {out_dir}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_config(args)
    records = data_mod.load_manifest(args.manifest)
    if (args.fold_file is None) != (args.fold is None):
        raise _UsageError("--fold-file and --fold must be given together")
    if args.fold_file:
        folds = data_mod.load_folds(args.fold_file)
        missing = [r.id for r in records if r.id not in folds]
        if missing:
            raise DataError(f"records missing fold assignment: {missing[:5]}", module="data")
        records = [r for r in records if folds[r.id] != args.fold]
        if not records:
            raise DataError("no training records left after fold exclusion", module="data")
    result = train_mod.train_loop(
        records,
        config,
        args.out,
        seed=args.seed,
        encoder=args.encoder,
        window=args.window,
        epoch_checkpoints=not args.final_only,
    )
    final = result.losses[-1] if result.losses else float("nan")
    print(
        f"trained {result.steps} steps over {result.epochs_run} epochs; "
        f"final batch loss {final:.6f}; checkpoints in {args.out}"
    )
    return EXIT_OK


def _cmd_predict(args, pan: bool) -> int:
    config = _load_config(args)
    model = _build_model_from_ckpt(config, args.ckpt)
    records = data_mod.load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for record in records:
        if pan:
            pred = model_mod.predict_pan_epitope(
                record, model, config, args.encoder, args.window, threshold=args.threshold
            )
        else:
            record = data_mod.resolve_antibody_chains(record)
            pred = model_mod.predict(record, model, config, args.encoder, args.window)
            if args.export_attn:
                written = model_mod.export_attention(pred, out_dir)
                pred.map_files = {label: p.name for label, p in written.items()}
        model_mod.write_prediction(pred, out_dir)
    print(f"wrote {len(records)} prediction files to {out_dir}")
    return EXIT_OK


def _collect_scores(predictions_dir: str, records) -> dict[str, dict[str, np.ndarray]]:
    """Per-role pooled scores/calls/labels and the per-complex groups."""
    per_role: dict[str, dict[str, list]] = {
        r: {"scores": [], "calls": [], "labels": [], "by_complex": []} for r in _ROLES
    }
    pred_dir = Path(predictions_dir)
    for record in records:
        pred = model_mod.load_prediction(pred_dir / f"{record.id}.json")
        resolved = data_mod.resolve_antibody_chains(record)
        for role in ChainRole:
            probs = pred.get("prob", {}).get(role.value)
            if probs is None:
                continue
            labels = resolved.labels[role]
            if labels is None:
                raise DataError(
                    f"record {record.id}: no labels for chain {role.value}", module="data"
                )
            if len(labels) != len(probs):
                raise DataError(
                    f"record {record.id}: prediction length {len(probs)} != "
                    f"label length {len(labels)} for {role.value}",
                    module="data",
                )
            calls = pred.get("call", {}).get(role.value)
            slot = per_role[role.value]
            slot["scores"].append(np.asarray(probs, dtype=np.float64))
            slot["calls"].append(np.asarray(calls, dtype=np.int64))
            slot["labels"].append(np.asarray(labels, dtype=np.int64))
            slot["by_complex"].append(record.id)
    return per_role


def _cmd_evaluate(args) -> int:
    records = data_mod.load_manifest(args.manifest)
    per_role = _collect_scores(args.predictions, records)
    rows = []
    for role in _ROLES:
        slot = per_role[role]
        if not slot["scores"]:
            continue
        scores = np.concatenate(slot["scores"])
        calls = np.concatenate(slot["calls"])
        labels = np.concatenate(slot["labels"])
        binary = metrics_mod.confusion_metrics(calls, labels)
        report = metrics_mod.MetricsReport(
            binary=binary,
            pcc=metrics_mod.pcc(scores, labels),
            roc_auc=metrics_mod.roc_auc(scores, labels),
            pr_auc=metrics_mod.pr_auc(scores, labels),
            brier=metrics_mod.brier(scores, labels),
            bce=metrics_mod.bce(scores, labels),
        )
        for name, value, flag in metrics_mod.report_rows(report):
            rows.append((role, name, value, flag))
        # Secondary rows: unweighted means of per-complex metrics.
        by_metric: dict[str, list[float]] = {}
        for s, c, y in zip(slot["scores"], slot["calls"], slot["labels"]):
            cb = metrics_mod.confusion_metrics(c, y)
            for name in ("iou", "prec", "rec", "f1", "mcc"):
                by_metric.setdefault(name, []).append(getattr(cb, name))
            by_metric.setdefault("pcc", []).append(metrics_mod.pcc(s, y))
            by_metric.setdefault("roc_auc", []).append(metrics_mod.roc_auc(s, y))
            by_metric.setdefault("pr_auc", []).append(metrics_mod.pr_auc(s, y))
            by_metric.setdefault("brier", []).append(metrics_mod.brier(s, y))
            by_metric.setdefault("bce", []).append(metrics_mod.bce(s, y))
        for name, values in by_metric.items():
            rows.append((role, f"{name}_complex_mean", float(np.mean(values)), ""))
    metrics_mod.write_metrics_csv(rows, args.out)
    print(f"wrote metrics for {sum(1 for r in _ROLES if per_role[r]['scores'])} roles to {args.out}")
    return EXIT_OK


def _parse_grid(pattern: str) -> np.ndarray:
    parts = pattern.split(":")
    if len(parts) == 3:
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise _UsageError("grid step must be positive")
        n = int(round((stop - start) / step)) + 1
        return np.clip(start + step * np.arange(max(n, 1)), 0.0, 1.0)
    try:
        return np.clip(np.asarray([float(p) for p in pattern.split(",")]), 0.0, 1.0)
    except ValueError as exc:
        raise _UsageError(f"cannot parse grid '{pattern}'") from exc


def _cmd_sweep(args) -> int:
    records = data_mod.load_manifest(args.manifest)
    per_role = _collect_scores(args.predictions, records)
    grid = _parse_grid(args.grid)
    rows = []
    for role in _ROLES:
        slot = per_role[role]
        if not slot["scores"]:
            continue
        scores = np.concatenate(slot["scores"])
        labels = np.concatenate(slot["labels"])
        for threshold, report in metrics_mod.threshold_sweep(scores, labels, grid):
            for name in ("iou", "prec", "rec", "f1", "mcc"):
                rows.append((role, threshold, name, getattr(report, name)))
    metrics_mod.write_sweep_csv(rows, args.out)
    print(f"wrote sweep over {len(grid)} thresholds to {args.out}")
    return EXIT_OK


def _cmd_export_attn(args) -> int:
    config = _load_config(args)
    model = _build_model_from_ckpt(config, args.ckpt)
    records = data_mod.load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_files = 0
    for record in records:
        record = data_mod.resolve_antibody_chains(record)
        if not (record.has(ChainRole.ABH) or record.has(ChainRole.ABL)):
            raise DataError("no sliding maps in agnostic mode", module="model")
        pred = model_mod.predict(record, model, config, args.encoder, args.window)
        n_files += len(model_mod.export_attention(pred, out_dir))
    print(f"wrote {n_files} attention maps to {out_dir}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    config = parse_config(args.config) if args.config else train_mod.grad_check_config()
    lengths = [int(v) for v in args.lengths.split(",")]
    if len(lengths) != 3 or min(lengths) < 1:
        raise _UsageError("--lengths must be three positive integers 'ag,abh,abl'")
    torch.manual_seed(args.seed)
    model = model_mod.ABConformer(config, args.in_width).double()
    batch = train_mod.synthetic_batch(
        {ChainRole.AG: lengths[0], ChainRole.ABH: lengths[1], ChainRole.ABL: lengths[2]},
        args.in_width,
        seed=args.seed,
    )
    result = train_mod.gradient_check(model, batch, step=args.step)
    print(
        f"max relative error {result.max_rel_err:.3e} over {result.n_params} parameters "
        f"(worst: {result.worst_param})"
    )
    if not result.passed:
        print("gradient check FAILED (threshold 1e-4)", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient check passed (threshold 1e-4)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    try:
        if args.command == "label":
            return _cmd_label(args)
        if args.command == "folds":
            return _cmd_folds(args)
        if args.command == "encode":
            return _cmd_encode(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "predict":
            return _cmd_predict(args, pan=False)
        if args.command == "pan-epitope":
            return _cmd_predict(args, pan=True)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "export-attn":
            return _cmd_export_attn(args)
        if args.command == "grad-check":
            return _cmd_grad_check(args)
        raise _UsageError(f"unknown command {args.command}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"abconformer {exc.module}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"abconformer {exc.module}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
