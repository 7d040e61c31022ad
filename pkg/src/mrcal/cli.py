"""Command-line pipeline: synth -> fuse -> train -> eval -> sweep -> report.

stdout carries machine-readable JSON (or JSON lines) only; human
diagnostics go to stderr. Exit codes: 0 success, 1 IO/data error, 2 usage
error, 3 numerical failure, 4 metric undefined (single-class AUC).

MRCAL_THREADS caps worker threads (0 = auto). All computation in this
implementation runs sequentially in deterministic order, so the cap is
accepted and validated but never changes results.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import core, metrics, model, synthgen
from .core import DatasetError, ForegroundProbMap, load_dataset
from .fusion import METHODS, FusionConfig, SoftLabelMap, fuse, fuse_staple
from .metrics import EvalConfig, SingleClassReference, bootstrap_eval, mr_ece, reliability_csv
from .model import Checkpoint, NonFiniteLoss, TrainConfig, predict, train
from .synthgen import LatentField, SynthConfig, generate, true_consensus_probability

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_UNDEFINED = 4


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _diag(msg: str) -> None:
    sys.stderr.write(msg + "\n")


def _thread_cap() -> int:
    raw = os.environ.get("MRCAL_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise SystemExit(EXIT_USAGE)
    return max(cap, 0)


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_samples=args.n,
        image_size=args.size,
        num_raters=args.raters,
        ambiguity=args.ambiguity,
        rater_bias_std=args.rater_bias_std,
        rater_noise_std=args.rater_noise_std,
        seed=args.seed,
    )
    try:
        manifest_path = generate(cfg, args.out)
    except OSError as exc:
        _diag(f"synth failed: {exc}")
        return EXIT_IO
    n_train, n_val, n_test = synthgen.split_sizes(cfg.num_samples)
    _emit(
        {
            "manifest": str(manifest_path),
            "splits": {"train": n_train, "val": n_val, "test": n_test},
        }
    )
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = FusionConfig(method=args.method, sigma=args.sigma, rng_seed=args.seed or 0)
    try:
        dataset = load_dataset(Path(args.data) / "manifest.json")
    except DatasetError as exc:
        _diag(f"cannot load dataset: {exc}")
        return EXIT_IO
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    step = 0
    for split in core.SPLITS:
        for sample in dataset[split]:
            perf = None
            if args.method == "staple":
                fused, perf = fuse_staple(sample.annotations, cfg)
            else:
                fused = fuse(sample.annotations, cfg, step=step)
            step += 1
            path = out_dir / f"{sample.id}_{args.method}.mrc"
            if isinstance(fused, SoftLabelMap):
                core.write_container(core.DTYPE_F32, fused.data.shape, fused.data, path)
            else:
                core.write_container(core.DTYPE_U8, fused.data.shape, fused.data, path)
            sidecar = {
                "method": args.method,
                "parameters": {"sigma": cfg.sigma, "seed": cfg.rng_seed},
            }
            if perf is not None:
                sidecar["rater_performance"] = {
                    "sensitivity": list(perf.sensitivity),
                    "specificity": list(perf.specificity),
                }
            path.with_suffix(".mrc.json").write_text(
                json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
            )
            written.append(str(path))
    _emit({"method": args.method, "written": len(written), "out": str(out_dir)})
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    if args.loss == "rps":
        return TrainConfig(
            loss="hybrid_rps",
            alpha=args.alpha,
            lr=args.lr,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
        )
    return TrainConfig(
        loss="bce_vs_fused",
        alpha=args.alpha,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        fusion=FusionConfig(method=args.loss, sigma=args.sigma, rng_seed=args.seed),
    )


def cmd_train(args) -> int:
    try:
        dataset = load_dataset(Path(args.data) / "manifest.json")
    except DatasetError as exc:
        _diag(f"cannot load dataset: {exc}")
        return EXIT_IO
    cfg = _train_config(args)
    try:
        checkpoint = train(dataset["train"], cfg)
    except NonFiniteLoss as exc:
        _diag(f"training aborted: {exc}")
        return EXIT_NUMERIC
    except (model.EmptyTrainSplit, model.ArchitectureMismatch) as exc:
        _diag(f"training failed: {exc}")
        return EXIT_IO
    checkpoint.save(args.out)
    for epoch, loss in enumerate(checkpoint.loss_trace):
        _emit({"epoch": epoch, "loss": loss})
    return EXIT_OK


def _oracle_predictions(data_dir: Path, samples):
    meta = json.loads((data_dir / "synth_meta.json").read_text())
    cfg = SynthConfig(**meta["config"])
    preds = []
    for sample in samples:
        latent_path = data_dir / meta["latent_paths"][sample.id]
        _, _, arr = core.read_container(latent_path)
        latent = LatentField(core.Grid2D(np.asarray(arr, dtype=np.float64)))
        preds.append(true_consensus_probability(latent, cfg))
    return preds


def _model_predictions(model_path: str, samples):
    checkpoint = Checkpoint.load(model_path)
    return [predict(checkpoint, s.image).data for s in samples]


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    try:
        dataset = load_dataset(data_dir / "manifest.json")
    except DatasetError as exc:
        _diag(f"cannot load dataset: {exc}")
        return EXIT_IO
    samples = dataset[args.split]
    if not samples:
        _diag(f"split {args.split!r} is empty")
        return EXIT_IO
    try:
        if args.model == "oracle":
            preds = _oracle_predictions(data_dir, samples)
        else:
            preds = _model_predictions(args.model, samples)
    except (OSError, KeyError, core.ContainerError, model.ArchitectureMismatch) as exc:
        _diag(f"cannot load model/predictions: {exc}")
        return EXIT_IO

    cfg = EvalConfig(
        num_bins=args.bins,
        bootstrap_n=args.bootstrap,
        bootstrap_frac=args.frac,
        seed=args.seed,
        ece_mode=args.ece_mode,
    )
    stacks = [s.annotations for s in samples]
    report = bootstrap_eval(preds, stacks, cfg)
    _, bins = mr_ece(preds, stacks, cfg)
    if args.reliability:
        reliability_csv(bins, args.reliability)
        report.bins_csv_path = str(args.reliability)
    report.notes = {
        "auc_reference": "majority_vote_ties_foreground",
        "split": args.split,
        "model": str(args.model),
    }
    if args.report:
        Path(args.report).write_text(report.to_json())
    _emit({"mr_ece": report.mr_ece, "auc": report.auc})
    return EXIT_UNDEFINED if report.auc is None else EXIT_OK


def _parse_grid(spec: str) -> list[float]:
    parts = spec.split(":")
    try:
        if len(parts) == 1:
            return [float(parts[0])]
        if len(parts) == 3:
            start, stop, step = (float(p) for p in parts)
            if step <= 0 or stop < start:
                raise ValueError
            values = []
            v = start
            while v <= stop + 1e-9:
                values.append(round(v, 10))
                v += step
            return values
    except ValueError:
        pass
    raise ValueError(f"malformed grid {spec!r} (expected start:stop:step or value)")


def cmd_sweep(args) -> int:
    if args.param != "alpha":
        _diag(f"unsupported sweep parameter {args.param!r}")
        return EXIT_USAGE
    try:
        values = _parse_grid(args.values)
    except ValueError as exc:
        _diag(str(exc))
        return EXIT_USAGE
    try:
        dataset = load_dataset(Path(args.data) / "manifest.json")
    except DatasetError as exc:
        _diag(f"cannot load dataset: {exc}")
        return EXIT_IO
    if not dataset["train"] or not dataset["val"]:
        _diag("sweep needs nonempty train and val splits")
        return EXIT_IO

    eval_cfg = EvalConfig(seed=args.seed)
    table = []
    for value in values:
        cfg = TrainConfig(
            loss="hybrid_rps",
            alpha=value,
            lr=args.lr,
            epochs=args.epochs,
            seed=args.seed,
        )
        try:
            checkpoint = train(dataset["train"], cfg)
        except NonFiniteLoss as exc:
            _diag(f"alpha={value}: {exc}")
            return EXIT_NUMERIC
        preds = [predict(checkpoint, s.image).data for s in dataset["val"]]
        stacks = [s.annotations for s in dataset["val"]]
        if args.metric == "mr_ece":
            metric_value, _ = mr_ece(preds, stacks, eval_cfg)
        else:
            _diag(f"unsupported sweep metric {args.metric!r}")
            return EXIT_USAGE
        table.append({"value": value, "metric": metric_value})
    best = min(table, key=lambda row: row["metric"])
    _emit({"param": args.param, "metric": args.metric, "table": table, "argmin": best["value"]})
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _diag(f"cannot read report: {exc}")
        return EXIT_IO
    _emit(doc)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrcal",
        description="Ordinal-consensus calibrated segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-rater dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--raters", type=int, default=3)
    p.add_argument("--ambiguity", type=float, default=0.5)
    p.add_argument("--rater-bias-std", type=float, default=0.1)
    p.add_argument("--rater-noise-std", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="write fused supervision targets")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="train a segmentation model")
    p.add_argument("--data", required=True)
    p.add_argument(
        "--loss",
        required=True,
        choices=("rps", "rs", "mc", "sc", "scg", "staple", "simple", "svls"),
    )
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the synth oracle)")
    p.add_argument("--model", required=True, help="checkpoint path or 'oracle'")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=core.SPLITS)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--bootstrap", type=int, default=10)
    p.add_argument("--frac", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.add_argument("--reliability", default=None)
    p.add_argument(
        "--ece-mode", default="frequency", choices=("frequency", "top_label")
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid sweep of a hyperparameter on the val split")
    p.add_argument("--data", required=True)
    p.add_argument("--param", default="alpha")
    p.add_argument("--values", required=True, help="start:stop:step (inclusive)")
    p.add_argument("--metric", default="mr_ece")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="echo a metric report JSON to stdout")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _thread_cap()
    if args.command == "fuse" and args.method == "rs" and args.seed is None:
        parser.error("--method rs requires --seed")
    try:
        return args.func(args)
    except SingleClassReference as exc:
        _diag(str(exc))
        return EXIT_UNDEFINED


if __name__ == "__main__":
    sys.exit(main())
