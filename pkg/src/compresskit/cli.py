"""compresskit command-line interface.

Exit codes: 0 success, 1 a postcondition or evaluation failure, 2 bad
configuration / arguments / inputs, 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from .ablation import STUDIES, detector_config, run_study, write_outputs
from .data import CLASS_NAMES, Dataset, draw_boxes, generate_dataset, manifest_hash, write_ppm
from .errors import ConfigError, DataError, SpecError, TrainingError
from .gan import augment, gan_sanity, gan_train, load_gan, save_gan
from .metrics import ConfusionCounts, bench_fps, classification_metrics
from .models import Detection, Model, build, checkpoint_extra, decode_grid, load_model, predict_grids, save_model
from .pipeline import distillation_pruning_pipeline, prune_model
from .report import ExperimentReport, write_csv, write_loss_csv, write_metrics_csv
from .training import evaluate, summarize_detections, train_task

logger = logging.getLogger("compresskit")


# ----------------------------------------------------------------------------
# helpers


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(path, cfg: dict) -> Dataset:
    path = path or cfg["data"]["path"]
    if path:
        return Dataset.load(path)
    d = cfg["data"]
    return generate_dataset(d["n"], d["balance"], d["seed"], cfg["model"]["image_size"])


def _data_identity(ds: Dataset) -> dict:
    return {"n": ds.n, "seed": ds.seed, "balance": ds.balance, "samples": len(ds)}


def _train_arrays(ds: Dataset, head: str, split: str = "train"):
    # generated samples carry no damage boxes, so detectors train on real scenes only
    return ds.arrays(split, include_synthetic=head == "classifier")


def _fps(model: Model, cfg: dict, seed: int = 0) -> float:
    e = cfg["eval"]
    size = model.spec.image_size
    image = np.random.default_rng(seed).uniform(0, 1, (1, model.spec.in_channels, size, size))
    result = bench_fps(lambda x: predict_grids(model, x, 1), image, e["fps_iters"], e["fps_warmup"], e["fps_repeats"])
    return result.fps


def _evaluate_splits(model: Model, ds: Dataset, cfg: dict) -> dict:
    e = cfg["eval"]
    out = {}
    for split in ("train", "test"):
        images, labels, boxes = _train_arrays(ds, model.spec.head, split)
        out[split] = evaluate(model, images, labels, boxes, e["iou"], e["score"], e["ap_score"])
    return out


def _finish(out: Path, report: ExperimentReport, cfg: dict, losses=None) -> None:
    report.save(out / "report.json")
    write_metrics_csv(out / "metrics.csv", report)
    if losses is not None:
        write_loss_csv(out / "loss.csv", losses)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _split_metrics(metrics: dict, head: str) -> tuple[dict, dict]:
    """(classification metrics, detection metrics) views of an evaluation."""
    if head == "classifier":
        return metrics, {}
    return {}, metrics


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    balance = [float(v) for v in args.balance.split(",")]
    if len(balance) != len(CLASS_NAMES):
        raise ConfigError(f"--balance needs {len(CLASS_NAMES)} comma-separated values")
    ds = generate_dataset(args.n, balance, args.seed, args.image_size)
    out = ds.save(args.out, force=args.force)
    counts = ds.class_counts()
    summary = {
        "out": str(out),
        "n": len(ds),
        "class_counts": dict(zip(CLASS_NAMES, counts)),
        "train": len(ds.split("train")),
        "test": len(ds.split("test")),
        "boxes": sum(len(s.boxes) for s in ds.samples),
        "manifest_sha256": manifest_hash(out),
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train(args) -> int:
    start = time.perf_counter()
    cfg = C.load(args.config)
    ds = _dataset(args.data, cfg)
    teacher_spec, student_spec = C.model_specs(cfg)
    spec = teacher_spec if args.arch == "teacher" else student_spec
    tc = C.train_config(cfg)
    model = build(spec, tc.seed)
    images, labels, boxes = _train_arrays(ds, spec.head)
    losses = train_task(model, images, labels, boxes, tc)
    if len(losses) != tc.epochs:
        print(f"error: {len(losses)} loss rows for {tc.epochs} epochs", file=sys.stderr)
        return 1
    out = _out_dir(args.out)
    chash = C.config_hash(cfg)
    save_model(model, out / "checkpoint", {"config_hash": chash, "data": _data_identity(ds), "arch": args.arch})
    metrics = _evaluate_splits(model, ds, cfg)
    cls_m, det_m = _split_metrics(metrics, spec.head)
    report = ExperimentReport(
        config_hash=chash, seed=tc.seed, metrics=cls_m, detection=det_m,
        fps={"batch1": _fps(model, cfg)} if not args.no_fps else {},
        parameters={args.arch: model.num_parameters()}, sparsity={args.arch: model.sparsity()},
        wall_clock=time.perf_counter() - start, extra={"epochs": tc.epochs},
    )
    _finish(out, report, cfg, losses)
    print(json.dumps({"out": str(out), "test": metrics["test"]}, indent=2, default=str))
    return 0


def cmd_train_gan(args) -> int:
    cfg = C.load(args.config)
    g = cfg["gan"]
    ds = _dataset(args.data, cfg)
    target = g["target_class"] if args.cls is None else args.cls
    real = [s.image for s in ds.split("train", include_synthetic=False) if s.label == target]
    held = [s.image for s in ds.split("test", include_synthetic=False) if s.label == target]
    gan = gan_train(np.stack(real) if real else np.zeros((0,)), target, g["steps"], g["batch_size"], g["lr"],
                    g["hidden"], g["seed"])
    out = _out_dir(args.out)
    save_gan(gan, out / "gan")
    sanity = gan_sanity(gan, np.stack(held), seed=g["seed"] + 1) if held else {"passed": False}
    write_csv(out / "loss.csv", ["step", "loss_d", "loss_g"],
              [(i, f"{d:.8f}", f"{gg:.8f}") for i, (d, gg) in enumerate(gan.history)])
    report = ExperimentReport(config_hash=C.config_hash(cfg), seed=g["seed"], extra={"gan_sanity": sanity,
                                                                                    "target_class": target})
    report.save(out / "report.json")
    print(json.dumps({"out": str(out), "sanity": sanity}, indent=2))
    return 0


def cmd_augment(args) -> int:
    gan = load_gan(args.gan)
    ds = Dataset.load(args.data)
    target = gan.target_class if args.cls is None else args.cls
    before = len(ds)
    new = augment(ds, gan, args.k, target, args.seed)
    new.save(args.data, force=True, only_new_from=before)
    added = len(new) - before
    print(json.dumps({"data": str(args.data), "added": added, "class": target, "total": len(new)}))
    return 0 if added == args.k else 1


def cmd_compress(args) -> int:
    start = time.perf_counter()
    cfg = C.load(args.config)
    teacher = load_model(args.teacher)
    ds = _dataset(args.data, cfg)
    _, student_spec = C.model_specs(cfg)
    student_spec = replace(student_spec, head=teacher.spec.head, num_classes=teacher.spec.num_classes,
                           grid=teacher.spec.grid, boxes_per_cell=teacher.spec.boxes_per_cell,
                           image_size=teacher.spec.image_size)
    tc = C.train_config(cfg)
    prune_cfg = C.prune_config(cfg, args.strategy)
    train = _train_arrays(ds, teacher.spec.head)
    chash = C.config_hash(cfg)
    out = _out_dir(args.out)
    if args.mode == "prune":
        result, mask = prune_model(teacher, prune_cfg, train, tc)
        losses = None
        params = {"teacher": teacher.num_parameters(), "pruned": result.num_parameters(),
                  "pruned_nonzero": int(sum(np.count_nonzero(p.data) for p in result.parameters()))}
        sparsity = {"teacher": teacher.sparsity(), "pruned": result.sparsity()}
        name = "pruned"
    else:
        result, rep = distillation_pruning_pipeline(teacher, student_spec, prune_cfg, C.distill_config(cfg), train,
                                                    tc, seed=tc.seed)
        losses = rep.extra["distill_loss"]
        params, sparsity = rep.parameters, rep.sparsity
        name = "student"
    save_model(result, out / "checkpoint", {"config_hash": chash, "data": _data_identity(ds), "arch": name})
    head = teacher.spec.head
    teacher_m = _evaluate_splits(teacher, ds, cfg)
    result_m = _evaluate_splits(result, ds, cfg)
    cls_m, det_m = _split_metrics({"teacher": teacher_m, name: result_m}, head)
    fps = {} if args.no_fps else {"teacher": _fps(teacher, cfg), name: _fps(result, cfg)}
    report = ExperimentReport(config_hash=chash, seed=tc.seed, metrics=cls_m, detection=det_m, fps=fps,
                              parameters=params, sparsity=sparsity, wall_clock=time.perf_counter() - start,
                              extra={"mode": args.mode, "strategy": prune_cfg.strategy})
    _finish(out, report, cfg, losses)
    print(json.dumps({"out": str(out), "parameters": params, "sparsity": sparsity, "fps": fps,
                      "test": {"teacher": teacher_m["test"], name: result_m["test"]}}, indent=2, default=str))
    return 0


def _oracle_detections(boxes):
    return [[Detection(b.class_id, b.box, 1.0) for b in img] for img in boxes]


def cmd_eval(args) -> int:
    start = time.perf_counter()
    model = load_model(args.checkpoint)
    extra = checkpoint_extra(args.checkpoint)
    ds = Dataset.load(args.data)
    cfg = C.load(args.config)
    e = cfg["eval"]
    recorded = extra.get("data")
    if recorded and (recorded.get("n"), recorded.get("seed")) != (ds.n, ds.seed):
        warnings.warn(f"checkpoint was trained on data {recorded}, evaluating on n={ds.n} seed={ds.seed}",
                      stacklevel=1)
    head = model.spec.head
    images, labels, boxes = ds.arrays(args.split, include_synthetic=head == "classifier")
    detections = []
    if head == "classifier":
        if args.oracle:
            pred = labels
        else:
            pred = predict_grids(model, images).argmax(axis=-1) if len(images) else labels
        counts = ConfusionCounts.from_predictions(labels, pred, model.spec.num_classes)
        metrics = classification_metrics(counts)
        metrics.pop("per_class")
        detection = {}
    else:
        if args.oracle:
            detections = ranked = _oracle_detections(boxes)
        else:
            grids = predict_grids(model, images) if len(images) else []
            detections = [decode_grid(g, model.spec, e["score"], e["iou"]) for g in grids]
            ranked = [decode_grid(g, model.spec, e["ap_score"], e["iou"]) for g in grids]
        detection = summarize_detections(detections, ranked, boxes, model.spec.num_classes, e["iou"])
        metrics = {}
    out = _out_dir(args.out)
    if args.annotate and head == "detector":
        for i in range(min(args.annotate, len(images))):
            write_ppm(out / f"ann_{i:05d}.ppm", draw_boxes(images[i], detections[i]))
    report = ExperimentReport(config_hash=C.config_hash(cfg), seed=cfg["train"]["seed"],
                              metrics={args.split: metrics} if metrics else {},
                              detection={args.split: detection} if detection else {},
                              parameters={"model": model.num_parameters()}, sparsity={"model": model.sparsity()},
                              wall_clock=time.perf_counter() - start,
                              extra={"checkpoint": str(args.checkpoint), "oracle": bool(args.oracle)})
    report.save(out / "report.json")
    write_metrics_csv(out / "metrics.csv", report)
    print(json.dumps({"out": str(out), "metrics": metrics or detection}, indent=2, default=str))
    return 0


def cmd_bench_fps(args) -> int:
    model = load_model(args.checkpoint)
    size = model.spec.image_size
    images = np.random.default_rng(args.seed).uniform(0, 1, (args.batch, model.spec.in_channels, size, size))
    result = bench_fps(lambda x: predict_grids(model, x, args.batch), images, args.iters, args.warmup, args.repeats)
    summary = {"checkpoint": str(args.checkpoint), "fps": result.fps, "runs": result.runs, "iters": args.iters,
               "batch": args.batch, "parameters": model.num_parameters()}
    if args.out:
        out = _out_dir(args.out)
        (out / "fps.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_ablation(args) -> int:
    cfg = C.load(args.config)
    data_dir = args.data or cfg["data"]["path"]
    if not data_dir:
        raise ConfigError("ablation needs a dataset directory (--data or data.path)")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg["ablation"]["seeds"]
    start = time.perf_counter()
    table = run_study(args.study, cfg, data_dir, seeds)
    out = _out_dir(args.out)
    paths = write_outputs(args.study, table, out, C.config_hash(cfg))
    (out / "config.json").write_text(json.dumps(detector_config(cfg), indent=2, sort_keys=True) + "\n")
    print((out / "table.md").read_text())
    logger.info("ablation %s finished in %.1f s", args.study, time.perf_counter() - start)
    return 0 if all(p.exists() for p in paths.values()) else 1


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compresskit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--n", type=int, default=800)
    p.add_argument("--balance", default="0.3333333333333333,0.3333333333333333,0.3333333333333334")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a classifier or detector")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (default: data.path or generate from config)")
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=("teacher", "student"), default="teacher")
    p.add_argument("--no-fps", action="store_true", help="skip the throughput measurement")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-gan", help="train the augmentation GAN on one class")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--class", dest="cls", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("augment", help="append GAN samples to a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--gan", required=True, help="GAN checkpoint directory")
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--class", dest="cls", type=int)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("compress", help="prune and distil a trained model")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("none", "magnitude", "random", "sparse"))
    p.add_argument("--mode", choices=("pipeline", "prune"), default="pipeline")
    p.add_argument("--no-fps", action="store_true")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", default="eval-out")
    p.add_argument("--annotate", type=int, default=0, metavar="N", help="write N annotated detector images")
    p.add_argument("--oracle", action="store_true", help="score ground truth as the predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-fps", help="measure inference throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_fps)

    p = sub.add_parser("ablation", help="run the pruning or attention ablation study")
    p.add_argument("--study", choices=sorted(STUDIES), required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default: ablation.seeds)")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        where = f" (epoch {exc.epoch})" if exc.epoch is not None else f" (step {exc.step})" if exc.step is not None else ""
        print(f"training error{where}: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, SpecError, DataError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
