"""Pruning and attention ablation studies on the damage-detection task."""

from __future__ import annotations

import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import config as C
from .compression import PruneConfig
from .data import Dataset
from .models import build
from .pipeline import distillation_pruning_pipeline, prune_model
from .report import fmt, markdown_table, write_csv
from .training import evaluate_detector, train_task

logger = logging.getLogger(__name__)

PRUNING_ROWS = ("No pruning", "Random pruning", "Sparse pruning", "Distillation pruning")
ATTENTION_ROWS = ("CBAM", "SAM", "BAM")
COLUMNS = ("Precision", "Recall", "mAP")
STUDIES = {"pruning": PRUNING_ROWS, "attention": ATTENTION_ROWS}


def worker_count() -> int:
    """Process fan-out cap from COMPRESSKIT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("COMPRESSKIT_THREADS", "1")))
    except ValueError:
        return 1


def detector_config(cfg: dict) -> dict:
    """``cfg`` with the detector head selected; the studies score damage boxes."""
    return C.resolve(C.merge(cfg, {"model": {"head": "detector"}}))


def _split(dataset: Dataset, name: str):
    return dataset.arrays(name, include_synthetic=False)


def _scores(model, test, cfg) -> dict:
    e = cfg["eval"]
    m = evaluate_detector(model, test[0], test[2], e["iou"], e["score"], e["ap_score"])
    return {"Precision": m["precision"], "Recall": m["recall"], "mAP": m["mAP"]}


def pruning_cell(cfg: dict, dataset: Dataset, seed: int) -> dict:
    """All four pruning rows for one seed; they share the seed's trained base model."""
    teacher_spec, student_spec = C.model_specs(cfg)
    train, test = _split(dataset, "train"), _split(dataset, "test")
    tc = replace(C.train_config(cfg), seed=seed)
    sparsity = cfg["ablation"]["sparsity"]
    base = build(teacher_spec, seed)
    train_task(base, *train, tc)
    out = {"No pruning": _scores(base, test, cfg)}
    common = {"finetune_epochs": cfg["prune"]["finetune_epochs"], "seed": seed}
    random_model, _ = prune_model(base, PruneConfig("random", sparsity=sparsity, **common), train, tc)
    out["Random pruning"] = _scores(random_model, test, cfg)
    sparse_model, _ = prune_model(base, PruneConfig("sparse", sparsity=sparsity, l1=cfg["prune"]["l1"], **common),
                                  train, tc)
    out["Sparse pruning"] = _scores(sparse_model, test, cfg)
    student, _ = distillation_pruning_pipeline(
        base, student_spec, PruneConfig("magnitude", sparsity=sparsity, **common), C.distill_config(cfg), train, tc,
        seed=seed,
    )
    out["Distillation pruning"] = _scores(student, test, cfg)
    return out


def attention_cell(cfg: dict, dataset: Dataset, seed: int, mode: str) -> dict:
    teacher_spec, _ = C.model_specs(cfg)
    train, test = _split(dataset, "train"), _split(dataset, "test")
    model = build(replace(teacher_spec, attention=mode), seed)
    train_task(model, *train, replace(C.train_config(cfg), seed=seed))
    return _scores(model, test, cfg)


def _run(job):
    kind, cfg, data_dir, seed, mode = job
    dataset = Dataset.load(data_dir)
    if kind == "pruning":
        return pruning_cell(cfg, dataset, seed)
    return {mode.upper(): attention_cell(cfg, dataset, seed, mode)}


def run_study(study: str, cfg: dict, data_dir, seeds: list[int], workers: int | None = None) -> dict:
    """{row: {seed: {column: value}}} for every row of the study."""
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}")
    cfg = detector_config(cfg)
    if study == "pruning":
        jobs = [("pruning", cfg, str(data_dir), s, None) for s in seeds]
    else:
        jobs = [("attention", cfg, str(data_dir), s, m) for m in ("cbam", "sam", "bam") for s in seeds]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, jobs))
    else:
        results = [_run(j) for j in jobs]
    table: dict = {row: {} for row in STUDIES[study]}
    for job, res in zip(jobs, results):
        for row, scores in res.items():
            table[row][job[3]] = scores
            logger.info("%s seed %d %s", row, job[3], scores)
    return table


def _median(values):
    defined = [v for v in values if v == v]
    return statistics.median(defined) if defined else float("nan")


def summary_rows(study: str, table: dict) -> list[list]:
    rows = []
    for row in STUDIES[study]:
        per_seed = table[row]
        rows.append([row] + [_median([per_seed[s][c] for s in sorted(per_seed)]) for c in COLUMNS])
    return rows


def write_outputs(study: str, table: dict, out_dir, config_hash: str) -> dict:
    """Write per_seed.csv, table.csv and table.md; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = sorted({s for row in table.values() for s in row})
    per_seed = [[row, s] + [fmt(table[row][s][c]) for c in COLUMNS] for row in STUDIES[study] for s in seeds]
    paths = {"per_seed": write_csv(out / "per_seed.csv", ["Model", "seed", *COLUMNS], per_seed)}
    summary = summary_rows(study, table)
    paths["table_csv"] = write_csv(out / "table.csv", ["Model", *COLUMNS],
                                   [[r[0]] + [fmt(v) for v in r[1:]] for r in summary])
    title = "Model" if study == "pruning" else "Attention module"
    md = markdown_table([title, *COLUMNS], summary)
    md += f"\nMedian over seeds {seeds} on the synthetic damage-detection task; config {config_hash}.\n"
    (out / "table.md").write_text(md)
    paths["table_md"] = out / "table.md"
    return paths
