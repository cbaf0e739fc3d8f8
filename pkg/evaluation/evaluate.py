"""
Evaluation of Trained Geolocalization Heads

Scores a checkpoint on a set of records under the three hierarchical
evaluation modes, summarizes the class-count inequality of a dataset, and
runs the scene / text-alignment ablation grid over several seeds.

Usage (through the pipeline CLI):
    python run_pipeline.py eval --checkpoint model.cgck --manifest val.jsonl --mode all
    python run_pipeline.py analyze --manifest data.jsonl
    python run_pipeline.py ablate --synthetic --seeds 0 1 2
"""

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from evaluation.metrics import AblationRow, DatasetStatistics, EvaluationReport, LevelStatistics
from evaluation.runner import ABLATION_GRID, AblationVariant, Checkpoint, RunConfig, resolve_checkpoint, run_trial
from geoloc.data import FeatureRecord, feature_matrix, label_matrix, validate_records
from geoloc.errors import InputError
from geoloc.inequality import ClassCounts, gini, hoover, lorenz_curve
from geoloc.inference import EVAL_MODES, predict_batch, topk_accuracy
from geoloc.model import ModelConfig, level_probabilities
from geoloc.taxonomy import HIERARCHIES, Taxonomy
from geoloc.textalign import EmbeddingTable
from geoloc.training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_TOPK = (1, 5)


def evaluate(
    checkpoint: Checkpoint,
    records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    eval_mode: str = "codependent",
    topk: Sequence[int] = DEFAULT_TOPK,
) -> EvaluationReport:
    """
    Top-k accuracy per hierarchy of ``checkpoint`` on ``records``.

    Raises ConfigError when the checkpoint was trained on another taxonomy.
    """
    if eval_mode not in EVAL_MODES:
        raise InputError(f"unknown eval mode {eval_mode!r}, expected one of {EVAL_MODES}")
    if not records:
        raise InputError("no records to evaluate")
    params = resolve_checkpoint(checkpoint, taxonomy)
    validate_records(records, taxonomy, params.config.feature_dim)

    reports = predict_batch(level_probabilities(params, feature_matrix(records)), taxonomy, eval_mode)
    truths = label_matrix(records)
    accuracy = {
        hierarchy: {k: topk_accuracy(reports, truths, k, h) for k in topk}
        for h, hierarchy in enumerate(HIERARCHIES)
    }
    valid = sum(taxonomy.is_valid_path(r.path) for r in reports) / len(reports)
    report = EvaluationReport(
        mode=eval_mode,
        num_samples=len(records),
        accuracy=accuracy,
        path_validity=valid,
        checkpoint=None if not isinstance(checkpoint, (str, Path)) else str(checkpoint),
    )
    logger.info("evaluated %d records (%s): top1 city %.4f", len(records), eval_mode, accuracy["city"][topk[0]])
    return report


def evaluate_all_modes(
    checkpoint: Checkpoint,
    records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    topk: Sequence[int] = DEFAULT_TOPK,
) -> dict[str, EvaluationReport]:
    params = resolve_checkpoint(checkpoint, taxonomy)
    reports = {mode: evaluate(params, records, taxonomy, mode, topk) for mode in EVAL_MODES}
    if isinstance(checkpoint, (str, Path)):
        for report in reports.values():
            report.checkpoint = str(checkpoint)
    return reports


# =============================================================================
# Dataset inequality
# =============================================================================

def dataset_statistics(
    records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    name: str = "dataset",
) -> DatasetStatistics:
    """Per-hierarchy class counts with their Lorenz curve, Gini and Hoover values."""
    if not records:
        raise InputError("no records to analyze")
    labels = label_matrix(records)
    result = DatasetStatistics(name=name)
    for h, hierarchy in enumerate(HIERARCHIES):
        counts = ClassCounts.from_labels(labels[:, h], taxonomy.sizes[h])
        values = counts.counts
        result.levels.append(LevelStatistics(
            hierarchy=hierarchy,
            num_classes=counts.n,
            num_samples=int(counts.total),
            mean=counts.mean,
            median=float(np.median(values)),
            minimum=int(values.min()),
            maximum=int(values.max()),
            gini=gini(counts),
            hoover=hoover(counts),
            lorenz=lorenz_curve(counts),
            counts=[int(c) for c in values],
        ))
    return result


def compare_datasets(first: DatasetStatistics, second: DatasetStatistics) -> dict:
    """Side-by-side class counts and inequality values per hierarchy."""
    rows = {}
    for a, b in zip(first.levels, second.levels):
        rows[a.hierarchy] = {
            first.name: a.to_dict(include_lorenz=False),
            second.name: b.to_dict(include_lorenz=False),
            "gini_difference": a.gini - b.gini,
            "hoover_difference": a.hoover - b.hoover,
        }
    return {"datasets": [first.name, second.name], "hierarchies": rows}


def comparison_str(first: DatasetStatistics, second: DatasetStatistics) -> str:
    lines = [
        "=" * 60,
        "DATASET COMPARISON",
        "=" * 60,
        f"{'Hierarchy':<12}{'Metric':<10}{first.name:>18}{second.name:>18}",
        "-" * 58,
    ]
    for a, b in zip(first.levels, second.levels):
        lines.append(f"{a.hierarchy:<12}{'classes':<10}{a.num_classes:>18}{b.num_classes:>18}")
        lines.append(f"{'':<12}{'samples':<10}{a.num_samples:>18}{b.num_samples:>18}")
        lines.append(f"{'':<12}{'gini':<10}{a.gini:>18.3f}{b.gini:>18.3f}")
        lines.append(f"{'':<12}{'hoover':<10}{a.hoover:>18.3f}{b.hoover:>18.3f}")
    return "\n".join(lines)


# =============================================================================
# Ablation grid
# =============================================================================

def run_ablation(
    train_records: Sequence[FeatureRecord],
    val_records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[AblationVariant] = ABLATION_GRID,
    table: Optional[EmbeddingTable] = None,
    verbose: bool = False,
) -> list[AblationRow]:
    """
    Train every variant once per seed and collect validation top-1 accuracy.

    A failing trial is kept with its error; the rest of the grid still runs.
    """
    if not seeds:
        raise InputError("run_ablation needs at least one seed")
    rows = []
    for variant in variants:
        row = AblationRow(
            name=variant.name,
            scene_mode=variant.scene_mode,
            alignment=variant.alignment,
            use_attention=variant.use_attention,
        )
        for seed in seeds:
            config = RunConfig(variant, model_config, train_config, seed, verbose)
            row.add_trial(run_trial(config, train_records, val_records, taxonomy, table))
        logger.info("ablation %r: median top1 city %s", variant.name, row.median_top1("city"))
        rows.append(row)
    return rows


def ablation_gain(rows: Sequence[AblationRow], full: str, baseline: str, hierarchy: str = "city") -> float:
    """Median top-1 of ``full`` minus that of ``baseline``."""
    by_name = {row.name: row for row in rows}
    medians = {name: by_name[name].median_top1(hierarchy) for name in (full, baseline)}
    failed = sorted(name for name, value in medians.items() if value is None)
    if failed:
        raise InputError(f"no successful trials for {failed}")
    return medians[full] - medians[baseline]


def _percent_cell(value: Optional[float]) -> str:
    return f"{'n/a':>11}" if value is None else f"{value * 100:>11.2f}"


def print_comparison(rows: Sequence[AblationRow]) -> None:
    """Print the ablation grid as an aligned table of median top-1 accuracy."""
    print("\n" + "=" * 84)
    print("ABLATION COMPARISON (median val top-1 %)")
    print("=" * 84)
    header = "".join(f"{h:>11}" for h in HIERARCHIES)
    print(f"\n{'Variant':<40}{header}")
    print("-" * 84)
    for row in rows:
        if row.error is not None:
            print(f"{row.name:<40}  failed: {row.error.splitlines()[0]}")
            continue
        values = "".join(_percent_cell(row.median_top1(h)) for h in HIERARCHIES)
        print(f"{row.name:<40}{values}")
    seeds = sorted({t.seed for row in rows for t in row.trials})
    if seeds:
        print(f"\nSeeds: {seeds}")
