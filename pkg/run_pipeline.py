#!/usr/bin/env python3
"""
Geolocalization Pipeline Runner

Train, evaluate and analyze the hierarchical geolocalization head on
pre-extracted video features.

Usage:
    python run_pipeline.py synth --cities 8 --per-city 80 --out data/toy.jsonl
    python run_pipeline.py train --manifest data/toy.jsonl --out model.cgck --split 0.8
    python run_pipeline.py eval --checkpoint model.cgck --manifest data/toy.jsonl --mode all
    python run_pipeline.py analyze --manifest data/toy.jsonl --lorenz-dir lorenz/
    python run_pipeline.py gradcheck --eps 1e-5
    python run_pipeline.py ablate --synthetic --seeds 0 1 2 --epochs 50

Every command prints JSON to stdout (or --output). Failures print a JSON
error object to stderr and exit nonzero.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

from evaluation.evaluate import (
    compare_datasets,
    dataset_statistics,
    evaluate,
    evaluate_all_modes,
    print_comparison,
    run_ablation,
)
from geoloc.config import env_log_level, env_seed, load_configs, read_config_file
from geoloc.data import generate_synthetic, read_manifest, stratified_split, synthetic_taxonomy, write_manifest
from geoloc.errors import ConfigError, HierGeoError
from geoloc.inequality import lorenz_csv
from geoloc.inference import EVAL_MODES
from geoloc.model import ModelConfig, model_gradient_check, toy_config
from geoloc.taxonomy import Taxonomy, load_taxonomy
from geoloc.textalign import load_embedding_table
from geoloc.training import train

logger = logging.getLogger("run_pipeline")

GRADIENT_TOLERANCE = 1e-4


def setup_logging(verbose: bool) -> None:
    level = "DEBUG" if verbose else env_log_level()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def emit(payload: Any, output: Optional[Path]) -> None:
    text = json.dumps(payload, indent=2)
    if output is None:
        print(text)
    else:
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(text + "\n", encoding="utf-8")
        logger.info("results saved to %s", output)


def taxonomy_path_for(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".taxonomy.tsv")


def resolve_taxonomy(explicit: Optional[Path], checkpoint: Optional[Path] = None) -> Optional[Taxonomy]:
    """An explicit taxonomy file, else the one saved next to the checkpoint, else None."""
    if explicit is not None:
        return load_taxonomy(explicit)
    if checkpoint is not None and taxonomy_path_for(checkpoint).exists():
        return load_taxonomy(taxonomy_path_for(checkpoint))
    return None


# =============================================================================
# Commands
# =============================================================================

def cmd_train(args) -> dict:
    records, taxonomy = read_manifest(args.manifest, resolve_taxonomy(args.taxonomy), args.min_frames)
    model_config, train_config = load_configs(args.config, taxonomy)
    if args.epochs is not None:
        train_config = dataclasses.replace(train_config, epochs=args.epochs)
    table = load_embedding_table(args.embeddings) if args.embeddings else None

    val_records = []
    if args.split is not None:
        records, val_records = stratified_split(records, args.split, train_config.seed, taxonomy)

    params, log = train(
        records, taxonomy, model_config, train_config,
        table=table, checkpoint_path=args.out, progress=args.verbose,
    )
    taxonomy.save(taxonomy_path_for(args.out))
    result = {
        "checkpoint": str(args.out),
        "taxonomy": str(taxonomy_path_for(args.out)),
        "num_train": len(records),
        "model": params.config.to_dict(),
        "train": train_config.to_dict(),
        "log": [entry.to_dict() for entry in log],
    }
    if val_records:
        result["num_val"] = len(val_records)
        result["validation"] = evaluate(params, val_records, taxonomy, train_config.eval_mode).to_dict()
    return result


def cmd_eval(args) -> dict:
    taxonomy = resolve_taxonomy(args.taxonomy, args.checkpoint)
    records, taxonomy = read_manifest(args.manifest, taxonomy, args.min_frames)
    if args.mode == "all":
        reports = evaluate_all_modes(args.checkpoint, records, taxonomy, args.topk)
        if args.verbose:
            for report in reports.values():
                print(report.summary_str(), file=sys.stderr)
        return {mode: report.to_dict() for mode, report in reports.items()}
    report = evaluate(args.checkpoint, records, taxonomy, args.mode, args.topk)
    if args.verbose:
        print(report.summary_str(), file=sys.stderr)
    return report.to_dict()


def cmd_analyze(args) -> dict:
    records, taxonomy = read_manifest(args.manifest, resolve_taxonomy(args.taxonomy), args.min_frames)
    stats = dataset_statistics(records, taxonomy, name=args.name or args.manifest.stem)
    if args.lorenz_dir is not None:
        args.lorenz_dir.mkdir(parents=True, exist_ok=True)
        for level in stats.levels:
            (args.lorenz_dir / f"lorenz_{level.hierarchy}.csv").write_text(lorenz_csv(level.lorenz), encoding="utf-8")
    if args.verbose:
        print(stats.summary_str(), file=sys.stderr)
    result = stats.to_dict(include_lorenz=args.lorenz_dir is None)
    if args.compare is not None:
        other_records, other_taxonomy = read_manifest(args.compare, min_frames=args.min_frames)
        other = dataset_statistics(other_records, other_taxonomy, name=args.compare.stem)
        result = {"dataset": result, "comparison": compare_datasets(stats, other)}
    return result


def cmd_gradcheck(args) -> dict:
    if args.config is not None:
        section = read_config_file(args.config).get("model")
        if section is None:
            raise ConfigError(f"{args.config} has no model section")
        config = ModelConfig.from_dict(section)
    else:
        config = toy_config()
    config.validate()
    errors = model_gradient_check(
        config, points=args.points, eps=args.eps, seed=args.seed, max_entries=args.max_entries
    )
    worst = max(errors) if errors else 0.0
    return {
        "points": len(errors),
        "eps": args.eps,
        "max_relative_error": worst,
        "tolerance": GRADIENT_TOLERANCE,
        "passed": worst < GRADIENT_TOLERANCE,
        "errors": errors,
    }


def cmd_synth(args) -> dict:
    taxonomy = synthetic_taxonomy(args.cities, args.states, args.countries, args.continents)
    records = generate_synthetic(
        taxonomy, args.per_city, args.sigma, args.seed,
        feature_dim=args.feature_dim, num_scenes=args.scene_dim,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    feature_file = args.out.with_suffix(".cgft").name
    write_manifest(records, taxonomy, args.out, feature_file)
    taxonomy_file = args.out.with_suffix(".taxonomy.tsv")
    taxonomy.save(taxonomy_file)
    return {
        "manifest": str(args.out),
        "features": str(args.out.parent / feature_file),
        "taxonomy": str(taxonomy_file),
        "num_records": len(records),
        "level_sizes": list(taxonomy.sizes),
    }


def cmd_ablate(args) -> dict:
    if args.manifest is not None:
        records, taxonomy = read_manifest(args.manifest, resolve_taxonomy(args.taxonomy), args.min_frames)
        model_config, train_config = load_configs(args.config, taxonomy)
    else:
        taxonomy = synthetic_taxonomy(8, 4, 2, 2)
        model_config, train_config = load_configs(args.config, taxonomy)
        records = generate_synthetic(
            taxonomy, args.per_city, args.sigma, seed=train_config.seed,
            feature_dim=model_config.feature_dim, num_scenes=model_config.scene_dim,
        )
    if args.epochs is not None:
        train_config = dataclasses.replace(train_config, epochs=args.epochs)
    train_records, val_records = stratified_split(records, 0.8, train_config.seed, taxonomy)
    rows = run_ablation(
        train_records, val_records, taxonomy, model_config, train_config,
        seeds=args.seeds, verbose=args.verbose,
    )
    if args.verbose:
        print_comparison(rows)
    return {
        "num_train": len(train_records),
        "num_val": len(val_records),
        "train": train_config.to_dict(),
        "rows": [row.to_dict() for row in rows],
    }


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
}


# =============================================================================
# Argument parsing
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Train and evaluate the hierarchical geolocalization head",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging and printed summaries")
    parser.add_argument("-o", "--output", type=Path, help="write the JSON result here instead of stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, manifest_required=True):
        p.add_argument("--manifest", type=Path, required=manifest_required, help="JSON-lines manifest")
        p.add_argument("--taxonomy", type=Path, help="tab-separated class file (default: built from the manifest)")
        p.add_argument("--min-frames", type=int, default=None, help="drop videos with fewer frames")

    p = sub.add_parser("train", help="train a checkpoint")
    data_args(p)
    p.add_argument("--config", type=Path, help="JSON config with model/train sections")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--split", type=float, help="hold out a stratified validation split with this train ratio")
    p.add_argument("--embeddings", type=str, help="embedding table path or hf://owner/repo/file")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    data_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=EVAL_MODES + ("all",), default="codependent")
    p.add_argument("--topk", type=int, nargs="+", default=[1, 5])

    p = sub.add_parser("analyze", help="class-count inequality per hierarchy")
    data_args(p)
    p.add_argument("--lorenz-dir", type=Path, help="write Lorenz CSV files here")
    p.add_argument("--compare", type=Path, help="second manifest to compare against")
    p.add_argument("--name", type=str, help="dataset name in the report")

    p = sub.add_parser("gradcheck", help="finite-difference check of the total loss gradient")
    p.add_argument("--config", type=Path, help="JSON config whose model section to check (default: toy)")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-entries", type=int, default=None, help="probe at most this many entries per tensor")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--cities", type=int, default=8)
    p.add_argument("--states", type=int, default=None)
    p.add_argument("--countries", type=int, default=None)
    p.add_argument("--continents", type=int, default=None)
    p.add_argument("--per-city", type=int, default=80)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=384)
    p.add_argument("--scene-dim", type=int, default=16)
    p.add_argument("--out", type=Path, required=True, help="manifest path")

    p = sub.add_parser("ablate", help="scene / text-alignment ablation grid")
    data_args(p, manifest_required=False)
    p.add_argument("--synthetic", action="store_true", help="use the toy synthetic task (default without --manifest)")
    p.add_argument("--config", type=Path)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int)
    p.add_argument("--per-city", type=int, default=80)
    p.add_argument("--sigma", type=float, default=0.1)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    if getattr(args, "seed", 0) is None:
        args.seed = env_seed()

    try:
        result = COMMANDS[args.command](args)
    except HierGeoError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 2
    except OSError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1

    emit(result, args.output)
    if args.command == "gradcheck" and not result["passed"]:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
