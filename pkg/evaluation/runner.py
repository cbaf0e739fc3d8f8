"""
Model Runner for Evaluation

Resolves checkpoints against a taxonomy and runs single training trials of an
ablation variant, turning failures into results instead of exceptions.
"""

import dataclasses
import logging
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from evaluation.metrics import AblationTrial
from geoloc.data import FeatureRecord, feature_matrix, label_matrix
from geoloc.errors import ConfigError
from geoloc.inference import predict_batch, topk_accuracy
from geoloc.model import ModelConfig, ModelParams, level_probabilities, load_checkpoint
from geoloc.taxonomy import HIERARCHIES, Taxonomy
from geoloc.textalign import EmbeddingTable
from geoloc.training import TrainConfig, train

logger = logging.getLogger(__name__)

Checkpoint = Union[ModelParams, str, Path]


def resolve_checkpoint(checkpoint: Checkpoint, taxonomy: Taxonomy) -> ModelParams:
    """
    Load ``checkpoint`` if it is a path and check that it was trained on
    ``taxonomy`` (class counts and, when recorded, the fingerprint).
    """
    params = checkpoint if isinstance(checkpoint, ModelParams) else load_checkpoint(checkpoint)
    config = params.config
    if tuple(config.level_sizes) != taxonomy.sizes:
        raise ConfigError(f"checkpoint level sizes {config.level_sizes} do not match taxonomy {taxonomy.sizes}")
    if config.taxonomy_fingerprint and config.taxonomy_fingerprint != taxonomy.fingerprint():
        raise ConfigError("checkpoint was trained on a different taxonomy")
    return params


@dataclass(frozen=True)
class AblationVariant:
    """Which objective terms and modules a row of the ablation grid trains."""
    name: str
    scene_mode: Optional[str]
    alignment: Optional[str]
    use_attention: bool = True

    def configs(self, model_config: ModelConfig, train_config: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
        weights = (1.0, 0.0 if self.scene_mode is None else 1.0, 0.0 if self.alignment is None else 1.0)
        model = dataclasses.replace(model_config, loss_weights=weights, use_attention=self.use_attention)
        training = dataclasses.replace(
            train_config,
            scene_mode=self.scene_mode or train_config.scene_mode,
            alignment=self.alignment or train_config.alignment,
        )
        return model, training


ABLATION_GRID = (
    AblationVariant("geolocalization only", None, None),
    AblationVariant("majority scene", "majority", None),
    AblationVariant("soft scene", "soft", None),
    AblationVariant("soft scene + TLA (city)", "soft", "city"),
    AblationVariant("soft scene + TLA (all)", "soft", "all"),
    AblationVariant("soft scene + TLA (all), no attention", "soft", "all", use_attention=False),
)


@dataclass
class RunConfig:
    """Configuration for a single ablation trial."""
    variant: AblationVariant
    model_config: ModelConfig
    train_config: TrainConfig
    seed: int
    verbose: bool = False


def top1_per_hierarchy(
    params: ModelParams,
    records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    mode: str,
) -> dict[str, float]:
    reports = predict_batch(level_probabilities(params, feature_matrix(records)), taxonomy, mode)
    truths = label_matrix(records)
    return {h: topk_accuracy(reports, truths, 1, i) for i, h in enumerate(HIERARCHIES)}


def run_trial(
    config: RunConfig,
    train_records: Sequence[FeatureRecord],
    val_records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    table: Optional[EmbeddingTable] = None,
) -> AblationTrial:
    """
    Train one variant with one seed and score it on ``val_records``.

    Any exception is recorded on the returned trial.
    """
    try:
        model_config, train_config = config.variant.configs(config.model_config, config.train_config)
        model_config = dataclasses.replace(model_config, seed=config.seed)
        train_config = dataclasses.replace(train_config, seed=config.seed)
        params, log = train(
            train_records, taxonomy, model_config, train_config, table=table, progress=config.verbose
        )
        return AblationTrial(
            seed=config.seed,
            top1=top1_per_hierarchy(params, val_records, taxonomy, train_config.eval_mode),
            final_loss=log[-1].total if log else None,
        )
    except Exception as e:
        logger.warning("ablation trial %r (seed %d) failed: %s", config.variant.name, config.seed, e)
        return AblationTrial(
            seed=config.seed,
            error=f"{type(e).__name__}: {e}\n{traceback.format_exc()}",
        )
