"""
Training loop: seeded per-epoch shuffling, mini-batch Adam on the combined
objective, per-epoch logging of each loss term.
"""

import dataclasses
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from geoloc.data import FeatureRecord, feature_matrix, label_matrix, validate_records
from geoloc.errors import ConfigError, DegenerateInputError, InputError, TrainingAbortedError
from geoloc.inference import EVAL_MODES, predict_batch, topk_accuracy
from geoloc.model import (
    ModelConfig,
    ModelParams,
    check_config_types,
    forward,
    init_model,
    iter_batches,
    level_probabilities,
    save_checkpoint,
    total_loss,
)
from geoloc.numerics import AdamState, adam_step, derive_seed, make_rng
from geoloc.scene import SCENE_MODES, scene_target
from geoloc.taxonomy import Taxonomy
from geoloc.textalign import AlignmentStrategy, EmbeddingTable, TextFeatureCache

logger = logging.getLogger(__name__)

# epoch e shuffles with make_rng(derive_seed(seed, _SHUFFLE_STREAM), e)
_SHUFFLE_STREAM = 7


@dataclass
class TrainConfig:
    """Optimization settings and the scene / alignment variant to train."""
    epochs: int = 10
    batch_size: int = 12
    learning_rate: float = 0.001
    alignment: str = AlignmentStrategy.ALL_HIERARCHIES.value
    scene_mode: str = "soft"
    eval_mode: str = "codependent"
    seed: int = 0
    stub_fallback: bool = True

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.alignment not in {s.value for s in AlignmentStrategy}:
            raise ConfigError(f"unknown alignment strategy {self.alignment!r}")
        if self.scene_mode not in SCENE_MODES:
            raise ConfigError(f"unknown scene mode {self.scene_mode!r}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"unknown eval mode {self.eval_mode!r}")

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"train config must be an object, got {type(data).__name__}")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        check_config_types(data, _TRAIN_FIELD_TYPES, "train")
        return cls(**data)


_TRAIN_FIELD_TYPES = {
    "epochs": ((int,), None),
    "batch_size": ((int,), None),
    "learning_rate": ((int, float), None),
    "alignment": ((str,), None),
    "scene_mode": ((str,), None),
    "eval_mode": ((str,), None),
    "seed": ((int,), None),
    "stub_fallback": ((bool,), None),
}


@dataclass
class EpochLog:
    """Sample-weighted means over one epoch."""
    epoch: int
    total: float
    geo: float
    scene: float
    tla: float
    train_top1_city: float

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return asdict(self)


def bind_taxonomy(model_config: ModelConfig, taxonomy: Taxonomy) -> ModelConfig:
    """Check the config's class counts against ``taxonomy`` and stamp its fingerprint."""
    if tuple(model_config.level_sizes) != taxonomy.sizes:
        raise ConfigError(
            f"model level sizes {model_config.level_sizes} do not match taxonomy {taxonomy.sizes}"
        )
    fingerprint = taxonomy.fingerprint()
    if model_config.taxonomy_fingerprint and model_config.taxonomy_fingerprint != fingerprint:
        raise ConfigError("model config was built for a different taxonomy")
    return dataclasses.replace(model_config, taxonomy_fingerprint=fingerprint)


def training_targets(
    records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    model_config: ModelConfig,
    train_config: TrainConfig,
    table: Optional[EmbeddingTable] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label ids, scene targets and F_t for every record."""
    if table is None:
        table = EmbeddingTable.for_taxonomy(taxonomy, model_config.text_dim)
    if table.dim != model_config.text_dim:
        raise ConfigError(f"embedding table dim {table.dim} does not match text_dim {model_config.text_dim}")
    cache = TextFeatureCache(table, train_config.alignment, taxonomy, train_config.stub_fallback)
    labels = label_matrix(records)
    scenes = np.stack([scene_target(r, train_config.scene_mode, model_config.scene_dim) for r in records])
    texts = cache.batch([r.labels for r in records])
    return labels, scenes, texts


def _top1_city(params: ModelParams, features: np.ndarray, labels: np.ndarray,
               taxonomy: Taxonomy, mode: str) -> float:
    reports = predict_batch(level_probabilities(params, features), taxonomy, mode)
    return topk_accuracy(reports, labels, 1, 0)


def train(
    records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    model_config: ModelConfig,
    train_config: TrainConfig,
    table: Optional[EmbeddingTable] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> tuple[ModelParams, list[EpochLog]]:
    """
    Train the head on ``records`` (already split) and return the final
    parameters with one log entry per epoch.

    Each batch minimizes the weighted mean of the per-sample objective with
    one Adam step. The shuffle order of epoch e comes from (seed, e).
    """
    train_config.validate()
    model_config = bind_taxonomy(model_config, taxonomy)
    if not records:
        raise InputError("no training records")
    validate_records(records, taxonomy, model_config.feature_dim)

    features = feature_matrix(records)
    labels, scenes, texts = training_targets(records, taxonomy, model_config, train_config, table)

    params = init_model(model_config)
    state = AdamState.fresh(params.arrays(), lr=train_config.learning_rate)
    weights = model_config.loss_weights
    log: list[EpochLog] = []

    logger.info(
        "training on %d records for %d epochs (batch %d, scene=%s, alignment=%s)",
        len(records), train_config.epochs, train_config.batch_size,
        train_config.scene_mode, train_config.alignment,
    )
    for epoch in tqdm(range(train_config.epochs), desc="epochs", disable=not progress):
        order = make_rng(derive_seed(train_config.seed, _SHUFFLE_STREAM), epoch).permutation(len(records))
        sums = np.zeros(4)
        for batch_index, idx in enumerate(iter_batches(len(records), train_config.batch_size, order)):
            output = forward(features[idx], params)
            try:
                loss = total_loss(output, labels[idx], scenes[idx], texts[idx], weights)
            except DegenerateInputError as e:
                raise TrainingAbortedError(
                    f"degenerate loss in epoch {epoch}, batch {batch_index}: {e}",
                    batch_index=batch_index, epoch=epoch, components={},
                ) from e
            components = loss.to_dict()
            if not np.all(np.isfinite(list(components.values()))):
                raise TrainingAbortedError(
                    f"non-finite loss in epoch {epoch}, batch {batch_index}",
                    batch_index=batch_index, epoch=epoch, components=components,
                )
            loss.total.backward()
            new_arrays, state = adam_step(params.arrays(), params.grads(), state)
            params = params.with_arrays(new_arrays)
            sums += len(idx) * np.array([components[k] for k in ("total", "geo", "scene", "tla")])
            logger.debug("epoch %d batch %d loss %.6f", epoch, batch_index, components["total"])

        means = sums / len(records)
        entry = EpochLog(
            epoch=epoch,
            total=float(means[0]),
            geo=float(means[1]),
            scene=float(means[2]),
            tla=float(means[3]),
            train_top1_city=_top1_city(params, features, labels, taxonomy, train_config.eval_mode),
        )
        log.append(entry)
        logger.info(
            "epoch %d: total %.4f geo %.4f scene %.4f tla %.4f top1 city %.3f",
            epoch, entry.total, entry.geo, entry.scene, entry.tla, entry.train_top1_city,
        )

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params, log
