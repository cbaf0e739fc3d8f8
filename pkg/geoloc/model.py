"""
Trainable geolocalization head.

Four linear hierarchy classifiers over a video feature vector, the Self-Cross
Attention block over their concatenated logits, the scene branch (FFN_s), the
text-alignment branch (FFN_t), and the losses that train them.
"""

import dataclasses
import json
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np

from geoloc.binio import ByteReader, pack_text
from geoloc.errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    LabelIndexError,
)
from geoloc.numerics import (
    AttentionParams,
    Layer,
    Tensor,
    as_tensor,
    concat,
    dense_stack,
    derive_seed,
    ffn_forward,
    glorot_uniform,
    gradient_check,
    make_rng,
    multihead_attention,
)
from geoloc.taxonomy import NUM_HIERARCHIES, LabelPath

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CGCK"
CHECKPOINT_VERSION = 1

# rng ordinals per parameter group
_CLASSIFIER_STREAM = 1
_ATTENTION_STREAM = 2
_SCENE_STREAM = 3
_TEXT_STREAM = 4


# =============================================================================
# Configuration and parameters
# =============================================================================

@dataclass
class ModelConfig:
    """Shapes and switches of the head."""
    level_sizes: tuple[int, ...]
    feature_dim: int = 384
    scene_dim: int = 16
    text_dim: int = 512
    num_heads: int = 2
    token_embed_dim: int = 6
    scene_depth: int = 6
    text_depth: int = 3
    seed: int = 0
    loss_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    use_attention: bool = True
    taxonomy_fingerprint: str = ""

    def __post_init__(self):
        self.level_sizes = tuple(int(x) for x in self.level_sizes)
        self.loss_weights = tuple(float(x) for x in self.loss_weights)

    @property
    def total_classes(self) -> int:
        return sum(self.level_sizes)

    def validate(self) -> None:
        if len(self.level_sizes) != NUM_HIERARCHIES or any(d < 1 for d in self.level_sizes):
            raise ConfigError(f"level_sizes must be 4 positive ints, got {self.level_sizes}")
        for name in ("feature_dim", "scene_dim", "text_dim", "num_heads",
                     "token_embed_dim", "scene_depth", "text_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.token_embed_dim % self.num_heads:
            raise ConfigError(
                f"token_embed_dim {self.token_embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigError(f"loss_weights must be 3 non-negative numbers, got {self.loss_weights}")

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        data = asdict(self)
        data["level_sizes"] = list(self.level_sizes)
        data["loss_weights"] = list(self.loss_weights)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"model config must be an object, got {type(data).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "level_sizes" not in data:
            raise ConfigError("model config needs level_sizes")
        check_config_types(data, _MODEL_FIELD_TYPES, "model")
        return cls(**data)


_INT = (int,)
_NUMBER = (int, float)

# field -> (accepted types, accepted item types for sequences)
_MODEL_FIELD_TYPES: dict[str, tuple[tuple[type, ...], Optional[tuple[type, ...]]]] = {
    "level_sizes": ((list, tuple), _INT),
    "feature_dim": (_INT, None),
    "scene_dim": (_INT, None),
    "text_dim": (_INT, None),
    "num_heads": (_INT, None),
    "token_embed_dim": (_INT, None),
    "scene_depth": (_INT, None),
    "text_depth": (_INT, None),
    "seed": (_INT, None),
    "loss_weights": ((list, tuple), _NUMBER),
    "use_attention": ((bool,), None),
    "taxonomy_fingerprint": ((str,), None),
}


def _has_type(value: Any, types: tuple[type, ...]) -> bool:
    # JSON true/false only count where bool is asked for
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def check_config_types(
    data: dict[str, Any],
    expected: dict[str, tuple[tuple[type, ...], Optional[tuple[type, ...]]]],
    section: str,
) -> None:
    """Raise ConfigError for any value whose JSON type does not fit its field."""
    for name, value in data.items():
        if name not in expected:
            continue
        types, item_types = expected[name]
        if not _has_type(value, types):
            wanted = " or ".join(t.__name__ for t in types)
            raise ConfigError(f"{section} config {name} must be {wanted}, got {value!r}")
        if item_types is not None and not all(_has_type(item, item_types) for item in value):
            wanted = " or ".join(t.__name__ for t in item_types)
            raise ConfigError(f"{section} config {name} items must be {wanted}, got {value!r}")


def geometric_widths(start: int, end: int, depth: int) -> list[int]:
    """Layer widths from ``start`` to ``end`` in ``depth`` geometric steps."""
    widths = [start]
    for i in range(1, depth):
        widths.append(max(1, int(round(start * (end / start) ** (i / depth)))))
    widths.append(end)
    return widths


@dataclass
class ModelParams:
    """All learnable weights, grouped the way the forward pass uses them."""
    config: ModelConfig
    classifiers: list[tuple[Tensor, Tensor]]
    attention: Optional[AttentionParams]
    scene_layers: list[Layer]
    text_layers: list[Layer]

    def named_tensors(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for h, (weight, bias) in enumerate(self.classifiers):
            named[f"classifier.{h}.weight"] = weight
            named[f"classifier.{h}.bias"] = bias
        if self.attention is not None:
            for name, tensor in self.attention.tensors().items():
                named[f"attention.{name}"] = tensor
        for prefix, layers in (("scene_ffn", self.scene_layers), ("text_ffn", self.text_layers)):
            for i, (weight, bias, _) in enumerate(layers):
                named[f"{prefix}.{i}.weight"] = weight
                named[f"{prefix}.{i}.bias"] = bias
        return named

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors().items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (np.zeros_like(t.data) if t.grad is None else t.grad)
            for name, t in self.named_tensors().items()
        }

    def zero_grad(self) -> None:
        for tensor in self.named_tensors().values():
            tensor.zero_grad()

    def with_arrays(self, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "ModelParams":
        """A copy of these params holding ``arrays`` (same names and shapes)."""
        current = self.named_tensors()
        if set(arrays) != set(current):
            missing = sorted(set(current) - set(arrays))
            extra = sorted(set(arrays) - set(current))
            raise DimensionError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, tensor in current.items():
            if np.shape(arrays[name]) != tensor.shape:
                raise DimensionError(f"{name}: shape {np.shape(arrays[name])}, expected {tensor.shape}")

        return self.from_named({
            name: Tensor(arrays[name], requires_grad=requires_grad, name=name) for name in current
        })

    def from_named(self, tensors: dict[str, Tensor]) -> "ModelParams":
        """Params with this layout built around the given tensors (no copies)."""
        missing = sorted(set(self.named_tensors()) - set(tensors))
        if missing:
            raise DimensionError(f"missing parameters {missing}")

        def fresh(name: str) -> Tensor:
            return tensors[name]

        attention = None
        if self.attention is not None:
            attention = AttentionParams(
                num_heads=self.attention.num_heads,
                embed_dim=self.attention.embed_dim,
                **{n: fresh(f"attention.{n}") for n in AttentionParams.TENSOR_FIELDS},
            )
        return ModelParams(
            config=self.config,
            classifiers=[
                (fresh(f"classifier.{h}.weight"), fresh(f"classifier.{h}.bias"))
                for h in range(len(self.classifiers))
            ],
            attention=attention,
            scene_layers=[
                (fresh(f"scene_ffn.{i}.weight"), fresh(f"scene_ffn.{i}.bias"), act)
                for i, (_, _, act) in enumerate(self.scene_layers)
            ],
            text_layers=[
                (fresh(f"text_ffn.{i}.weight"), fresh(f"text_ffn.{i}.bias"), act)
                for i, (_, _, act) in enumerate(self.text_layers)
            ],
        )

    def detached(self) -> "ModelParams":
        """Same values, no gradient tracking. Used for evaluation."""
        return self.with_arrays(self.arrays(), requires_grad=False)


def init_model(config: ModelConfig) -> ModelParams:
    """Seeded Glorot initialization; biases start at zero."""
    config.validate()
    rng = make_rng(config.seed, _CLASSIFIER_STREAM)
    classifiers = [
        (
            Tensor(glorot_uniform(rng, config.feature_dim, size), requires_grad=True),
            Tensor(np.zeros(size), requires_grad=True),
        )
        for size in config.level_sizes
    ]
    attention = None
    if config.use_attention:
        attention = AttentionParams.initialize(
            config.num_heads, config.token_embed_dim, make_rng(config.seed, _ATTENTION_STREAM)
        )
    d = config.total_classes
    params = ModelParams(
        config=config,
        classifiers=classifiers,
        attention=attention,
        scene_layers=dense_stack(
            geometric_widths(d, config.scene_dim, config.scene_depth),
            make_rng(config.seed, _SCENE_STREAM),
        ),
        text_layers=dense_stack(
            geometric_widths(d, config.text_dim, config.text_depth),
            make_rng(config.seed, _TEXT_STREAM),
        ),
    )
    for name, tensor in params.named_tensors().items():
        tensor.name = name
    return params


def count_parameters(params: ModelParams) -> int:
    return sum(t.size for t in params.named_tensors().values())


# =============================================================================
# Forward pass
# =============================================================================

@dataclass
class ForwardOutput:
    """
    Outputs of one forward pass. Shapes carry a leading batch axis when the
    input features did.
    """
    level_logits: tuple[Tensor, ...]   # PV_H1..PV_H4
    combined: Tensor                   # PV
    attended: Tensor                   # PV'
    scene_logits: Tensor               # PV'_s
    text_vector: Tensor                # PV'_t

    @property
    def batched(self) -> bool:
        return self.combined.ndim == 2


def forward(features: Union[Tensor, np.ndarray], params: ModelParams) -> ForwardOutput:
    """Run the head on one feature vector or a (batch, feature_dim) matrix."""
    x = as_tensor(features)
    if x.ndim not in (1, 2) or x.shape[-1] != params.config.feature_dim:
        raise DimensionError(
            f"features must have trailing dimension {params.config.feature_dim}, got shape {x.shape}"
        )
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)

    logits = [x @ weight + bias for weight, bias in params.classifiers]
    combined = concat(logits, axis=-1)
    if params.attention is not None:
        attended = multihead_attention(combined, params.attention)
    else:
        attended = combined
    scene_logits = ffn_forward(attended, params.scene_layers)
    text_vector = ffn_forward(attended, params.text_layers)

    if squeeze:
        def flat(t: Tensor) -> Tensor:
            return t.reshape(t.shape[-1])
        return ForwardOutput(
            level_logits=tuple(flat(t) for t in logits),
            combined=flat(combined),
            attended=flat(attended),
            scene_logits=flat(scene_logits),
            text_vector=flat(text_vector),
        )
    return ForwardOutput(tuple(logits), combined, attended, scene_logits, text_vector)


def level_probabilities(
    params: ModelParams,
    features: np.ndarray,
    batch_size: int = 256,
) -> list[np.ndarray]:
    """Softmax probabilities per hierarchy for an (N, feature_dim) matrix."""
    frozen = params.detached()
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    chunks: list[list[np.ndarray]] = [[] for _ in range(NUM_HIERARCHIES)]
    for start in range(0, len(features), batch_size):
        output = forward(features[start:start + batch_size], frozen)
        for h, logits in enumerate(output.level_logits):
            chunks[h].append(np.exp(logits.log_softmax(axis=-1).data))
    return [
        np.concatenate(parts) if parts else np.zeros((0, size))
        for parts, size in zip(chunks, params.config.level_sizes)
    ]


# =============================================================================
# Losses
# =============================================================================

def _rows(t: Tensor) -> Tensor:
    return t.reshape(1, -1) if t.ndim == 1 else t


def _label_matrix(labels, batch: int, sizes: Sequence[int]) -> np.ndarray:
    matrix = np.asarray(labels, dtype=np.int64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.shape != (batch, NUM_HIERARCHIES):
        raise DimensionError(f"labels must have shape ({batch}, 4), got {matrix.shape}")
    for h, size in enumerate(sizes):
        bad = (matrix[:, h] < 0) | (matrix[:, h] >= size)
        if bad.any():
            raise LabelIndexError(
                f"hierarchy {h} label {int(matrix[bad, h][0])} out of range [0, {size})"
            )
    return matrix


def loss_geo(output: ForwardOutput, labels: Union[LabelPath, np.ndarray]) -> Tensor:
    """Sum over hierarchies of cross-entropy, averaged over the batch."""
    level_logits = [_rows(t) for t in output.level_logits]
    batch = level_logits[0].shape[0]
    matrix = _label_matrix(labels, batch, [t.shape[-1] for t in level_logits])
    rows = np.arange(batch)
    total: Optional[Tensor] = None
    for h, logits in enumerate(level_logits):
        term = -logits.log_softmax(axis=-1)[rows, matrix[:, h]].mean()
        total = term if total is None else total + term
    return total


def loss_scene(scene_logits: Tensor, soft_label: np.ndarray) -> Tensor:
    """Cross-entropy between a soft scene distribution and softmax(scene_logits)."""
    logits = _rows(as_tensor(scene_logits))
    target = np.atleast_2d(np.asarray(soft_label, dtype=np.float64))
    if target.shape != logits.shape:
        raise DimensionError(f"scene target shape {target.shape} does not match logits {logits.shape}")
    return -(logits.log_softmax(axis=-1) * target).sum(axis=-1).mean()


def loss_tla(text_vector: Tensor, text_target: np.ndarray) -> Tensor:
    """Negative cosine similarity between PV'_t and F_t, averaged over the batch."""
    predicted = _rows(as_tensor(text_vector))
    target = np.atleast_2d(np.asarray(text_target, dtype=np.float64))
    if target.shape != predicted.shape:
        raise DimensionError(f"text target shape {target.shape} does not match {predicted.shape}")
    target_norm = np.linalg.norm(target, axis=-1)
    if np.any(target_norm == 0) or np.any(np.linalg.norm(predicted.data, axis=-1) == 0):
        raise DegenerateInputError("cosine similarity of a zero vector")
    predicted_norm = (predicted * predicted).sum(axis=-1).sqrt()
    cosine = (predicted * target).sum(axis=-1) / (predicted_norm * target_norm)
    return -cosine.mean()


@dataclass
class LossBreakdown:
    """The weighted objective plus the unweighted value of each term."""
    total: Tensor
    geo: float
    scene: float
    tla: float

    def to_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "geo": self.geo, "scene": self.scene, "tla": self.tla}


def total_loss(
    output: ForwardOutput,
    labels: Union[LabelPath, np.ndarray],
    soft_label: np.ndarray,
    text_target: np.ndarray,
    weights: Sequence[float] = (1.0, 1.0, 1.0),
) -> LossBreakdown:
    """
    L = w_geo * L_geo + w_scene * L_scene + w_tla * L_TLA.

    A term with weight zero is still evaluated for reporting but kept out of
    the graph.
    """
    terms = (
        loss_geo(output, labels),
        loss_scene(output.scene_logits, soft_label),
        loss_tla(output.text_vector, text_target),
    )
    total: Optional[Tensor] = None
    for weight, term in zip(weights, terms):
        if weight == 0:
            continue
        scaled = term if weight == 1 else term * weight
        total = scaled if total is None else total + scaled
    if total is None:
        total = Tensor(0.0)
    return LossBreakdown(total, terms[0].item(), terms[1].item(), terms[2].item())


def toy_config(seed: int = 0) -> ModelConfig:
    """Small config for gradient checks and tests: features 8, levels 2/2/2/2, d_s 3, d_t 4."""
    return ModelConfig(level_sizes=(2, 2, 2, 2), feature_dim=8, scene_dim=3, text_dim=4, seed=seed)


def model_gradient_check(
    config: ModelConfig,
    points: int = 20,
    eps: float = 1e-5,
    batch_size: int = 3,
    seed: int = 0,
    max_entries: Optional[int] = None,
) -> list[float]:
    """
    Worst relative gradient error of the total loss at ``points`` random
    parameter draws, each with random features, labels and targets.
    """
    errors = []
    for point in range(points):
        point_seed = derive_seed(seed, point)
        template = init_model(dataclasses.replace(config, seed=point_seed))
        rng = make_rng(point_seed, 99)
        features = rng.standard_normal((batch_size, config.feature_dim))
        labels = np.stack([rng.integers(0, d, size=batch_size) for d in config.level_sizes], axis=1)
        soft = rng.dirichlet(np.ones(config.scene_dim), size=batch_size)
        text = rng.standard_normal((batch_size, config.text_dim))
        # random biases so ReLU units are not all at their kink
        arrays = {
            name: value + (0.1 * rng.standard_normal(value.shape) if name.endswith("bias") else 0.0)
            for name, value in template.arrays().items()
        }

        def loss_fn(tensors: dict[str, Tensor]) -> Tensor:
            output = forward(features, template.from_named(tensors))
            return total_loss(output, labels, soft, text, config.loss_weights).total

        errors.append(gradient_check(loss_fn, arrays, eps=eps, max_entries=max_entries, seed=point_seed))
    return errors


# =============================================================================
# Checkpoints
# =============================================================================

def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> None:
    config_blob = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_blob)),
        config_blob,
    ]
    for name, tensor in params.named_tensors().items():
        chunks.append(pack_text(name))
        chunks.append(struct.pack("<Q", tensor.size))
        chunks.append(tensor.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info("saved checkpoint to %s", path)


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    blob = Path(path).read_bytes()
    params = checkpoint_from_bytes(blob)
    logger.info("loaded checkpoint from %s", path)
    return params


def checkpoint_from_bytes(blob: bytes) -> ModelParams:
    reader = ByteReader(blob)
    take = reader.take

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (config_length,) = reader.unpack("<I")
    config_start = reader.offset
    try:
        config = ModelConfig.from_dict(json.loads(take(config_length).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint config is not valid JSON: {e}", config_start) from None

    template = init_model(config)
    expected = {name: t.shape for name, t in template.named_tensors().items()}
    arrays: dict[str, np.ndarray] = {}
    while reader.remaining:
        section_start = reader.offset
        name = reader.text()
        (count,) = reader.unpack("<Q")
        if name not in expected:
            raise FormatError(f"unexpected parameter section {name!r}", section_start)
        if count != int(np.prod(expected[name])):
            raise FormatError(f"{name}: {count} values, expected {int(np.prod(expected[name]))}", section_start)
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        arrays[name] = values.reshape(expected[name])
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise FormatError(f"checkpoint is missing parameter sections {missing}", reader.offset)
    return template.with_arrays(arrays)


def iter_batches(size: int, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[np.ndarray]:
    """Index batches over ``range(size)``; the last partial batch is kept."""
    indices = np.arange(size) if order is None else order
    for start in range(0, size, batch_size):
        yield indices[start:start + batch_size]
