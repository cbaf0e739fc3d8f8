"""
Datasets of pre-extracted video features.

Feature records, the "CGFT" binary feature file, JSON-lines manifests,
the sequence-length filter, the stratified 80:20 split, and the synthetic
stand-in dataset used for desk-scale experiments.
"""

import json
import logging
import math
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from geoloc.binio import ByteReader, pack_text
from geoloc.errors import DimensionError, FormatError, InputError, StratificationError
from geoloc.numerics import make_rng
from geoloc.scene import DEFAULT_NUM_SCENES
from geoloc.taxonomy import NUM_HIERARCHIES, LabelPath, Taxonomy, build_taxonomy

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"CGFT"
FEATURE_VERSION = 1

SCENE_FRAMES = 0
SCENE_SOFT = 1

FRAMES_PER_VIDEO = 15
MIN_FRAMES = 15


@dataclass(eq=False)
class FeatureRecord:
    """One video after encoding: its feature vector, labels and scene information."""
    sample_id: str
    features: np.ndarray
    labels: LabelPath
    frame_scenes: Optional[tuple[int, ...]] = None
    soft_scene: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 1:
            raise DimensionError(f"{self.sample_id}: features must be a vector, got {self.features.shape}")
        self.labels = LabelPath(*(int(x) for x in self.labels))
        if (self.frame_scenes is None) == (self.soft_scene is None):
            raise InputError(f"{self.sample_id}: needs exactly one of frame_scenes or soft_scene")
        if self.frame_scenes is not None:
            self.frame_scenes = tuple(int(x) for x in self.frame_scenes)
        else:
            self.soft_scene = np.asarray(self.soft_scene, dtype=np.float64)

    @property
    def num_frames(self) -> Optional[int]:
        return None if self.frame_scenes is None else len(self.frame_scenes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        if (self.sample_id, self.labels, self.frame_scenes) != (other.sample_id, other.labels, other.frame_scenes):
            return False
        if (self.soft_scene is None) != (other.soft_scene is None):
            return False
        if self.soft_scene is not None and self.soft_scene.tobytes() != other.soft_scene.tobytes():
            return False
        return self.features.shape == other.features.shape and self.features.tobytes() == other.features.tobytes()

    __hash__ = None


def feature_matrix(records: Sequence[FeatureRecord]) -> np.ndarray:
    if not records:
        raise InputError("no records")
    return np.stack([r.features for r in records])


def label_matrix(records: Sequence[FeatureRecord]) -> np.ndarray:
    return np.array([r.labels for r in records], dtype=np.int64).reshape(-1, NUM_HIERARCHIES)


def validate_records(records: Sequence[FeatureRecord], taxonomy: Taxonomy, feature_dim: int) -> None:
    for record in records:
        if record.features.shape != (feature_dim,):
            raise DimensionError(
                f"{record.sample_id}: feature dimension {record.features.shape[0]}, expected {feature_dim}"
            )
        taxonomy.validate_path(record.labels)


# =============================================================================
# Binary feature files
# =============================================================================

def features_to_bytes(records: Sequence[FeatureRecord], feature_dim: Optional[int] = None) -> bytes:
    if feature_dim is None:
        feature_dim = records[0].features.shape[0] if records else 0
    chunks = [FEATURE_MAGIC, struct.pack("<IQI", FEATURE_VERSION, len(records), feature_dim)]
    for record in records:
        if record.features.shape != (feature_dim,):
            raise DimensionError(
                f"{record.sample_id}: feature dimension {record.features.shape[0]}, expected {feature_dim}"
            )
        chunks.append(pack_text(record.sample_id))
        chunks.append(struct.pack("<4I", *record.labels))
        if record.frame_scenes is not None:
            chunks.append(struct.pack("<BI", SCENE_FRAMES, len(record.frame_scenes)))
            chunks.append(np.asarray(record.frame_scenes, dtype="<u4").tobytes())
        else:
            chunks.append(struct.pack("<BI", SCENE_SOFT, len(record.soft_scene)))
            chunks.append(record.soft_scene.astype("<f8").tobytes())
        chunks.append(record.features.astype("<f8").tobytes())
    return b"".join(chunks)


def features_from_bytes(blob: bytes) -> list[FeatureRecord]:
    reader = ByteReader(blob)
    if reader.take(4) != FEATURE_MAGIC:
        raise FormatError("not a feature file (bad magic)", 0)
    version, count, feature_dim = reader.unpack("<IQI")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)

    records = []
    for _ in range(count):
        start = reader.offset
        sample_id = reader.text()
        labels = LabelPath(*reader.unpack("<4I"))
        kind, length = reader.unpack("<BI")
        if kind == SCENE_FRAMES:
            frames = np.frombuffer(reader.take(4 * length), dtype="<u4")
            scene = {"frame_scenes": tuple(int(x) for x in frames)}
        elif kind == SCENE_SOFT:
            scene = {"soft_scene": np.frombuffer(reader.take(8 * length), dtype="<f8").astype(np.float64)}
        else:
            raise FormatError(f"{sample_id}: unknown scene kind {kind}", start)
        features = np.frombuffer(reader.take(8 * feature_dim), dtype="<f8").astype(np.float64)
        records.append(FeatureRecord(sample_id, features, labels, **scene))
    if reader.remaining:
        raise FormatError("trailing bytes after last record", reader.offset)
    return records


def write_features(
    records: Sequence[FeatureRecord],
    path: Union[str, Path],
    feature_dim: Optional[int] = None,
) -> None:
    Path(path).write_bytes(features_to_bytes(records, feature_dim))
    logger.info("wrote %d records to %s", len(records), path)


def read_features(path: Union[str, Path]) -> list[FeatureRecord]:
    return features_from_bytes(Path(path).read_bytes())


# =============================================================================
# Manifests
# =============================================================================

def read_manifest(
    path: Union[str, Path],
    taxonomy: Optional[Taxonomy] = None,
    min_frames: Optional[int] = None,
) -> tuple[list[FeatureRecord], Taxonomy]:
    """
    Load a JSON-lines manifest.

    Each line names a feature file (relative to the manifest) and an index
    into it, the four label names, and either ``frame_scenes`` or
    ``soft_scene``. Labels come from the manifest, not the feature file. When
    ``taxonomy`` is None it is built from the manifest's label names.
    """
    path = Path(path)
    entries = []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: line {line_number} is not JSON: {e}") from None
        if not isinstance(entry, dict):
            raise FormatError(f"{path}: line {line_number} is not a JSON object")
        missing = {"id", "feature_file", "feature_index", "city", "state", "country", "continent"} - set(entry)
        if missing:
            raise FormatError(f"{path}: line {line_number} lacks {sorted(missing)}")
        entries.append(entry)

    if taxonomy is None:
        taxonomy = build_taxonomy(
            (e["city"], e["state"], e["country"], e["continent"]) for e in entries
        )

    feature_files: dict[Path, list[FeatureRecord]] = {}
    records = []
    for entry in entries:
        source = path.parent / entry["feature_file"]
        if source not in feature_files:
            feature_files[source] = read_features(source)
        stored = feature_files[source]
        index = int(entry["feature_index"])
        if not 0 <= index < len(stored):
            raise FormatError(f"{entry['id']}: feature_index {index} outside {source} ({len(stored)} records)")
        labels = taxonomy.path_from_names(entry["city"], entry["state"], entry["country"], entry["continent"])
        if "frame_scenes" in entry:
            scene = {"frame_scenes": entry["frame_scenes"]}
        elif "soft_scene" in entry:
            scene = {"soft_scene": entry["soft_scene"]}
        else:
            raise FormatError(f"{entry['id']}: manifest entry has no scene information")
        records.append(FeatureRecord(str(entry["id"]), stored[index].features, labels, **scene))

    logger.info("read %d records from %s", len(records), path)
    if min_frames is not None:
        records = filter_short_sequences(records, min_frames)
    return records, taxonomy


def write_manifest(
    records: Sequence[FeatureRecord],
    taxonomy: Taxonomy,
    path: Union[str, Path],
    feature_file: str = "features.cgft",
) -> None:
    """Write ``records`` to ``feature_file`` (next to the manifest) and the manifest itself."""
    path = Path(path)
    write_features(records, path.parent / feature_file)
    lines = []
    for index, record in enumerate(records):
        city, state, country, continent = taxonomy.path_names(record.labels)
        entry = {
            "id": record.sample_id,
            "feature_file": feature_file,
            "feature_index": index,
            "city": city,
            "state": state,
            "country": country,
            "continent": continent,
        }
        if record.frame_scenes is not None:
            entry["frame_scenes"] = list(record.frame_scenes)
        else:
            entry["soft_scene"] = record.soft_scene.tolist()
        lines.append(json.dumps(entry, ensure_ascii=False))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    logger.info("wrote manifest %s", path)


def filter_short_sequences(records: Iterable[FeatureRecord], min_frames: int = MIN_FRAMES) -> list[FeatureRecord]:
    """Drop frame-id records with fewer than ``min_frames`` frames; soft-scene records are kept."""
    kept, dropped = [], 0
    for record in records:
        if record.frame_scenes is not None and len(record.frame_scenes) < min_frames:
            dropped += 1
            continue
        kept.append(record)
    if dropped:
        logger.warning("dropped %d records shorter than %d frames", dropped, min_frames)
    return kept


# =============================================================================
# Splitting
# =============================================================================

def split_sizes(class_sizes: Sequence[int], ratio: float) -> list[int]:
    """
    Train count per class.

    Each class gets floor(n * ratio) clamped to [1, n - 1]. The shortfall
    against round(N * ratio) goes one sample at a time to classes with a
    positive fractional remainder and room left, largest remainder first,
    ties to the lower class index.
    """
    sizes = [max(1, min(n - 1, math.floor(n * ratio))) for n in class_sizes]
    target = math.floor(sum(class_sizes) * ratio + 0.5)
    remainders = [n * ratio - math.floor(n * ratio) for n in class_sizes]
    order = sorted(range(len(class_sizes)), key=lambda c: (-remainders[c], c))
    shortfall = target - sum(sizes)
    for c in order:
        if shortfall <= 0:
            break
        if remainders[c] > 0 and sizes[c] < class_sizes[c] - 1:
            sizes[c] += 1
            shortfall -= 1
    return sizes


def stratified_split(
    records: Sequence[FeatureRecord],
    ratio: float = 0.8,
    seed: int = 0,
    taxonomy: Optional[Taxonomy] = None,
) -> tuple[list[FeatureRecord], list[FeatureRecord]]:
    """
    Per-city train/validation split with every city on both sides.

    Both halves keep the input order. The seeded shuffle only decides which
    samples of a city go to train.
    """
    if not 0.0 < ratio < 1.0:
        raise InputError(f"split ratio must be in (0, 1), got {ratio}")
    by_city: dict[int, list[int]] = defaultdict(list)
    for index, record in enumerate(records):
        by_city[record.labels.city].append(index)

    cities = sorted(by_city)
    for city in cities:
        if len(by_city[city]) < 2:
            name = taxonomy.name(0, city) if taxonomy is not None else str(city)
            raise StratificationError(
                f"city {name!r} has {len(by_city[city])} sample; at least 2 are needed", class_name=name
            )

    sizes = split_sizes([len(by_city[c]) for c in cities], ratio)
    rng = make_rng(seed, 0)
    in_train = np.zeros(len(records), dtype=bool)
    for city, size in zip(cities, sizes):
        members = np.asarray(by_city[city])
        in_train[members[rng.permutation(len(members))[:size]]] = True

    train = [r for r, flag in zip(records, in_train) if flag]
    val = [r for r, flag in zip(records, in_train) if not flag]
    logger.info("split %d records into %d train / %d val", len(records), len(train), len(val))
    return train, val


# =============================================================================
# Synthetic data
# =============================================================================

def synthetic_taxonomy(
    num_cities: int,
    num_states: Optional[int] = None,
    num_countries: Optional[int] = None,
    num_continents: Optional[int] = None,
) -> Taxonomy:
    """
    Balanced toy taxonomy; class i of a level sits under class i * coarse // fine.

    Defaults halve the class count per level and cap continents at 2.
    """
    num_states = num_states or max(1, num_cities // 2)
    num_countries = num_countries or max(1, num_states // 2)
    num_continents = num_continents or max(1, min(2, num_countries))
    counts = (num_cities, num_states, num_countries, num_continents)
    if any(fine < coarse for fine, coarse in zip(counts, counts[1:])) or min(counts) < 1:
        raise InputError(f"class counts must be positive and non-increasing, got {counts}")

    prefixes = ("city", "state", "country", "continent")
    records = []
    for city in range(num_cities):
        ids = [city]
        for fine, coarse in zip(counts, counts[1:]):
            ids.append(ids[-1] * coarse // fine)
        records.append(tuple(f"{p}-{i:03d}" for p, i in zip(prefixes, ids)))
    return build_taxonomy(records)


def generate_synthetic(
    taxonomy: Taxonomy,
    samples_per_city: int,
    noise_sigma: float,
    seed: int = 0,
    feature_dim: int = 384,
    num_scenes: int = DEFAULT_NUM_SCENES,
    frames_per_video: int = FRAMES_PER_VIDEO,
) -> list[FeatureRecord]:
    """
    Gaussian clusters around one random unit prototype per city.

    Each video gets ``frames_per_video`` scene ids drawn from a city-specific
    categorical distribution (Dirichlet(0.5) over the scene classes), so the
    scene labels carry information about the city.
    """
    if samples_per_city < 2:
        raise StratificationError(
            f"samples_per_city must be at least 2 to allow a stratified split, got {samples_per_city}"
        )
    if noise_sigma < 0:
        raise InputError(f"noise_sigma must be non-negative, got {noise_sigma}")

    rng = make_rng(seed, 100)
    prototypes = rng.standard_normal((taxonomy.num_cities, feature_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    scene_mix = rng.dirichlet(np.full(num_scenes, 0.5), size=taxonomy.num_cities)

    records = []
    for city in range(taxonomy.num_cities):
        path = taxonomy.ancestors_of(city)
        for i in range(samples_per_city):
            features = prototypes[city] + noise_sigma * rng.standard_normal(feature_dim)
            frames = rng.choice(num_scenes, size=frames_per_video, p=scene_mix[city])
            records.append(FeatureRecord(f"synth-{city:04d}-{i:04d}", features, path, frame_scenes=frames))
    logger.debug("generated %d synthetic records", len(records))
    return records
