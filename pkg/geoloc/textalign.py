"""
TextLabel feature targets.

Label names are mapped to unit vectors either through a stored embedding
table (the binary "CGET" file) or a deterministic stub embedder, and combined
per sample into the alignment target F_t.
"""

import hashlib
import logging
import struct
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from huggingface_hub import hf_hub_download

from geoloc.binio import ByteReader, pack_text
from geoloc.errors import DegenerateInputError, DimensionError, FormatError, InputError, LabelLookupError
from geoloc.taxonomy import LabelPath, Taxonomy

logger = logging.getLogger(__name__)

DEFAULT_TEXT_DIM = 512

TABLE_MAGIC = b"CGET"
TABLE_VERSION = 1


class AlignmentStrategy(str, Enum):
    CITY_ONLY = "city"
    ALL_HIERARCHIES = "all"


def _unit(vector: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInputError(f"{what} has no usable norm")
    return vector / norm


def stub_embed(text: str, dim: int = DEFAULT_TEXT_DIM) -> np.ndarray:
    """Deterministic unit vector seeded from the UTF-8 bytes of ``text``."""
    if not text:
        raise InputError("cannot embed empty text")
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    vector = np.random.default_rng(seed).standard_normal(dim)
    return vector / np.linalg.norm(vector)


class EmbeddingTable:
    """Label text -> unit vector of a fixed dimension."""

    def __init__(self, vectors: Mapping[str, np.ndarray], dim: Optional[int] = None):
        if dim is None:
            if not vectors:
                raise DimensionError("an empty embedding table needs an explicit dim")
            dim = len(next(iter(vectors.values())))
        self.dim = int(dim)
        self._vectors: dict[str, np.ndarray] = {}
        for text, vector in vectors.items():
            vector = np.asarray(vector, dtype=np.float64)
            if vector.shape != (self.dim,):
                raise DimensionError(f"embedding for {text!r} has shape {vector.shape}, expected ({self.dim},)")
            self._vectors[text] = _unit(vector, f"embedding for {text!r}")

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, text: str) -> bool:
        return text in self._vectors

    def __getitem__(self, text: str) -> np.ndarray:
        try:
            return self._vectors[text]
        except KeyError:
            raise LabelLookupError(f"no embedding for label {text!r}") from None

    def texts(self) -> list[str]:
        return list(self._vectors)

    def lookup(self, text: str, stub_fallback: bool = False) -> np.ndarray:
        if text in self._vectors:
            return self._vectors[text]
        if not stub_fallback:
            raise LabelLookupError(f"no embedding for label {text!r}")
        logger.warning("no embedding for %r, using stub embedder", text)
        return stub_embed(text, self.dim)

    @classmethod
    def from_names(cls, names: Iterable[str], dim: int = DEFAULT_TEXT_DIM) -> "EmbeddingTable":
        return cls({name: stub_embed(name, dim) for name in dict.fromkeys(names)}, dim=dim)

    @classmethod
    def for_taxonomy(cls, taxonomy: Taxonomy, dim: int = DEFAULT_TEXT_DIM) -> "EmbeddingTable":
        return cls.from_names((name for level in taxonomy.names for name in level), dim)

    def save(self, path: Union[str, Path]) -> None:
        chunks = [TABLE_MAGIC, struct.pack("<IQI", TABLE_VERSION, len(self._vectors), self.dim)]
        for text, vector in self._vectors.items():
            chunks.append(pack_text(text))
            chunks.append(vector.astype("<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EmbeddingTable":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingTable":
        reader = ByteReader(blob)
        if reader.take(4) != TABLE_MAGIC:
            raise FormatError("not an embedding table (bad magic)", 0)
        version, count, dim = reader.unpack("<IQI")
        if version != TABLE_VERSION:
            raise FormatError(f"unsupported embedding table version {version}", 4)
        vectors: dict[str, np.ndarray] = {}
        for _ in range(count):
            offset = reader.offset
            text = reader.text()
            vector = np.frombuffer(reader.take(4 * dim), dtype="<f4").astype(np.float64)
            norm = float(np.linalg.norm(vector))
            if norm == 0.0 or not np.isfinite(norm):
                raise FormatError(f"embedding for {text!r} has no usable norm", offset)
            vectors[text] = vector / norm
        if reader.offset != len(blob):
            raise FormatError("trailing bytes after last entry", reader.offset)
        return cls(vectors, dim=dim)


def fetch_embedding_table(
    repo_id: str,
    filename: str,
    repo_type: str = "dataset",
    revision: Optional[str] = None,
) -> EmbeddingTable:
    """Download a CGET table from the Hugging Face Hub and load it."""
    local = hf_hub_download(repo_id=repo_id, filename=filename, repo_type=repo_type, revision=revision)
    logger.info("fetched embedding table %s from %s", filename, repo_id)
    return EmbeddingTable.load(local)


def load_embedding_table(source: str) -> EmbeddingTable:
    """Load from a local path, or from ``hf://<owner>/<repo>/<filename>``."""
    if source.startswith("hf://"):
        parts = source[len("hf://"):].split("/", 2)
        if len(parts) != 3 or not all(parts):
            raise InputError(f"hub source must look like hf://owner/repo/file, got {source!r}")
        return fetch_embedding_table(f"{parts[0]}/{parts[1]}", parts[2])
    return EmbeddingTable.load(source)


def compute_text_features(
    path: LabelPath,
    table: EmbeddingTable,
    strategy: Union[AlignmentStrategy, str],
    taxonomy: Taxonomy,
    stub_fallback: bool = False,
) -> np.ndarray:
    """
    Alignment target F_t for one label path.

    City-only uses the city embedding; all-hierarchies averages the four
    embeddings and renormalizes.
    """
    strategy = AlignmentStrategy(strategy)
    names = taxonomy.path_names(path)
    if strategy is AlignmentStrategy.CITY_ONLY:
        return table.lookup(names[0], stub_fallback).copy()
    mean = np.mean([table.lookup(name, stub_fallback) for name in names], axis=0)
    return _unit(mean, f"mean text feature for {names}")


class TextFeatureCache:
    """F_t memoized per label path."""

    def __init__(
        self,
        table: EmbeddingTable,
        strategy: Union[AlignmentStrategy, str],
        taxonomy: Taxonomy,
        stub_fallback: bool = False,
    ):
        self.table = table
        self.strategy = AlignmentStrategy(strategy)
        self.taxonomy = taxonomy
        self.stub_fallback = stub_fallback
        self._cache: dict[LabelPath, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.table.dim

    def features(self, path: LabelPath) -> np.ndarray:
        path = LabelPath(*path)
        if path not in self._cache:
            self._cache[path] = compute_text_features(
                path, self.table, self.strategy, self.taxonomy, self.stub_fallback
            )
        return self._cache[path]

    def batch(self, paths: Sequence[LabelPath]) -> np.ndarray:
        return np.stack([self.features(p) for p in paths]) if paths else np.zeros((0, self.dim))
