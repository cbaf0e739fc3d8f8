"""
Four-level label space: city -> state/province -> country -> continent.
"""

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

from geoloc.errors import (
    EmptyTaxonomyError,
    FormatError,
    InputError,
    LabelIndexError,
    TaxonomyInconsistencyError,
)

logger = logging.getLogger(__name__)

HIERARCHIES = ("city", "state", "country", "continent")
NUM_HIERARCHIES = len(HIERARCHIES)


class LabelPath(NamedTuple):
    """Class ids of one sample, finest first."""
    city: int
    state: int
    country: int
    continent: int


@dataclass(frozen=True)
class Taxonomy:
    """
    Class names per hierarchy and the parent of every non-continent class.

    ``names[h]`` lists hierarchy h's class names in id order and
    ``parents[h][i]`` is the id in hierarchy h+1 of class i of hierarchy h.
    """

    names: tuple[tuple[str, ...], ...]
    parents: tuple[tuple[int, ...], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(level) for level in self.names)

    @property
    def total_size(self) -> int:
        return sum(self.sizes)

    @property
    def num_cities(self) -> int:
        return len(self.names[0])

    @cached_property
    def _name_index(self) -> tuple[dict[str, int], ...]:
        return tuple({name: i for i, name in enumerate(level)} for level in self.names)

    @cached_property
    def paths(self) -> np.ndarray:
        """(d1, 4) int array: the full ancestor chain of every city."""
        table = np.zeros((self.num_cities, NUM_HIERARCHIES), dtype=np.int64)
        table[:, 0] = np.arange(self.num_cities)
        for level in range(1, NUM_HIERARCHIES):
            table[:, level] = np.asarray(self.parents[level - 1])[table[:, level - 1]]
        return table

    def ancestor_map(self, level: int, target: int) -> np.ndarray:
        """Map every class id of ``level`` to its ancestor id at ``target`` (target >= level)."""
        ids = np.arange(self.sizes[level])
        for step in range(level, target):
            ids = np.asarray(self.parents[step])[ids]
        return ids

    def index(self, level: int, name: str) -> int:
        try:
            return self._name_index[level][name]
        except KeyError:
            raise LabelIndexError(f"unknown {HIERARCHIES[level]} {name!r}") from None

    def name(self, level: int, class_id: int) -> str:
        if not 0 <= class_id < self.sizes[level]:
            raise LabelIndexError(
                f"{HIERARCHIES[level]} id {class_id} out of range [0, {self.sizes[level]})"
            )
        return self.names[level][class_id]

    def path_names(self, path: LabelPath) -> tuple[str, ...]:
        return tuple(self.name(level, class_id) for level, class_id in enumerate(path))

    def ancestors_of(self, city_id: int) -> LabelPath:
        """The unique (city, state, country, continent) chain above ``city_id``."""
        if not 0 <= int(city_id) < self.num_cities:
            raise LabelIndexError(f"city id {city_id} out of range [0, {self.num_cities})")
        return LabelPath(*(int(x) for x in self.paths[int(city_id)]))

    def path_from_names(self, city: str, state: str, country: str, continent: str) -> LabelPath:
        path = LabelPath(
            self.index(0, city), self.index(1, state),
            self.index(2, country), self.index(3, continent),
        )
        self.validate_path(path)
        return path

    def is_valid_path(self, path: Sequence[int]) -> bool:
        if len(path) != NUM_HIERARCHIES:
            return False
        if not all(0 <= int(c) < size for c, size in zip(path, self.sizes)):
            return False
        return tuple(int(x) for x in self.paths[int(path[0])]) == tuple(int(x) for x in path)

    def validate_path(self, path: Sequence[int]) -> None:
        for level, (class_id, size) in enumerate(zip(path, self.sizes)):
            if not 0 <= int(class_id) < size:
                raise LabelIndexError(
                    f"{HIERARCHIES[level]} id {class_id} out of range [0, {size})"
                )
        if not self.is_valid_path(path):
            raise TaxonomyInconsistencyError(f"label path {tuple(path)} is not an ancestor chain")

    def records(self) -> list[tuple[str, str, str, str]]:
        """One (city, state, country, continent) name record per city."""
        return [
            tuple(self.names[level][row[level]] for level in range(NUM_HIERARCHIES))
            for row in self.paths
        ]

    def fingerprint(self) -> str:
        """SHA-256 over names and parent maps."""
        digest = hashlib.sha256()
        for record in self.records():
            digest.update("\t".join(record).encode("utf-8"))
            digest.update(b"\n")
        for level in self.names:
            digest.update(("\x1f".join(level)).encode("utf-8"))
            digest.update(b"\x1e")
        return digest.hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        lines = ["# city\tstate\tcountry\tcontinent"]
        lines.extend("\t".join(record) for record in self.records())
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_taxonomy(class_definitions: Iterable[Sequence[str]]) -> Taxonomy:
    """
    Build a taxonomy from (city, state, country, continent) name records.

    Ids follow first appearance within each hierarchy. A class listed under
    two different parents raises TaxonomyInconsistencyError.
    """
    names: list[dict[str, int]] = [{} for _ in range(NUM_HIERARCHIES)]
    parents: list[dict[int, int]] = [{} for _ in range(NUM_HIERARCHIES - 1)]

    count = 0
    for record in class_definitions:
        record = tuple(str(field).strip() for field in record)
        if len(record) != NUM_HIERARCHIES:
            raise InputError(f"class record needs 4 fields, got {len(record)}: {record}")
        if not all(record):
            raise InputError(f"class record has an empty field: {record}")
        count += 1
        ids = [names[level].setdefault(record[level], len(names[level])) for level in range(NUM_HIERARCHIES)]
        for level in range(NUM_HIERARCHIES - 1):
            known = parents[level].setdefault(ids[level], ids[level + 1])
            if known != ids[level + 1]:
                previous = next(n for n, i in names[level + 1].items() if i == known)
                raise TaxonomyInconsistencyError(
                    f"{HIERARCHIES[level]} {record[level]!r} appears under both "
                    f"{HIERARCHIES[level + 1]} {previous!r} and {record[level + 1]!r}"
                )

    if count == 0:
        raise EmptyTaxonomyError("no class records supplied")

    taxonomy = Taxonomy(
        names=tuple(tuple(level) for level in names),
        parents=tuple(
            tuple(parents[level][i] for i in range(len(names[level])))
            for level in range(NUM_HIERARCHIES - 1)
        ),
    )
    logger.debug("built taxonomy with sizes %s", taxonomy.sizes)
    return taxonomy


def ancestors_of(city_id: int, taxonomy: Taxonomy) -> LabelPath:
    return taxonomy.ancestors_of(city_id)


def load_taxonomy(path: Union[str, Path]) -> Taxonomy:
    """Read a tab-separated class file; '#' lines and blank lines are skipped."""
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != NUM_HIERARCHIES:
            raise FormatError(
                f"{path}: line {line_number} has {len(fields)} tab-separated fields, expected 4"
            )
        records.append(fields)
    return build_taxonomy(records)
