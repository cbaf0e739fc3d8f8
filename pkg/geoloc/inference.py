"""
Hierarchical inference.

Refinement multiplies each class probability by the probabilities of its
coarser ancestors. Predictions can use the raw probabilities ("none"), the
refined scores per hierarchy ("independent"), or the refined city followed
by its ancestor chain ("codependent").
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from geoloc.errors import DimensionError, InputError
from geoloc.taxonomy import HIERARCHIES, NUM_HIERARCHIES, LabelPath, Taxonomy

EVAL_MODES = ("none", "independent", "codependent")

LOG_FLOOR = -745.0


@dataclass(frozen=True)
class HierProbs:
    """Probability vectors per hierarchy, finest first."""
    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        levels = tuple(np.asarray(level, dtype=np.float64) for level in self.levels)
        if len(levels) != NUM_HIERARCHIES:
            raise DimensionError(f"need 4 probability vectors, got {len(levels)}")
        object.__setattr__(self, "levels", levels)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(level.shape[-1] for level in self.levels)

    def validate(self, taxonomy: Taxonomy, tol: float = 1e-9) -> None:
        if self.sizes != taxonomy.sizes:
            raise DimensionError(f"probability sizes {self.sizes} do not match taxonomy {taxonomy.sizes}")
        for h, level in enumerate(self.levels):
            if np.any(level < -tol) or np.any(np.abs(level.sum(axis=-1) - 1.0) > tol):
                raise InputError(f"{HIERARCHIES[h]} probabilities are not on the simplex")


def _check_sizes(levels: Sequence[np.ndarray], taxonomy: Taxonomy) -> None:
    sizes = tuple(np.shape(level)[-1] for level in levels)
    if sizes != taxonomy.sizes:
        raise DimensionError(f"probability sizes {sizes} do not match taxonomy {taxonomy.sizes}")


def _floored_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p), LOG_FLOOR)


def refined_log_scores(levels: Sequence[np.ndarray], taxonomy: Taxonomy) -> list[np.ndarray]:
    """
    log P(c) plus the log probabilities of every strict ancestor of c.

    Works on single vectors or on (N, d_h) batches. Continent scores are the
    raw log probabilities.
    """
    _check_sizes(levels, taxonomy)
    logs = [_floored_log(np.asarray(level, dtype=np.float64)) for level in levels]
    refined = []
    for h in range(NUM_HIERARCHIES):
        score = logs[h].copy()
        for g in range(h + 1, NUM_HIERARCHIES):
            score = score + logs[g][..., taxonomy.ancestor_map(h, g)]
        refined.append(score)
    return refined


def refine_probabilities(probs: HierProbs, taxonomy: Taxonomy) -> HierProbs:
    """Refined scores, unnormalized, back in probability space."""
    return HierProbs(tuple(np.exp(s) for s in refined_log_scores(probs.levels, taxonomy)))


def _ranking(scores: np.ndarray) -> tuple[int, ...]:
    """Class ids by descending score, ties to the lowest id."""
    return tuple(int(i) for i in np.argsort(-scores, kind="stable"))


@dataclass(frozen=True)
class PredictionReport:
    """Prediction for one sample under one evaluation mode."""
    mode: str
    path: LabelPath
    rankings: tuple[tuple[int, ...], ...]
    log_scores: tuple[np.ndarray, ...]

    @property
    def city_scores(self) -> np.ndarray:
        """Refined city scores (raw probabilities in mode "none")."""
        return np.exp(self.log_scores[0])

    def topk(self, hierarchy: int, k: int) -> tuple[int, ...]:
        return self.rankings[hierarchy][:k]

    def to_dict(self, taxonomy: Optional[Taxonomy] = None, k: int = 5) -> dict:
        """Convert to dictionary for JSON serialization."""
        data = {
            "mode": self.mode,
            "path": list(self.path),
            "topk": {HIERARCHIES[h]: list(self.topk(h, k)) for h in range(NUM_HIERARCHIES)},
        }
        if taxonomy is not None:
            data["path_names"] = list(taxonomy.path_names(self.path))
            data["topk_names"] = {
                HIERARCHIES[h]: [taxonomy.name(h, c) for c in self.topk(h, k)]
                for h in range(NUM_HIERARCHIES)
            }
        return data


def _codependent_scores(city_log: np.ndarray, taxonomy: Taxonomy) -> list[np.ndarray]:
    # coarse classes are scored by their best descendant city
    scores = [city_log]
    for h in range(1, NUM_HIERARCHIES):
        best = np.full(city_log.shape[:-1] + (taxonomy.sizes[h],), -np.inf)
        ancestors = taxonomy.ancestor_map(0, h)
        for city, ancestor in enumerate(ancestors):
            best[..., ancestor] = np.maximum(best[..., ancestor], city_log[..., city])
        scores.append(best)
    return scores


def _report_row(
    mode: str,
    scores: Sequence[np.ndarray],
    taxonomy: Taxonomy,
) -> PredictionReport:
    rankings = [_ranking(s) for s in scores]
    if mode == "codependent":
        path = taxonomy.ancestors_of(rankings[0][0])
        for h in range(1, NUM_HIERARCHIES):
            rest = tuple(c for c in rankings[h] if c != path[h])
            rankings[h] = (path[h],) + rest
    else:
        path = LabelPath(*(r[0] for r in rankings))
    return PredictionReport(mode, path, tuple(rankings), tuple(np.asarray(s) for s in scores))


def predict_batch(
    levels: Sequence[np.ndarray],
    taxonomy: Taxonomy,
    mode: str,
) -> list[PredictionReport]:
    """Reports for (N, d_h) probability matrices."""
    if mode not in EVAL_MODES:
        raise InputError(f"unknown eval mode {mode!r}, expected one of {EVAL_MODES}")
    levels = [np.atleast_2d(np.asarray(level, dtype=np.float64)) for level in levels]
    _check_sizes(levels, taxonomy)
    if mode == "none":
        scores = [_floored_log(level) for level in levels]
    else:
        scores = refined_log_scores(levels, taxonomy)
        if mode == "codependent":
            scores = _codependent_scores(scores[0], taxonomy)
    count = levels[0].shape[0]
    return [_report_row(mode, [s[i] for s in scores], taxonomy) for i in range(count)]


def predict(probs: HierProbs, taxonomy: Taxonomy, mode: str) -> PredictionReport:
    return predict_batch(probs.levels, taxonomy, mode)[0]


def topk_accuracy(
    reports: Sequence[PredictionReport],
    ground_truths: Sequence[Sequence[int]],
    k: int,
    hierarchy: int,
) -> float:
    """Fraction of samples whose true class is among the k best for ``hierarchy``."""
    if len(reports) != len(ground_truths):
        raise InputError(f"{len(reports)} reports but {len(ground_truths)} ground truths")
    if not reports:
        raise InputError("no reports to score")
    if k < 1:
        raise InputError(f"k must be at least 1, got {k}")
    hits = sum(
        int(truth[hierarchy]) in report.topk(hierarchy, k)
        for report, truth in zip(reports, ground_truths)
    )
    return hits / len(reports)
