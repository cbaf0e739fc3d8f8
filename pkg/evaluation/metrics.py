"""
Evaluation Metrics for the Geolocalization Head

Result containers for accuracy reports, dataset inequality statistics and
ablation grids, each serializable to JSON and printable as a summary.
"""

import statistics
from dataclasses import dataclass, field
from typing import Optional

from geoloc.taxonomy import HIERARCHIES


@dataclass
class EvaluationReport:
    """Top-k accuracy per hierarchy for one evaluation mode."""
    mode: str
    num_samples: int
    accuracy: dict[str, dict[int, float]]
    path_validity: float
    checkpoint: Optional[str] = None

    def top(self, hierarchy: str, k: int = 1) -> float:
        return self.accuracy[hierarchy][k]

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "mode": self.mode,
            "num_samples": self.num_samples,
            "checkpoint": self.checkpoint,
            "path_validity": self.path_validity,
            "accuracy": {
                h: {f"top{k}": value for k, value in sorted(per_k.items())}
                for h, per_k in self.accuracy.items()
            },
        }

    def summary_str(self) -> str:
        """Human-readable summary."""
        ks = sorted(next(iter(self.accuracy.values())))
        header = "".join(f"{'top' + str(k):>10}" for k in ks)
        lines = [
            f"Evaluation Results: {self.mode}",
            f"{'=' * 50}",
            f"Samples: {self.num_samples}",
            f"Taxonomy-valid paths: {self.path_validity * 100:.1f}%",
            f"",
            f"{'Hierarchy':<12}{header}",
        ]
        for hierarchy in HIERARCHIES:
            values = "".join(f"{self.accuracy[hierarchy][k] * 100:>10.2f}" for k in ks)
            lines.append(f"{hierarchy:<12}{values}")
        return "\n".join(lines)


@dataclass
class LevelStatistics:
    """Per-class sample counts of one hierarchy."""
    hierarchy: str
    num_classes: int
    num_samples: int
    mean: float
    median: float
    minimum: int
    maximum: int
    gini: float
    hoover: float
    lorenz: list[tuple[float, float]] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)

    def to_dict(self, include_lorenz: bool = True) -> dict:
        """Convert to dictionary for JSON serialization."""
        data = {
            "hierarchy": self.hierarchy,
            "num_classes": self.num_classes,
            "num_samples": self.num_samples,
            "mean_per_class": round(self.mean, 4),
            "median_per_class": self.median,
            "min_per_class": self.minimum,
            "max_per_class": self.maximum,
            "gini": self.gini,
            "hoover": self.hoover,
            "counts": list(self.counts),
        }
        if include_lorenz:
            data["lorenz"] = [list(point) for point in self.lorenz]
        return data


@dataclass
class DatasetStatistics:
    """Class-count statistics for every hierarchy of a dataset."""
    name: str
    levels: list[LevelStatistics] = field(default_factory=list)

    def level(self, hierarchy: str) -> LevelStatistics:
        for stats in self.levels:
            if stats.hierarchy == hierarchy:
                return stats
        raise KeyError(hierarchy)

    def to_dict(self, include_lorenz: bool = True) -> dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "name": self.name,
            "levels": [s.to_dict(include_lorenz) for s in self.levels],
        }

    def summary_str(self) -> str:
        """Human-readable summary."""
        lines = [
            f"Dataset Statistics: {self.name}",
            f"{'=' * 50}",
            f"{'Hierarchy':<12}{'Classes':>9}{'Samples':>10}{'Mean':>9}{'Gini':>8}{'Hoover':>8}",
        ]
        for s in self.levels:
            lines.append(
                f"{s.hierarchy:<12}{s.num_classes:>9}{s.num_samples:>10}"
                f"{s.mean:>9.1f}{s.gini:>8.3f}{s.hoover:>8.3f}"
            )
        return "\n".join(lines)


@dataclass
class AblationTrial:
    """Validation top-1 of one ablation variant trained with one seed."""
    seed: int
    top1: dict[str, float] = field(default_factory=dict)
    final_loss: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "seed": self.seed,
            "top1": self.top1,
            "final_loss": self.final_loss,
            "error": self.error,
        }


@dataclass
class AblationRow:
    """One variant of the ablation grid, aggregated over seeds."""
    name: str
    scene_mode: Optional[str]
    alignment: Optional[str]
    use_attention: bool
    trials: list[AblationTrial] = field(default_factory=list)

    @property
    def successful_trials(self) -> list[AblationTrial]:
        return [t for t in self.trials if t.error is None]

    @property
    def error(self) -> Optional[str]:
        """First failure, when no trial succeeded."""
        if self.successful_trials or not self.trials:
            return None
        return self.trials[0].error

    def median_top1(self, hierarchy: str) -> Optional[float]:
        """Median over successful trials, None when there are none."""
        values = [t.top1[hierarchy] for t in self.successful_trials]
        if not values:
            return None
        return statistics.median(values)

    def add_trial(self, trial: AblationTrial) -> None:
        self.trials.append(trial)

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "name": self.name,
            "scene_mode": self.scene_mode,
            "alignment": self.alignment,
            "use_attention": self.use_attention,
            "successful_trials": len(self.successful_trials),
            "median_top1": {h: self.median_top1(h) for h in HIERARCHIES},
            "error": self.error,
            "trials": [t.to_dict() for t in self.trials],
        }
