"""
MCP Server for the Geolocalization Head

Exposes a trained checkpoint as MCP tools: predict the location of a video
from its feature vector, describe the loaded model, and summarize the
class-count inequality of a manifest.

The checkpoint and taxonomy are read from HIERGEO_CHECKPOINT and
HIERGEO_TAXONOMY (a .env file is honoured).
"""

import os
import sys
from typing import Optional

# Add parent directory to path to import the project packages
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
from fastmcp import FastMCP

from evaluation.evaluate import dataset_statistics
from evaluation.runner import resolve_checkpoint
from geoloc.config import env_path
from geoloc.data import read_manifest
from geoloc.errors import ConfigError, HierGeoError
from geoloc.inference import EVAL_MODES, predict_batch
from geoloc.model import ModelParams, count_parameters, level_probabilities, load_checkpoint
from geoloc.taxonomy import HIERARCHIES, Taxonomy, load_taxonomy

mcp = FastMCP("Geolocalization Server")


class ModelState:
    """A checkpoint with the taxonomy it was trained on."""

    def __init__(self, params: ModelParams, taxonomy: Taxonomy):
        self.params = resolve_checkpoint(params, taxonomy)
        self.taxonomy = taxonomy

    @classmethod
    def from_env(cls) -> "ModelState":
        checkpoint = env_path("HIERGEO_CHECKPOINT")
        taxonomy = env_path("HIERGEO_TAXONOMY")
        if checkpoint is None or taxonomy is None:
            raise ConfigError("set HIERGEO_CHECKPOINT and HIERGEO_TAXONOMY to serve a model")
        return cls(load_checkpoint(checkpoint), load_taxonomy(taxonomy))

    def predict(self, features: list[float], mode: str, k: int) -> dict:
        vector = np.asarray(features, dtype=np.float64).reshape(1, -1)
        probs = level_probabilities(self.params, vector)
        report = predict_batch(probs, self.taxonomy, mode)[0]
        result = report.to_dict(self.taxonomy, k)
        result["confidence"] = {
            HIERARCHIES[h]: float(probs[h][0, report.path[h]]) for h in range(len(HIERARCHIES))
        }
        return result

    def summary(self) -> dict:
        config = self.params.config
        return {
            "level_sizes": dict(zip(HIERARCHIES, config.level_sizes)),
            "feature_dim": config.feature_dim,
            "use_attention": config.use_attention,
            "loss_weights": list(config.loss_weights),
            "parameters": count_parameters(self.params),
            "taxonomy_fingerprint": config.taxonomy_fingerprint,
        }


# Global model state
_model_state: Optional[ModelState] = None


def get_model() -> ModelState:
    """Get or load the model state."""
    global _model_state
    if _model_state is None:
        _model_state = ModelState.from_env()
    return _model_state


def set_model(state: Optional[ModelState]) -> None:
    global _model_state
    _model_state = state


def inequality_summary(manifest_path: str) -> dict:
    records, taxonomy = read_manifest(manifest_path)
    stats = dataset_statistics(records, taxonomy, name=os.path.basename(manifest_path))
    return stats.to_dict(include_lorenz=False)


# =============================================================================
# MCP Tools
# =============================================================================

@mcp.tool()
def predict_location(features: list[float], mode: str = "codependent", k: int = 5) -> dict:
    """
    Predict city, state, country and continent for one video.

    Args:
        features: The video's encoder feature vector
        mode: "none", "independent" or "codependent" hierarchical evaluation
        k: How many ranked candidates to list per hierarchy

    Returns:
        The predicted path (ids and names), top-k candidates and confidences
    """
    if mode not in EVAL_MODES:
        return {"error": "InputError", "message": f"mode must be one of {EVAL_MODES}"}
    try:
        return get_model().predict(features, mode, k)
    except HierGeoError as e:
        return e.to_dict()


@mcp.tool()
def model_summary() -> dict:
    """
    Describe the loaded checkpoint: class counts, feature size, switches and
    parameter count.
    """
    try:
        return get_model().summary()
    except HierGeoError as e:
        return e.to_dict()


@mcp.tool()
def dataset_inequality(manifest_path: str) -> dict:
    """
    Gini and Hoover indices of the per-class sample counts of a manifest.

    Args:
        manifest_path: Path to a JSON-lines manifest

    Returns:
        Per-hierarchy class count, sample count, Gini and Hoover values
    """
    try:
        return inequality_summary(manifest_path)
    except (HierGeoError, OSError) as e:
        return {"error": type(e).__name__, "message": str(e)}


if __name__ == "__main__":
    mcp.run()
