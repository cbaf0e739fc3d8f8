"""
Hierarchical video geolocalization head over pre-extracted features.
"""

from geoloc.data import FeatureRecord, generate_synthetic, read_manifest, stratified_split
from geoloc.inference import HierProbs, PredictionReport, predict, refine_probabilities, topk_accuracy
from geoloc.model import ModelConfig, ModelParams, forward, init_model, load_checkpoint, save_checkpoint
from geoloc.taxonomy import LabelPath, Taxonomy, build_taxonomy
from geoloc.training import TrainConfig, train

__all__ = [
    "FeatureRecord",
    "HierProbs",
    "LabelPath",
    "ModelConfig",
    "ModelParams",
    "PredictionReport",
    "Taxonomy",
    "TrainConfig",
    "build_taxonomy",
    "forward",
    "generate_synthetic",
    "init_model",
    "load_checkpoint",
    "predict",
    "read_manifest",
    "refine_probabilities",
    "save_checkpoint",
    "stratified_split",
    "topk_accuracy",
    "train",
]
