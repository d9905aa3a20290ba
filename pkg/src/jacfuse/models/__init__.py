"""Learners: a 3D CNN on fused Jacobian volumes and per-modality random forests."""
from .cnn import Cnn3dModel, TrainConfig, cnn_forward, cnn_gradcheck, cnn_loss, cnn_train
from .features import FeatureExtractor, extract_features
from .forest import ForestConfig, ForestModel, rf_predict_proba, rf_train, rf_tree_curve

__all__ = [
    "Cnn3dModel",
    "TrainConfig",
    "cnn_forward",
    "cnn_gradcheck",
    "cnn_loss",
    "cnn_train",
    "FeatureExtractor",
    "extract_features",
    "ForestConfig",
    "ForestModel",
    "rf_predict_proba",
    "rf_train",
    "rf_tree_curve",
]
