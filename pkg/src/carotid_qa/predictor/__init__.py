"""Predictors mapping a polar patch to per-ray (lumen radius, wall width)."""
from .cnn import (CNNPredictor, PolarCNN, PredictorConfig, init_params, predict, read_weights,
                  write_weights)
from .oracle import OracleConfig, OraclePredictor, oracle_predict
from .train import TrainConfig, TrainResult, grad_check, train, write_train_log

__all__ = [
    "CNNPredictor", "PolarCNN", "PredictorConfig", "init_params", "predict", "read_weights",
    "write_weights", "OracleConfig", "OraclePredictor", "oracle_predict", "TrainConfig",
    "TrainResult", "grad_check", "train", "write_train_log",
]
