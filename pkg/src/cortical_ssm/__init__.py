"""Cortical-SSM: wavelet front-end plus frequency- and electrode-wise deep state-space models
for motor-imagery EEG/ECoG classification, written against numpy only."""

from .model import ModelConfig, count_parameters, init_params, model_forward, predict_proba
from .signal_io import (ConfigurationError, FoldSplit, LabeledDataset, SignalTensor, SyntheticSpec,
                        generate_synthetic, kfold_split, load_dataset, save_dataset)
from .training import TrainHyper, train
from .wavelet_conv import FrontEndConfig

__all__ = [
    "ConfigurationError", "FoldSplit", "FrontEndConfig", "LabeledDataset", "ModelConfig", "SignalTensor",
    "SyntheticSpec", "TrainHyper", "count_parameters", "generate_synthetic", "init_params", "kfold_split",
    "load_dataset", "model_forward", "predict_proba", "save_dataset", "train",
]
