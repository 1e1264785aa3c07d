"""Bayesian neural networks with structured (Householder-correlated) dropout noise."""
from .estimators import VSDClassifier, VSDRegressor
from .inference import Model, Objective, TrainSpec, predict, train

__version__ = "0.1.0"

__all__ = ["VSDClassifier", "VSDRegressor", "Model", "Objective", "TrainSpec", "predict", "train",
           "__version__"]
