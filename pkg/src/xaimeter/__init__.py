"""Stability, correctness and plausibility metrics for saliency explainers."""
__version__ = "0.1.0"

from ._kernels import BACKEND
from .numeric import UndefinedCorrelationError, l2_distance, pearson, spearman, trapezoid_auc
from .model import Classifier, ClassLogitModel, load_model, save_model, toy_cnn, train
from .explainers import ExplainerSpec, explain
from .perturbation import PerturbationSet, SamplerConfig, sample_adversarial, sample_uniform
from .metrics import LinearSurrogate, cle, lip, lrc, lss, midpoint_gap
from .benchmark import ScoreTable, consensus, consistency, run_matrix
