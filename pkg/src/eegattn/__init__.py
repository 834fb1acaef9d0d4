"""Conv + self-attention decoder for multichannel EEG trials, built on a small
numpy autograd engine, with filtering, synthetic data, cross-validation and
nonparametric comparison tools."""

from .dataio import RawRecording, SynthSpec, TrialSet, generate_synthetic, read_trialset, write_trialset
from .dsp import SosFilter, design_butterworth_bandpass, filtfilt, preprocess
from .layers import ModelConfig, ModelParams, init_params, load_params, model_forward, save_params
from .stats import SampleGroup, compare_conditions, kruskal_wallis, permutation_paired_test
from .tensor import GradCheckReport, Tensor, finite_diff_check
from .training import FoldReport, TrainConfig, cross_validate, evaluate, squared_hinge_loss, train_one_fold

__version__ = "0.1.0"

__all__ = [
    "FoldReport",
    "GradCheckReport",
    "ModelConfig",
    "ModelParams",
    "RawRecording",
    "SampleGroup",
    "SosFilter",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "TrialSet",
    "compare_conditions",
    "cross_validate",
    "design_butterworth_bandpass",
    "evaluate",
    "filtfilt",
    "finite_diff_check",
    "generate_synthetic",
    "init_params",
    "kruskal_wallis",
    "load_params",
    "model_forward",
    "permutation_paired_test",
    "preprocess",
    "read_trialset",
    "save_params",
    "squared_hinge_loss",
    "train_one_fold",
    "write_trialset",
]
