"""Universal inverse solver driven by a learned denoiser, with unrolled multi-task fine-tuning."""

__version__ = "0.1.0"

from .denoiser import (BiasFreeCNN, BiasFreeCNNConfig, GaussianMMSEDenoiser, GaussianPrior, PretrainConfig,
                       denoise, mmse_denoise_gaussian, pretrain_denoiser)
from .operators import KINDS, OperatorDescriptor, OperatorStack, make_operator
from .solver import NumericDivergenceError, SolverConfig, config_preset, run
from .trainer import (TaskSpec, TrainConfig, TrainingDivergenceError, WeightScheme, builtin_task,
                      calibrate_weight_tables, fine_tune)
from .evaluate import EvalReport, denoise_benchmark, psnr, run_benchmark
from .data import load_checkpoint, load_dataset, read_png, save_checkpoint, write_png

__all__ = [
    "BiasFreeCNN", "BiasFreeCNNConfig", "GaussianMMSEDenoiser", "GaussianPrior", "PretrainConfig",
    "denoise", "mmse_denoise_gaussian", "pretrain_denoiser",
    "KINDS", "OperatorDescriptor", "OperatorStack", "make_operator",
    "NumericDivergenceError", "SolverConfig", "config_preset", "run",
    "TaskSpec", "TrainConfig", "TrainingDivergenceError", "WeightScheme", "builtin_task",
    "calibrate_weight_tables", "fine_tune",
    "EvalReport", "denoise_benchmark", "psnr", "run_benchmark",
    "load_checkpoint", "load_dataset", "read_png", "save_checkpoint", "write_png",
]
