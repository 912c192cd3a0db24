"""Budget-constrained neuron selection for sparse fine-tuning."""
from .engine import (AvgPool2d, BatchNorm2d, Conv2d, Dense, Flatten, MaxPool2d, ReLU, Sequential,
                     backward, forward, sgd_step, softmax_cross_entropy)
from .estimator import BudgetedFineTuner
from .registry import build_model, enumerate_neurons, load_checkpoint, save_checkpoint
from .selection import StaticScheme, UpdateMask, next_mask, rank, select_budget_prefix, select_random
from .trainer import FineTuner, RunConfig, cosine_lr, evaluate, run_finetune, run_pretrain

__version__ = "0.1.0"

__all__ = [
    "AvgPool2d", "BatchNorm2d", "BudgetedFineTuner", "Conv2d", "Dense", "FineTuner", "Flatten",
    "MaxPool2d", "ReLU", "RunConfig", "Sequential", "StaticScheme", "UpdateMask", "backward",
    "build_model", "cosine_lr", "enumerate_neurons", "evaluate", "forward", "load_checkpoint",
    "next_mask", "rank", "run_finetune", "run_pretrain", "save_checkpoint", "select_budget_prefix",
    "select_random", "sgd_step", "softmax_cross_entropy",
]
