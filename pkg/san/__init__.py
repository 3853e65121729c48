"""
SAN Module
Soft contrastive learning, the All-in-One classifier and their evaluation
metrics for open-set and universal domain adaptation.
"""

from .core_math import KernelParams, TopNConfig, kernel_matrix, t_kernel, top_n_softmax
from .errors import SANError
from .losses import (
    AIOProbabilities,
    AugmentationRelation,
    DensityMode,
    PairBatch,
    SCLConfig,
    aio_loss,
    cl_binary_loss,
    scl_cl_gap,
    scl_loss,
    total_loss,
)
from .metrics import EvalCounts, ScoreReport, balance_h_score, eval_counts, h_score
from .model import Decision, NetworkSpec, Parameters, TrainConfig, aio_infer, forward

__version__ = '1.0.0'

__all__ = [
    'KernelParams',
    'TopNConfig',
    'kernel_matrix',
    't_kernel',
    'top_n_softmax',
    'SANError',
    'AIOProbabilities',
    'AugmentationRelation',
    'DensityMode',
    'PairBatch',
    'SCLConfig',
    'aio_loss',
    'cl_binary_loss',
    'scl_cl_gap',
    'scl_loss',
    'total_loss',
    'EvalCounts',
    'ScoreReport',
    'balance_h_score',
    'eval_counts',
    'h_score',
    'Decision',
    'NetworkSpec',
    'Parameters',
    'TrainConfig',
    'aio_infer',
    'forward',
]
