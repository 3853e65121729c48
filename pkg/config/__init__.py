"""
Configuration Module for the SAN Toolkit
"""

from .settings import *
from .experiment import (
    ExperimentConfig,
    Variant,
    apply_overrides,
    dump_experiment_config,
    load_experiment_config,
)

__all__ = [
    'NU_Y',
    'NU_Z',
    'CLAMP_EPS',
    'TOP_N',
    'LAMBDA',
    'BETA',
    'ALPHA',
    'OUTPUT_DIR',
    'LOG_LEVEL',
    'LOG_FILE',
    'VERBOSE',
    'WORKERS',
    'validate_configuration',
    'print_configuration',
    'ExperimentConfig',
    'Variant',
    'apply_overrides',
    'dump_experiment_config',
    'load_experiment_config',
]
