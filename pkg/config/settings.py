"""
Configuration Settings for the SAN Toolkit
Environment-backed defaults shared by the CLI and the experiment runner
"""

import os
from pathlib import Path
import sys
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Base directory
BASE_DIR = Path(__file__).resolve().parent.parent

# Add project root to path for san / domain_data access
sys.path.insert(0, str(BASE_DIR))

from san.errors import ConfigurationError  # noqa: E402


def _env_float(name: str, default: str, errors: list) -> float:
    raw = os.environ.get(name, default)
    try:
        return float(raw)
    except ValueError:
        errors.append(f"{name}={raw!r} is not a number")
        return float(default)


def _env_int(name: str, default: str, errors: list) -> int:
    raw = os.environ.get(name, default)
    try:
        return int(raw)
    except ValueError:
        errors.append(f"{name}={raw!r} is not an integer")
        return int(default)


_parse_errors: list = []

# ============================================
# KERNEL CONFIGURATION
# ============================================

# Degrees of freedom of the backbone (P) and head (Q) t-kernels
NU_Y = _env_float('SAN_NU_Y', '100', _parse_errors)
NU_Z = _env_float('SAN_NU_Z', '10', _parse_errors)
CLAMP_EPS = _env_float('SAN_CLAMP_EPS', '1e-8', _parse_errors)

# ============================================
# OBJECTIVE CONFIGURATION
# ============================================

TOP_N = _env_int('SAN_TOP_N', '20', _parse_errors)
LAMBDA = _env_float('SAN_LAMBDA', '0.1', _parse_errors)
BETA = _env_float('SAN_BETA', '1.0', _parse_errors)
ALPHA = _env_float('SAN_ALPHA', '0.5', _parse_errors)

# ============================================
# OUTPUT AND LOGGING CONFIGURATION
# ============================================

OUTPUT_DIR = os.environ.get('SAN_OUTPUT_DIR', 'runs')
LOG_LEVEL = os.environ.get('SAN_LOG_LEVEL', 'INFO').upper()
LOG_FILE = os.environ.get('SAN_LOG_FILE', 'run.log')
VERBOSE = os.environ.get('SAN_VERBOSE', 'false').lower() == 'true'

# ============================================
# PERFORMANCE CONFIGURATION
# ============================================

WORKERS = _env_int('SAN_WORKERS', '1', _parse_errors)

# ============================================
# CONFIGURATION VALIDATION
# ============================================

def validate_configuration():
    """Validate configuration settings"""
    errors = list(_parse_errors)
    warnings = []

    if NU_Y <= 0 or NU_Z <= 0:
        errors.append(f"kernel degrees of freedom must be positive (nu_y={NU_Y}, nu_z={NU_Z})")
    if not (0.0 < CLAMP_EPS <= 1e-3):
        errors.append(f"SAN_CLAMP_EPS must lie in (0, 1e-3], got {CLAMP_EPS}")
    if TOP_N < 1:
        errors.append(f"SAN_TOP_N must be positive, got {TOP_N}")
    if LAMBDA < 0 or BETA < 0:
        errors.append("SAN_LAMBDA and SAN_BETA must be non-negative")
    if WORKERS < 1:
        errors.append(f"SAN_WORKERS must be at least 1, got {WORKERS}")
    if LOG_LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
        warnings.append(f"Unknown log level: {LOG_LEVEL}, will use INFO")

    # alpha above ~0.7 lets e^alpha * kappa exceed 1 for close pairs; the clamp absorbs it
    if ALPHA > 0.7:
        warnings.append(f"SAN_ALPHA={ALPHA} often pushes boosted affinities into the clamp")
    if WORKERS > 1:
        warnings.append("Parallel cells are not byte-reproducible in log ordering")

    return errors, warnings


def print_configuration():
    """Print current configuration (for debugging)"""
    if VERBOSE:
        print("=" * 50)
        print("SAN CONFIGURATION")
        print("=" * 50)
        print(f"nu_y / nu_z: {NU_Y} / {NU_Z}")
        print(f"Top-n: {TOP_N}")
        print(f"lambda / beta / alpha: {LAMBDA} / {BETA} / {ALPHA}")
        print(f"Clamp eps: {CLAMP_EPS}")
        print(f"Output dir: {OUTPUT_DIR}")
        print(f"Workers: {WORKERS}")
        print("=" * 50)


# Validate configuration on import
errors, warnings = validate_configuration()

if errors:
    for error in errors:
        print(f"ERROR: {error}")
    raise ConfigurationError("Configuration errors detected: " + "; ".join(errors))

if warnings and VERBOSE:
    for warning in warnings:
        print(f"WARNING: {warning}")

if VERBOSE:
    print_configuration()
