"""
Core Math Primitives
Similarity and normalization functions shared by every loss: the
t-distribution kernel, pairwise squared distances, cosine similarity and the
top-n softmax used by the All-in-One classifier.
"""

import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.special import gammaln

from san.errors import (
    DegenerateInputError,
    InvalidArgumentError,
    ensure_finite,
    ensure_matrix,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class KernelParams:
    """Degrees of freedom of the t-distribution kernel"""
    nu: float

    def __post_init__(self):
        if not (math.isfinite(self.nu) and self.nu > 0):
            raise InvalidArgumentError(f"kernel degrees of freedom must be positive, got {self.nu}")

    @property
    def log_prefactor(self) -> float:
        """log of Gamma((nu+1)/2) / (sqrt(nu*pi) * Gamma(nu/2))"""
        nu = self.nu
        return float(gammaln((nu + 1.0) / 2.0) - gammaln(nu / 2.0) - 0.5 * math.log(nu * math.pi))


@dataclass(frozen=True)
class TopNConfig:
    """Selection size of the top-n softmax"""
    n: int = 20

    def __post_init__(self):
        if int(self.n) != self.n or self.n <= 0:
            raise InvalidArgumentError(f"top-n selection size must be a positive integer, got {self.n}")


def t_kernel(dist_sq: ArrayLike, params: KernelParams) -> ArrayLike:
    """
    Student-t kernel evaluated at a squared distance

    Args:
        dist_sq: Squared Euclidean distance(s), scalar or array, all >= 0
        params: Kernel degrees of freedom

    Returns:
        Kernel value(s), same shape as dist_sq
    """
    d = ensure_finite(dist_sq, "dist_sq")
    if np.any(d < 0):
        raise InvalidArgumentError("squared distances must be non-negative")
    nu = params.nu
    value = np.exp(params.log_prefactor - 0.5 * (nu + 1.0) * np.log1p(d / nu))
    if value.ndim == 0:
        return float(value)
    return value


def t_kernel_grad(dist_sq: np.ndarray, params: KernelParams) -> np.ndarray:
    """Derivative of t_kernel with respect to the squared distance"""
    d = np.asarray(dist_sq, dtype=np.float64)
    nu = params.nu
    return -t_kernel(d, params) * (nu + 1.0) / (2.0 * (nu + d))


def pairwise_sq_dist(X) -> np.ndarray:
    """
    Symmetric matrix of squared Euclidean distances between rows

    The diagonal is exactly zero.
    """
    X = ensure_matrix(X, "X")
    if X.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(pdist(X, metric="sqeuclidean"))


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors"""
    a = ensure_finite(a, "a").ravel()
    b = ensure_finite(b, "b").ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError(f"vector dimensions differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(X) -> np.ndarray:
    """Row-wise cosine similarity matrix"""
    X = ensure_matrix(X, "X")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cosine similarity of a zero-norm row is undefined")
    unit = X / norms[:, None]
    return unit @ unit.T


def top_n_mask(logits: np.ndarray, n: int) -> np.ndarray:
    """
    Boolean mask of the n largest entries per row

    Ties are broken in favour of the lower index.
    """
    logits = np.atleast_2d(logits)
    n = min(int(n), logits.shape[-1])
    order = np.argsort(-logits, axis=-1, kind="stable")[:, :n]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def top_n_softmax(logits, cfg: TopNConfig) -> np.ndarray:
    """
    Softmax restricted to the top-n logits, exact zeros elsewhere

    Args:
        logits: Vector of length 2K, or a batch of such vectors (one per row)
        cfg: Selection size

    Returns:
        Probabilities with the shape of logits; each row sums to 1
    """
    arr = ensure_finite(logits, "logits")
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise InvalidArgumentError("top-n softmax needs at least one logit")
    squeeze = arr.ndim == 1
    rows = np.atleast_2d(arr)
    mask = top_n_mask(rows, cfg.n)

    shifted = np.where(mask, rows - np.max(np.where(mask, rows, -np.inf), axis=1, keepdims=True), -np.inf)
    weights = np.exp(shifted)
    probs = weights / np.sum(weights, axis=1, keepdims=True)
    return probs[0] if squeeze else probs


def top_n_softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """
    Vector-Jacobian product of top_n_softmax with the selection held fixed

    Entries outside the selection carry zero probability and receive zero
    gradient.
    """
    probs = np.atleast_2d(probs)
    grad_probs = np.atleast_2d(grad_probs)
    inner = np.sum(probs * grad_probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def kernel_matrix(X, params: KernelParams) -> np.ndarray:
    """Elementwise t-kernel of the pairwise squared distances of X"""
    return t_kernel(pairwise_sq_dist(X), params)
