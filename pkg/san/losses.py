"""
Training Objectives
Contrastive losses (InfoNCE, binary-form CL, soft contrastive learning), the
All-in-One classifier loss, closed-set cross-entropy, the one-vs-all baseline
loss and the combined objective. Batch losses come in two forms: a plain
value and a ``*_and_grad`` form returning the gradient with respect to the
embeddings or logits that produced it, which the model's backward pass
consumes.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from san.core_math import (
    KernelParams,
    TopNConfig,
    cosine_matrix,
    pairwise_sq_dist,
    t_kernel,
    t_kernel_grad,
    top_n_softmax,
    top_n_softmax_backward,
)
from san.errors import (
    InvalidArgumentError,
    InvariantViolationError,
    SingularLogError,
    ensure_finite,
    ensure_matrix,
)

logger = logging.getLogger(__name__)

DEFAULT_CLAMP_EPS = 1e-8


class DensityMode(Enum):
    """How the binary-form CL loss turns a pair into a density ratio"""
    EXP_DENSITY = "exp-density"
    KERNEL_BCE = "kernel-bce"


# ============================================
# DOMAIN TYPES
# ============================================

@dataclass(frozen=True)
class AugmentationRelation:
    """Binary matrix marking views augmented from the same sample"""
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise InvalidArgumentError(f"relation must be square, got shape {h.shape}")
        if not np.all((h == 0.0) | (h == 1.0)):
            raise InvalidArgumentError("relation entries must be 0 or 1")
        if not np.array_equal(h, h.T):
            raise InvalidArgumentError("relation must be symmetric")
        if np.any(np.diag(h) != 0.0):
            raise InvalidArgumentError("relation must have a zero diagonal")
        object.__setattr__(self, "h", h)

    @classmethod
    def consecutive_pairs(cls, num_samples: int) -> "AugmentationRelation":
        """Rows 2i and 2i+1 are the two views of sample i"""
        m = 2 * num_samples
        h = np.zeros((m, m))
        idx = np.arange(0, m, 2)
        h[idx, idx + 1] = 1.0
        h[idx + 1, idx] = 1.0
        return cls(h)

    @property
    def size(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class PairBatch:
    """Head embeddings z, backbone embeddings y_emb and their pairing"""
    z: np.ndarray
    y_emb: np.ndarray
    relation: AugmentationRelation

    def __post_init__(self):
        z = ensure_matrix(self.z, "z")
        y_emb = ensure_matrix(self.y_emb, "y_emb")
        if z.shape[0] != y_emb.shape[0]:
            raise InvalidArgumentError(
                f"z and y_emb row counts differ: {z.shape[0]} vs {y_emb.shape[0]}")
        if self.relation.size != z.shape[0]:
            raise InvalidArgumentError(
                f"relation size {self.relation.size} does not match {z.shape[0]} rows")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y_emb", y_emb)

    @property
    def m(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True)
class SCLConfig:
    """Augmentation prior, kernel shapes and clamp for the soft contrastive loss"""
    alpha: float = 0.5
    nu_y: KernelParams = field(default_factory=lambda: KernelParams(100.0))
    nu_z: KernelParams = field(default_factory=lambda: KernelParams(10.0))
    clamp_eps: float = DEFAULT_CLAMP_EPS

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise InvalidArgumentError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (0.0 < self.clamp_eps <= 1e-3):
            raise InvalidArgumentError(f"clamp_eps must lie in (0, 1e-3], got {self.clamp_eps}")


@dataclass(frozen=True)
class AIOProbabilities:
    """Known-channel probabilities c and not-that-class probabilities c_tilde"""
    c: np.ndarray
    c_tilde: np.ndarray

    def __post_init__(self):
        c = ensure_finite(self.c, "c").ravel()
        c_tilde = ensure_finite(self.c_tilde, "c_tilde").ravel()
        if c.shape != c_tilde.shape:
            raise InvalidArgumentError("c and c_tilde must have the same length")
        if np.any(c < 0) or np.any(c_tilde < 0):
            raise InvalidArgumentError("AIO probabilities must be non-negative")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "c_tilde", c_tilde)

    @classmethod
    def from_logits(cls, logits, topn: TopNConfig) -> "AIOProbabilities":
        probs = top_n_softmax(np.asarray(logits, dtype=np.float64).ravel(), topn)
        k = probs.shape[0] // 2
        return cls(probs[:k], probs[k:])

    @property
    def num_classes(self) -> int:
        return self.c.shape[0]

    def channels(self) -> np.ndarray:
        """All 2K channels, known first"""
        return np.concatenate([self.c, self.c_tilde])


# ============================================
# CONTRASTIVE LOSSES
# ============================================

def infonce_loss(sim_pos: float, sims_neg, include_positive: bool = False) -> float:
    """
    InfoNCE loss for one anchor

    The denominator runs over the negatives only; include_positive adds the
    positive pair to it (the common InfoNCE variant).
    """
    sims_neg = ensure_finite(sims_neg, "sims_neg").ravel()
    sim_pos = float(ensure_finite(sim_pos, "sim_pos"))
    if sims_neg.size == 0:
        raise InvalidArgumentError("InfoNCE needs at least one negative similarity")
    terms = np.append(sims_neg, sim_pos) if include_positive else sims_neg
    return float(-sim_pos + logsumexp(terms))


def clamp_unit(values: np.ndarray, eps: float) -> np.ndarray:
    """Clamp into [eps, 1 - eps]"""
    return np.clip(values, eps, 1.0 - eps)


def _off_diagonal(m: int) -> np.ndarray:
    return 1.0 - np.eye(m)


def pair_affinity_from_kernel(h, kappa, alpha: float, clamp_eps: float) -> np.ndarray:
    """Boost augmentation-linked kernel values by e^alpha and clamp"""
    h = np.asarray(h, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    boost = 1.0 + (math.exp(alpha) - 1.0) * h
    return clamp_unit(boost * kappa, clamp_eps)


def pair_affinity(batch: PairBatch, cfg: SCLConfig) -> np.ndarray:
    """Soft pairing target P from backbone embeddings"""
    kappa = t_kernel(pairwise_sq_dist(batch.y_emb), cfg.nu_y)
    return pair_affinity_from_kernel(batch.relation.h, kappa, cfg.alpha, cfg.clamp_eps)


def density_ratio(batch: PairBatch, cfg: SCLConfig) -> np.ndarray:
    """Density ratio Q from head embeddings, clamped"""
    return clamp_unit(t_kernel(pairwise_sq_dist(batch.z), cfg.nu_z), cfg.clamp_eps)


def scl_pair_loss(p, q) -> np.ndarray:
    """Per-pair soft contrastive loss"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return -(p * np.log(q) + (1.0 - p) * np.log1p(-q))


def scl_pair_grad(p, q) -> np.ndarray:
    """Derivative of scl_pair_loss with respect to q"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return -(p / q - (1.0 - p) / (1.0 - q))


def _sq_dist_backward(X: np.ndarray, grad_d: np.ndarray) -> np.ndarray:
    """Backpropagate d/dD of a pairwise squared-distance matrix to the rows of X"""
    sym = grad_d + grad_d.T
    return 2.0 * (np.sum(sym, axis=1)[:, None] * X - sym @ X)


def _kernel_bce_and_grad(z: np.ndarray, target: np.ndarray, cfg: SCLConfig) -> Tuple[float, np.ndarray]:
    """Binary cross-entropy between target and the kernel density ratio of z"""
    m = z.shape[0]
    offdiag = _off_diagonal(m)
    dist = pairwise_sq_dist(z)
    raw_q = t_kernel(dist, cfg.nu_z)
    q = clamp_unit(raw_q, cfg.clamp_eps)
    if np.any(q <= 0.0) or np.any(q >= 1.0):
        raise InvariantViolationError("density ratio left (0, 1) after clamping")

    loss = float(np.sum(scl_pair_loss(target, q) * offdiag) / m)

    active = (raw_q > cfg.clamp_eps) & (raw_q < 1.0 - cfg.clamp_eps)
    grad_q = scl_pair_grad(target, q) * offdiag * active / m
    grad_dist = grad_q * t_kernel_grad(dist, cfg.nu_z)
    return loss, _sq_dist_backward(z, grad_dist)


def _exp_density_and_grad(z: np.ndarray, h: np.ndarray) -> Tuple[float, np.ndarray]:
    """CL with Q = exp(S), Q_dot = exp(-S) over cosine similarity S"""
    m = z.shape[0]
    offdiag = _off_diagonal(m)
    sims = cosine_matrix(z)
    weights = -(2.0 * h - 1.0) * offdiag / m
    loss = float(np.sum(weights * sims))

    norms = np.linalg.norm(z, axis=1)
    unit = z / norms[:, None]
    grad_unit = (weights + weights.T) @ unit
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return loss, (grad_unit - radial * unit) / norms[:, None]


def cl_binary_loss_and_grad(batch: PairBatch, mode: DensityMode,
                            cfg: Optional[SCLConfig] = None) -> Tuple[float, np.ndarray]:
    """Binary-form contrastive loss and its gradient with respect to z"""
    cfg = cfg or SCLConfig()
    mode = DensityMode(mode)
    if mode is DensityMode.EXP_DENSITY:
        return _exp_density_and_grad(batch.z, batch.relation.h)
    return _kernel_bce_and_grad(batch.z, batch.relation.h, cfg)


def cl_binary_loss(batch: PairBatch, mode: DensityMode, cfg: Optional[SCLConfig] = None) -> float:
    """
    Binary-form contrastive loss over ordered pairs i != j, divided by the row count

    Args:
        batch: Embeddings and augmentation relation
        mode: EXP_DENSITY (cosine, exp densities) or KERNEL_BCE (t-kernel, 1 - Q)
        cfg: Supplies nu_z and the clamp for KERNEL_BCE
    """
    return cl_binary_loss_and_grad(batch, mode, cfg)[0]


def scl_loss_and_grad(batch: PairBatch, cfg: SCLConfig,
                      affinity: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """
    Soft contrastive loss and its gradient with respect to z

    P acts as a soft target: no gradient flows into the backbone embeddings
    through it. Pass a precomputed affinity to hold P fixed.
    """
    if not np.all(np.isfinite(batch.z)) or not np.all(np.isfinite(batch.y_emb)):
        raise InvalidArgumentError("embeddings contain non-finite values")
    p = pair_affinity(batch, cfg) if affinity is None else np.asarray(affinity, dtype=np.float64)
    return _kernel_bce_and_grad(batch.z, p, cfg)


def scl_loss(batch: PairBatch, cfg: SCLConfig, affinity: Optional[np.ndarray] = None) -> float:
    """Soft contrastive loss over ordered pairs i != j, divided by the row count"""
    return scl_loss_and_grad(batch, cfg, affinity)[0]


def scl_cl_gap_from_kernels(h, kappa_y, kappa_z, alpha: float, clamp_eps: Optional[float]) -> float:
    """
    Closed-form difference between the kernel-bce CL loss and the SCL loss

    Args:
        h: Relation matrix (m x m)
        kappa_y: Backbone kernel values
        kappa_z: Head kernel values
        alpha: Augmentation prior
        clamp_eps: Clamp applied to both kernels; None evaluates them raw
    """
    h = np.asarray(h, dtype=np.float64)
    m = h.shape[0]
    offdiag = _off_diagonal(m).astype(bool)
    kappa_z = np.asarray(kappa_z, dtype=np.float64)
    if clamp_eps is None:
        weight = h - (1.0 + (math.exp(alpha) - 1.0) * h) * np.asarray(kappa_y, dtype=np.float64)
        qz = kappa_z
        if np.any(qz[offdiag] >= 1.0) or np.any(qz[offdiag] <= 0.0):
            raise SingularLogError("head kernel value reached 0 or 1; log(1/kappa - 1) is singular")
    else:
        weight = h - pair_affinity_from_kernel(h, kappa_y, alpha, clamp_eps)
        qz = clamp_unit(kappa_z, clamp_eps)
    log_odds = np.log1p(-qz[offdiag]) - np.log(qz[offdiag])
    return float(np.sum(weight[offdiag] * log_odds) / m)


def scl_cl_gap(batch: PairBatch, cfg: SCLConfig, clamp: bool = True) -> float:
    """Closed-form L_CL - L_SCL for a batch (kernel-bce reading)"""
    kappa_y = t_kernel(pairwise_sq_dist(batch.y_emb), cfg.nu_y)
    kappa_z = t_kernel(pairwise_sq_dist(batch.z), cfg.nu_z)
    eps = cfg.clamp_eps if clamp else None
    return scl_cl_gap_from_kernels(batch.relation.h, kappa_y, kappa_z, cfg.alpha, eps)


# ============================================
# CLASSIFIER LOSSES
# ============================================

def _aio_terms(probs: np.ndarray, labels: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample AIO loss and its gradient with respect to the 2K probabilities"""
    n, width = probs.shape
    k = width // 2
    if k < 2:
        raise InvalidArgumentError("AIO loss needs at least 2 known classes")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidArgumentError(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    c = probs[:, :k]
    c_tilde = probs[:, k:]
    grad = np.zeros_like(probs)

    c_y = c[rows, labels]
    first = c_y > eps
    loss = -np.log(np.maximum(c_y, eps))
    grad[rows[first], labels[first]] -= 1.0 / c_y[first]

    masked = c_tilde.copy()
    masked[rows, labels] = np.inf
    k_min = np.argmin(masked, axis=1)
    b = c_tilde[rows, k_min]
    second = b > eps
    loss -= np.log(np.maximum(b, eps))
    grad[rows[second], k + k_min[second]] -= 1.0 / b[second]

    j_max = np.argmax(c_tilde, axis=1)
    margin = c_y - c_tilde[rows, j_max]
    third = margin > eps
    loss -= np.log(np.maximum(margin, eps))
    grad[rows[third], labels[third]] -= 1.0 / margin[third]
    grad[rows[third], k + j_max[third]] += 1.0 / margin[third]
    return loss, grad


def aio_loss(probs: AIOProbabilities, label: int, clamp_eps: float = 1e-3) -> float:
    """
    All-in-One loss for one source sample

    Combines log c^y, the smallest log c~^k over the other classes, and the
    log margin of c^y over the largest c~; every log argument is floored at
    clamp_eps.
    """
    channels = probs.channels()[None, :]
    loss, _ = _aio_terms(channels, np.array([int(label)]), clamp_eps)
    return float(loss[0])


def aio_loss_and_grad(logits: np.ndarray, labels: np.ndarray, topn: TopNConfig,
                      clamp_eps: float) -> Tuple[float, np.ndarray]:
    """Mean AIO loss over a batch and its gradient with respect to the 2K logits"""
    probs = top_n_softmax(logits, topn)
    labels = np.asarray(labels, dtype=np.int64)
    loss, grad_probs = _aio_terms(np.atleast_2d(probs), labels, clamp_eps)
    n = labels.shape[0]
    return float(np.mean(loss)), top_n_softmax_backward(probs, grad_probs) / n


def aio_ordering_holds(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample check of c^y > max c~ > max_{k != y} c^k"""
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, width = probs.shape
    k = width // 2
    rows = np.arange(n)
    c = probs[:, :k]
    c_y = c[rows, labels]
    others = c.copy()
    others[rows, labels] = -np.inf
    max_tilde = np.max(probs[:, k:], axis=1)
    return (c_y > max_tilde) & (max_tilde > np.max(others, axis=1))


def ce_loss(closed_probs, label: int, clamp_eps: float = DEFAULT_CLAMP_EPS) -> float:
    """Cross-entropy of a closed-set probability vector at the label"""
    probs = ensure_finite(closed_probs, "closed_probs").ravel()
    if np.any(probs < 0) or abs(float(np.sum(probs)) - 1.0) > 1e-6:
        raise InvalidArgumentError("closed-set probabilities must be non-negative and sum to 1")
    return float(-math.log(max(float(probs[int(label)]), clamp_eps)))


def ce_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch of closed-set logits and its logit gradient"""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(n)
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return float(-np.mean(log_probs[rows, labels])), grad / n


def ova_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    One-vs-all open-set loss with hardest-negative mining

    Logits are laid out as K "not class k" entries followed by K "is class k"
    entries; each class is a two-way softmax. The loss averages the positive
    term at the label and the hardest negative term over the other classes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, width = logits.shape
    k = width // 2
    rows = np.arange(n)
    margin = logits[:, k:] - logits[:, :k]

    pos_margin = margin[rows, labels]
    pos_loss = np.logaddexp(0.0, -pos_margin)

    neg_terms = np.logaddexp(0.0, margin)
    neg_terms[rows, labels] = -np.inf
    hardest = np.argmax(neg_terms, axis=1)
    neg_loss = neg_terms[rows, hardest]

    loss = 0.5 * (np.mean(pos_loss) + np.mean(neg_loss))

    grad_margin = np.zeros_like(margin)
    grad_margin[rows, labels] -= 0.5 * expit(-pos_margin) / n
    grad_margin[rows, hardest] += 0.5 * expit(margin[rows, hardest]) / n
    grad = np.concatenate([-grad_margin, grad_margin], axis=1)
    return float(loss), grad


def ova_known_scores(logits: np.ndarray) -> np.ndarray:
    """Probability of "is class k" under each two-way head"""
    logits = np.atleast_2d(logits)
    k = logits.shape[1] // 2
    return expit(logits[:, k:] - logits[:, :k])


def total_loss(source_ce: float, source_aio: float, target_scl: float,
               lam: float, beta: float) -> float:
    """Combined objective: CE + beta * AIO + lambda * SCL"""
    if lam < 0 or beta < 0:
        raise InvalidArgumentError("lambda and beta must be non-negative")
    return float(source_ce + beta * source_aio + lam * target_scl)
