"""
Trainable Stack
Backbone F, projection head H, All-in-One classifier C and the optional
closed-set head, evaluated on numpy arrays with hand-written reverse-mode
gradients. Also holds the SGD step with inverse learning-rate decay, the
inference rules and the finite-difference gradient check.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from san.core_math import TopNConfig, top_n_softmax
from san.errors import InvalidArgumentError, TrainingDivergenceError, ensure_matrix
from san.losses import (
    AIOProbabilities,
    AugmentationRelation,
    DensityMode,
    PairBatch,
    SCLConfig,
    aio_loss_and_grad,
    ce_loss_and_grad,
    cl_binary_loss_and_grad,
    ova_known_scores,
    ova_loss_and_grad,
    pair_affinity,
    scl_loss_and_grad,
)

logger = logging.getLogger(__name__)


class Activation(Enum):
    """Supported hidden-layer nonlinearities"""
    RELU = "relu"
    TANH = "tanh"
    LEAKY_RELU = "leaky_relu"


class OpenHead(Enum):
    """Open-set classifier attached to the head embedding"""
    AIO = "aio"
    OVA = "ova"


_LEAK = 0.01


def _activate(u: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(u, 0.0)
    if kind is Activation.TANH:
        return np.tanh(u)
    return np.where(u > 0, u, _LEAK * u)


def _activate_grad(u: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return (u > 0).astype(u.dtype)
    if kind is Activation.TANH:
        return 1.0 - np.tanh(u) ** 2
    return np.where(u > 0, 1.0, _LEAK).astype(u.dtype)


# ============================================
# CONFIGURATION TYPES
# ============================================

@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths of F, H and the classifier heads"""
    input_dim: int
    backbone_layers: Tuple[int, ...] = (256, 128)
    head_layers: Tuple[int, ...] = (2048, 2048)
    aio_outputs: int = 4
    activation: Activation = Activation.RELU
    seed: int = 0
    closed_head: bool = True
    open_head: OpenHead = OpenHead.AIO

    def __post_init__(self):
        object.__setattr__(self, "backbone_layers", tuple(int(w) for w in self.backbone_layers))
        object.__setattr__(self, "head_layers", tuple(int(w) for w in self.head_layers))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "open_head", OpenHead(self.open_head))
        widths = (self.input_dim,) + self.backbone_layers + self.head_layers
        if not self.backbone_layers or not self.head_layers:
            raise InvalidArgumentError("backbone and head need at least one layer each")
        if any(w < 1 for w in widths):
            raise InvalidArgumentError(f"all layer widths must be >= 1, got {widths}")
        if self.aio_outputs < 4 or self.aio_outputs % 2:
            raise InvalidArgumentError(f"aio_outputs must be even and >= 4, got {self.aio_outputs}")
        if self.open_head is OpenHead.OVA and not self.closed_head:
            raise InvalidArgumentError("the one-vs-all head predicts through the closed-set head")

    @property
    def num_known(self) -> int:
        return self.aio_outputs // 2

    @property
    def embedding_dim(self) -> int:
        return self.backbone_layers[-1]

    @property
    def head_dim(self) -> int:
        return self.head_layers[-1]

    def layer_shapes(self) -> List[Tuple[str, int, int]]:
        """(name, fan_in, fan_out) of every dense layer in parameter order"""
        shapes = []
        prev = self.input_dim
        for i, width in enumerate(self.backbone_layers):
            shapes.append((f"backbone.{i}", prev, width))
            prev = width
        for i, width in enumerate(self.head_layers):
            shapes.append((f"head.{i}", prev, width))
            prev = width
        shapes.append(("open", prev, self.aio_outputs))
        if self.closed_head:
            shapes.append(("closed", prev, self.num_known))
        return shapes


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and objective settings"""
    lam: float = 0.1
    beta: float = 1.0
    lr0: float = 0.05
    decay_gamma: float = 10.0
    decay_power: float = 0.75
    epochs: int = 30
    batch_size: int = 32
    clamp_eps: float = 1e-3
    topn: TopNConfig = field(default_factory=TopNConfig)
    scl: SCLConfig = field(default_factory=SCLConfig)
    seed: int = 0
    grad_clip: Optional[float] = 10.0
    precision: str = "float64"

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise InvalidArgumentError("lambda and beta must be non-negative")
        if self.lr0 <= 0 or self.decay_gamma <= 0 or self.decay_power <= 0:
            raise InvalidArgumentError("lr0, decay_gamma and decay_power must be positive")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be non-negative")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size must be at least 2")
        if not (0.0 < self.clamp_eps <= 1e-3):
            raise InvalidArgumentError(f"clamp_eps must lie in (0, 1e-3], got {self.clamp_eps}")
        if self.precision not in ("float64", "float32"):
            raise InvalidArgumentError(f"unknown precision: {self.precision}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


@dataclass(frozen=True)
class ObjectiveTerms:
    """Which loss terms are active; weights come from TrainConfig"""
    ce: bool = True
    open_loss: Optional[OpenHead] = OpenHead.AIO
    contrastive: Optional[str] = "scl"
    cl_mode: DensityMode = DensityMode.KERNEL_BCE

    def __post_init__(self):
        if self.contrastive not in (None, "scl", "cl"):
            raise InvalidArgumentError(f"unknown contrastive term: {self.contrastive}")
        if self.open_loss is not None:
            object.__setattr__(self, "open_loss", OpenHead(self.open_loss))
        object.__setattr__(self, "cl_mode", DensityMode(self.cl_mode))


# ============================================
# PARAMETERS
# ============================================

@dataclass(frozen=True)
class Parameters:
    """Weight matrices and bias vectors of every dense layer, in layer order"""
    spec: NetworkSpec
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @classmethod
    def initialize(cls, spec: NetworkSpec, dtype=np.float64) -> "Parameters":
        """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases"""
        rng = np.random.default_rng(spec.seed)
        weights, biases = [], []
        for _, fan_in, fan_out in spec.layer_shapes():
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(spec, tuple(weights), tuple(biases))

    @classmethod
    def zeros(cls, spec: NetworkSpec, dtype=np.float64) -> "Parameters":
        shapes = spec.layer_shapes()
        return cls(spec,
                   tuple(np.zeros((i, o), dtype=dtype) for _, i, o in shapes),
                   tuple(np.zeros(o, dtype=dtype) for _, _, o in shapes))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_backbone(self) -> int:
        return len(self.spec.backbone_layers)

    @property
    def num_head(self) -> int:
        return len(self.spec.head_layers)

    def arrays(self) -> List[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...]"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @classmethod
    def from_arrays(cls, spec: NetworkSpec, arrays: Sequence[np.ndarray]) -> "Parameters":
        return cls(spec, tuple(arrays[0::2]), tuple(arrays[1::2]))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vector: np.ndarray) -> "Parameters":
        arrays, offset = [], 0
        for a in self.arrays():
            arrays.append(vector[offset:offset + a.size].reshape(a.shape).astype(a.dtype))
            offset += a.size
        return Parameters.from_arrays(self.spec, arrays)

    def astype(self, dtype) -> "Parameters":
        return Parameters.from_arrays(self.spec, [a.astype(dtype) for a in self.arrays()])


# Gradients share the parameter layout
Gradient = Parameters


# ============================================
# FORWARD / BACKWARD
# ============================================

@dataclass
class ForwardResult:
    """Outputs of one forward pass plus the values the backward pass needs"""
    zhat: np.ndarray
    z: np.ndarray
    aio_logits: np.ndarray
    closed_logits: Optional[np.ndarray]
    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


def _dense_stack(params: Parameters, x: np.ndarray, start: int, stop: int,
                 inputs: List[np.ndarray], pres: List[np.ndarray]) -> np.ndarray:
    """Layers [start, stop) with the activation on all but the last"""
    kind = params.spec.activation
    h = x
    for idx in range(start, stop):
        inputs.append(h)
        u = h @ params.weights[idx] + params.biases[idx]
        pres.append(u)
        h = u if idx == stop - 1 else _activate(u, kind)
    return h


def forward(params: Parameters, x) -> ForwardResult:
    """
    Evaluate the stack on a feature batch

    Returns:
        ForwardResult with backbone embeddings zhat = F(x), head embeddings
        z = H(zhat), 2K open-set logits and K closed-set logits (or None)
    """
    spec = params.spec
    x = np.asarray(x, dtype=params.weights[0].dtype)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise InvalidArgumentError(
            f"feature batch must have shape (n, {spec.input_dim}), got {x.shape}")
    inputs: List[np.ndarray] = []
    pres: List[np.ndarray] = []
    nb, nh = params.num_backbone, params.num_head
    zhat = _dense_stack(params, x, 0, nb, inputs, pres)
    z = _dense_stack(params, zhat, nb, nb + nh, inputs, pres)

    open_idx = nb + nh
    inputs.append(z)
    aio_logits = z @ params.weights[open_idx] + params.biases[open_idx]
    pres.append(aio_logits)
    closed_logits = None
    if spec.closed_head:
        inputs.append(z)
        closed_logits = z @ params.weights[open_idx + 1] + params.biases[open_idx + 1]
        pres.append(closed_logits)
    return ForwardResult(zhat, z, aio_logits, closed_logits, inputs, pres)


def backward_outputs(params: Parameters, fwd: ForwardResult, grad_z: np.ndarray,
                     grad_aio: np.ndarray, grad_closed: Optional[np.ndarray]) -> Gradient:
    """
    Backpropagate gradients given at the stack outputs to every parameter

    Raises:
        TrainingDivergenceError: a layer's gradient is non-finite
    """
    spec = params.spec
    kind = spec.activation
    nb, nh = params.num_backbone, params.num_head
    open_idx = nb + nh
    grad_w: List[Optional[np.ndarray]] = [None] * params.num_layers
    grad_b: List[Optional[np.ndarray]] = [None] * params.num_layers

    z = fwd.layer_inputs[open_idx]
    grad_w[open_idx] = z.T @ grad_aio
    grad_b[open_idx] = np.sum(grad_aio, axis=0)
    delta = grad_z + grad_aio @ params.weights[open_idx].T
    if spec.closed_head:
        if grad_closed is None:
            grad_closed = np.zeros_like(fwd.closed_logits)
        grad_w[open_idx + 1] = z.T @ grad_closed
        grad_b[open_idx + 1] = np.sum(grad_closed, axis=0)
        delta = delta + grad_closed @ params.weights[open_idx + 1].T

    for idx in range(open_idx - 1, -1, -1):
        last_of_stack = idx in (nb - 1, open_idx - 1)
        if not last_of_stack:
            delta = delta * _activate_grad(fwd.pre_activations[idx], kind)
        grad_w[idx] = fwd.layer_inputs[idx].T @ delta
        grad_b[idx] = np.sum(delta, axis=0)
        delta = delta @ params.weights[idx].T

    for idx in range(params.num_layers):
        if not (np.all(np.isfinite(grad_w[idx])) and np.all(np.isfinite(grad_b[idx]))):
            raise TrainingDivergenceError(
                f"non-finite gradient in layer {idx} ({spec.layer_shapes()[idx][0]})",
                layer_index=idx)
    return Gradient(spec, tuple(grad_w), tuple(grad_b))


@dataclass(frozen=True)
class TrainingBatch:
    """Labeled source rows and paired target views for one step"""
    x_source: np.ndarray
    y_source: np.ndarray
    x_target: Optional[np.ndarray] = None
    relation: Optional[AugmentationRelation] = None

    def __post_init__(self):
        if self.x_target is not None and self.relation is not None:
            if self.relation.size != len(self.x_target):
                raise InvalidArgumentError("relation size must match the number of target views")

    @property
    def num_source(self) -> int:
        return len(self.x_source)

    def stacked(self) -> np.ndarray:
        if self.x_target is None or len(self.x_target) == 0:
            return np.asarray(self.x_source)
        return np.vstack([self.x_source, self.x_target])


@dataclass
class ObjectiveResult:
    """Value of every active term and the gradients at the stack outputs"""
    total: float
    components: Dict[str, float]
    forward: ForwardResult
    grad_z: np.ndarray
    grad_aio: np.ndarray
    grad_closed: Optional[np.ndarray]
    affinity: Optional[np.ndarray]


def objective(params: Parameters, batch: TrainingBatch, terms: ObjectiveTerms,
              cfg: TrainConfig, affinity: Optional[np.ndarray] = None) -> ObjectiveResult:
    """
    Evaluate CE + beta * open-set loss + lambda * contrastive loss

    Source rows feed CE and the open-set loss; target views feed the
    contrastive term. The SCL soft target is recomputed from the backbone
    unless an affinity matrix is passed in.
    """
    fwd = forward(params, batch.stacked())
    for idx, pre in enumerate(fwd.pre_activations):
        if not np.all(np.isfinite(pre)):
            raise TrainingDivergenceError(
                f"non-finite activations in layer {idx} ({params.spec.layer_shapes()[idx][0]})",
                layer_index=idx)
    ns = batch.num_source
    labels = np.asarray(batch.y_source, dtype=np.int64)
    grad_z = np.zeros(fwd.z.shape)
    grad_aio = np.zeros(fwd.aio_logits.shape)
    grad_closed = None if fwd.closed_logits is None else np.zeros(fwd.closed_logits.shape)
    components: Dict[str, float] = {}
    total = 0.0

    if terms.ce and fwd.closed_logits is not None and ns > 0:
        value, g = ce_loss_and_grad(fwd.closed_logits[:ns].astype(np.float64), labels)
        components["ce"] = value
        total += value
        grad_closed[:ns] += g

    if terms.open_loss is not None and cfg.beta > 0 and ns > 0:
        logits = fwd.aio_logits[:ns].astype(np.float64)
        if terms.open_loss is OpenHead.AIO:
            value, g = aio_loss_and_grad(logits, labels, cfg.topn, cfg.clamp_eps)
            components["aio"] = value
        else:
            value, g = ova_loss_and_grad(logits, labels)
            components["ova"] = value
        total += cfg.beta * value
        grad_aio[:ns] += cfg.beta * g

    has_views = batch.x_target is not None and batch.relation is not None and len(batch.x_target) > 1
    if terms.contrastive is not None and cfg.lam > 0 and has_views:
        pairs = PairBatch(fwd.z[ns:], fwd.zhat[ns:], batch.relation)
        if terms.contrastive == "scl":
            if affinity is None:
                affinity = pair_affinity(pairs, cfg.scl)
            value, g = scl_loss_and_grad(pairs, cfg.scl, affinity)
            components["scl"] = value
        else:
            value, g = cl_binary_loss_and_grad(pairs, terms.cl_mode, cfg.scl)
            components["cl"] = value
        total += cfg.lam * value
        grad_z[ns:] += cfg.lam * g

    if not math.isfinite(total):
        raise TrainingDivergenceError(f"non-finite objective: {components}")
    return ObjectiveResult(total, components, fwd, grad_z, grad_aio, grad_closed, affinity)


def backward(params: Parameters, batch: TrainingBatch, terms: ObjectiveTerms,
             cfg: TrainConfig, result: Optional[ObjectiveResult] = None) -> Tuple[Gradient, ObjectiveResult]:
    """Exact gradient of the objective with the top-n selection and P held constant"""
    if result is None:
        result = objective(params, batch, terms, cfg)
    grad = backward_outputs(params, result.forward, result.grad_z, result.grad_aio, result.grad_closed)
    return grad, result


# ============================================
# OPTIMIZATION
# ============================================

def learning_rate(t: int, total_steps: int, cfg: TrainConfig) -> float:
    """Inverse decay: lr0 * (1 + gamma * t / T) ** -power"""
    total_steps = max(int(total_steps), 1)
    return cfg.lr0 * (1.0 + cfg.decay_gamma * t / total_steps) ** (-cfg.decay_power)


def sgd_step(params: Parameters, grad: Gradient, t: int, cfg: TrainConfig,
             total_steps: int) -> Parameters:
    """params - lr(t) * grad"""
    lr = learning_rate(t, total_steps, cfg)
    return Parameters.from_arrays(
        params.spec,
        [p - (lr * g).astype(p.dtype) for p, g in zip(params.arrays(), grad.arrays())])


def clip_gradient(grad: Gradient, max_norm: Optional[float]) -> Gradient:
    """Rescale to a global L2 norm of at most max_norm"""
    if max_norm is None:
        return grad
    norm = float(np.sqrt(sum(float(np.sum(a.astype(np.float64) ** 2)) for a in grad.arrays())))
    if norm <= max_norm or norm == 0.0:
        return grad
    scale = max_norm / norm
    return Parameters.from_arrays(grad.spec, [a * scale for a in grad.arrays()])


# ============================================
# INFERENCE
# ============================================

@dataclass(frozen=True)
class Decision:
    """Known(k) or Unknown"""
    label: Optional[int] = None

    @classmethod
    def known(cls, k: int) -> "Decision":
        return cls(int(k))

    @classmethod
    def unknown(cls) -> "Decision":
        return cls(None)

    @property
    def is_unknown(self) -> bool:
        return self.label is None

    def __str__(self) -> str:
        return "unknown" if self.is_unknown else str(self.label)

    @classmethod
    def parse(cls, text: str) -> "Decision":
        text = text.strip().lower()
        if text in ("unknown", "u", "-1"):
            return cls.unknown()
        return cls.known(int(text))


def aio_infer(probs: AIOProbabilities) -> Decision:
    """
    Known(k) when a known channel holds the largest probability, else Unknown

    Ties between a known and an unknown channel resolve to Unknown; ties
    within one kind go to the lower index.
    """
    top = max(float(np.max(probs.c)), float(np.max(probs.c_tilde)))
    if np.any(probs.c_tilde == top):
        return Decision.unknown()
    return Decision.known(int(np.argmax(probs.c)))


def aio_infer_batch(probs: np.ndarray) -> List[Decision]:
    """aio_infer over rows of 2K probabilities"""
    probs = np.atleast_2d(probs)
    k = probs.shape[1] // 2
    top = np.max(probs, axis=1)
    unknown = np.any(probs[:, k:] == top[:, None], axis=1)
    known = np.argmax(probs[:, :k], axis=1)
    return [Decision.unknown() if u else Decision.known(c) for u, c in zip(unknown, known)]


def ova_infer_batch(closed_logits: np.ndarray, open_logits: np.ndarray,
                    threshold: float = 0.5) -> List[Decision]:
    """Closed-set argmax k, rejected as Unknown when p("is class k") < threshold"""
    known = np.argmax(closed_logits, axis=1)
    scores = ova_known_scores(open_logits)
    accept = scores[np.arange(len(known)), known] >= threshold
    return [Decision.known(c) if ok else Decision.unknown() for c, ok in zip(known, accept)]


def predict(params: Parameters, x, topn: TopNConfig, threshold: float = 0.5) -> List[Decision]:
    """Decisions for a feature batch with the head's own inference rule"""
    fwd = forward(params, ensure_matrix(x, "x"))
    if params.spec.open_head is OpenHead.OVA:
        return ova_infer_batch(fwd.closed_logits, fwd.aio_logits, threshold)
    return aio_infer_batch(top_n_softmax(fwd.aio_logits.astype(np.float64), topn))


# ============================================
# GRADIENT CHECK
# ============================================

@dataclass
class GradCheckReport:
    """Max relative error of the analytic gradient per loss term"""
    errors: Dict[str, float]
    threshold: float
    coordinates: int

    @property
    def passed(self) -> bool:
        return all(err < self.threshold for err in self.errors.values())

    def failed_terms(self) -> List[str]:
        return [name for name, err in self.errors.items() if not err < self.threshold]


def _single_term(name: str, base: ObjectiveTerms) -> ObjectiveTerms:
    if name == "ce":
        return ObjectiveTerms(ce=True, open_loss=None, contrastive=None)
    if name in ("aio", "ova"):
        return ObjectiveTerms(ce=False, open_loss=OpenHead(name), contrastive=None)
    if name == "scl":
        return ObjectiveTerms(ce=False, open_loss=None, contrastive="scl")
    if name == "cl":
        return ObjectiveTerms(ce=False, open_loss=None, contrastive="cl", cl_mode=base.cl_mode)
    raise InvalidArgumentError(f"unknown loss term: {name}")


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor_ratio: float = 1e-3) -> np.ndarray:
    """
    |a - n| / max(|a|, |n|, floor), floor = floor_ratio * max|n|

    The floor keeps coordinates with near-zero gradient from dominating.
    """
    scale = max(float(np.max(np.abs(numeric))) if numeric.size else 0.0, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor_ratio * scale)
    return np.abs(analytic - numeric) / denom


def grad_check(params: Parameters, batch: TrainingBatch, cfg: TrainConfig,
               step: float = 1e-5, threshold: float = 1e-4,
               terms: Sequence[str] = ("ce", "aio", "scl"),
               num_coordinates: int = 200, seed: int = 0,
               cl_mode: DensityMode = DensityMode.KERNEL_BCE) -> GradCheckReport:
    """
    Compare backward against central differences, one loss term at a time

    Each term runs with unit weight. A random subset of num_coordinates
    parameter entries is differenced (all of them when the network is
    smaller). Failures are reported, not raised.
    """
    if params.weights[0].dtype != np.float64:
        raise InvalidArgumentError("gradient checks run in double precision only")
    unit_cfg = replace(cfg, lam=1.0, beta=1.0)
    base_terms = ObjectiveTerms(cl_mode=cl_mode)
    theta = params.flat()
    rng = np.random.default_rng(seed)
    count = min(num_coordinates, theta.size)
    coords = np.sort(rng.choice(theta.size, size=count, replace=False))

    errors: Dict[str, float] = {}
    for name in terms:
        term = _single_term(name, base_terms)
        grad, result = backward(params, batch, term, unit_cfg)
        analytic = grad.flat()[coords]
        numeric = np.empty(count)
        for i, c in enumerate(coords):
            shifted = theta.copy()
            shifted[c] += step
            plus = objective(params.with_flat(shifted), batch, term, unit_cfg, result.affinity).total
            shifted[c] -= 2.0 * step
            minus = objective(params.with_flat(shifted), batch, term, unit_cfg, result.affinity).total
            numeric[i] = (plus - minus) / (2.0 * step)
        errors[name] = float(np.max(relative_errors(analytic, numeric)))
        logger.debug("gradient check %s: max relative error %.3e", name, errors[name])
    return GradCheckReport(errors, threshold, count)
