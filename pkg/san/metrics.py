"""
Evaluation Metrics
Known/unknown accuracy accounting over target predictions, H-score, Balance
H-score, the count-sensitivity check behind the Balance H-score, and the
positive-pair / noise-pair signal-to-noise probe of the contrastive losses.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple, Union

import numpy as np

from san.errors import (
    FeatureFileParseError,
    InvalidArgumentError,
    UndefinedScoreError,
    UndefinedSNRError,
    ensure_finite,
)
from san.losses import SCLConfig, clamp_unit, scl_pair_loss
from san.model import Decision

logger = logging.getLogger(__name__)

REPORT_KEYS = ("a_c", "a_t", "h_score", "balance_h_score", "theta", "per_class")


class Truth(NamedTuple):
    """Ground truth of one target sample"""
    label: int
    is_private: bool


# ============================================
# COUNTS AND SCORES
# ============================================

@dataclass(frozen=True)
class EvalCounts:
    """Per-class correct/total counts on known classes and pooled unknown counts"""
    per_class: Dict[int, Tuple[int, int]]
    unknown_correct: int
    unknown_total: int

    def __post_init__(self):
        for label, (correct, total) in self.per_class.items():
            if correct < 0 or total < 0 or correct > total:
                raise InvalidArgumentError(f"invalid counts for class {label}: {correct}/{total}")
        if self.unknown_correct < 0 or self.unknown_correct > self.unknown_total:
            raise InvalidArgumentError(
                f"invalid unknown counts: {self.unknown_correct}/{self.unknown_total}")

    @classmethod
    def from_totals(cls, known_correct: int, known_total: int,
                    unknown_correct: int, unknown_total: int) -> "EvalCounts":
        """Counts with all known samples pooled into a single class"""
        return cls({0: (int(known_correct), int(known_total))}, int(unknown_correct), int(unknown_total))

    @property
    def M(self) -> int:
        return sum(total for _, total in self.per_class.values())

    @property
    def M_t(self) -> int:
        return self.unknown_total

    @property
    def known_correct(self) -> int:
        return sum(correct for correct, _ in self.per_class.values())

    @property
    def theta(self) -> float:
        if self.M == 0:
            raise UndefinedScoreError("no known-class samples", missing="known")
        return self.M_t / self.M

    def per_class_accuracy(self) -> Dict[int, float]:
        return {label: correct / total
                for label, (correct, total) in sorted(self.per_class.items()) if total > 0}

    @property
    def a_c(self) -> float:
        """Mean of per-class accuracies over known classes with samples"""
        accs = self.per_class_accuracy()
        if not accs:
            raise UndefinedScoreError("no known-class samples", missing="known")
        return float(np.mean(list(accs.values())))

    @property
    def a_t(self) -> float:
        if self.unknown_total == 0:
            raise UndefinedScoreError("no unknown-class samples", missing="unknown")
        return self.unknown_correct / self.unknown_total


def eval_counts(predictions: Sequence[Decision], truths: Iterable) -> EvalCounts:
    """
    Tally target predictions against ground truth

    A known-class sample is correct iff predicted Known(its class); a private
    sample is correct iff predicted Unknown.

    Raises:
        UndefinedScoreError: no known or no unknown samples (names the side)
    """
    truths = [Truth(int(t[0]), bool(t[1])) for t in truths]
    if len(truths) != len(predictions):
        raise InvalidArgumentError(
            f"{len(predictions)} predictions for {len(truths)} ground-truth labels")
    per_class: Dict[int, List[int]] = {}
    unknown_correct = unknown_total = 0
    for pred, truth in zip(predictions, truths):
        if truth.is_private:
            unknown_total += 1
            unknown_correct += int(pred.is_unknown)
        else:
            slot = per_class.setdefault(truth.label, [0, 0])
            slot[1] += 1
            slot[0] += int(not pred.is_unknown and pred.label == truth.label)
    if not per_class:
        raise UndefinedScoreError("target split has no known-class samples", missing="known")
    if unknown_total == 0:
        raise UndefinedScoreError("target split has no unknown samples", missing="unknown")
    return EvalCounts({k: (c, t) for k, (c, t) in per_class.items()}, unknown_correct, unknown_total)


def load_predictions(path: Union[str, Path]) -> Tuple[List[Decision], List[Truth]]:
    """
    Read an offline predictions file

    One ``true_label,is_private,prediction`` row per target sample, where
    is_private is 0/1 (or true/false) and prediction is a class index or
    "unknown". Lines starting with '#' are skipped.
    """
    predictions, truths = [], []
    for line_number, text in enumerate(Path(path).read_text().splitlines(), start=1):
        if not text.strip() or text.lstrip().startswith("#"):
            continue
        fields = [f.strip() for f in text.split(",")]
        if len(fields) != 3:
            raise FeatureFileParseError(f"expected 3 fields, got {len(fields)}", line_number)
        flag = fields[1].lower()
        if flag not in ("0", "1", "true", "false"):
            raise FeatureFileParseError(f"is_private must be 0/1, got '{fields[1]}'", line_number)
        try:
            truths.append(Truth(int(fields[0]), flag in ("1", "true")))
            predictions.append(Decision.parse(fields[2]))
        except ValueError as e:
            raise FeatureFileParseError(str(e), line_number)
    return predictions, truths


def h_score(a_c: float, a_t: float) -> float:
    """Harmonic mean of known and unknown accuracy"""
    if a_c + a_t == 0:
        return 0.0
    return 2.0 * a_c * a_t / (a_c + a_t)


def balance_h_score(a_c: float, a_t: float, theta: float) -> float:
    """theta-weighted harmonic mean (1 + theta) a_c a_t / (theta a_c + a_t)"""
    if theta < 0:
        raise InvalidArgumentError(f"theta must be non-negative, got {theta}")
    if a_c == a_t:
        return float(a_c)
    denom = theta * a_c + a_t
    if denom == 0:
        return 0.0
    return (1.0 + theta) * a_c * a_t / denom


@dataclass(frozen=True)
class ScoreReport:
    """Scores of one evaluation pass"""
    a_c: float
    a_t: float
    h_score: float
    balance_h_score: float
    theta: float
    per_class: Dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: EvalCounts) -> "ScoreReport":
        a_c, a_t, theta = counts.a_c, counts.a_t, counts.theta
        return cls(a_c, a_t, h_score(a_c, a_t), balance_h_score(a_c, a_t, theta), theta,
                   counts.per_class_accuracy())

    def to_dict(self) -> Dict:
        return {
            "a_c": self.a_c,
            "a_t": self.a_t,
            "h_score": self.h_score,
            "balance_h_score": self.balance_h_score,
            "theta": self.theta,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Dict) -> "ScoreReport":
        missing = [key for key in REPORT_KEYS if key not in data]
        if missing:
            raise InvalidArgumentError(f"score report lacks keys: {missing}")
        return cls(float(data["a_c"]), float(data["a_t"]), float(data["h_score"]),
                   float(data["balance_h_score"]), float(data["theta"]),
                   {int(k): float(v) for k, v in data["per_class"].items()})


# ============================================
# COUNT SENSITIVITY
# ============================================

@dataclass(frozen=True)
class SensitivityReport:
    """Finite-difference slopes of B and H with respect to the correct counts"""
    slope_b_nc: float
    slope_b_nt: float
    slope_h_nc: float
    slope_h_nt: float

    @property
    def b_slope_gap(self) -> float:
        """Relative disagreement of the two Balance H-score slopes"""
        return abs(self.slope_b_nc - self.slope_b_nt) / abs(self.slope_b_nc)

    @property
    def h_slope_ratio(self) -> float:
        return self.slope_h_nc / self.slope_h_nt


def balance_sensitivity(counts: EvalCounts, delta: int = 1) -> SensitivityReport:
    """
    Symmetric finite differences of B and H in N_c and N_t

    Uses pooled accuracies A_c = N_c / M and A_t = N_t / M_t, so that one
    extra correct known sample and one extra correct unknown sample can be
    compared directly.
    """
    if int(delta) != delta or delta < 1:
        raise InvalidArgumentError(f"delta must be a positive integer, got {delta}")
    M, M_t = counts.M, counts.M_t
    n_c, n_t = counts.known_correct, counts.unknown_correct
    if M == 0 or M_t == 0:
        raise UndefinedScoreError("sensitivity needs known and unknown samples")
    if n_c - delta < 0 or n_c + delta > M or n_t - delta < 0 or n_t + delta > M_t:
        raise InvalidArgumentError(f"delta={delta} leaves the feasible count range")
    theta = M_t / M

    def scores(nc: int, nt: int) -> Tuple[float, float]:
        a_c, a_t = nc / M, nt / M_t
        return balance_h_score(a_c, a_t, theta), h_score(a_c, a_t)

    b_cp, h_cp = scores(n_c + delta, n_t)
    b_cm, h_cm = scores(n_c - delta, n_t)
    b_tp, h_tp = scores(n_c, n_t + delta)
    b_tm, h_tm = scores(n_c, n_t - delta)
    width = 2.0 * delta
    return SensitivityReport((b_cp - b_cm) / width, (b_tp - b_tm) / width,
                             (h_cp - h_cm) / width, (h_tp - h_tm) / width)


# ============================================
# SIGNAL-TO-NOISE PROBE
# ============================================

@dataclass(frozen=True)
class SNRProbe:
    """Mean positive-pair loss over mean noise-pair loss"""
    pl: float
    nl: float
    snr: float
    m_ratio: float


def _linked_loss(kind: str, q: np.ndarray, cfg: SCLConfig, binary: bool) -> np.ndarray:
    """Loss of pairs with H = 1 at similarity q"""
    if kind == "cl" or binary:
        return -np.log(q)
    p = clamp_unit(math.exp(cfg.alpha) * q, cfg.clamp_eps)
    return scl_pair_loss(p, q)


def _unlinked_loss(kind: str, q: np.ndarray, binary: bool) -> np.ndarray:
    """Loss of pairs with H = 0 at similarity q"""
    if kind == "cl" or binary:
        return -np.log1p(-q)
    return scl_pair_loss(q, q)


def snr_probe(loss_kind: str, q_pos, q_noise, cfg: SCLConfig, m_ratio: float = 1.0,
              binary_affinity: bool = False) -> SNRProbe:
    """
    Expected loss on positive pairs versus noise pairs

    In a positive pair the linked (H = 1) similarity is high (q_pos) and the
    unlinked one low (q_noise); a noise pair swaps them. Unlinked terms are
    weighted by m_ratio, the H = 1 to H = 0 occurrence ratio. Under "scl"
    the soft target is e^alpha * q for linked pairs (clamped to stay <= 1)
    and q for unlinked pairs; binary_affinity replaces it by H.
    """
    if loss_kind not in ("cl", "scl"):
        raise InvalidArgumentError(f"loss_kind must be 'cl' or 'scl', got {loss_kind}")
    q_pos = ensure_finite(q_pos, "q_pos").ravel()
    q_noise = ensure_finite(q_noise, "q_noise").ravel()
    if q_noise.size == 0:
        raise UndefinedSNRError("no noise-pair samples")
    if q_pos.size == 0:
        raise InvalidArgumentError("no positive-pair samples")
    for name, q in (("q_pos", q_pos), ("q_noise", q_noise)):
        if np.any(q <= 0.0) or np.any(q >= 1.0):
            raise InvalidArgumentError(f"{name} values must lie in (0, 1)")

    pl = float(m_ratio * np.mean(_unlinked_loss(loss_kind, q_noise, binary_affinity))
               + np.mean(_linked_loss(loss_kind, q_pos, cfg, binary_affinity)))
    nl = float(m_ratio * np.mean(_unlinked_loss(loss_kind, q_pos, binary_affinity))
               + np.mean(_linked_loss(loss_kind, q_noise, cfg, binary_affinity)))
    if nl == 0.0:
        raise UndefinedSNRError("noise-pair loss is zero")
    return SNRProbe(pl, nl, pl / nl, float(m_ratio))
