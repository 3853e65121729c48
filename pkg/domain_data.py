"""
Domain Data Module
Synthetic source/target benchmarks with controllable category splits and
domain shift, two-view augmentation, view-noise and label-noise injection,
and ingestion of external feature files.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from san.errors import (
    EmptyDatasetError,
    FeatureFileParseError,
    InvalidArgumentError,
    ensure_probability,
)

logger = logging.getLogger(__name__)


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"


class RngStream(Enum):
    """Independent random streams derived from one experiment seed"""
    GENERATE = 1
    LIFT = 2
    AUGMENT = 3
    VIEW_NOISE = 4
    LABEL_NOISE = 5
    SHUFFLE = 6


def stream_rng(seed: int, stream: RngStream, *counters: int) -> np.random.Generator:
    """Counter-based generator: the same (seed, stream, counters) always gives the same draws"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream.value, *map(int, counters)]))


class SplitPreset(Enum):
    """Category splits as (shared, source-private, target-private)"""
    OFFICE_LIKE = ("office-like", 10, 10, 11)
    OFFICEHOME_LIKE = ("officehome-like", 10, 5, 50)
    VISDA_LIKE = ("visda-like", 6, 3, 3)
    DOMAINNET_LIKE = ("domainnet-like", 150, 50, 145)
    OFFICE_ODA = ("office-oda", 10, 0, 11)
    VISDA_ODA = ("visda-oda", 6, 0, 6)

    @classmethod
    def by_name(cls, name: str) -> "SplitPreset":
        for preset in cls:
            if preset.value[0] == name:
                return preset
        known = ", ".join(p.value[0] for p in cls)
        raise InvalidArgumentError(f"unknown split preset '{name}' (known: {known})")


class ClassLayout(Enum):
    """Placement of the target-private block on the circle of class means"""
    INTERLEAVED = "interleaved"
    CONTIGUOUS = "contiguous"


# ============================================
# DOMAIN TYPES
# ============================================

@dataclass(frozen=True)
class DatasetSplitSpec:
    """Class counts per domain and generator constants"""
    shared: int
    src_private: int = 0
    tgt_private: int = 0
    samples_per_class: int = 200
    feature_dim: int = 32
    class_std: float = 0.15
    radius: float = 1.0
    nonlinearity: float = 0.1
    class_layout: ClassLayout = ClassLayout.INTERLEAVED

    def __post_init__(self):
        try:
            object.__setattr__(self, "class_layout", ClassLayout(self.class_layout))
        except ValueError:
            known = ", ".join(layout.value for layout in ClassLayout)
            raise InvalidArgumentError(f"unknown class layout {self.class_layout!r} (known: {known})")
        if self.shared < 2:
            raise InvalidArgumentError(f"need at least 2 shared classes, got {self.shared}")
        if self.src_private < 0 or self.tgt_private < 0:
            raise InvalidArgumentError("private class counts must be non-negative")
        if self.samples_per_class < 2:
            raise InvalidArgumentError("samples_per_class must be at least 2")
        if self.class_std < 0 or self.radius <= 0:
            raise InvalidArgumentError("class_std must be >= 0 and radius > 0")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "DatasetSplitSpec":
        _, shared, src_private, tgt_private = SplitPreset.by_name(name).value
        return cls(shared, src_private, tgt_private, **overrides)

    @property
    def num_known(self) -> int:
        return self.shared + self.src_private

    @property
    def total_classes(self) -> int:
        return self.shared + self.src_private + self.tgt_private

    def source_classes(self) -> List[int]:
        return list(range(self.num_known))

    def target_classes(self) -> List[int]:
        return list(range(self.shared)) + list(range(self.num_known, self.total_classes))


@dataclass(frozen=True)
class DomainShift:
    """Rotation, translation and scale applied to target class means"""
    rotation: float = 0.0
    translation: Tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        cos, sin = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[cos, sin], [-sin, cos]])
        return self.scale * (np.atleast_2d(points) @ rot) + np.asarray(self.translation, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSpec:
    """Label noise, view noise and augmentation strength"""
    rho_s: float = 0.0
    p_view: float = 0.0
    aug_jitter: float = 0.05
    aug_rotation: float = 0.1

    def __post_init__(self):
        ensure_probability(self.rho_s, "rho_s")
        ensure_probability(self.p_view, "p_view")
        if self.aug_jitter < 0 or self.aug_rotation < 0:
            raise InvalidArgumentError("augmentation strengths must be non-negative")


@dataclass(frozen=True)
class DomainSample:
    """One feature vector with its domain and labels"""
    features: np.ndarray
    true_label: Optional[int]
    observed_label: Optional[int]
    domain: Domain
    is_private: bool = False
    latent: Optional[np.ndarray] = None
    index: int = 0

    def __post_init__(self):
        if self.domain is Domain.TARGET and self.observed_label is not None:
            raise InvalidArgumentError("target samples carry no observed label")


@dataclass(frozen=True)
class Lifting:
    """Fixed map from the 2-D latent plane to feature space"""
    matrix: np.ndarray
    nonlinearity: float

    @classmethod
    def random(cls, feature_dim: int, nonlinearity: float, seed: int) -> "Lifting":
        rng = stream_rng(seed, RngStream.LIFT)
        return cls(rng.standard_normal((2, feature_dim)) / math.sqrt(2.0), nonlinearity)

    def lift(self, latent: np.ndarray) -> np.ndarray:
        linear = np.atleast_2d(latent) @ self.matrix
        return linear + self.nonlinearity * np.tanh(linear)


@dataclass
class DomainDataset:
    """Source and target samples; unpacks as (source, target)"""
    source: List[DomainSample]
    target: List[DomainSample]
    num_known: int
    lifting: Optional[Lifting] = None
    name: str = "synthetic"

    def __iter__(self) -> Iterator[List[DomainSample]]:
        return iter((self.source, self.target))

    @property
    def feature_dim(self) -> int:
        return len(self.source[0].features)

    def source_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Features and observed labels of the source domain"""
        return (np.stack([s.features for s in self.source]),
                np.array([s.observed_label for s in self.source], dtype=np.int64))

    def target_features(self) -> np.ndarray:
        return np.stack([s.features for s in self.target])

    def target_truths(self) -> List[Tuple[Optional[int], bool]]:
        return [(s.true_label, s.is_private) for s in self.target]


# ============================================
# GENERATION
# ============================================

def circle_slots(split: DatasetSplitSpec) -> np.ndarray:
    """
    Circle position of every class label

    CONTIGUOUS puts labels in order. INTERLEAVED spreads the target-private
    classes evenly so that each sits between two known classes (as long as
    there are at least as many known classes as target-private ones).
    """
    total = split.total_classes
    if split.class_layout is ClassLayout.CONTIGUOUS or split.tgt_private == 0:
        return np.arange(total)
    private = [int((i + 0.5) * total / split.tgt_private) for i in range(split.tgt_private)]
    taken = set(private)
    known = [slot for slot in range(total) if slot not in taken]
    return np.array(known + private)


def class_means(split: DatasetSplitSpec) -> np.ndarray:
    """Unit-circle class means spaced 2*pi / total_classes apart, indexed by label"""
    angles = 2.0 * math.pi * circle_slots(split) / split.total_classes
    return split.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_unda_dataset(split: DatasetSplitSpec, shift: DomainShift = DomainShift(),
                     seed: int = 0) -> DomainDataset:
    """
    Generate a synthetic source/target benchmark

    Each sample draws from its own counter-based stream keyed by
    (seed, domain, class, position), so the result does not depend on the
    order in which samples are produced.

    Args:
        split: Category counts and generator constants
        shift: Transform of the target-domain class means
        seed: Experiment seed

    Returns:
        DomainDataset with source classes [0, K) and target classes
        [0, shared) plus the target-private block [K, total)
    """
    if split.feature_dim < 2:
        raise InvalidArgumentError(f"feature_dim must be at least 2, got {split.feature_dim}")
    lifting = Lifting.random(split.feature_dim, split.nonlinearity, seed)
    means = class_means(split)
    shifted = shift.apply(means)
    num_known = split.num_known

    def draw(domain: Domain, label: int, position: int, center: np.ndarray) -> np.ndarray:
        rng = stream_rng(seed, RngStream.GENERATE, 0 if domain is Domain.SOURCE else 1, label, position)
        return center + split.class_std * rng.standard_normal(2)

    source, target = [], []
    for label in split.source_classes():
        for j in range(split.samples_per_class):
            latent = draw(Domain.SOURCE, label, j, means[label])
            source.append(DomainSample(lifting.lift(latent)[0], label, label, Domain.SOURCE,
                                       False, latent, len(source)))
    for label in split.target_classes():
        for j in range(split.samples_per_class):
            latent = draw(Domain.TARGET, label, j, shifted[label])
            target.append(DomainSample(lifting.lift(latent)[0], label, None, Domain.TARGET,
                                       label >= num_known, latent, len(target)))

    logger.info("Generated synthetic benchmark",
                extra={"event": "dataset_generated", "source": len(source), "target": len(target),
                       "known_classes": num_known, "seed": seed})
    return DomainDataset(source, target, num_known, lifting)


# ============================================
# AUGMENTATION AND NOISE
# ============================================

def _rotate(latent: np.ndarray, angle: float) -> np.ndarray:
    cos, sin = math.cos(angle), math.sin(angle)
    return np.array([cos * latent[0] - sin * latent[1], sin * latent[0] + cos * latent[1]])


def augment_once(sample: DomainSample, noise: NoiseSpec, rng: np.random.Generator,
                 lifting: Optional[Lifting] = None) -> np.ndarray:
    """One stochastic view: latent rotation (when a lifting is known) then feature jitter"""
    if noise.aug_rotation > 0 and sample.latent is not None and lifting is not None:
        angle = rng.uniform(-noise.aug_rotation, noise.aug_rotation)
        view = lifting.lift(_rotate(sample.latent, angle))[0]
    else:
        view = np.array(sample.features, dtype=np.float64, copy=True)
    if noise.aug_jitter > 0:
        view = view + noise.aug_jitter * rng.standard_normal(view.shape[0])
    return view


def augment(sample: DomainSample, noise: NoiseSpec, rng: np.random.Generator,
            lifting: Optional[Lifting] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two independent views of a sample

    Rotation acts in the latent plane before lifting; samples without a
    latent (loaded from feature files) only receive jitter.
    """
    return augment_once(sample, noise, rng, lifting), augment_once(sample, noise, rng, lifting)


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    origin: DomainSample


def inject_view_noise(pairs: Sequence[ViewPair], p_view: float, rng: np.random.Generator,
                      noise: NoiseSpec = NoiseSpec(), lifting: Optional[Lifting] = None,
                      pool: Optional[Sequence[DomainSample]] = None) -> Tuple[List[ViewPair], np.ndarray]:
    """
    Silently replace second views by a view of another class

    Each pair is corrupted with probability p_view; its pairing label stays
    1. Replacements are drawn uniformly from the pool (default: the pairs'
    own origins) among samples of a different true class.

    Returns:
        The new pairs and the boolean corruption mask (for evaluation only)
    """
    ensure_probability(p_view, "p_view", upper_open=False)
    pool = list(pool) if pool is not None else [pair.origin for pair in pairs]
    labels = np.array([-1 if s.true_label is None else s.true_label for s in pool])
    if len(set(labels[labels >= 0].tolist())) < 2:
        raise InvalidArgumentError("view noise needs at least 2 labeled classes")

    mask = np.zeros(len(pairs), dtype=bool)
    if p_view == 0.0:
        return list(pairs), mask
    out = []
    for i, pair in enumerate(pairs):
        if rng.random() < p_view:
            candidates = np.flatnonzero((labels != pair.origin.true_label) & (labels >= 0))
            donor = pool[int(candidates[rng.integers(len(candidates))])]
            out.append(ViewPair(pair.view_a, augment_once(donor, noise, rng, lifting), pair.origin))
            mask[i] = True
        else:
            out.append(pair)
    return out, mask


def inject_label_noise(samples: Sequence[DomainSample], rho_s: float,
                       rng: np.random.Generator, num_known: Optional[int] = None) -> List[DomainSample]:
    """
    Flip each observed label with probability rho_s to a uniform different known class

    Args:
        samples: Source samples
        rho_s: Flip probability in [0, 1)
        rng: Random stream
        num_known: Number of known classes (default: one past the largest true label)
    """
    ensure_probability(rho_s, "rho_s")
    if num_known is None:
        num_known = max(s.true_label for s in samples) + 1
    if num_known < 2:
        raise InvalidArgumentError("label noise needs at least 2 known classes")
    out = []
    flips = 0
    for sample in samples:
        if rng.random() < rho_s:
            draw = int(rng.integers(num_known - 1))
            observed = draw if draw < sample.true_label else draw + 1
            flips += 1
            out.append(replace(sample, observed_label=observed))
        else:
            out.append(sample)
    logger.debug("Label noise injected: %d of %d flipped", flips, len(out))
    return out


# ============================================
# FEATURE FILES
# ============================================

def _parse_row(text: str, line_number: int) -> Tuple[str, int, np.ndarray]:
    fields = [f.strip() for f in text.split(",")]
    if len(fields) < 3:
        raise FeatureFileParseError("expected domain, label and at least one feature", line_number)
    domain = fields[0]
    if domain not in ("s", "t"):
        raise FeatureFileParseError(f"domain must be 's' or 't', got '{domain}'", line_number)
    try:
        label = int(fields[1])
    except ValueError:
        raise FeatureFileParseError(f"non-integer label '{fields[1]}'", line_number)
    try:
        features = np.array([float(v) for v in fields[2:]])
    except ValueError as e:
        raise FeatureFileParseError(f"non-numeric feature ({e})", line_number)
    if not np.all(np.isfinite(features)):
        raise FeatureFileParseError("non-finite feature value", line_number)
    if domain == "s" and label < 0:
        raise FeatureFileParseError("source rows need a class label", line_number)
    return domain, label, features


def load_feature_file(path: Union[str, Path]) -> DomainDataset:
    """
    Read a comma-separated feature file

    Rows are ``domain,label,f1,f2,...`` with domain "s" or "t" and label -1
    for unlabeled target rows; lines starting with '#' are ignored. Labels
    are re-indexed densely (source classes first), and target classes absent
    from the source become private.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="ascii").splitlines()
    except UnicodeDecodeError as e:
        raise FeatureFileParseError(f"file is not 7-bit ASCII: {e}")

    rows = []
    dim = None
    for line_number, text in enumerate(lines, start=1):
        if not text.strip() or text.lstrip().startswith("#"):
            continue
        domain, label, features = _parse_row(text, line_number)
        if dim is None:
            dim = features.shape[0]
        elif features.shape[0] != dim:
            raise FeatureFileParseError(
                f"expected {dim} features, got {features.shape[0]}", line_number)
        rows.append((domain, label, features))

    source_labels = sorted({label for domain, label, _ in rows if domain == "s"})
    if not source_labels:
        raise EmptyDatasetError(f"{path} holds no source samples", missing="source")
    if not any(domain == "t" for domain, _, _ in rows):
        raise EmptyDatasetError(f"{path} holds no target samples", missing="target")
    private_labels = sorted({label for domain, label, _ in rows
                             if domain == "t" and label >= 0 and label not in source_labels})
    mapping = {label: i for i, label in enumerate(source_labels + private_labels)}
    num_known = len(source_labels)

    source, target = [], []
    for domain, label, features in rows:
        if domain == "s":
            idx = mapping[label]
            source.append(DomainSample(features, idx, idx, Domain.SOURCE, False, None, len(source)))
        else:
            idx = mapping.get(label) if label >= 0 else None
            target.append(DomainSample(features, idx, None, Domain.TARGET,
                                       idx is not None and idx >= num_known, None, len(target)))
    logger.info("Loaded feature file",
                extra={"event": "feature_file_loaded", "file": str(path),
                       "source": len(source), "target": len(target)})
    return DomainDataset(source, target, num_known, None, name=path.stem)


def write_feature_file(dataset: DomainDataset, path: Union[str, Path]) -> Path:
    """Write a dataset in the feature-file format (target rows keep their true labels)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {dataset.name}: {len(dataset.source)} source, {len(dataset.target)} target, "
             f"{dataset.num_known} known classes"]
    for sample in dataset.source + dataset.target:
        domain = "s" if sample.domain is Domain.SOURCE else "t"
        label = -1 if sample.true_label is None else sample.true_label
        values = ",".join(repr(float(v)) for v in sample.features)
        lines.append(f"{domain},{label},{values}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


# ============================================
# SOURCES
# ============================================

class SampleSource(ABC):
    """Abstract provider of a source/target dataset"""

    @abstractmethod
    def load(self) -> DomainDataset:
        """Produce the dataset"""
        pass


class SyntheticSource(SampleSource):
    """Seeded synthetic benchmark"""

    def __init__(self, split: DatasetSplitSpec, shift: DomainShift = DomainShift(), seed: int = 0):
        self.split = split
        self.shift = shift
        self.seed = seed

    def load(self) -> DomainDataset:
        return gen_unda_dataset(self.split, self.shift, self.seed)


class FeatureFileSource(SampleSource):
    """Features read from a comma-separated file"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def load(self) -> DomainDataset:
        return load_feature_file(self.path)


def get_source(split: Optional[DatasetSplitSpec] = None, feature_file: Optional[Union[str, Path]] = None,
               shift: DomainShift = DomainShift(), seed: int = 0) -> SampleSource:
    """
    Get a sample source instance

    A feature file takes precedence over a synthetic split.
    """
    if feature_file:
        return FeatureFileSource(feature_file)
    if split is None:
        raise InvalidArgumentError("either a split or a feature file is required")
    return SyntheticSource(split, shift, seed)
