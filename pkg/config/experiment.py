"""
Experiment Configuration
One experiment is a flat table of dotted keys (``section.key``) resolved
against defaults, read from an INI or YAML file and overridable key by key
from the command line. The typed objects the runner consumes are built from
that table, and the table is what gets dumped next to each run's reports.
"""

import configparser
import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import yaml

from config import settings
from domain_data import DatasetSplitSpec, DomainShift, NoiseSpec
from san.core_math import KernelParams, TopNConfig
from san.errors import ConfigurationError, SANError
from san.losses import DensityMode, SCLConfig
from san.model import Activation, NetworkSpec, ObjectiveTerms, OpenHead, TrainConfig

logger = logging.getLogger(__name__)


class Variant(Enum):
    """Ablation variants of the training objective"""
    SAN = "san"
    WO_SCL = "san-wo-scl"
    WO_AIO = "san-wo-aio"
    W_CL = "san-w-cl"

    @property
    def open_head(self) -> OpenHead:
        return OpenHead.OVA if self is Variant.WO_AIO else OpenHead.AIO

    def objective_terms(self) -> ObjectiveTerms:
        if self is Variant.WO_SCL:
            return ObjectiveTerms(ce=True, open_loss=OpenHead.AIO, contrastive=None)
        if self is Variant.W_CL:
            return ObjectiveTerms(ce=True, open_loss=OpenHead.AIO, contrastive="cl",
                                  cl_mode=DensityMode.KERNEL_BCE)
        return ObjectiveTerms(ce=True, open_loss=self.open_head, contrastive="scl")


# Every recognised key with its default, in dump order
DEFAULTS: Dict[str, str] = {
    "experiment.variant": "san",
    "experiment.seeds": "0",
    "experiment.output_dir": settings.OUTPUT_DIR,
    "experiment.export_embeddings": "true",
    "experiment.save_checkpoint": "false",
    "data.split": "visda-like",
    "data.shared": "",
    "data.src_private": "",
    "data.tgt_private": "",
    "data.samples_per_class": "200",
    "data.feature_dim": "32",
    "data.class_std": "0.15",
    "data.class_layout": "interleaved",
    "data.feature_file": "",
    "data.shift_rotation": "0.1",
    "data.shift_x": "0.05",
    "data.shift_y": "0.0",
    "data.shift_scale": "1.0",
    "noise.rho_s": "0.0",
    "noise.p_view": "0.0",
    "noise.aug_jitter": "0.05",
    "noise.aug_rotation": "0.1",
    "train.lambda": repr(settings.LAMBDA),
    "train.beta": repr(settings.BETA),
    "train.lr0": "0.05",
    "train.decay_gamma": "10.0",
    "train.decay_power": "0.75",
    "train.epochs": "30",
    "train.batch_size": "32",
    "train.clamp_eps": "0.001",
    "train.top_n": str(settings.TOP_N),
    "train.grad_clip": "10.0",
    "train.precision": "float64",
    "train.threshold": "0.5",
    "network.backbone_layers": "128,64",
    "network.head_layers": "256,128",
    "network.activation": "relu",
    "scl.alpha": repr(settings.ALPHA),
    "scl.nu_y": repr(settings.NU_Y),
    "scl.nu_z": repr(settings.NU_Z),
    "scl.clamp_eps": repr(settings.CLAMP_EPS),
}

SECTIONS = ("experiment", "data", "noise", "train", "network", "scl")

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def _bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")


def _number(key: str, raw: str, kind=float):
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: expected {kind.__name__}, got {raw!r}")


def _int_list(key: str, raw: str) -> Tuple[int, ...]:
    parts = [p for p in raw.replace(" ", "").split(",") if p]
    if not parts:
        raise ConfigurationError(f"{key}: expected a comma-separated list of integers")
    return tuple(_number(key, p, int) for p in parts)


@dataclass(frozen=True)
class NetworkLayout:
    """Hidden widths and activation; input and output sizes come from the data"""
    backbone_layers: Tuple[int, ...] = (128, 64)
    head_layers: Tuple[int, ...] = (256, 128)
    activation: Activation = Activation.RELU

    def spec(self, input_dim: int, num_known: int, seed: int,
             open_head: OpenHead = OpenHead.AIO) -> NetworkSpec:
        return NetworkSpec(input_dim, self.backbone_layers, self.head_layers, 2 * num_known,
                           self.activation, seed, closed_head=True, open_head=open_head)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment settings plus the key table they were built from"""
    variant: Variant
    seeds: Tuple[int, ...]
    output_dir: Path
    split: Optional[DatasetSplitSpec]
    feature_file: Optional[Path]
    shift: DomainShift
    noise: NoiseSpec
    train: TrainConfig
    network: NetworkLayout
    threshold: float = 0.5
    export_embeddings: bool = True
    save_checkpoint: bool = False
    values: Dict[str, str] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_values(cls, values: Mapping[str, str]) -> "ExperimentConfig":
        """Build from a (partial) key table; missing keys take their defaults"""
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        v = dict(DEFAULTS)
        v.update({k: str(val).strip() for k, val in values.items()})
        try:
            return cls._build(v)
        except ConfigurationError:
            raise
        except SANError as e:
            raise ConfigurationError(str(e)) from e

    @classmethod
    def _build(cls, v: Dict[str, str]) -> "ExperimentConfig":
        try:
            variant = Variant(v["experiment.variant"])
        except ValueError:
            known = ", ".join(x.value for x in Variant)
            raise ConfigurationError(f"unknown variant {v['experiment.variant']!r} (known: {known})")
        seeds = _int_list("experiment.seeds", v["experiment.seeds"])

        feature_file = Path(v["data.feature_file"]) if v["data.feature_file"] else None
        split = None
        if feature_file is None:
            generator = dict(samples_per_class=_number("data.samples_per_class", v["data.samples_per_class"], int),
                             feature_dim=_number("data.feature_dim", v["data.feature_dim"], int),
                             class_std=_number("data.class_std", v["data.class_std"]),
                             class_layout=v["data.class_layout"])
            if v["data.shared"]:
                split = DatasetSplitSpec(_number("data.shared", v["data.shared"], int),
                                         _number("data.src_private", v["data.src_private"] or "0", int),
                                         _number("data.tgt_private", v["data.tgt_private"] or "0", int),
                                         **generator)
            else:
                split = DatasetSplitSpec.from_preset(v["data.split"], **generator)
        shift = DomainShift(_number("data.shift_rotation", v["data.shift_rotation"]),
                            (_number("data.shift_x", v["data.shift_x"]), _number("data.shift_y", v["data.shift_y"])),
                            _number("data.shift_scale", v["data.shift_scale"]))
        noise = NoiseSpec(_number("noise.rho_s", v["noise.rho_s"]), _number("noise.p_view", v["noise.p_view"]),
                          _number("noise.aug_jitter", v["noise.aug_jitter"]),
                          _number("noise.aug_rotation", v["noise.aug_rotation"]))

        scl = SCLConfig(alpha=_number("scl.alpha", v["scl.alpha"]),
                        nu_y=KernelParams(_number("scl.nu_y", v["scl.nu_y"])),
                        nu_z=KernelParams(_number("scl.nu_z", v["scl.nu_z"])),
                        clamp_eps=_number("scl.clamp_eps", v["scl.clamp_eps"]))
        clip_raw = v["train.grad_clip"].lower()
        train = TrainConfig(lam=_number("train.lambda", v["train.lambda"]),
                            beta=_number("train.beta", v["train.beta"]),
                            lr0=_number("train.lr0", v["train.lr0"]),
                            decay_gamma=_number("train.decay_gamma", v["train.decay_gamma"]),
                            decay_power=_number("train.decay_power", v["train.decay_power"]),
                            epochs=_number("train.epochs", v["train.epochs"], int),
                            batch_size=_number("train.batch_size", v["train.batch_size"], int),
                            clamp_eps=_number("train.clamp_eps", v["train.clamp_eps"]),
                            topn=TopNConfig(_number("train.top_n", v["train.top_n"], int)),
                            scl=scl,
                            grad_clip=None if clip_raw in ("", "none") else _number("train.grad_clip", clip_raw),
                            precision=v["train.precision"])
        try:
            activation = Activation(v["network.activation"])
        except ValueError:
            raise ConfigurationError(f"unknown activation {v['network.activation']!r}")
        network = NetworkLayout(_int_list("network.backbone_layers", v["network.backbone_layers"]),
                                _int_list("network.head_layers", v["network.head_layers"]),
                                activation)

        return cls(variant=variant, seeds=seeds, output_dir=Path(v["experiment.output_dir"]),
                   split=split, feature_file=feature_file, shift=shift, noise=noise, train=train,
                   network=network, threshold=_number("train.threshold", v["train.threshold"]),
                   export_embeddings=_bool("experiment.export_embeddings", v["experiment.export_embeddings"]),
                   save_checkpoint=_bool("experiment.save_checkpoint", v["experiment.save_checkpoint"]),
                   values=v)

    def to_values(self) -> Dict[str, str]:
        return dict(self.values) if self.values else dict(DEFAULTS)


def _flatten_yaml(data) -> Dict[str, str]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError("YAML config must be a mapping of sections")
    flat = {}
    for section, entries in data.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]")
        if not isinstance(entries, dict):
            raise ConfigurationError(f"section [{section}] must be a mapping")
        for key, value in entries.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, (list, tuple)):
                value = ",".join(str(x) for x in value)
            elif value is None:
                value = ""
            flat[f"{section}.{key}"] = str(value)
    return flat


def _flatten_ini(text: str, source: str) -> Dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigurationError(f"cannot parse {source}: {e}")
    flat = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}] in {source}")
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read an experiment config file

    Files ending in .yaml/.yml are parsed as YAML; anything else as
    ``key = value`` lines under bracketed section headers.

    Raises:
        ConfigurationError: unreadable file, unknown section or key, bad value
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}")
    if path.suffix.lower() in (".yaml", ".yml"):
        try:
            flat = _flatten_yaml(yaml.safe_load(text))
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse {path}: {e}")
    else:
        flat = _flatten_ini(text, str(path))
    logger.debug("Loaded %d config keys from %s", len(flat), path)
    return ExperimentConfig.from_values(flat)


def apply_overrides(cfg: ExperimentConfig, overrides: Mapping[str, object]) -> ExperimentConfig:
    """Return a new config with dotted keys replaced (e.g. {"train.lambda": "0.2"})"""
    if not overrides:
        return cfg
    merged = cfg.to_values()
    merged.update({k: str(v) for k, v in overrides.items()})
    return ExperimentConfig.from_values(merged)


def dump_experiment_config(cfg: ExperimentConfig, path: Optional[Union[str, Path]] = None) -> str:
    """Render the resolved key table in INI form (and write it when a path is given)"""
    parser = configparser.ConfigParser(interpolation=None)
    for key, value in cfg.to_values().items():
        section, name = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)
    buffer = io.StringIO()
    parser.write(buffer)
    text = buffer.getvalue()
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text
