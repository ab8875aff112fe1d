"""Experiment configuration: one JSON-compatible document with a section
per pipeline stage. A stored config plus its seeds reproduces every
artifact byte-for-byte."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from edgepatch.errors import ConfigError


@dataclass
class DatasetConfig:
    layout: str = "TOY"
    root: str = None          # required for SYSU/REGDB
    image_size: tuple = (128, 64)
    n_ids: int = 8            # toy only
    per_id_per_modality: int = 6
    seed: int = 7
    holdout_per_id: int = 2   # evaluation images per (id, modality)


@dataclass
class ExtractorTrainConfig:
    feature_dim: int = 128
    fuse_channels: int = 32
    enc_channels: int = 64
    epochs: int = 50
    lr: float = 1e-3
    momentum: float = 0.9
    batch_identities: int = 8
    images_per_id: int = 2    # per modality per batch
    seed: int = 11
    removed_levels: tuple = ()


@dataclass
class GeneratorTrainConfig:
    z_dim: int = 64
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    token_grid: int = 8       # tokens per side -> token_grid^2 tokens
    token_pixels: int = 8     # pixels per token side -> 64x64 patch
    epochs: int = 30
    lr: float = 1e-3
    tv_weight: float = 0.0
    output_gain: float = 6.0  # sigmoid temperature: bolder, print-like patches
    batch_identities: int = 8
    images_per_id: int = 2
    seed: int = 13
    placement: tuple = (0.5, 0.45, 0.40, 0.30)  # cx, cy, w, h fractions


@dataclass
class VictimTrainConfig:
    embed_dim: int = 64
    channels: tuple = (16, 32, 64)
    epochs: int = 100
    lr: float = 1e-3
    margin: float = 0.3
    ce_weight: float = 1.0
    triplet_weight: float = 1.0
    batch_identities: int = 4
    images_per_id: int = 2    # per modality per batch
    erase_prob: float = 0.3
    input_mode: str = "edge"  # edge | rgb | rgb+edge
    avg_tail: float = 0.3     # average weights over the last fraction of epochs
    seed: int = 17
    exchange_path: str = None  # use an external embedding exchange instead


@dataclass
class EvalConfig:
    direction: str = "VIS_TO_IR"   # or IR_TO_VIS / both
    protocol: str = "ALL"
    n_runs: int = 1
    r_values: tuple = (1, 5, 10, 20)
    seed: int = 3
    camera_subset: tuple = None    # optional gallery camera filter


@dataclass
class ExperimentConfig:
    name: str = "toy"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    extractor: ExtractorTrainConfig = field(default_factory=ExtractorTrainConfig)
    generator: GeneratorTrainConfig = field(default_factory=GeneratorTrainConfig)
    victim: VictimTrainConfig = field(default_factory=VictimTrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    _SECTIONS = {
        "dataset": DatasetConfig,
        "extractor": ExtractorTrainConfig,
        "generator": GeneratorTrainConfig,
        "victim": VictimTrainConfig,
        "evaluation": EvalConfig,
    }

    def to_dict(self):
        out = {"name": self.name}
        for section in self._SECTIONS:
            out[section] = dataclasses.asdict(getattr(self, section))
        return _tuples_to_lists(out)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kwargs = {"name": d.pop("name", "toy")}
        for section, dc_cls in cls._SECTIONS.items():
            kwargs[section] = _build_section(dc_cls, d.pop(section, {}) or {}, section)
        if d:
            raise ConfigError(f"unknown config sections: {sorted(d)}")
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path):
        try:
            with open(path) as f:
                doc = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def apply_overrides(self, overrides):
        """Apply --set section.key=value pairs (value parsed as JSON when
        possible, else taken as a string)."""
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set needs section.key=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = dotted.split(".")
            if len(parts) == 1 and parts[0] == "name":
                self.name = str(value)
                continue
            if len(parts) != 2 or parts[0] not in self._SECTIONS:
                raise ConfigError(f"unknown config key: {dotted}")
            section, key = parts
            target = getattr(self, section)
            if not hasattr(target, key):
                raise ConfigError(f"unknown config key: {dotted}")
            current = getattr(target, key)
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            setattr(target, key, value)
        return self


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def _build_section(dc_cls, d, section):
    fields = {f.name: f for f in dataclasses.fields(dc_cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys in [{section}]: {unknown}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default
        if isinstance(default, tuple) or (
            default is None and isinstance(value, list) and name in ("r_values", "camera_subset")
        ):
            if isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    return dc_cls(**kwargs)
