"""
Experiment configuration: one nested YAML file, every key optional.

Missing keys take the defaults below; ``preset`` picks a named starting point
that the file then overrides. A full file looks like::

    preset: desk
    dataset:
      source: phantom          # or "cases" (a directory of preprocessed archives)
      case_dir: null
      n_cases: 60
      phantom: {seed: 0, dims: [64, 128, 128]}
    preprocess: {target_spacing: [3.22, 1.62, 1.62], window: [-80, 300],
                 pad_multiple: 16, label_scheme: sides}
    architecture: {growth_rate: 16, stem_channels: 16, norm_groups: 8,
                   decoder_channels: [64, 32, 16, 8]}
    proxy:
      train: {epochs: 40}
      crop_shape: [32, 48, 48]
      n_pairs_train: 200
      n_pairs_val: 80
      same_fraction: 0.5
    segmentation:
      train: {epochs: 60}
      schedule: {w_bce_start: 0.6, w_dice_start: 0.4, w_bce_end: 0.4, w_dice_end: 0.6}
    comparison: {dc_threshold: 0.8, smoothing_window: 5}
    seeds: [0, 1, 2, 3, 4]
    output_dir: runs
    device: cpu
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .losses import LossSchedule
from .models import ArchitectureConfig, ArchitectureError
from .phantom import PhantomError, PhantomSpec
from .training import TrainConfig
from .volume import PreprocessConfig


class ConfigError(ValueError):
    pass


_DESK = {
    "dataset": {"source": "phantom", "case_dir": None, "n_cases": 60, "phantom": {}},
    "preprocess": {},
    "architecture": {"growth_rate": 16, "stem_channels": 16, "norm_groups": 8,
                     "decoder_channels": [64, 32, 16, 8]},
    "proxy": {"train": {"epochs": 40}, "crop_shape": [32, 48, 48], "n_pairs_train": 200,
              "n_pairs_val": 80, "same_fraction": 0.5},
    "segmentation": {"train": {"epochs": 60}, "schedule": {}},
    "comparison": {"dc_threshold": 0.8, "smoothing_window": 5},
    "seeds": [0, 1, 2, 3, 4],
    "output_dir": "runs",
    "device": "cpu",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS = {
    "desk": _DESK,
    # a smaller desk setting that fits the acceptance time budget on one core
    "quick": _merge(_DESK, {
        "dataset": {"phantom": {"dims": [32, 48, 64], "right_semi_axes": [5, 7, 5],
                                "superior_offset": 2, "position_jitter": 2}},
        "architecture": {"growth_rate": 8, "stem_channels": 8, "norm_groups": 8,
                         "decoder_channels": [32, 16, 8, 8]},
        "proxy": {"train": {"epochs": 10}, "crop_shape": [16, 32, 32], "n_pairs_val": 40},
        "segmentation": {"train": {"epochs": 12}},
    }),
    "paper": _merge(_DESK, {
        "dataset": {"source": "cases"},
        "preprocess": {"label_scheme": "kits"},
        "architecture": {"growth_rate": 16, "stem_channels": 32, "norm_groups": 8,
                         "decoder_channels": [128, 64, 32, 16]},
        "proxy": {"train": {"epochs": 200}, "crop_shape": [64, 112, 112]},
        "segmentation": {"train": {"epochs": 200}},
        "seeds": [0],
    }),
}

_TOP_KEYS = set(_DESK) | {"preset"}


@dataclass
class ExperimentConfig:
    source: str = "phantom"
    case_dir: Optional[Path] = None
    n_cases: int = 60
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    proxy_train: TrainConfig = field(default_factory=TrainConfig)
    crop_shape: tuple = (32, 48, 48)
    n_pairs_train: int = 200
    n_pairs_val: int = 80
    same_fraction: float = 0.5
    seg_train: TrainConfig = field(default_factory=TrainConfig)
    schedule: LossSchedule = field(default_factory=LossSchedule)
    dc_threshold: float = 0.8
    smoothing_window: int = 5
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: Path = Path("runs")
    device: str = "cpu"
    raw: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every stage seeded from ``seed``."""
        return from_dict(_merge(self.raw, {"seeds": [seed],
                                           "proxy": {"train": {"seed": seed}},
                                           "segmentation": {"train": {"seed": seed}}}))

    def snapshot(self) -> dict:
        """Fully resolved configuration as plain data."""
        return copy.deepcopy(self.raw)

    def validate_paths(self):
        if self.source == "cases":
            if self.case_dir is None or not Path(self.case_dir).is_dir():
                raise ConfigError(f"case directory {self.case_dir} does not exist")


def from_dict(d: Optional[dict]) -> ExperimentConfig:
    d = dict(d or {})
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    name = d.pop("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    raw = _merge(PRESETS[name], d)
    raw["preset"] = name
    try:
        ds, px, sg, cmp_ = raw["dataset"], raw["proxy"], raw["segmentation"], raw["comparison"]
        seeds = [int(s) for s in raw["seeds"]]
        if not seeds:
            raise ConfigError("seeds must be a nonempty list")
        if ds["source"] not in ("phantom", "cases"):
            raise ConfigError(f"dataset.source must be 'phantom' or 'cases', got {ds['source']!r}")
        # per-stage seeds default to the first experiment seed
        proxy_train = TrainConfig.from_dict({"seed": seeds[0], **px.get("train", {})})
        seg_train = TrainConfig.from_dict({"seed": seeds[0], **sg.get("train", {})})
        schedule = LossSchedule.from_dict({**sg.get("schedule", {}),
                                           "total_epochs": seg_train.epochs})
        cfg = ExperimentConfig(
            source=ds["source"],
            case_dir=None if ds.get("case_dir") is None else Path(ds["case_dir"]),
            n_cases=int(ds["n_cases"]),
            phantom=PhantomSpec.from_dict(ds.get("phantom")),
            preprocess=PreprocessConfig.from_dict(raw["preprocess"]),
            architecture=ArchitectureConfig.from_dict(raw["architecture"]),
            proxy_train=proxy_train,
            crop_shape=tuple(int(c) for c in px["crop_shape"]),
            n_pairs_train=int(px["n_pairs_train"]),
            n_pairs_val=int(px["n_pairs_val"]),
            same_fraction=float(px["same_fraction"]),
            seg_train=seg_train,
            schedule=schedule,
            dc_threshold=float(cmp_["dc_threshold"]),
            smoothing_window=int(cmp_["smoothing_window"]),
            seeds=seeds,
            output_dir=Path(raw["output_dir"]),
            device=str(raw["device"]),
            raw=raw,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, PhantomError, ArchitectureError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if cfg.n_cases < 1:
        raise ConfigError("dataset.n_cases must be >= 1")
    if cfg.smoothing_window < 1:
        raise ConfigError("comparison.smoothing_window must be >= 1")
    if cfg.device != "cpu":
        raise ConfigError(f"only the cpu device is supported, got {cfg.device!r}")
    return cfg


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"configuration file {path} does not exist")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping at the top level")
    return from_dict(_merge(data, overrides or {}))


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(_plain(cfg.snapshot()), sort_keys=True))
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj
