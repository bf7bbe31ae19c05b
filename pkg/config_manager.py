"""
CONFIG MANAGER
RunConfig schema, presets and resolution.

Resolution order:
1. Preset defaults ("desk" or "paper")
2. Dataset profile counts for that preset, unless the user set them
3. User JSON, deep-merged on top
4. Validation (unknown keys rejected, every seed explicit)

Environment: VSSL_THREADS (worker cap), VSSL_LOG_LEVEL (logging level).
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from augment_engine import AugmentRanges
from errors import ConfigError
from network_engine import EncoderSpec, ProjectionHeadSpec, UNetSpec
from phantom_engine import PhantomSpec
from segmentation_engine import DiceSpec
from tensor_engine import OptimizerSpec
from volume_manager import PatchingConfig

logger = logging.getLogger("CONFIG_MANAGER")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    profile: Literal["pancreas", "brats"] = "pancreas"
    resolution: int = Field(16, ge=4)
    phantom_dims: Optional[List[int]] = None
    total_scans: int = Field(100, ge=1)
    train_scans: int = Field(60, ge=1)
    test_scans: int = Field(25, ge=1)
    organ_radius_range: List[float] = [0.18, 0.30]
    tumor_radius_range: List[float] = [0.06, 0.12]
    tumor_probability: float = Field(0.8, ge=0.0, le=1.0)
    noise_sigma: float = Field(0.05, ge=0.0)
    crop_margin: int = Field(1, ge=0)
    seed: int = 7

    @property
    def num_classes(self):
        return 4 if self.profile == "brats" else 3

    @property
    def annotated_scans(self):
        return self.train_scans + self.test_scans

    def raw_dims(self):
        if self.phantom_dims is not None:
            return tuple(self.phantom_dims)
        return (self.resolution + self.resolution // 2,) * 3

    @model_validator(mode="after")
    def check_counts(self):
        if self.annotated_scans > self.total_scans:
            raise ValueError(f"train {self.train_scans} + test {self.test_scans} exceeds total {self.total_scans}")
        if self.phantom_dims is not None and len(self.phantom_dims) != 3:
            raise ValueError("phantom_dims needs three extents")
        return self


class AugmentConfig(_Section):
    families: List[Literal["rotate3d", "intensity_distort", "identity",
                           "gaussian_noise", "gaussian_blur", "sobel3d"]] = [
        "rotate3d", "intensity_distort", "identity", "gaussian_noise", "gaussian_blur", "sobel3d"]
    scale: List[float] = [0.7, 1.3]
    shift: List[float] = [-0.2, 0.2]
    noise_sigma: List[float] = [0.01, 0.2]
    blur_sigma: List[float] = [0.5, 1.5]
    blur_radius: int = Field(2, ge=0)
    seed: int = 11

    @model_validator(mode="after")
    def check_ranges(self):
        if not self.families:
            raise ValueError("at least one augmentation family must be enabled")
        for name in ("scale", "shift", "noise_sigma", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"augment.{name} range [{lo}, {hi}] is empty")
        if not (0.7 <= self.scale[0] and self.scale[1] <= 1.3):
            raise ValueError("augment.scale must stay within [0.7, 1.3]")
        if not (-0.2 <= self.shift[0] and self.shift[1] <= 0.2):
            raise ValueError("augment.shift must stay within [-0.2, 0.2]")
        if not (0.0 < self.noise_sigma[0] and self.noise_sigma[1] <= 0.2):
            raise ValueError("augment.noise_sigma must stay within (0, 0.2]")
        if self.blur_sigma[0] <= 0:
            raise ValueError("augment.blur_sigma must be > 0")
        return self


class EncoderConfig(_Section):
    channels: List[int] = [8, 16, 32]


class HeadConfig(_Section):
    hidden_dim: int = Field(128, ge=1)
    output_dim: int = Field(64, ge=2)


class PretrainConfig(_Section):
    temperature: float = Field(0.05, gt=0.0)
    epochs: int = Field(50, ge=1)
    scans_per_batch: int = Field(4, ge=1)
    grid: List[int] = [2, 2, 2]
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    learning_rate: float = Field(1e-3, gt=0.0)
    seed: int = 13


class FinetuneConfig(_Section):
    fraction: float = Field(1.0, gt=0.0, le=1.0)
    epochs: int = Field(60, ge=1)
    warmup_epochs: int = Field(5, ge=0)
    enc_dropout: float = Field(0.3, ge=0.0, lt=1.0)
    dec_dropout: float = Field(0.0, ge=0.0, lt=1.0)
    class_weights: Optional[List[float]] = None
    smoothing: float = Field(1e-5, gt=0.0)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    init: str = "pretrained"
    seed: int = 17
    subset_seed: int = 19

    @model_validator(mode="after")
    def check_values(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} > epochs {self.epochs}")
        if not (self.init in ("random", "pretrained") or self.init.startswith("pretrained:")):
            raise ValueError(f"finetune.init '{self.init}' must be random | pretrained | pretrained:<path>")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("finetune.class_weights must be > 0")
        return self


class MCConfig(_Section):
    samples: int = Field(25, ge=1)
    enc_rate: float = Field(0.3, ge=0.0, lt=1.0)
    dec_rate: float = Field(0.0, ge=0.0, lt=1.0)
    protocol: Literal["majority", "weighted_majority", "borda", "union"] = "majority"
    weights: Optional[List[float]] = None
    class_x: Optional[int] = None
    percentiles: List[float] = [5.0, 50.0, 95.0]
    heatmap_class: Optional[int] = None
    render_slice: Optional[int] = None
    scans: Optional[int] = Field(None, ge=1)
    seed: int = 23

    @model_validator(mode="after")
    def check_values(self):
        if any(not 0.0 <= p <= 100.0 for p in self.percentiles):
            raise ValueError("mc.percentiles must lie in [0, 100]")
        if self.weights is not None and any(w < 0 for w in self.weights):
            raise ValueError("mc.weights must be >= 0")
        return self


class EvalConfig(_Section):
    fractions: List[float] = [0.05, 0.10, 0.25, 0.50, 1.00]
    seeds: List[int] = [0, 1, 2]
    rates: List[float] = [0.1, 0.3, 0.5]
    temperatures: List[float] = [0.05, 0.1, 0.5]
    temperature_fraction: float = Field(0.10, gt=0.0, le=1.0)
    aggregation_fractions: Optional[List[float]] = None
    sweeps: List[Literal["fraction", "dropout", "aggregation", "mc_benefit", "temperature"]] = [
        "fraction", "dropout", "aggregation", "mc_benefit"]

    @model_validator(mode="after")
    def check_values(self):
        for f in self.fractions + (self.aggregation_fractions or []):
            if not 0.0 < f <= 1.0:
                raise ValueError(f"fraction {f} outside (0, 1]")
        if any(not 0.0 <= r < 1.0 for r in self.rates):
            raise ValueError("eval.rates must lie in [0, 1)")
        if any(t <= 0 for t in self.temperatures):
            raise ValueError("eval.temperatures must be > 0")
        if not self.seeds:
            raise ValueError("eval.seeds must not be empty")
        return self


class RunConfig(_Section):
    preset: Literal["desk", "paper"] = "desk"
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    mc: MCConfig = Field(default_factory=MCConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def check_geometry(self):
        res = self.data.resolution
        grid = self.pretrain.grid
        stages = len(self.pretrain.encoder.channels)
        if len(grid) != 3 or any(g < 1 or res % g for g in grid):
            raise ValueError(f"resolution {res} not divisible by pretrain.grid {grid}")
        factor = 2 ** stages
        if res % factor or any((res // g) % factor for g in grid):
            raise ValueError(f"volume {res} and patches {[res // g for g in grid]} must be divisible by {factor}")
        if any(r < res for r in self.data.raw_dims()):
            raise ValueError(f"phantom dims {self.data.raw_dims()} smaller than resolution {res}")
        classes = self.data.num_classes
        for name, value in (("mc.class_x", self.mc.class_x), ("mc.heatmap_class", self.mc.heatmap_class)):
            if value is not None and not 0 <= value < classes:
                raise ValueError(f"{name} {value} outside [0, {classes})")
        for name, value in (("mc.weights", self.mc.weights), ("finetune.class_weights", self.finetune.class_weights)):
            if value is not None and len(value) != classes:
                raise ValueError(f"{name} needs {classes} entries, got {len(value)}")
        return self


# =================================================================
# PRESETS
# =================================================================
PROFILE_COUNTS = {
    "desk": {"pancreas": (100, 60, 25), "brats": (100, 60, 25)},
    "paper": {"pancreas": (420, 197, 84), "brats": (351, 200, 85)},
}

PRESETS = {
    "desk": {
        "preset": "desk",
        "data": {"resolution": 16},
        "pretrain": {"temperature": 0.05, "epochs": 50},
        "finetune": {"epochs": 60, "warmup_epochs": 5, "smoothing": 1e-5},
        "mc": {"samples": 25, "enc_rate": 0.3, "dec_rate": 0.0},
    },
    "paper": {
        "preset": "paper",
        "data": {"resolution": 128},
        "pretrain": {"temperature": 0.05, "epochs": 1000},
        "finetune": {"epochs": 400, "warmup_epochs": 25, "smoothing": 1e-5},
        "mc": {"samples": 100, "enc_rate": 0.3, "dec_rate": 0.0},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigManager:

    @staticmethod
    def load_file(path) -> dict:
        try:
            document = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return document

    @staticmethod
    def resolve(user: Optional[dict] = None, preset: Optional[str] = None) -> RunConfig:
        user = user or {}
        name = preset or user.get("preset") or "desk"
        if name not in PRESETS:
            raise ConfigError(f"unknown preset '{name}' (expected desk | paper)")

        base = deep_merge(PRESETS[name], {})
        user_data = user.get("data", {}) if isinstance(user.get("data", {}), dict) else {}
        profile = user_data.get("profile", "pancreas")
        if profile in PROFILE_COUNTS[name]:
            total, train, test = PROFILE_COUNTS[name][profile]
            base["data"].update({"total_scans": total, "train_scans": train, "test_scans": test})

        merged = deep_merge(base, user)
        merged["preset"] = name
        try:
            config = RunConfig.model_validate(merged)
        except ValidationError as exc:
            first = exc.errors()[0]
            where = ".".join(str(p) for p in first.get("loc", ()))
            raise ConfigError(f"{where or 'config'}: {first.get('msg')} ({exc.error_count()} error(s))") from exc
        logger.info(f"⚙️ CONFIG_RESOLVED: preset={name} profile={config.data.profile} "
                    f"resolution={config.data.resolution}")
        return config

    @staticmethod
    def save_resolved(config: RunConfig, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        return path

    @staticmethod
    def default_threads() -> int:
        raw = os.getenv("VSSL_THREADS", "1")
        try:
            return max(1, int(raw))
        except ValueError as exc:
            raise ConfigError(f"VSSL_THREADS='{raw}' is not an integer") from exc

    @staticmethod
    def log_level() -> int:
        name = os.getenv("VSSL_LOG_LEVEL", "INFO").upper()
        return getattr(logging, name, logging.INFO)

    # =============================================================
    # SPEC BUILDERS
    # =============================================================
    @staticmethod
    def patching(config: RunConfig) -> PatchingConfig:
        return PatchingConfig(tuple(config.pretrain.grid), config.pretrain.scans_per_batch)

    @staticmethod
    def encoder_spec(config: RunConfig) -> EncoderSpec:
        res = config.data.resolution
        patch = tuple(res // g for g in config.pretrain.grid)
        return EncoderSpec(channels=tuple(config.pretrain.encoder.channels), patch_dims=patch)

    @staticmethod
    def head_spec(config: RunConfig) -> ProjectionHeadSpec:
        return ProjectionHeadSpec(config.pretrain.head.hidden_dim, config.pretrain.head.output_dim)

    @staticmethod
    def unet_spec(config: RunConfig, enc_rate=None, dec_rate=None) -> UNetSpec:
        return UNetSpec(
            encoder=ConfigManager.encoder_spec(config),
            num_classes=config.data.num_classes,
            encoder_dropout_rate=config.finetune.enc_dropout if enc_rate is None else enc_rate,
            decoder_dropout_rate=config.finetune.dec_dropout if dec_rate is None else dec_rate,
        )

    @staticmethod
    def phantom_spec(config: RunConfig, seed=None) -> PhantomSpec:
        data = config.data
        return PhantomSpec(
            dims=data.raw_dims(),
            num_classes=data.num_classes,
            organ_radius_range=tuple(data.organ_radius_range),
            tumor_radius_range=tuple(data.tumor_radius_range),
            tumor_probability=data.tumor_probability,
            noise_sigma=data.noise_sigma,
            seed=data.seed if seed is None else seed,
        )

    @staticmethod
    def augment_ranges(config: RunConfig) -> AugmentRanges:
        aug = config.augment
        return AugmentRanges(scale=tuple(aug.scale), shift=tuple(aug.shift), noise_sigma=tuple(aug.noise_sigma),
                             blur_sigma=tuple(aug.blur_sigma), blur_radius=aug.blur_radius,
                             families=tuple(aug.families))

    @staticmethod
    def dice_spec(config: RunConfig) -> DiceSpec:
        weights = config.finetune.class_weights
        return DiceSpec(config.data.num_classes, config.finetune.smoothing,
                        tuple(weights) if weights is not None else None)

    @staticmethod
    def optimizer(learning_rate) -> OptimizerSpec:
        return OptimizerSpec(learning_rate=learning_rate)

    @staticmethod
    def aggregation_weights(config: RunConfig):
        if config.mc.weights is not None:
            return tuple(config.mc.weights)
        return (1.0,) + (2.0,) * (config.data.num_classes - 1)

    @staticmethod
    def class_x(config: RunConfig) -> int:
        return config.data.num_classes - 1 if config.mc.class_x is None else config.mc.class_x
