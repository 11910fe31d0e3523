"""
Experiment configuration models and ablation presets.

Iteration constants (ADC interval and window, EER warmup, PTDrop window,
graph rebuild, coarse stage) are stored at the 20,000-iteration reference
scale. ``Schedule.from_config`` rescales them to the configured iteration
budget so every window keeps its fraction of training.
"""

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError
from models.scene import SceneSpec

REFERENCE_ITERATIONS = 20_000


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class FieldConfig(_Frozen):
    """Deformation network architecture. The last hidden width is the embedding size E."""

    hidden_widths: tuple[int, ...] = (32, 16)
    fourier_bands: int = Field(default=4, ge=0)
    activation: str = "tanh"

    @field_validator("hidden_widths")
    @classmethod
    def _check_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value or any(w < 1 for w in value):
            raise ValueError("hidden_widths needs at least one positive width")
        return value

    @field_validator("activation")
    @classmethod
    def _check_activation(cls, value: str) -> str:
        if value not in ("tanh", "sin"):
            raise ValueError(f"unsupported activation {value!r}")
        return value


class InitConfig(_Frozen):
    """Initial (pre-densification) cloud, the stand-in for an SfM point set."""

    count: int = Field(default=24, ge=1)
    scale: float = Field(default=0.2, gt=0.0)
    opacity: float = Field(default=0.5, gt=0.0, lt=1.0)


class AdcConfig(_Frozen):
    """Adaptive density control. Defaults are at reference scale."""

    interval: int = Field(default=100, ge=1)
    window_start: int = Field(default=500, ge=0)
    window_end: int = Field(default=15_000, ge=1)
    tau0: float = Field(default=2e-4, gt=0.0)
    # A7 / A8 multiply the (calibrated) base threshold
    tau0_scale: float = Field(default=1.0, gt=0.0)
    calibrate_tau0: bool = True
    calibration_quantile: float = Field(default=0.7, gt=0.0, lt=1.0)
    calibration_iterations: int = Field(default=1_000, ge=1)
    # world units; about one pixel at the default scene width
    size_threshold: float = Field(default=0.04, gt=0.0)
    prune_opacity: float = Field(default=0.005, ge=0.0, lt=1.0)
    split_divisor: float = Field(default=1.6, gt=1.0)
    clone_offset: float = Field(default=0.5, ge=0.0)
    enable_split: bool = True
    enable_clone: bool = True
    enable_prune: bool = True
    enable_all: bool = True
    gad_lambda: float = Field(default=0.0, ge=0.0)
    ema_rho: float = Field(default=0.99, gt=0.0, lt=1.0)
    ema_floor: float = Field(default=1e-8, gt=0.0)
    # 0 disables GrowthCap
    growthcap_max: int = Field(default=0, ge=0)
    growthcap_sharpness: float = Field(default=10.0, ge=0.0)
    # a cloud larger than this aborts the run as diverged
    max_gaussians: int = Field(default=4_096, ge=1)

    @model_validator(mode="after")
    def _check_window(self) -> "AdcConfig":
        if self.window_start >= self.window_end:
            raise ValueError("ADC window start must precede window end")
        return self

    @property
    def effective_tau0(self) -> float:
        return self.tau0 * self.tau0_scale

    @property
    def growthcap_enabled(self) -> bool:
        return self.growthcap_max > 0 and self.growthcap_sharpness > 0


class SmoothnessVariant(str, Enum):
    STRAIN = "strain"
    ON_EMBED = "on_embed"
    ARAP = "arap"
    NO_NORM = "no_norm"
    OFF = "off"


class RegConfig(_Frozen):
    """Deformation smoothness prior and PTDrop."""

    variant: SmoothnessVariant = SmoothnessVariant.OFF
    weight: float = Field(default=0.05, ge=0.0)
    k: int = Field(default=8, ge=1)
    eps: float = Field(default=1e-8, gt=0.0)
    # reference scale samples 2,048 of ~45K; the desk cloud is a few hundred
    sample_size: int = Field(default=256, ge=1)
    warmup_start: int = Field(default=3_000, ge=0)
    warmup_end: int = Field(default=10_000, ge=1)
    graph_rebuild: int = Field(default=500, ge=1)
    ptdrop_enabled: bool = False
    ptdrop_max: float = Field(default=0.3, ge=0.0, lt=1.0)
    ptdrop_start: int = Field(default=5_000, ge=0)
    ptdrop_end: int = Field(default=12_000, ge=1)
    jitter_weighting: bool = True
    jitter_interval: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def _check_windows(self) -> "RegConfig":
        if self.warmup_start >= self.warmup_end:
            raise ValueError("EER warmup start must precede warmup end")
        if self.ptdrop_start >= self.ptdrop_end:
            raise ValueError("PTDrop window start must precede window end")
        return self

    @property
    def smoothness_enabled(self) -> bool:
        return self.variant != SmoothnessVariant.OFF and self.weight > 0


class OptimizerConfig(_Frozen):
    """Per-group Adam step sizes, frozen across presets."""

    lr_positions: float = Field(default=4e-3, gt=0.0)
    # positions decay log-linearly to this rate by the last iteration
    lr_positions_final: float = Field(default=4e-5, gt=0.0)
    lr_log_scales: float = Field(default=1e-2, gt=0.0)
    lr_opacity: float = Field(default=5e-2, gt=0.0)
    lr_colors: float = Field(default=2e-2, gt=0.0)
    lr_field: float = Field(default=2e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-15, gt=0.0)


class ExperimentConfig(_Frozen):
    """One training run: scene, model, ADC, regularizers, optimizer, seed."""

    preset: str = "baseline"
    scene: SceneSpec = SceneSpec()
    iterations: int = Field(default=3_000, ge=0)
    # deformation (and ADC) switch on after the coarse stage
    coarse_iterations: int = Field(default=3_000, ge=0)
    field: FieldConfig = FieldConfig()
    init: InitConfig = InitConfig()
    adc: AdcConfig = AdcConfig()
    reg: RegConfig = RegConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0

    @model_validator(mode="after")
    def _check_schedule(self) -> "ExperimentConfig":
        Schedule.from_config(self)
        return self

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Schedule:
    """Desk-scale iteration schedule derived from reference-scale constants."""

    scale: float
    coarse_end: int
    adc_interval: int
    adc_start: int
    adc_end: int
    calibration_iterations: int
    warmup_start: int
    warmup_end: int
    graph_rebuild: int
    ptdrop_start: int
    ptdrop_end: int
    jitter_interval: int

    @classmethod
    def from_config(cls, cfg: "ExperimentConfig") -> "Schedule":
        s = cfg.iterations / REFERENCE_ITERATIONS

        def at(value: int) -> int:
            return int(round(value * s))

        def every(value: int) -> int:
            return max(1, int(round(value * s)))

        schedule = cls(
            scale=s,
            coarse_end=at(cfg.coarse_iterations),
            adc_interval=every(cfg.adc.interval),
            adc_start=max(at(cfg.adc.window_start), at(cfg.coarse_iterations)),
            adc_end=at(cfg.adc.window_end),
            calibration_iterations=every(cfg.adc.calibration_iterations),
            warmup_start=at(cfg.reg.warmup_start),
            warmup_end=at(cfg.reg.warmup_end),
            graph_rebuild=every(cfg.reg.graph_rebuild),
            ptdrop_start=at(cfg.reg.ptdrop_start),
            ptdrop_end=at(cfg.reg.ptdrop_end),
            jitter_interval=every(cfg.reg.jitter_interval),
        )
        if cfg.iterations > 0:
            for name in ("adc_end", "warmup_end", "ptdrop_end", "coarse_end"):
                if getattr(schedule, name) > cfg.iterations:
                    raise ValueError(f"scaled {name} exceeds the iteration budget")
        return schedule

    @property
    def adc_midpoint(self) -> int:
        return (self.adc_start + self.adc_end) // 2


# Desk-scale regularizer strengths. GAD's lambda carries inverse loss units,
# so it does not transfer from reference-scale runs.
EER_WEIGHTS = {"eer_low": 0.01, "eer": 0.05, "eer_high": 0.1}
GAD_LAMBDA = 0.02
GAD_LAMBDA_HIGH = 0.1
GROWTHCAP_MAX = 150

PRESETS: tuple[str, ...] = (
    "baseline",
    "A1",
    "A2",
    "A3",
    "A4",
    "A5",
    "A6",
    "A7",
    "A8",
    "gad",
    "gad_high",
    "eer_low",
    "eer",
    "eer_high",
    "eer_on_embed",
    "eer_arap",
    "eer_no_norm",
    "ptdrop",
    "growthcap",
    "gad_ptdrop",
    "gad_eer",
    "full",
)


def preset_overrides(preset: str, cfg: ExperimentConfig) -> dict[str, dict[str, Any]]:
    """Config overrides implied by a preset, relative to ``cfg``."""
    adc = cfg.adc
    eer = {"variant": SmoothnessVariant.STRAIN.value, "weight": EER_WEIGHTS["eer"]}
    match preset:
        case "baseline":
            return {}
        case "A1":
            return {"adc": {"enable_all": False}}
        case "A2":
            return {"adc": {"enable_split": False}}
        case "A3":
            return {"adc": {"enable_clone": False}}
        case "A4":
            return {"adc": {"enable_prune": False}}
        case "A5":
            return {"adc": {"interval": adc.interval * 2}}
        case "A6":
            return {"adc": {"window_end": adc.window_end // 2}}
        case "A7":
            return {"adc": {"tau0_scale": adc.tau0_scale * 2.0}}
        case "A8":
            return {"adc": {"tau0_scale": adc.tau0_scale * 0.5}}
        case "gad":
            return {"adc": {"gad_lambda": GAD_LAMBDA}}
        case "gad_high":
            return {"adc": {"gad_lambda": GAD_LAMBDA_HIGH}}
        case "eer_low" | "eer" | "eer_high":
            return {"reg": {"variant": "strain", "weight": EER_WEIGHTS[preset]}}
        case "eer_on_embed" | "eer_arap" | "eer_no_norm":
            return {"reg": {**eer, "variant": preset.removeprefix("eer_")}}
        case "ptdrop":
            return {"reg": {"ptdrop_enabled": True}}
        case "growthcap":
            return {"adc": {"growthcap_max": GROWTHCAP_MAX}}
        case "gad_ptdrop":
            return {"adc": {"gad_lambda": GAD_LAMBDA}, "reg": {"ptdrop_enabled": True}}
        case "gad_eer":
            return {"adc": {"gad_lambda": GAD_LAMBDA}, "reg": eer}
        case "full":
            return {
                "adc": {"gad_lambda": GAD_LAMBDA, "growthcap_max": GROWTHCAP_MAX},
                "reg": {**eer, "ptdrop_enabled": True},
            }
    raise ConfigError(f"Unknown preset {preset!r}. Available: {', '.join(PRESETS)}")


def _deep_merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_preset(cfg: ExperimentConfig, preset: str) -> ExperimentConfig:
    """
    Return ``cfg`` with a preset's overrides applied and re-validated.

    Raises:
        ConfigError: unknown preset or overrides that break an invariant
    """
    overrides = preset_overrides(preset, cfg)
    data = _deep_merge(cfg.model_dump(mode="json"), overrides)
    data["preset"] = preset
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Preset {preset!r} produces an invalid config: {e}") from e


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Validated deep update of a config from plain data."""
    try:
        return ExperimentConfig.model_validate(_deep_merge(cfg.model_dump(mode="json"), overrides))
    except ValidationError as e:
        raise ConfigError(str(e)) from e


class SuiteConfig(_Frozen):
    """A grid of presets x scenes x seeds sharing one base configuration."""

    name: str = "suite"
    presets: tuple[str, ...] = ("baseline",)
    scenes: tuple[SceneSpec, ...] = (SceneSpec(),)
    seeds: tuple[int, ...] = (0,)
    base: ExperimentConfig = ExperimentConfig()

    @model_validator(mode="after")
    def _check_grid(self) -> "SuiteConfig":
        if not (self.presets and self.scenes and self.seeds):
            raise ValueError("a suite needs at least one preset, scene and seed")
        unknown = [p for p in self.presets if p not in PRESETS]
        if unknown:
            raise ValueError(f"unknown presets: {', '.join(unknown)}")
        names = [s.name for s in self.scenes]
        if len(set(names)) != len(names):
            raise ValueError("scene names must be unique within a suite")
        return self
