"""
Test fixtures and data builders for splat lab tests.
"""

from typing import Any, Optional

import numpy as np

from models.config import ExperimentConfig, apply_preset, with_overrides
from models.gaussians import GaussianCloud, logit
from models.scene import Camera, SceneSpec
from services.deformation import DeformationField, FieldArchitecture

# Reference-scale ADC interval chosen so tiny runs densify a handful of times
TINY_OVERRIDES: dict[str, Any] = {
    "init": {"count": 8},
    "adc": {"interval": 2_000},
}


def small_scene_spec(kind: str = "rigid-orbit", **overrides: Any) -> SceneSpec:
    """A scene small enough for sub-second training runs."""
    data = {
        "name": kind,
        "kind": kind,
        "gaussian_count": 10,
        "train_views": 8,
        "test_views": 4,
        "width": 24,
        "seed": 3,
    }
    data.update(overrides)
    return SceneSpec.model_validate(data)


def tiny_config(preset: str = "baseline", iterations: int = 400, seed: int = 0, kind: str = "rigid-orbit") -> ExperimentConfig:
    """Short desk run on a small scene with a preset applied."""
    cfg = with_overrides(
        ExperimentConfig(),
        {
            **TINY_OVERRIDES,
            "scene": small_scene_spec(kind).model_dump(mode="json"),
            "iterations": iterations,
            "seed": seed,
        },
    )
    return apply_preset(cfg, preset)


def make_cloud(
    positions: Any,
    scales: Optional[Any] = None,
    opacities: Optional[Any] = None,
    colors: Optional[Any] = None,
) -> GaussianCloud:
    """Cloud from plain values (scales and opacities in natural units)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    count = positions.shape[0]
    scales = np.full(count, 0.2) if scales is None else np.asarray(scales, dtype=np.float64)
    opacities = np.full(count, 0.5) if opacities is None else np.asarray(opacities, dtype=np.float64)
    colors = np.full(count, 0.5) if colors is None else np.asarray(colors, dtype=np.float64)
    return GaussianCloud(
        positions=positions,
        log_scales=np.log(scales),
        opacity_logits=logit(opacities),
        colors=colors,
        depth_keys=np.arange(count, dtype=np.float64),
    )


def random_render_cloud(rng: np.random.Generator, count: int, dim: int = 2) -> GaussianCloud:
    """Random cloud with opacities well below the alpha clamp."""
    return GaussianCloud(
        positions=rng.uniform(-0.8, 0.8, size=(count, dim)),
        log_scales=np.log(rng.uniform(0.1, 0.25, size=count)),
        opacity_logits=logit(rng.uniform(0.1, 0.85, size=count)),
        colors=rng.uniform(0.0, 1.0, size=count),
        depth_keys=np.arange(count, dtype=np.float64),
    )


def random_field(
    rng: np.random.Generator,
    dim: int = 2,
    hidden_widths: tuple[int, ...] = (8, 6),
    fourier_bands: int = 2,
    scale: float = 0.5,
) -> DeformationField:
    """Field with every parameter (head included) drawn at random."""
    arch = FieldArchitecture(dim=dim, hidden_widths=hidden_widths, fourier_bands=fourier_bands)
    return DeformationField(arch, rng.normal(0.0, scale, size=arch.param_count))


def camera(angle: float = 0.3, width: int = 16, pixel_extent: float = 0.15, background: float = 0.1) -> Camera:
    return Camera(angle=angle, width=width, pixel_extent=pixel_extent, background=background)


def rotation_2d(degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


def make_checkpoint(
    cloud: GaussianCloud,
    field: DeformationField,
    config: Optional[ExperimentConfig] = None,
    iteration: int = 0,
):
    """Checkpoint wrapping an arbitrary cloud and field."""
    from services.checkpoint_service import Checkpoint

    return Checkpoint(
        cloud=cloud,
        field=field,
        iteration=iteration,
        rng_state=np.random.default_rng(0).bit_generator.state,
        config=config or ExperimentConfig(),
    )
