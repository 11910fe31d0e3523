"""Camera, scene specification and view samples."""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.gaussians import GaussianCloud


@dataclass(frozen=True)
class Camera:
    """
    Orthographic 1D camera looking along ``(cos θ, sin θ)`` in the world plane.

    Pixel p samples the image axis at ``(p - (W - 1) / 2) * pixel_extent``.
    """

    angle: float
    width: int
    pixel_extent: float
    background: float = 0.0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("camera width must be >= 1")
        if not self.pixel_extent > 0:
            raise ValueError("pixel extent must be > 0")

    def view_axis(self, dim: int) -> np.ndarray:
        axis = np.zeros(dim)
        axis[0], axis[1] = np.cos(self.angle), np.sin(self.angle)
        return axis

    def image_axis(self, dim: int) -> np.ndarray:
        axis = np.zeros(dim)
        axis[0], axis[1] = -np.sin(self.angle), np.cos(self.angle)
        return axis

    @property
    def pixel_centers(self) -> np.ndarray:
        """Pixel coordinates 0..W-1 (the projected mean lives in the same units)."""
        return np.arange(self.width, dtype=np.float64)


class GeneratorKind(str, Enum):
    RIGID_ORBIT = "rigid-orbit"
    ARTICULATED = "articulated-two-part"
    BOUNCING = "bouncing"


class SceneSpec(BaseModel):
    """Synthetic dynamic scene and its monocular view protocol."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "orbit"
    kind: GeneratorKind = GeneratorKind.RIGID_ORBIT
    gaussian_count: int = Field(default=48, ge=1)
    motion_amplitude: float = Field(default=0.25, ge=0.0)
    train_views: int = Field(default=24, ge=2)
    test_views: int = Field(default=12, ge=1)
    width: int = Field(default=64, ge=1)
    dim: int = Field(default=2, ge=2, le=3)
    # half-width of the square region holding the ground-truth cloud
    extent: float = Field(default=1.0, gt=0.0)
    camera_arc: float = Field(default=np.pi, gt=0.0)
    # novel-pose offset of the test trajectory (radians)
    test_pose_offset: float = 0.45
    background: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_interleave(self) -> "SceneSpec":
        if self.test_views > self.train_views - 1:
            raise ValueError("test timesteps interleave train timesteps: need test_views < train_views")
        return self

    @property
    def pixel_extent(self) -> float:
        # image spans 1.2x the scene box
        return 2.4 * self.extent / self.width


@dataclass(frozen=True)
class ViewSample:
    angle: float
    t: float
    image: np.ndarray


@dataclass
class GroundTruth:
    """Ground-truth canonical cloud plus the generator that moves it."""

    spec: SceneSpec
    cloud: GaussianCloud
    part_labels: np.ndarray  # rigid part id per Gaussian


@dataclass
class SceneData:
    spec: SceneSpec
    train: list[ViewSample]
    test: list[ViewSample]
    truth: GroundTruth

    @property
    def train_pixel_count(self) -> int:
        return sum(view.image.size for view in self.train)

    def camera(self, view: ViewSample) -> Camera:
        return Camera(
            angle=view.angle,
            width=self.spec.width,
            pixel_extent=self.spec.pixel_extent,
            background=self.spec.background,
        )
