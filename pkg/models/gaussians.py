"""Canonical Gaussian cloud."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from core.errors import ContractError


@dataclass
class GaussianCloud:
    """
    Per-Gaussian canonical parameters, one row per Gaussian.

    Gaussians are isotropic and grayscale. ``depth_keys`` is a tie-break
    key for compositing order; the renderer sorts by projected depth first.
    """

    positions: np.ndarray  # (K, D) world units
    log_scales: np.ndarray  # (K,)
    opacity_logits: np.ndarray  # (K,)
    colors: np.ndarray  # (K,) in [0, 1]
    depth_keys: np.ndarray  # (K,)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise ContractError("positions must be a (K, D) array")
        count = self.positions.shape[0]
        for name in ("log_scales", "opacity_logits", "colors", "depth_keys"):
            value = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if value.shape != (count,):
                raise ContractError(f"{name} has shape {value.shape}, expected ({count},)")
            setattr(self, name, value)
        if count < 1:
            raise ContractError("a Gaussian cloud needs at least one Gaussian")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            depth_keys=self.depth_keys.copy(),
        )

    def take(self, index: np.ndarray) -> "GaussianCloud":
        """Return a cloud made of the given rows (fancy index or boolean mask)."""
        return GaussianCloud(
            positions=self.positions[index],
            log_scales=self.log_scales[index],
            opacity_logits=self.opacity_logits[index],
            colors=self.colors[index],
            depth_keys=self.depth_keys[index],
        )


def logit(p: np.ndarray | float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def random_cloud(
    rng: np.random.Generator,
    count: int,
    dim: int = 2,
    extent: float = 1.0,
    scale: float = 0.2,
    opacity: float = 0.5,
) -> GaussianCloud:
    """
    Initial cloud for training: uniform positions in the scene box,
    constant scale and opacity, mid-gray color.
    """
    positions = rng.uniform(-extent, extent, size=(count, dim))
    return GaussianCloud(
        positions=positions,
        log_scales=np.full(count, np.log(scale)),
        opacity_logits=np.full(count, float(logit(opacity))),
        colors=np.full(count, 0.5),
        depth_keys=np.arange(count, dtype=np.float64),
    )
