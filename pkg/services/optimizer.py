"""
Per-group Adam with row surgery for densification and pruning, and the
exponential position step-size decay.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from models.config import OptimizerConfig
from models.gaussians import GaussianCloud
from services.deformation import DeformationField

CLOUD_GROUPS = ("positions", "log_scales", "opacity_logits", "colors")


def expon_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from ``lr_init`` at step 0 to ``lr_final`` at ``max_steps``."""
    if lr_init == lr_final or max_steps <= 0:
        return lr_init
    t = float(np.clip(step / max_steps, 0.0, 1.0))
    return float(np.exp(np.log(lr_init) * (1.0 - t) + np.log(lr_final) * t))


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def like(cls, param: np.ndarray) -> "Moments":
        return cls(np.zeros_like(param), np.zeros_like(param))


class GroupedAdam:
    """
    Adam over the cloud's parameter groups and the field's flat vector,
    each with its own step size. Updates are applied in place.

    Moments of per-Gaussian groups follow the cloud through densification:
    surviving rows keep theirs, newly created rows start at zero. With
    ``max_steps`` set, the position step size decays from ``lr_positions``
    to ``lr_positions_final`` over that many steps.
    """

    def __init__(
        self,
        config: OptimizerConfig,
        cloud: GaussianCloud,
        field: Optional[DeformationField] = None,
        max_steps: Optional[int] = None,
    ):
        self.config = config
        self.max_steps = max_steps
        self.lrs = {
            "positions": config.lr_positions,
            "log_scales": config.lr_log_scales,
            "opacity_logits": config.lr_opacity,
            "colors": config.lr_colors,
            "field": config.lr_field,
        }
        self.moments = {name: Moments.like(getattr(cloud, name)) for name in CLOUD_GROUPS}
        if field is not None:
            self.moments["field"] = Moments.like(field.params)
        self.steps = 0

    def _update(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        cfg = self.config
        state = self.moments[name]
        state.m *= cfg.beta1
        state.m += (1.0 - cfg.beta1) * grad
        state.v *= cfg.beta2
        state.v += (1.0 - cfg.beta2) * grad * grad
        m_hat = state.m / (1.0 - cfg.beta1**self.steps)
        v_hat = state.v / (1.0 - cfg.beta2**self.steps)
        param -= self.lrs[name] * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def step(
        self,
        cloud: GaussianCloud,
        grads: dict[str, np.ndarray],
        field: Optional[DeformationField] = None,
        field_grad: Optional[np.ndarray] = None,
    ) -> None:
        """
        Apply one update.

        Args:
            cloud: Updated in place
            grads: Gradient per cloud group name
            field: Deformation field, updated in place when ``field_grad`` is given
            field_grad: Flat field gradient, or None to leave the field frozen
        """
        if self.max_steps:
            self.lrs["positions"] = expon_lr(
                self.steps, self.config.lr_positions, self.config.lr_positions_final, self.max_steps
            )
        self.steps += 1
        for name in CLOUD_GROUPS:
            self._update(name, getattr(cloud, name), grads[name])
        if field is not None and field_grad is not None:
            self._update("field", field.params, field_grad)
        np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)

    def remap(self, source: np.ndarray, fresh: np.ndarray) -> None:
        """Resize per-Gaussian moments after a densify/prune step."""
        for name in CLOUD_GROUPS:
            state = self.moments[name]
            state.m = state.m[source].copy()
            state.v = state.v[source].copy()
            state.m[fresh] = 0.0
            state.v[fresh] = 0.0
