"""
Differentiable 1D splatting of a deformed Gaussian cloud.

Each Gaussian is projected orthographically onto the camera's image axis
(mean mu, std sigma in pixels) and its depth along the view axis. Pixels
are composited front to back:

    C = sum_i c_i a_i T_i + bg * T_final,   T_i = prod_{j<i} (1 - a_j)
    a_i = min(o_i * exp(-(p - mu_i)^2 / (2 sigma_i^2)), 0.999)

with sigma floored at half a pixel (a floored Gaussian gets no log-scale
gradient) and the footprint truncated at 3 sigma. The backward pass is
analytic and also reports |dL/dmu_i|, the view-space gradient that drives densification.
"""

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from scipy.special import expit

from core.errors import ContractError
from models.gaussians import GaussianCloud
from models.scene import Camera
from services.deformation import DeformationField

ALPHA_MAX = 0.999
SIGMA_MIN_PX = 0.5  # footprint floor in pixels
TRUNCATION = 3.0  # footprint radius in sigmas


class Deformer(Protocol):
    """Anything that displaces canonical positions at time t."""

    def forward(self, positions: np.ndarray, t: float): ...


@dataclass
class RenderGrads:
    """Loss gradients of one rendered view."""

    positions: np.ndarray  # (K, D)
    log_scales: np.ndarray  # (K,)
    opacity_logits: np.ndarray  # (K,)
    colors: np.ndarray  # (K,)
    displacement: np.ndarray  # (K, D) dL/du from the image term
    view_grad: np.ndarray  # (K,) |dL/dmu| in pixel units
    visible: np.ndarray  # (K,) bool
    field: Optional[np.ndarray]  # flat field parameter gradient


@dataclass
class RenderPass:
    """Forward intermediates, in depth-sorted order over the kept Gaussians."""

    image: np.ndarray
    order: np.ndarray  # cloud indices of kept Gaussians, front to back
    mu: np.ndarray
    sigma: np.ndarray
    opacity: np.ndarray  # effective opacity (after drop rescale)
    gauss: np.ndarray  # (W, Ks) truncated footprint
    alpha: np.ndarray  # (W, Ks) after clamp
    clamped: np.ndarray  # (W, Ks) alpha hit the clamp
    trans: np.ndarray  # (W, Ks) transmittance in front of each Gaussian
    trans_final: np.ndarray  # (W,)
    field_pass: object = None


def _displacement(cloud: GaussianCloud, field: Optional[Deformer], t: float):
    if field is None:
        return np.zeros_like(cloud.positions), None
    cache = field.forward(cloud.positions, t)
    return cache.u, cache


def rasterize(
    cloud: GaussianCloud,
    field: Optional[Deformer],
    cam: Camera,
    t: float,
    drop_mask: Optional[np.ndarray] = None,
    opacity_scale: Optional[np.ndarray] = None,
) -> RenderPass:
    """Forward render keeping everything the backward pass needs."""
    count = cloud.count
    if drop_mask is not None and np.shape(drop_mask) != (count,):
        raise ContractError(f"drop mask has length {np.shape(drop_mask)}, cloud has {count}")

    u, field_pass = _displacement(cloud, field, t)
    deformed = cloud.positions + u
    image_axis = cam.image_axis(cloud.dim)
    view_axis = cam.view_axis(cloud.dim)

    kept = np.arange(count) if drop_mask is None else np.flatnonzero(drop_mask)
    depth = deformed[kept] @ view_axis
    order = kept[np.lexsort((kept, cloud.depth_keys[kept], depth))]

    mu = (deformed[order] @ image_axis) / cam.pixel_extent + 0.5 * (cam.width - 1)
    sigma = np.maximum(np.exp(cloud.log_scales[order]) / cam.pixel_extent, SIGMA_MIN_PX)
    opacity = expit(cloud.opacity_logits[order])
    if opacity_scale is not None:
        opacity = opacity * np.asarray(opacity_scale, dtype=np.float64)[order]

    offset = cam.pixel_centers[:, None] - mu[None, :]
    support = np.abs(offset) <= TRUNCATION * sigma[None, :]
    gauss = np.where(support, np.exp(-0.5 * (offset / sigma[None, :]) ** 2), 0.0)
    raw_alpha = opacity[None, :] * gauss
    clamped = raw_alpha > ALPHA_MAX
    alpha = np.minimum(raw_alpha, ALPHA_MAX)

    one_minus = 1.0 - alpha
    cumulative = np.cumprod(one_minus, axis=1)
    trans = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        trans[:, 1:] = cumulative[:, :-1]
    trans_final = cumulative[:, -1] if alpha.shape[1] else np.ones(cam.width)

    colors = cloud.colors[order]
    image = (alpha * trans) @ colors + cam.background * trans_final
    return RenderPass(
        image=image,
        order=order,
        mu=mu,
        sigma=sigma,
        opacity=opacity,
        gauss=gauss,
        alpha=alpha,
        clamped=clamped,
        trans=trans,
        trans_final=trans_final,
        field_pass=field_pass,
    )


def render_forward(
    cloud: GaussianCloud,
    field: Optional[Deformer],
    cam: Camera,
    t: float,
    drop_mask: Optional[np.ndarray] = None,
    opacity_scale: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Render one view of the cloud deformed to time ``t``.

    Args:
        cloud: Canonical Gaussians
        field: Deformation field, ground-truth motion, or None for no motion
        cam: Orthographic camera
        t: Time in [0, 1]
        drop_mask: Optional keep-mask (False drops the Gaussian)
        opacity_scale: Optional per-Gaussian opacity multiplier for kept Gaussians

    Returns:
        W pixel values; an empty (fully dropped) cloud renders pure background
    """
    return rasterize(cloud, field, cam, t, drop_mask, opacity_scale).image


def render_backward(
    cloud: GaussianCloud,
    field: Optional[Deformer],
    cam: Camera,
    t: float,
    loss_grad: np.ndarray,
    drop_mask: Optional[np.ndarray] = None,
    opacity_scale: Optional[np.ndarray] = None,
    stats=None,
    extra_grad_u: Optional[np.ndarray] = None,
    extra_grad_h: Optional[np.ndarray] = None,
    cache: Optional[RenderPass] = None,
) -> RenderGrads:
    """
    Analytic gradients of a loss given dL/dC per pixel.

    ``extra_grad_u`` / ``extra_grad_h`` are added to the displacement and
    embedding gradients before the field backward pass, so a regularizer on
    the deformation shares one backward through the network. ``stats``
    (a densification accumulator) receives this view's |dL/dmu|.
    """
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (cam.width,):
        raise ContractError(f"loss gradient has shape {loss_grad.shape}, expected ({cam.width},)")
    if not np.all(np.isfinite(loss_grad)):
        raise ContractError("loss gradient must be finite")

    rp = cache or rasterize(cloud, field, cam, t, drop_mask, opacity_scale)
    count, dim = cloud.count, cloud.dim
    order = rp.order
    colors = cloud.colors[order]

    weights = rp.alpha * rp.trans
    contrib = weights * colors[None, :]
    # colour plus background seen through each Gaussian
    behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    behind = behind + (cam.background * rp.trans_final)[:, None]
    d_alpha = colors[None, :] * rp.trans - behind / (1.0 - rp.alpha)
    g_alpha = loss_grad[:, None] * d_alpha
    g_alpha = np.where(rp.clamped, 0.0, g_alpha)

    offset = cam.pixel_centers[:, None] - rp.mu[None, :]
    sigma2 = rp.sigma**2
    g_raw = g_alpha * rp.opacity[None, :] * rp.gauss
    g_mu = (g_raw * offset).sum(axis=0) / sigma2
    g_sigma = (g_raw * offset**2).sum(axis=0) / (sigma2 * rp.sigma)
    g_opacity = (g_alpha * rp.gauss).sum(axis=0)
    g_color = (loss_grad[:, None] * weights).sum(axis=0)

    base_opacity = expit(cloud.opacity_logits[order])
    scale = 1.0 if opacity_scale is None else np.asarray(opacity_scale, dtype=np.float64)[order]
    unclamped_scale = np.exp(cloud.log_scales[order]) / cam.pixel_extent > SIGMA_MIN_PX

    grads_pos = np.zeros((count, dim))
    grad_ls = np.zeros(count)
    grad_logit = np.zeros(count)
    grad_color = np.zeros(count)
    view_grad = np.zeros(count)
    visible = np.zeros(count, dtype=bool)

    image_axis = cam.image_axis(dim)
    grads_pos[order] = (g_mu / cam.pixel_extent)[:, None] * image_axis[None, :]
    grad_ls[order] = np.where(unclamped_scale, g_sigma * rp.sigma, 0.0)
    grad_logit[order] = g_opacity * scale * base_opacity * (1.0 - base_opacity)
    grad_color[order] = g_color
    view_grad[order] = np.abs(g_mu)
    visible[order] = rp.gauss.any(axis=0)

    grad_u = grads_pos.copy()
    if extra_grad_u is not None:
        grad_u = grad_u + extra_grad_u

    grad_field = None
    if isinstance(field, DeformationField) and rp.field_pass is not None:
        grad_field, grad_x = field.backward(rp.field_pass, grad_u, extra_grad_h)
        if extra_grad_u is not None or extra_grad_h is not None:
            # canonical positions are constants of the smoothness prior
            _, grad_x = field.backward(rp.field_pass, grads_pos)
        # p = x + u(x, t): the image term reaches x directly and through u
        grads_pos = grads_pos + grad_x

    if stats is not None:
        stats.accumulate(view_grad, visible, grads_pos)

    return RenderGrads(
        positions=grads_pos,
        log_scales=grad_ls,
        opacity_logits=grad_logit,
        colors=grad_color,
        displacement=grad_u,
        view_grad=view_grad,
        visible=visible,
        field=grad_field,
    )


def image_psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB; ``inf`` when the images are identical.

    Raises:
        ContractError: length mismatch or non-positive peak
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ContractError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def images_to_csv(images: list[np.ndarray]) -> str:
    """Debug dump: one row per image, 17 significant digits."""
    return "\n".join(",".join(format(float(v), ".17g") for v in image) for image in images) + "\n"
