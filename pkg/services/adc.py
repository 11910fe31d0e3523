"""
Adaptive density control: split, clone and prune.

Every ``interval`` iterations inside the densification window, Gaussians
whose mean view-space gradient exceeds the threshold are densified: large
ones (scale above the size threshold) are split into two smaller children
sampled from the parent's density, small ones are cloned with an offset
along their descent direction. Low-opacity Gaussians are then pruned.

The clone offset points along the negative accumulated positional
gradient (the way the loss decreases), not along the raw gradient; a
Gaussian with no accumulated gradient is cloned in place.

The threshold is the fixed base tau0 or, with GAD enabled,

    tau = tau0 * (1 + lambda * K / (N * dl_ema))

where K is the cloud size, N the training pixel count and dl_ema an EMA of
the per-iteration loss improvement. GrowthCap limits how many qualifying
candidates are densified as K approaches K_max.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import structlog
from scipy.special import expit

from core.errors import ContractError
from models.config import AdcConfig
from models.gaussians import GaussianCloud
from services.audit_service import AuditLog

logger = structlog.get_logger(__name__)


@dataclass
class DensificationStats:
    """Per-Gaussian accumulators of view-space and positional gradients."""

    grad_sum: np.ndarray  # (K,)
    counts: np.ndarray  # (K,) views in which the Gaussian was visible
    pos_grad_sum: np.ndarray  # (K, D)

    @classmethod
    def empty(cls, count: int, dim: int) -> "DensificationStats":
        return cls(np.zeros(count), np.zeros(count, dtype=np.int64), np.zeros((count, dim)))

    def accumulate(self, view_grad: np.ndarray, visible: np.ndarray, pos_grads: np.ndarray) -> None:
        if view_grad.shape != self.grad_sum.shape:
            raise ContractError("view gradient does not match the accumulator size")
        self.grad_sum[visible] += view_grad[visible]
        self.counts[visible] += 1
        self.pos_grad_sum += pos_grads

    @property
    def mean_grad(self) -> np.ndarray:
        return np.where(self.counts > 0, self.grad_sum / np.maximum(self.counts, 1), 0.0)


@dataclass
class AdcState:
    """Mutable ADC bookkeeping carried across iterations of one run."""

    stats: DensificationStats
    ids: np.ndarray  # stable Gaussian ids, (K,)
    next_id: int
    ema: float = 0.0
    prev_loss: Optional[float] = None
    audit: AuditLog = field(default_factory=AuditLog)

    @classmethod
    def initial(cls, cloud: GaussianCloud) -> "AdcState":
        return cls(
            stats=DensificationStats.empty(cloud.count, cloud.dim),
            ids=np.arange(cloud.count, dtype=np.int64),
            next_id=cloud.count,
        )

    def reset_stats(self, count: int, dim: int) -> None:
        self.stats = DensificationStats.empty(count, dim)


@dataclass
class DensifySummary:
    """
    Outcome of one ADC step, including the row lineage that lets optimizer
    state, neighbour graphs and jitter estimates follow the cloud.

    ``source[r]`` is the old row new row ``r`` was built from; ``index_map``
    maps old rows to new rows (-1 when removed; a split parent maps to its
    first child); ``fresh`` flags newly created rows.
    """

    iteration: int
    tau: float
    candidates: int
    splits: int
    clones: int
    prunes: int
    count_before: int
    count_after: int
    source: np.ndarray
    index_map: np.ndarray
    fresh: np.ndarray
    guard_triggered: bool = False

    @classmethod
    def identity(cls, iteration: int, count: int, tau: float = 0.0) -> "DensifySummary":
        rows = np.arange(count)
        return cls(
            iteration=iteration,
            tau=tau,
            candidates=0,
            splits=0,
            clones=0,
            prunes=0,
            count_before=count,
            count_after=count,
            source=rows,
            index_map=rows.copy(),
            fresh=np.zeros(count, dtype=bool),
        )

    @property
    def changed(self) -> bool:
        return self.splits + self.clones + self.prunes > 0


def ema_update(state: AdcState, loss: float, rho: float = 0.99, floor: float = 1e-8) -> AdcState:
    """
    Fold one loss value into the EMA of per-iteration loss improvement.

    The first call only records the loss (improvement 0).
    """
    if not np.isfinite(loss):
        raise ContractError(f"loss must be finite, got {loss}")
    improvement = 0.0 if state.prev_loss is None else max(state.prev_loss - loss, 0.0)
    state.ema = max(rho * state.ema + (1.0 - rho) * improvement, floor)
    state.prev_loss = float(loss)
    return state


def gad_threshold(tau0: float, lam: float, count: int, pixels: int, ema: float) -> float:
    """Loss-rate-aware threshold; equals tau0 when lambda is 0."""
    if tau0 <= 0 or pixels <= 0 or ema <= 0 or lam < 0 or count < 0:
        raise ContractError("gad_threshold needs tau0, pixels, ema > 0 and lambda, count >= 0")
    return float(tau0 * (1.0 + lam * count / (pixels * ema)))


def growthcap_factor(count: int, k_max: int, sharpness: float) -> float:
    """
    Fraction of qualifying candidates densified at cloud size ``count``:
    a logistic in K centred on K_max, rescaled so K = 0 gives exactly 1.
    """
    if k_max <= 0:
        raise ContractError("GrowthCap needs K_max > 0")
    curve = expit(-sharpness * (count - k_max) / k_max)
    at_zero = expit(sharpness)
    return float(curve / at_zero)


def _limit_candidates(index: np.ndarray, grad: np.ndarray, fraction: float) -> np.ndarray:
    """Top-gradient ``fraction`` of ``index``, ties broken by lower index."""
    keep = int(round(fraction * index.size))
    order = np.lexsort((index, -grad[index]))
    return np.sort(index[order[:keep]])


def densify_and_prune(
    cloud: GaussianCloud,
    state: AdcState,
    config: AdcConfig,
    rng: np.random.Generator,
    iteration: int = 0,
    pixel_count: Optional[int] = None,
) -> tuple[GaussianCloud, AdcState, DensifySummary]:
    """
    One ADC step.

    Args:
        cloud: Current Gaussians
        state: ADC state; its accumulators are consumed and reset
        config: ADC configuration (``tau0`` already calibrated if applicable)
        rng: Run generator, used for split child placement
        iteration: Iteration number recorded in the audit log
        pixel_count: Total training pixels N, required when GAD is on

    Returns:
        (cloud', state', summary)
    """
    count, dim = cloud.count, cloud.dim
    tau0 = config.effective_tau0
    tau = tau0
    if config.gad_lambda > 0:
        if not pixel_count:
            raise ContractError("GAD needs the training pixel count")
        tau = gad_threshold(tau0, config.gad_lambda, count, pixel_count, max(state.ema, config.ema_floor))

    if not config.enable_all:
        state.reset_stats(count, dim)
        return cloud, state, DensifySummary.identity(iteration, count, tau)

    grad = state.stats.mean_grad
    qualified = grad > tau
    large = cloud.scales > config.size_threshold
    eligible = np.flatnonzero(qualified & ((large & config.enable_split) | (~large & config.enable_clone)))
    if config.growthcap_enabled and eligible.size:
        eligible = _limit_candidates(
            eligible, grad, growthcap_factor(count, config.growthcap_max, config.growthcap_sharpness)
        )
    split_rows = eligible[large[eligible]]
    clone_rows = eligible[~large[eligible]]

    # survivors first, then clones, then the two children of each split
    is_split = np.zeros(count, dtype=bool)
    is_split[split_rows] = True
    survivors = np.flatnonzero(~is_split)
    source = np.concatenate([survivors, clone_rows, np.repeat(split_rows, 2)]).astype(np.int64)
    fresh = np.concatenate(
        [np.zeros(survivors.size, dtype=bool), np.ones(clone_rows.size + 2 * split_rows.size, dtype=bool)]
    )
    grown = cloud.take(source)

    if clone_rows.size:
        rows = slice(survivors.size, survivors.size + clone_rows.size)
        direction = -state.stats.pos_grad_sum[clone_rows]
        norm = np.linalg.norm(direction, axis=1, keepdims=True)
        unit = np.divide(direction, norm, out=np.zeros_like(direction), where=norm > 0)
        step = config.clone_offset * cloud.scales[clone_rows]
        grown.positions[rows] += step[:, None] * unit

    if split_rows.size:
        rows = slice(survivors.size + clone_rows.size, None)
        parent_scale = np.repeat(cloud.scales[split_rows], 2)
        noise = rng.standard_normal((2 * split_rows.size, dim))
        grown.positions[rows] += noise * parent_scale[:, None]
        grown.log_scales[rows] -= np.log(config.split_divisor)

    index_map = np.full(count, -1, dtype=np.int64)
    index_map[survivors] = np.arange(survivors.size)
    index_map[split_rows] = survivors.size + clone_rows.size + 2 * np.arange(split_rows.size)

    ids = state.ids[source].copy()
    next_id = state.next_id
    new_ids = np.arange(next_id, next_id + fresh.sum(), dtype=np.int64)
    ids[fresh] = new_ids
    next_id += new_ids.size
    for row, new_id in zip(clone_rows, new_ids[: clone_rows.size]):
        state.audit.record_clone(iteration, int(state.ids[row]), int(new_id), float(grad[row]), tau)
    child_pairs = new_ids[clone_rows.size :].reshape(-1, 2)
    for row, pair in zip(split_rows, child_pairs):
        state.audit.record_split(iteration, int(state.ids[row]), (int(pair[0]), int(pair[1])), float(grad[row]), tau)

    guard = False
    prunes = 0
    if config.enable_prune:
        keep = grown.opacities >= config.prune_opacity
        if not keep.any():
            guard = True
            keep[int(np.argmax(grown.opacities))] = True
            logger.warning("adc.prune_guard", iteration=iteration, count=grown.count)
        if not keep.all():
            for gaussian_id in ids[~keep]:
                state.audit.record_prune(iteration, int(gaussian_id))
            prunes = int((~keep).sum())
            prune_map = np.full(grown.count, -1, dtype=np.int64)
            prune_map[keep] = np.arange(int(keep.sum()))
            index_map = np.where(index_map >= 0, prune_map[np.maximum(index_map, 0)], -1)
            grown = grown.take(keep)
            source = source[keep]
            fresh = fresh[keep]
            ids = ids[keep]

    state.ids = ids
    state.next_id = next_id
    state.reset_stats(grown.count, dim)
    summary = DensifySummary(
        iteration=iteration,
        tau=tau,
        candidates=int(qualified.sum()),
        splits=int(split_rows.size),
        clones=int(clone_rows.size),
        prunes=prunes,
        count_before=count,
        count_after=grown.count,
        source=source,
        index_map=index_map,
        fresh=fresh,
        guard_triggered=guard,
    )
    logger.debug(
        "adc.densified",
        iteration=iteration,
        count_before=count,
        count_after=grown.count,
        splits=summary.splits,
        clones=summary.clones,
        prunes=prunes,
        tau=tau,
    )
    return grown, state, summary
