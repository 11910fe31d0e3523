"""
Post-hoc strain diagnostics on trained checkpoints.

Per-Gaussian strain at time t is

    eps_i(t) = 1/k * sum_{j in N(i)} ||u_i - u_j||^2 / ||x_i - x_j||^2

over canonical neighbours; the report averages it over a set of timesteps.
"""

import csv
import io
from typing import Iterable, Optional, Sequence

import numpy as np
import structlog
from opentelemetry import trace
from pydantic import BaseModel

from core.errors import ContractError
from core.metrics import metrics
from models.records import StrainComparison, StrainReport, format_float
from services.checkpoint_service import Checkpoint
from services.regularizers import NeighborGraph, build_neighbor_graph
from services.scenes import view_protocol

logger = structlog.get_logger(__name__)
tracer = trace.get_tracer(__name__)

DEFAULT_TIMESTEPS: tuple[float, ...] = (0.1, 0.35, 0.65, 0.9)
NEIGHBOR_MODES = ("knn", "exhaustive")


def strain_per_gaussian(graph: NeighborGraph, displacements: Iterable[np.ndarray]) -> np.ndarray:
    """Mean k-NN strain per Gaussian over the given displacement snapshots."""
    snapshots = [np.asarray(u, dtype=np.float64) for u in displacements]
    if not snapshots:
        raise ContractError("need at least one displacement snapshot")
    if graph.k == 0:
        return np.zeros(graph.count)
    total = np.zeros(graph.count)
    for u in snapshots:
        diff = u[:, None, :] - u[graph.indices]
        total += ((diff * diff).sum(axis=-1) / graph.dist2).mean(axis=1)
    return total / len(snapshots)


def heldout_timesteps(ckpt: Checkpoint) -> tuple[float, ...]:
    """The test-view timesteps of the checkpoint's scene."""
    _, test = view_protocol(ckpt.config.scene)
    return tuple(t for _, t in test)


def measure_strain(
    ckpt: Checkpoint,
    timesteps: Optional[Sequence[float]] = None,
    mode: str = "knn",
    k: Optional[int] = None,
) -> StrainReport:
    """
    Measure per-Gaussian strain of a trained deformation field.

    Args:
        ckpt: Trained checkpoint
        timesteps: Query times in [0, 1]; defaults to four fixed timesteps
        mode: ``knn`` (the training graph's k) or ``exhaustive`` (all other Gaussians)
        k: Neighbour count override for ``knn``

    Raises:
        ContractError: empty or out-of-range timesteps, unknown mode
        CorruptModelError: non-finite field parameters
    """
    timesteps = tuple(float(t) for t in (DEFAULT_TIMESTEPS if timesteps is None else timesteps))
    if not timesteps:
        raise ContractError("timesteps must be nonempty")
    if any(not 0.0 <= t <= 1.0 for t in timesteps):
        raise ContractError("timesteps must lie in [0, 1]")
    if mode not in NEIGHBOR_MODES:
        raise ContractError(f"unknown neighbour mode {mode!r}")

    with tracer.start_as_current_span("diagnostics.measure_strain") as span:
        positions = ckpt.cloud.positions
        count = ckpt.cloud.count
        neighbours = max(count - 1, 1) if mode == "exhaustive" else (k or ckpt.config.reg.k)
        graph = build_neighbor_graph(positions, neighbours)
        displacements = [ckpt.field.forward(positions, t).u for t in timesteps]
        report = StrainReport(
            per_gaussian=strain_per_gaussian(graph, displacements),
            timesteps=timesteps,
            checkpoint_id=ckpt.checkpoint_id,
            k=graph.k,
            mode=mode,
        )
        span.set_attribute("strain.count", count)
        span.set_attribute("strain.mean", report.mean)

    metrics.record_strain_report(mode)
    logger.info("strain.measured", checkpoint=report.checkpoint_id, mode=mode, k=graph.k, mean=report.mean, median=report.median)
    return report


def _reduction(base: float, reg: float) -> Optional[float]:
    return None if base == 0 else (1.0 - reg / base) * 100.0


def strain_compare(base: StrainReport, reg: StrainReport) -> StrainComparison:
    """
    Baseline vs regularized strain.

    Reductions are undefined (None, flagged) when the baseline mean is 0.
    """
    undefined = base.mean == 0
    if reg.p99 > 0:
        ratio = base.median / reg.p99
    else:
        ratio = None if base.median == 0 else float("inf")
    return StrainComparison(
        mean_reduction_pct=None if undefined else _reduction(base.mean, reg.mean),
        median_reduction_pct=None if undefined else _reduction(base.median, reg.median),
        reg_median_below_base_p1=reg.median < base.p1,
        reg_p99_below_base_median=reg.p99 < base.median,
        base_median_over_reg_p99=ratio,
        undefined=undefined,
    )


class StrainAggregate(BaseModel):
    """Strain reductions across scenes, aggregated both ways."""

    scenes: int
    mean_of_reductions_pct: Optional[float]
    reduction_of_means_pct: Optional[float]
    median_below_p1_scenes: int
    p99_below_median_scenes: int
    ratio_min: Optional[float]
    ratio_max: Optional[float]


def aggregate_strain(pairs: Sequence[tuple[StrainReport, StrainReport]]) -> StrainAggregate:
    """
    Aggregate per-scene (baseline, regularized) report pairs.

    The mean of per-scene reductions and the reduction of scene means differ
    when scenes have very different baseline strain; both are reported.
    """
    comparisons = [strain_compare(base, reg) for base, reg in pairs]
    reductions = [c.mean_reduction_pct for c in comparisons if c.mean_reduction_pct is not None]
    base_mean = float(np.mean([b.mean for b, _ in pairs])) if pairs else 0.0
    reg_mean = float(np.mean([r.mean for _, r in pairs])) if pairs else 0.0
    ratios = [c.base_median_over_reg_p99 for c in comparisons if c.base_median_over_reg_p99 is not None]
    return StrainAggregate(
        scenes=len(pairs),
        mean_of_reductions_pct=float(np.mean(reductions)) if reductions else None,
        reduction_of_means_pct=_reduction(base_mean, reg_mean),
        median_below_p1_scenes=sum(c.reg_median_below_base_p1 for c in comparisons),
        p99_below_median_scenes=sum(c.reg_p99_below_base_median for c in comparisons),
        ratio_min=min(ratios) if ratios else None,
        ratio_max=max(ratios) if ratios else None,
    )


STRAIN_COLUMNS = ("scene", "preset", "seed", "timesteps", "mode", "k", "mean", "median", "p1", "p99", "min", "max")


def strain_reports_csv(rows: Iterable[tuple[str, str, int, str, StrainReport]]) -> str:
    """One row per (scene, preset, seed, timestep set) report."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(STRAIN_COLUMNS)
    for scene, preset, seed, timestep_set, report in rows:
        summary = report.summary()
        writer.writerow(
            [scene, preset, seed, timestep_set, report.mode, report.k]
            + [format_float(summary[key]) for key in ("mean", "median", "p1", "p99", "min", "max")]
        )
    return buffer.getvalue()
