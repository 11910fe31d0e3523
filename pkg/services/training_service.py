"""
Training service: one experiment from config to run record and checkpoint.

A run trains a canonical cloud plus deformation field on the scene's
training views with an L1 loss. The first ``coarse_end`` iterations fit the
static cloud; afterwards the field is active and densification, the
smoothness prior and PTDrop follow the desk-scale schedule.
"""

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog
from opentelemetry import trace

from core.errors import CorruptModelError, DivergenceError, RunawayGrowthError
from core.metrics import metrics
from core.settings import LabSettings, get_settings
from models.config import ExperimentConfig, Schedule
from models.gaussians import GaussianCloud, random_cloud
from models.records import RunRecord
from models.scene import SceneData
from services.adc import AdcState, DensificationStats, densify_and_prune, ema_update
from services.audit_service import AuditLog
from services.checkpoint_service import Checkpoint
from services.deformation import DeformationField, FieldArchitecture
from services.diagnostics import measure_strain
from services.optimizer import GroupedAdam
from services.regularizers import (
    JitterEstimate,
    NeighborGraph,
    build_neighbor_graph,
    ptdrop_mask,
    smoothness_loss,
    update_jitter,
    warmup_weight,
)
from services.renderer import image_psnr, rasterize, render_backward, render_forward
from services.scenes import generate_scene

logger = structlog.get_logger(__name__)
tracer = trace.get_tracer(__name__)


@dataclass
class ExperimentResult:
    """Everything one run produces."""

    record: RunRecord
    checkpoint: Checkpoint
    audit: AuditLog


def _initial_state(cfg: ExperimentConfig, rng: np.random.Generator) -> tuple[GaussianCloud, DeformationField]:
    cloud = random_cloud(
        rng,
        cfg.init.count,
        dim=cfg.scene.dim,
        extent=cfg.scene.extent,
        scale=cfg.init.scale,
        opacity=cfg.init.opacity,
    )
    field = DeformationField.initialize(FieldArchitecture.from_config(cfg.field, cfg.scene.dim), rng)
    return cloud, field


def _l1(image: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    residual = image - target
    return float(np.abs(residual).mean()), np.sign(residual) / residual.size


def _group_grads(grads) -> dict[str, np.ndarray]:
    return {
        "positions": grads.positions,
        "log_scales": grads.log_scales,
        "opacity_logits": grads.opacity_logits,
        "colors": grads.colors,
    }


def calibrate_tau0(cfg: ExperimentConfig, scene: SceneData, schedule: Optional[Schedule] = None) -> Optional[float]:
    """
    Base densification threshold from a short ADC-free warmup.

    Trains the run's initial cloud (same seed, same initialization) with
    plain L1 for the scaled calibration budget and returns the configured
    quantile of per-Gaussian mean view-space gradient. Regularizers and ADC
    settings do not enter, so every preset of a scene/seed gets the same value.
    Returns None when no Gaussian was ever visible.
    """
    schedule = schedule or Schedule.from_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    cloud, _ = _initial_state(cfg, rng)
    optimizer = GroupedAdam(cfg.optimizer, cloud, max_steps=cfg.iterations)
    stats = DensificationStats.empty(cloud.count, cloud.dim)
    for _ in range(schedule.calibration_iterations):
        view = scene.train[int(rng.integers(len(scene.train)))]
        cam = scene.camera(view)
        rp = rasterize(cloud, None, cam, view.t)
        _, loss_grad = _l1(rp.image, view.image)
        grads = render_backward(cloud, None, cam, view.t, loss_grad, stats=stats, cache=rp)
        optimizer.step(cloud, _group_grads(grads))

    seen = stats.counts > 0
    if not seen.any():
        logger.warning("tau0.calibration_empty", scene=cfg.scene.name, seed=cfg.seed)
        return None
    tau0 = float(np.quantile(stats.mean_grad[seen], cfg.adc.calibration_quantile))
    if not tau0 > 0:
        return None
    logger.info("tau0.calibrated", scene=cfg.scene.name, seed=cfg.seed, tau0=tau0, iterations=schedule.calibration_iterations)
    return tau0


def front_loading(trajectory: list[tuple[int, int]], schedule: Schedule) -> Optional[float]:
    """Fraction of in-window cloud growth that happened by the window midpoint."""
    if not trajectory:
        return None
    initial = trajectory[0][1]

    def size_at(iteration: int) -> int:
        size = initial
        for it, count in trajectory:
            if it > iteration:
                break
            size = count
        return size

    total = size_at(schedule.adc_end) - initial
    if total <= 0:
        return None
    return (size_at(schedule.adc_midpoint) - initial) / total


class TrainingRun:
    """Mutable state of one run; ``train`` advances it iteration by iteration."""

    def __init__(self, cfg: ExperimentConfig, scene: SceneData):
        self.cfg = cfg
        self.scene = scene
        self.schedule = Schedule.from_config(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.cloud, self.field = _initial_state(cfg, self.rng)
        self.optimizer = GroupedAdam(cfg.optimizer, self.cloud, self.field, max_steps=cfg.iterations)
        self.adc_config = cfg.adc
        self.adc = AdcState.initial(self.cloud)
        self.graph: Optional[NeighborGraph] = None
        self.jitter = JitterEstimate.empty(self.cloud.count, self.cloud.dim)
        self.initial_count = self.cloud.count
        self.trajectory: list[tuple[int, int]] = [(0, self.cloud.count)]
        self.iteration = 0

    def _in_adc_window(self, it: int) -> bool:
        s = self.schedule
        return s.adc_start < it <= s.adc_end and it % s.adc_interval == 0

    def _smoothness_weight(self, it: int) -> float:
        reg = self.cfg.reg
        s = self.schedule
        if s.warmup_start >= s.warmup_end:
            return reg.weight if it >= s.warmup_end else 0.0
        return warmup_weight(it, (s.warmup_start, s.warmup_end), reg.weight)

    def _build_graph(self, it: int) -> None:
        self.graph = build_neighbor_graph(
            self.cloud.positions, self.cfg.reg.k, iteration=it, rebuild_interval=self.schedule.graph_rebuild
        )
        logger.debug("graph.rebuilt", iteration=it, count=self.cloud.count, k=self.graph.k)

    def step(self, it: int) -> None:
        cfg, s = self.cfg, self.schedule
        fine = it > s.coarse_end
        view = self.scene.train[int(self.rng.integers(len(self.scene.train)))]
        cam = self.scene.camera(view)
        field = self.field if fine else None

        keep = scale = None
        if fine and cfg.reg.ptdrop_enabled and s.ptdrop_start < s.ptdrop_end:
            drop = ptdrop_mask(it, self.cloud.count, self.jitter, cfg.reg, self.rng, window=(s.ptdrop_start, s.ptdrop_end))
            keep, scale = drop.keep, drop.opacity_scale

        rp = rasterize(self.cloud, field, cam, view.t, keep, scale)
        loss, loss_grad = _l1(rp.image, view.image)

        extra_u = extra_h = None
        weight = self._smoothness_weight(it) if fine and cfg.reg.smoothness_enabled else 0.0
        if weight > 0:
            if self.graph is None or self.graph.needs_rebuild:
                self._build_graph(it)
            size = min(self.cloud.count, cfg.reg.sample_size)
            sample = self.rng.choice(self.cloud.count, size=size, replace=False)
            smooth = smoothness_loss(
                cfg.reg.variant,
                self.cloud.positions,
                rp.field_pass.u,
                rp.field_pass.h,
                self.graph,
                sample,
                weight,
                cfg.reg.eps,
            )
            loss += smooth.loss
            extra_u, extra_h = smooth.grad_u, smooth.grad_h

        if not np.isfinite(loss):
            raise DivergenceError(it, loss)

        grads = render_backward(
            self.cloud,
            field,
            cam,
            view.t,
            loss_grad,
            keep,
            scale,
            stats=self.adc.stats,
            extra_grad_u=extra_u,
            extra_grad_h=extra_h,
            cache=rp,
        )
        self.optimizer.step(self.cloud, _group_grads(grads), self.field, grads.field)
        ema_update(self.adc, loss, self.adc_config.ema_rho, self.adc_config.ema_floor)

        if self._in_adc_window(it):
            self._densify(it)
        if fine and cfg.reg.smoothness_enabled and (self.graph is None or self.graph.is_stale(it)):
            self._build_graph(it)
        if fine and cfg.reg.ptdrop_enabled and cfg.reg.jitter_weighting and it % s.jitter_interval == 0:
            u = self.field.forward(self.cloud.positions, float(self.rng.random())).u
            self.jitter = update_jitter(self.jitter, u)

    def _densify(self, it: int) -> None:
        self.cloud, self.adc, summary = densify_and_prune(
            self.cloud,
            self.adc,
            self.adc_config,
            self.rng,
            iteration=it,
            pixel_count=self.scene.train_pixel_count,
        )
        metrics.record_adc_step(self.cfg.preset, summary.splits, summary.clones, summary.prunes, self.cloud.count)
        if not summary.changed:
            return
        self.optimizer.remap(summary.source, summary.fresh)
        self.jitter = self.jitter.take(summary.source)
        if self.graph is not None:
            self.graph = self.graph.remap(summary.source, summary.index_map)
        self.trajectory.append((it, self.cloud.count))
        if self.cloud.count > self.adc_config.max_gaussians:
            raise RunawayGrowthError(it, self.cloud.count, self.adc_config.max_gaussians)

    def train(self) -> None:
        for it in range(1, self.cfg.iterations + 1):
            self.iteration = it
            self.step(it)

    def mean_psnr(self, views) -> float:
        values = [
            image_psnr(render_forward(self.cloud, self.field, self.scene.camera(v), v.t), v.image) for v in views
        ]
        return float(np.mean(values))

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            cloud=self.cloud.copy(),
            field=self.field.copy(),
            iteration=self.iteration,
            rng_state=self.rng.bit_generator.state,
            # carries the calibrated tau0
            config=self.cfg.model_copy(update={"adc": self.adc_config}),
        )


def run_experiment(
    cfg: ExperimentConfig,
    scene: Optional[SceneData] = None,
    settings: Optional[LabSettings] = None,
) -> ExperimentResult:
    """
    Train one configuration and evaluate it.

    Deterministic in the config (including its seed): re-running yields an
    identical record, audit log and checkpoint. A non-finite loss or a
    cloud larger than ``adc.max_gaussians`` aborts training; the record is
    then flagged ``diverged`` rather than raised. A run whose final train
    PSNR is below that of its untrained cloud is flagged the same way.

    Args:
        cfg: Experiment configuration
        scene: Pre-generated scene (generated from ``cfg.scene`` if omitted)
        settings: Process settings (wall-time recording)

    Returns:
        ExperimentResult with the run record, final checkpoint and ADC audit log
    """
    settings = settings or get_settings()
    scene = scene or generate_scene(cfg.scene)
    started = time.perf_counter()
    log = logger.bind(scene=cfg.scene.name, preset=cfg.preset, seed=cfg.seed)
    log.info("run.started", iterations=cfg.iterations)

    with tracer.start_as_current_span("training.run_experiment") as span:
        span.set_attribute("run.preset", cfg.preset)
        span.set_attribute("run.scene", cfg.scene.name)
        span.set_attribute("run.seed", cfg.seed)

        with metrics.time_run(cfg.preset):
            run = TrainingRun(cfg, scene)
            tau0 = cfg.adc.tau0
            if cfg.adc.calibrate_tau0 and cfg.adc.enable_all and cfg.iterations > 0:
                calibrated = calibrate_tau0(cfg, scene, run.schedule)
                if calibrated is not None:
                    tau0 = calibrated
                    run.adc_config = cfg.adc.model_copy(update={"tau0": tau0})

            initial_psnr = run.mean_psnr(scene.train)
            error = None
            try:
                run.train()
            except (DivergenceError, RunawayGrowthError, CorruptModelError) as e:
                error = str(e)
                log.error("run.diverged", iteration=run.iteration, count=run.cloud.count, error=error)

            diverged = error is not None
            if run.trajectory[-1] != (run.iteration, run.cloud.count):
                run.trajectory.append((run.iteration, run.cloud.count))

            nan = float("nan")
            checkpoint = run.checkpoint()
            train_psnr = test_psnr = mean_strain = median_strain = nan
            if not diverged:
                train_psnr = run.mean_psnr(scene.train)
                test_psnr = run.mean_psnr(scene.test)
                strain = measure_strain(checkpoint)
                mean_strain, median_strain = strain.mean, strain.median
                if train_psnr < initial_psnr:
                    diverged = True
                    error = f"train PSNR {train_psnr:.2f} dB fell below its initial {initial_psnr:.2f} dB"
                    log.error("run.collapsed", initial_psnr=initial_psnr, train_psnr=train_psnr, final_k=run.cloud.count)

        wall_ms = (time.perf_counter() - started) * 1000.0 if settings.record_wall_time else 0.0
        record = RunRecord(
            scene=cfg.scene.name,
            preset=cfg.preset,
            seed=cfg.seed,
            iterations=cfg.iterations,
            config_hash=cfg.config_hash(),
            train_psnr=train_psnr,
            test_psnr=test_psnr,
            initial_k=run.initial_count,
            final_k=run.cloud.count,
            k_trajectory=run.trajectory,
            mean_strain=mean_strain,
            median_strain=median_strain,
            front_loading=front_loading(run.trajectory, run.schedule),
            tau0=tau0,
            wall_ms=wall_ms,
            diverged=diverged,
            error=error,
        )
        span.set_attribute("run.final_k", record.final_k)
        span.set_attribute("run.diverged", diverged)

    log.info(
        "run.finished",
        final_k=record.final_k,
        train_psnr=record.train_psnr,
        test_psnr=record.test_psnr,
        gap=record.gap,
        diverged=diverged,
    )
    return ExperimentResult(record=record, checkpoint=checkpoint, audit=run.adc.audit)
