"""Run records, audit events and strain reports."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

RESULTS_COLUMNS: tuple[str, ...] = (
    "scene",
    "preset",
    "seed",
    "iterations",
    "train_psnr",
    "test_psnr",
    "gap",
    "final_K",
    "mean_strain",
    "median_strain",
    "wall_ms",
    "diverged",
)


def format_float(value: float) -> str:
    """17 significant digits: enough to round-trip every float64."""
    return format(float(value), ".17g")


class AdcOp(str, Enum):
    SPLIT = "split"
    CLONE = "clone"
    PRUNE = "prune"


class AuditEvent(BaseModel):
    """One densification or pruning event."""

    model_config = ConfigDict(frozen=True)

    iteration: int
    op: AdcOp
    parent_id: int
    child_ids: tuple[int, ...] = ()
    grad: float = 0.0
    tau: float = 0.0


class RunRecord(BaseModel):
    """Metrics row of one experiment."""

    scene: str
    preset: str
    seed: int
    iterations: int
    config_hash: str
    train_psnr: float
    test_psnr: float
    initial_k: int
    final_k: int
    k_trajectory: list[tuple[int, int]]
    mean_strain: float = float("nan")
    median_strain: float = float("nan")
    front_loading: Optional[float] = None
    # base threshold actually used (after calibration, before A7/A8 scaling)
    tau0: Optional[float] = None
    wall_ms: float = 0.0
    diverged: bool = False
    error: Optional[str] = None

    @property
    def gap(self) -> float:
        return self.train_psnr - self.test_psnr

    def csv_row(self) -> list[str]:
        return [
            self.scene,
            self.preset,
            str(self.seed),
            str(self.iterations),
            format_float(self.train_psnr),
            format_float(self.test_psnr),
            format_float(self.gap),
            str(self.final_k),
            format_float(self.mean_strain),
            format_float(self.median_strain),
            format_float(self.wall_ms),
            "1" if self.diverged else "0",
        ]


@dataclass
class StrainReport:
    """Per-Gaussian mean k-NN strain over a set of timesteps."""

    per_gaussian: np.ndarray
    timesteps: tuple[float, ...]
    checkpoint_id: str = ""
    k: int = 0
    mode: str = "knn"
    mean: float = field(init=False)
    median: float = field(init=False)
    p1: float = field(init=False)
    p99: float = field(init=False)
    min: float = field(init=False)
    max: float = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.per_gaussian, dtype=np.float64)
        self.per_gaussian = values
        # linear interpolation between order statistics
        p1, median, p99 = np.percentile(values, [1.0, 50.0, 99.0], method="linear")
        self.mean = float(values.mean())
        self.median = float(median)
        self.p1 = float(p1)
        self.p99 = float(p99)
        self.min = float(values.min())
        self.max = float(values.max())

    def summary(self) -> dict[str, float]:
        return {
            "mean": self.mean,
            "median": self.median,
            "p1": self.p1,
            "p99": self.p99,
            "min": self.min,
            "max": self.max,
        }


class StrainComparison(BaseModel):
    """Baseline-vs-regularized strain comparison."""

    mean_reduction_pct: Optional[float]
    median_reduction_pct: Optional[float]
    reg_median_below_base_p1: bool
    reg_p99_below_base_median: bool
    base_median_over_reg_p99: Optional[float]
    undefined: bool = False
