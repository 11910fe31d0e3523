"""
Suite service: run a presets x scenes x seeds grid and summarize it.

Rows are produced in suite order (preset, scene, seed) regardless of which
worker finishes first. Outputs written to the suite directory:

    results.csv          one row per run, fixed column order
    k_trajectories.csv   (scene, preset, seed, iteration, K) plot data
    count_gap.csv        per-preset mean K / gap plot data
    strain.csv           strain reports of baseline and smoothness presets
    stats.json           paired comparisons vs baseline, count-gap fit, strain
    checkpoints/, audit/ per-run checkpoint and ADC audit log
"""

import csv
import io
import json
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import structlog
from opentelemetry import trace

from core.errors import ConfigError, LabError
from core.settings import LabSettings, get_settings
from models.config import ExperimentConfig, SuiteConfig, apply_preset, with_overrides
from models.records import RESULTS_COLUMNS, RunRecord, StrainReport, format_float
from services.checkpoint_service import Checkpoint, save_checkpoint
from services.diagnostics import aggregate_strain, heldout_timesteps, measure_strain, strain_compare, strain_reports_csv
from services.stats import PairedSample, correlate, fit_count_gap_points, paired_effect, wilcoxon_exact
from services.training_service import run_experiment

logger = structlog.get_logger(__name__)
tracer = trace.get_tracer(__name__)

BASELINE = "baseline"
TIMESTEP_SETS = ("fixed", "heldout")


@dataclass
class SuiteRow:
    record: RunRecord
    checkpoint: Optional[Checkpoint] = None
    audit_csv: str = ""
    strain: dict[str, StrainReport] = field(default_factory=dict)


@dataclass
class SuiteResult:
    rows: list[SuiteRow]
    report: dict[str, Any]

    @property
    def records(self) -> list[RunRecord]:
        return [row.record for row in self.rows]


def suite_configs(suite: SuiteConfig) -> list[ExperimentConfig]:
    """Expand a suite into run configs in suite order."""
    configs = []
    for preset in suite.presets:
        for scene in suite.scenes:
            for seed in suite.seeds:
                cfg = with_overrides(suite.base, {"scene": scene.model_dump(mode="json"), "seed": seed})
                configs.append(apply_preset(cfg, preset))
    return configs


def _measures_strain(cfg: ExperimentConfig) -> bool:
    return cfg.preset == BASELINE or cfg.reg.smoothness_enabled


def _failed_record(cfg: ExperimentConfig, error: str) -> RunRecord:
    nan = float("nan")
    return RunRecord(
        scene=cfg.scene.name,
        preset=cfg.preset,
        seed=cfg.seed,
        iterations=cfg.iterations,
        config_hash=cfg.config_hash(),
        train_psnr=nan,
        test_psnr=nan,
        initial_k=cfg.init.count,
        final_k=0,
        k_trajectory=[],
        diverged=True,
        error=error,
    )


def _run_job(job: tuple[ExperimentConfig, LabSettings]) -> SuiteRow:
    cfg, settings = job
    try:
        result = run_experiment(cfg, settings=settings)
        row = SuiteRow(record=result.record, checkpoint=result.checkpoint, audit_csv=result.audit.to_csv())
        if _measures_strain(cfg) and not result.record.diverged:
            row.strain = {
                "fixed": measure_strain(result.checkpoint),
                "heldout": measure_strain(result.checkpoint, heldout_timesteps(result.checkpoint)),
            }
        return row
    except Exception as e:
        logger.exception(
            "suite.row_failed",
            scene=cfg.scene.name,
            preset=cfg.preset,
            seed=cfg.seed,
            error=str(e),
            error_type=type(e).__name__,
        )
        return SuiteRow(record=_failed_record(cfg, f"{type(e).__name__}: {e}"))


def run_suite(
    suite: SuiteConfig,
    output_dir: Optional[Path] = None,
    settings: Optional[LabSettings] = None,
    workers: Optional[int] = None,
) -> SuiteResult:
    """
    Run every (preset, scene, seed) of the suite and build the stats report.

    Failed rows are recorded (``diverged`` with an error) and the suite
    continues. Outputs are written under ``output_dir`` when given.

    Raises:
        ConfigError: a preset produces an invalid config
    """
    settings = settings or get_settings()
    workers = workers or settings.workers
    configs = suite_configs(suite)
    jobs = [(cfg, settings) for cfg in configs]
    logger.info("suite.started", suite=suite.name, runs=len(jobs), workers=workers)

    with tracer.start_as_current_span("suite.run_suite") as span:
        span.set_attribute("suite.runs", len(jobs))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_run_job, jobs))
        else:
            rows = [_run_job(job) for job in jobs]
        report = build_report([row.record for row in rows], _strain_pairs(rows))

    result = SuiteResult(rows=rows, report=report)
    if output_dir is not None:
        write_outputs(result, Path(output_dir))
    failed = sum(row.record.diverged for row in rows)
    logger.info("suite.finished", suite=suite.name, runs=len(rows), failed=failed)
    return result


def _strain_pairs(rows: list[SuiteRow]) -> dict[str, dict[str, list[tuple[StrainReport, StrainReport]]]]:
    """(baseline, preset) strain report pairs per preset and timestep set, matched by scene and seed."""
    baseline = {(r.record.scene, r.record.seed): r.strain for r in rows if r.record.preset == BASELINE and r.strain}
    pairs: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        rec = row.record
        if rec.preset == BASELINE or not row.strain:
            continue
        base = baseline.get((rec.scene, rec.seed))
        if base is None:
            continue
        for key in TIMESTEP_SETS:
            pairs[rec.preset][key].append((base[key], row.strain[key]))
    return pairs


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _mean_std(values: list[float]) -> tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return _finite(float(arr.mean())), _finite(std)


def _paired_tests(a: list[float], b: list[float]) -> dict[str, Any]:
    """t-test, Cohen's d and exact Wilcoxon of a vs b; errors reported inline."""
    out: dict[str, Any] = {"n": len(a)}
    try:
        sample = PairedSample(a, b)
    except LabError as e:
        out["error"] = str(e)
        return out
    try:
        effect = paired_effect(sample)
        out.update(t=effect.t, p=effect.p, d=effect.d, mean_difference=effect.mean_difference)
    except LabError as e:
        out["t_error"] = str(e)
        out["mean_difference"] = getattr(e, "mean_difference", None)
    try:
        wilcoxon = wilcoxon_exact(sample)
        out.update(wilcoxon_w=wilcoxon.w, wilcoxon_p=wilcoxon.p)
    except LabError as e:
        out["wilcoxon_error"] = str(e)
    return out


def _pct_change(value: Optional[float], reference: Optional[float]) -> Optional[float]:
    if value is None or not reference:
        return None
    return (1.0 - value / reference) * 100.0


def build_report(
    records: list[RunRecord],
    strain_pairs: Optional[dict[str, dict[str, list[tuple[StrainReport, StrainReport]]]]] = None,
    resamples: int = 10_000,
) -> dict[str, Any]:
    """
    Machine-readable summary: per-preset aggregates, paired comparisons
    against baseline (gap reduction %, K ratio, test PSNR delta, t / d /
    Wilcoxon), the count-gap fit over preset means, and strain aggregates.
    """
    ok = [r for r in records if not r.diverged]
    by_preset: dict[str, list[RunRecord]] = defaultdict(list)
    for record in ok:
        by_preset[record.preset].append(record)

    presets: dict[str, Any] = {}
    for preset, rows in by_preset.items():
        k_mean, k_std = _mean_std([r.final_k for r in rows])
        gap_mean, gap_std = _mean_std([r.gap for r in rows])
        presets[preset] = {
            "runs": len(rows),
            "mean_final_k": k_mean,
            "std_final_k": k_std,
            "mean_gap": gap_mean,
            "std_gap": gap_std,
            "mean_train_psnr": _mean_std([r.train_psnr for r in rows])[0],
            "mean_test_psnr": _mean_std([r.test_psnr for r in rows])[0],
            "mean_strain": _mean_std([r.mean_strain for r in rows if math.isfinite(r.mean_strain)])[0],
            "mean_front_loading": _mean_std([r.front_loading for r in rows if r.front_loading is not None])[0],
        }
    failed = defaultdict(int)
    for record in records:
        if record.diverged:
            failed[record.preset] += 1

    comparisons: dict[str, Any] = {}
    base_rows = {(r.scene, r.seed): r for r in by_preset.get(BASELINE, [])}
    for preset, rows in by_preset.items():
        if preset == BASELINE or not base_rows:
            continue
        paired = [(r, base_rows[(r.scene, r.seed)]) for r in rows if (r.scene, r.seed) in base_rows]
        if not paired:
            continue
        mine, base = presets[preset], presets[BASELINE]
        comparisons[preset] = {
            "pairs": len(paired),
            "gap_reduction_pct": _pct_change(mine["mean_gap"], base["mean_gap"]),
            "k_ratio": mine["mean_final_k"] / base["mean_final_k"] if base["mean_final_k"] else None,
            "test_psnr_delta": (
                mine["mean_test_psnr"] - base["mean_test_psnr"]
                if mine["mean_test_psnr"] is not None and base["mean_test_psnr"] is not None
                else None
            ),
            "gap": _paired_tests([r.gap for r, _ in paired], [b.gap for _, b in paired]),
            "final_k": _paired_tests([float(r.final_k) for r, _ in paired], [float(b.final_k) for _, b in paired]),
            "test_psnr": _paired_tests([r.test_psnr for r, _ in paired], [b.test_psnr for _, b in paired]),
        }

    count_gap: dict[str, Any]
    means = [(v["mean_final_k"], v["mean_gap"]) for v in presets.values() if v["mean_gap"] is not None]
    try:
        counts = [k for k, _ in means]
        gaps = [g for _, g in means]
        fit = fit_count_gap_points(counts, gaps)
        corr = correlate(np.log10(counts), gaps, resamples=resamples, seed=0)
        count_gap = {
            "points": len(means),
            "slope_db_per_decade": fit.slope,
            "intercept": fit.intercept,
            "pearson_r": fit.r,
            "spearman_rho": fit.rho,
            "endpoint_dropped_r": fit.endpoint_r,
            "r_ci_low": _finite(corr.ci_low),
            "r_ci_high": _finite(corr.ci_high),
        }
    except LabError as e:
        count_gap = {"points": len(means), "error": str(e)}

    strain: dict[str, Any] = {}
    for preset, sets in (strain_pairs or {}).items():
        strain[preset] = {
            key: {
                "aggregate": aggregate_strain(pairs).model_dump(),
                "per_scene": [strain_compare(b, r).model_dump() for b, r in pairs],
            }
            for key, pairs in sets.items()
        }

    return _clean(
        {
            "presets": presets,
            "failed_runs": dict(failed),
            "comparisons": comparisons,
            "count_gap": count_gap,
            "strain": strain,
        }
    )


def _clean(value: Any) -> Any:
    """Replace non-finite floats by None so the report is strict JSON."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return _finite(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def results_csv(records: list[RunRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RESULTS_COLUMNS)
    for record in records:
        writer.writerow(record.csv_row())
    return buffer.getvalue()


def trajectories_csv(records: list[RunRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("scene", "preset", "seed", "iteration", "K"))
    for record in records:
        for iteration, count in record.k_trajectory:
            writer.writerow((record.scene, record.preset, record.seed, iteration, count))
    return buffer.getvalue()


def count_gap_csv(report: dict[str, Any]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("preset", "mean_K", "mean_gap", "mean_test_psnr", "mean_front_loading"))
    for preset, agg in report["presets"].items():
        writer.writerow(
            [preset]
            + [
                "" if agg[key] is None else format_float(agg[key])
                for key in ("mean_final_k", "mean_gap", "mean_test_psnr", "mean_front_loading")
            ]
        )
    return buffer.getvalue()


def report_json(report: dict[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _run_name(record: RunRecord) -> str:
    return f"{record.scene}_{record.preset}_{record.seed}"


def write_outputs(result: SuiteResult, output_dir: Path) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    records = result.records
    (output_dir / "results.csv").write_text(results_csv(records))
    (output_dir / "k_trajectories.csv").write_text(trajectories_csv(records))
    (output_dir / "count_gap.csv").write_text(count_gap_csv(result.report))
    (output_dir / "stats.json").write_text(report_json(result.report))
    strain_rows = [
        (row.record.scene, row.record.preset, row.record.seed, key, report)
        for row in result.rows
        for key, report in row.strain.items()
    ]
    (output_dir / "strain.csv").write_text(strain_reports_csv(strain_rows))
    for row in result.rows:
        if row.checkpoint is not None:
            save_checkpoint(row.checkpoint, output_dir / "checkpoints" / f"{_run_name(row.record)}.ckpt")
        if row.audit_csv:
            audit_dir = output_dir / "audit"
            audit_dir.mkdir(exist_ok=True)
            (audit_dir / f"{_run_name(row.record)}.csv").write_text(row.audit_csv)


def read_results_csv(path: Path | str) -> list[RunRecord]:
    """
    Load a results CSV back into run records (no trajectories or hashes).

    Raises:
        ConfigError: missing columns or unparsable values
    """
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        missing = set(RESULTS_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"results CSV is missing columns: {', '.join(sorted(missing))}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                final_k = int(row["final_K"])
                records.append(
                    RunRecord(
                        scene=row["scene"],
                        preset=row["preset"],
                        seed=int(row["seed"]),
                        iterations=int(row["iterations"]),
                        config_hash="",
                        train_psnr=float(row["train_psnr"]),
                        test_psnr=float(row["test_psnr"]),
                        initial_k=final_k,
                        final_k=final_k,
                        k_trajectory=[],
                        mean_strain=float(row["mean_strain"]),
                        median_strain=float(row["median_strain"]),
                        wall_ms=float(row["wall_ms"]),
                        diverged=row["diverged"] == "1",
                    )
                )
            except (TypeError, ValueError) as e:
                raise ConfigError(f"results CSV line {line}: {e}") from e
    return records
