"""
Prometheus metrics for the splat overfitting lab.

Counters and histograms are registered at import time; the HTTP exporter
only starts when a metrics port is configured.
"""

import time
from contextlib import contextmanager

from prometheus_client import Counter, Gauge, Histogram, start_http_server

splatlab_runs_started = Counter(
    "splatlab_runs_started_total",
    "Total number of training runs started",
    ["preset"],
)

splatlab_runs_finished = Counter(
    "splatlab_runs_finished_total",
    "Total number of training runs finished",
    ["preset", "status"],
)

splatlab_run_duration = Histogram(
    "splatlab_run_duration_seconds",
    "Wall time of one training run",
    ["preset", "status"],
    buckets=[0.5, 1.0, 2.5, 5.0, 10.0, 30.0, 60.0, 120.0, 300.0, 600.0],
)

splatlab_adc_events = Counter(
    "splatlab_adc_events_total",
    "Adaptive density control events",
    ["op"],
)

splatlab_cloud_size = Gauge(
    "splatlab_cloud_size",
    "Gaussian count of the most recent ADC step",
    ["preset"],
)

splatlab_strain_reports = Counter(
    "splatlab_strain_reports_total",
    "Strain reports computed from checkpoints",
    ["mode"],
)


class MetricsManager:
    """Manager for Prometheus metrics with context managers for timing."""

    def __init__(self):
        self._metrics_server_started = False

    def start_metrics_server(self, port: int) -> None:
        """Start Prometheus metrics HTTP server (no-op for port 0)."""
        if port and not self._metrics_server_started:
            start_http_server(port)
            self._metrics_server_started = True

    @contextmanager
    def time_run(self, preset: str):
        """Context manager for timing a training run."""
        start_time = time.perf_counter()
        splatlab_runs_started.labels(preset=preset).inc()
        try:
            yield
        except Exception:
            duration = time.perf_counter() - start_time
            splatlab_runs_finished.labels(preset=preset, status="failed").inc()
            splatlab_run_duration.labels(preset=preset, status="failed").observe(duration)
            raise
        duration = time.perf_counter() - start_time
        splatlab_runs_finished.labels(preset=preset, status="completed").inc()
        splatlab_run_duration.labels(preset=preset, status="completed").observe(duration)

    def record_adc_step(self, preset: str, splits: int, clones: int, prunes: int, count: int) -> None:
        """Record the outcome of one densify-and-prune pass."""
        if splits:
            splatlab_adc_events.labels(op="split").inc(splits)
        if clones:
            splatlab_adc_events.labels(op="clone").inc(clones)
        if prunes:
            splatlab_adc_events.labels(op="prune").inc(prunes)
        splatlab_cloud_size.labels(preset=preset).set(count)

    def record_strain_report(self, mode: str) -> None:
        """Record a strain measurement."""
        splatlab_strain_reports.labels(mode=mode).inc()


# Global metrics manager instance
metrics = MetricsManager()
