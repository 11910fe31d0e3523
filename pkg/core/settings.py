"""Process-level settings read from the environment (prefix ``SPLATLAB_``)."""

from functools import lru_cache
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class LabSettings(BaseSettings):
    """Environment configuration for the lab CLI and suite runner."""

    model_config = SettingsConfigDict(
        env_prefix="SPLATLAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    output_dir: Path = Path("runs")
    log_level: str = "INFO"
    log_json: bool = False
    # 0 disables the Prometheus exporter
    metrics_port: int = Field(default=0, ge=0, le=65535)
    trace_console: bool = False
    workers: int = Field(default=1, ge=1)
    # wall time breaks byte-identical result files, so it is opt-in
    record_wall_time: bool = False


@lru_cache
def get_settings() -> LabSettings:
    """Get the cached settings instance."""
    return LabSettings()
