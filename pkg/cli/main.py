"""
splat-lab command line.

Subcommands:
    train     train one configuration
    suite     run a presets x scenes x seeds suite
    diagnose  strain report of a checkpoint
    stats     comparison report from a results CSV
    scene     generate and dump a scene

Exit codes: 0 success, 1 configuration error, 2 divergence in ``train``.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import structlog
from pydantic import ValidationError

from core.errors import CheckpointFormatError, ConfigError, LabError
from core.logging import configure_logging
from core.metrics import metrics
from core.settings import get_settings
from core.telemetry import configure_tracing
from models.config import PRESETS, ExperimentConfig, SuiteConfig, apply_preset, with_overrides
from models.scene import GeneratorKind, SceneSpec
from services.checkpoint_service import dump_scene, load_checkpoint, save_checkpoint
from services.diagnostics import DEFAULT_TIMESTEPS, NEIGHBOR_MODES, heldout_timesteps, measure_strain, strain_reports_csv
from services.renderer import images_to_csv
from services.scenes import generate_scene
from services.suite_service import build_report, read_results_csv, report_json, results_csv, run_suite, trajectories_csv
from services.training_service import run_experiment

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2


def _load_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.model_validate(_load_json(args.config)) if args.config else ExperimentConfig()
    overrides: dict = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.scene_kind is not None:
        overrides["scene"] = {"kind": args.scene_kind, "name": args.scene_kind}
    if overrides:
        cfg = with_overrides(cfg, overrides)
    return apply_preset(cfg, args.preset) if args.preset else cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args)
    result = run_experiment(cfg)
    record = result.record
    out = Path(args.output or get_settings().output_dir) / f"{cfg.scene.name}_{cfg.preset}_{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv([record]))
    (out / "k_trajectory.csv").write_text(trajectories_csv([record]))
    (out / "audit.csv").write_text(result.audit.to_csv())
    (out / "config.json").write_text(cfg.model_dump_json(indent=2) + "\n")
    save_checkpoint(result.checkpoint, out / "checkpoint.ckpt")
    print(json.dumps({"output": str(out), **record.model_dump(exclude={"k_trajectory"}), "gap": record.gap}))
    return EXIT_DIVERGED if record.diverged else EXIT_OK


def cmd_suite(args: argparse.Namespace) -> int:
    suite = SuiteConfig.model_validate(_load_json(args.suite))
    out = Path(args.output or get_settings().output_dir) / suite.name
    result = run_suite(suite, output_dir=out, workers=args.workers)
    failed = sum(r.diverged for r in result.records)
    print(json.dumps({"output": str(out), "runs": len(result.records), "failed": failed}))
    # flagged rows do not fail the suite
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.heldout:
        timesteps = heldout_timesteps(ckpt)
    else:
        timesteps = tuple(args.timesteps) if args.timesteps else DEFAULT_TIMESTEPS
    report = measure_strain(ckpt, timesteps, mode=args.mode, k=args.k)
    cfg = ckpt.config
    csv_text = strain_reports_csv([(cfg.scene.name, cfg.preset, cfg.seed, "heldout" if args.heldout else "fixed", report)])
    if args.output:
        Path(args.output).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    report = build_report(read_results_csv(args.results), resamples=args.resamples)
    text = report_json(report)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_scene(args: argparse.Namespace) -> int:
    spec_data = _load_json(args.spec) if args.spec else {}
    if args.kind is not None:
        spec_data.update(kind=args.kind, name=spec_data.get("name", args.kind))
    if args.seed is not None:
        spec_data["seed"] = args.seed
    scene = generate_scene(SceneSpec.model_validate(spec_data))
    dump_scene(scene, args.output)
    if args.csv:
        Path(args.csv).write_text(images_to_csv([v.image for v in scene.train + scene.test]))
    print(json.dumps({"output": str(args.output), "train_views": len(scene.train), "test_views": len(scene.test)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splat-lab", description="Desk-scale dynamic Gaussian splatting overfitting lab")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one configuration")
    train.add_argument("--config", type=Path, help="ExperimentConfig JSON")
    train.add_argument("--preset", choices=PRESETS)
    train.add_argument("--iterations", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--scene-kind", choices=[k.value for k in GeneratorKind])
    train.add_argument("--output", type=Path)
    train.set_defaults(func=cmd_train)

    suite = sub.add_parser("suite", help="run a suite file")
    suite.add_argument("suite", type=Path, help="SuiteConfig JSON")
    suite.add_argument("--output", type=Path)
    suite.add_argument("--workers", type=int)
    suite.set_defaults(func=cmd_suite)

    diagnose = sub.add_parser("diagnose", help="strain report of a checkpoint")
    diagnose.add_argument("checkpoint", type=Path)
    diagnose.add_argument("--mode", choices=NEIGHBOR_MODES, default="knn")
    diagnose.add_argument("--k", type=int)
    diagnose.add_argument("--timesteps", type=float, nargs="+")
    diagnose.add_argument("--heldout", action="store_true", help="use the scene's test timesteps")
    diagnose.add_argument("--output", type=Path)
    diagnose.set_defaults(func=cmd_diagnose)

    stats = sub.add_parser("stats", help="comparison report from a results CSV")
    stats.add_argument("results", type=Path)
    stats.add_argument("--resamples", type=int, default=10_000)
    stats.add_argument("--output", type=Path)
    stats.set_defaults(func=cmd_stats)

    scene = sub.add_parser("scene", help="generate and dump a scene")
    scene.add_argument("output", type=Path)
    scene.add_argument("--spec", type=Path, help="SceneSpec JSON")
    scene.add_argument("--kind", choices=[k.value for k in GeneratorKind])
    scene.add_argument("--seed", type=int)
    scene.add_argument("--csv", type=Path, help="also dump all view images as CSV")
    scene.set_defaults(func=cmd_scene)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the command line."""
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_logging(settings.log_level, settings.log_json)
    configure_tracing(settings.trace_console)
    metrics.start_metrics_server(settings.metrics_port)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, CheckpointFormatError) as e:
        logger.error("cli.config_error", command=args.command, error=str(e))
        return EXIT_CONFIG
    except LabError as e:
        logger.error("cli.failed", command=args.command, error=str(e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
