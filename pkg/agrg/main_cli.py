# agrg/main_cli.py

"""
Command-line entry point for the report generation experiments.

Commands:
1. synth     - write the synthetic train/val/test splits and their manifest.
2. train     - run one training stage (pretrain, heads, decoder, baseline).
3. generate  - write JSON-lines reports for a split from a trained bundle.
4. evaluate  - score generation files against a split (mean ± std over several runs).
5. ablate    - train and evaluate the four decoder variants over several seeds and encoder kinds.

Pipeline errors leave the process with their exit code: 2 config error,
3 missing prerequisite, 4 numerical failure, 1 anything else raised by the pipeline.
"""

import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import click

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

from agrg.config import EnvSettings, RunConfig, load_run_config
from agrg.core.encoder import ENCODER_KINDS
from agrg.core.generation_task import VARIANTS, VariantConfig
from agrg.core.pipeline import STAGES, evaluate_split, generate_split, run_ablation, run_stage, synthesize_splits
from agrg.errors import AGRGError
from agrg.ingestion.common_utils import setup_logging

logger = logging.getLogger("agrg.cli")

# ==============================================================================
# 1. GROUP & ERROR MAPPING
# ==============================================================================

class PipelineGroup(click.Group):
    """Turns pipeline errors into their exit codes after logging them."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except AGRGError as error:
            logger.error(f"[CLI] {type(error).__name__}: {error}")
            ctx.exit(error.exit_code)


def _config(ctx: click.Context) -> RunConfig:
    return ctx.obj["config"]


def _parse_seeds(ctx, param, value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'")


def _parse_kinds(ctx, param, value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    kinds = [part.strip() for part in value.split(",") if part.strip()]
    unknown = [kind for kind in kinds if kind not in ENCODER_KINDS]
    if unknown or not kinds:
        raise click.BadParameter(f"expected comma-separated kinds from {', '.join(ENCODER_KINDS)}, got '{value}'")
    return kinds


def _with_threads(config: RunConfig, threads: Optional[int]) -> RunConfig:
    return config.updated(threads=threads) if threads is not None else config


@click.group(cls=PipelineGroup)
@click.option("--log-level", default=None, help="Logging level (defaults to AGRG_LOG_LEVEL or INFO).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="JSON run configuration.")
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str], config_path: Optional[Path]):
    """Anomaly-guided report generation on synthetic CT volumes."""
    env = EnvSettings()
    setup_logging(log_level or env.log_level)
    ctx.ensure_object(dict)
    ctx.obj["config"] = load_run_config(config_path, env)

# ==============================================================================
# 2. COMMANDS
# ==============================================================================

@cli.command()
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory for the split files (overrides paths.data_dir).")
@click.option("--seed", type=int, default=None, help="Run seed stamped on the manifest.")
@click.pass_context
def synth(ctx: click.Context, out_dir: Optional[Path], seed: Optional[int]):
    """Write train.agds, val.agds, test.agds and manifest.json."""
    config = _config(ctx)
    updates = {}
    if out_dir is not None:
        updates["paths"] = {"data_dir": str(out_dir)}
    if seed is not None:
        updates["seed"] = seed
    config = config.updated(**updates) if updates else config
    manifest = synthesize_splits(config)
    counts = ", ".join(f"{name}={entry['count']}" for name, entry in manifest["splits"].items())
    click.echo(f"wrote {counts} to {config.paths.data_dir}")


@cli.command()
@click.option("--stage", type=click.Choice(STAGES), required=True)
@click.option("--lr", type=float, default=None, help="Learning rate for this run.")
@click.option("--epochs", type=int, default=None, help="Number of epochs for this run.")
@click.option("--resume", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Checkpoint of the same stage to continue from.")
@click.option("--variant", type=click.Choice(sorted(VARIANTS)), default=None,
              help="Decoder conditioning variant (decoder stage).")
@click.option("--threads", type=int, default=None, help="Worker threads (defaults to the config).")
@click.option("--force", is_flag=True, help="Accept checkpoints stamped with another config hash.")
@click.pass_context
def train(ctx: click.Context, stage: str, lr: Optional[float], epochs: Optional[int], resume: Optional[Path],
          variant: Optional[str], threads: Optional[int], force: bool):
    """Run one training stage; writes its checkpoint and CSV loss log."""
    config = _with_threads(_config(ctx), threads)
    if variant is not None:
        config = config.updated(variant=VariantConfig.named(variant).model_dump())
    path = run_stage(stage, config, resume=resume, force=force, lr=lr, epochs=epochs)
    click.echo(str(path))


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--split", type=click.Choice(["val", "test"]), default="test")
@click.option("--threads", type=int, default=None, help="Worker threads (defaults to the config).")
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Output file (defaults to <out_dir>/generations-<split>.jsonl).")
@click.option("--force", is_flag=True, help="Accept a checkpoint stamped with another config hash.")
@click.pass_context
def generate(ctx: click.Context, checkpoint: Path, split: str, threads: Optional[int], output: Optional[Path],
             force: bool):
    """Generate one report per case of a split."""
    path = generate_split(_config(ctx), checkpoint, split, output=output, threads=threads, force=force)
    click.echo(str(path))


@cli.command()
@click.option("--generations", type=click.Path(dir_okay=False, path_type=Path), multiple=True, required=True,
              help="Generation file; repeat for several runs.")
@click.option("--split", type=click.Choice(["val", "test"]), default="test")
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
def evaluate(ctx: click.Context, generations: Tuple[Path, ...], split: str, out_dir: Optional[Path]):
    """Score generations; writes metrics.json and metrics.txt."""
    payload = evaluate_split(_config(ctx), list(generations), split, out_dir=out_dir)
    for column, stats in payload["aggregate"].items():
        click.echo(f"{column:8s} {stats['mean']:.4f} ± {stats['std']:.4f}")


@cli.command()
@click.option("--seeds", callback=_parse_seeds, default=None, help="Comma-separated seeds, e.g. 0,1,2.")
@click.option("--encoders", callback=_parse_kinds, default=None,
              help="Comma-separated encoder kinds to sweep, e.g. mixer,attention.")
@click.option("--threads", type=int, default=None, help="Worker threads (defaults to the config).")
@click.option("--force", is_flag=True, help="Accept checkpoints stamped with another config hash.")
@click.pass_context
def ablate(ctx: click.Context, seeds: Optional[List[int]], encoders: Optional[List[str]], threads: Optional[int],
           force: bool):
    """Train and evaluate baseline, +multi-task, +embedding expansion and full."""
    config = _with_threads(_config(ctx), threads)
    run_ablation(config, seeds=seeds, force=force, encoders=encoders)
    click.echo((Path(config.paths.out_dir) / "ablation.txt").read_text(encoding="utf-8"))


if __name__ == "__main__":
    cli()
