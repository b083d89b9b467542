#!/usr/bin/env python3
"""
UPESV Pipeline Runner

Command-line entry point for every step: expert data generation, training,
evaluation, ablations, the shift sweep and dataset inspection. Every output
of a run lives under {UPESV_RUNS_DIR}/{run_id}/, next to a manifest written
before any training step.

Usage:
    python run_pipeline.py gen-experts --env procgrid8 --levels 200 --frames 100000 --seed 0 --out experts
    python run_pipeline.py train --config config.json --experts experts.upsv --seed 0
    python run_pipeline.py eval --checkpoint runs/<run_id>/checkpoint.pt
    python run_pipeline.py ablate --config config.json --experts experts.upsv
    python run_pipeline.py sweep --config config.json --experts experts.upsv --shifts 0 1 2 4
    python run_pipeline.py labeling --config config.json --experts experts.upsv
    python run_pipeline.py inspect-dataset experts.upsv
"""

import functools
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional, Tuple

import click
import pandas as pd
from dotenv import load_dotenv

from databank import (
    DatasetFormatError,
    EmptyDatasetError,
    VideoDataset,
    dataset_digest,
    read_dataset,
    write_dataset,
)
from envsuite import (
    ENV_PRESETS,
    EXPERT_LEVEL_START,
    HELD_OUT_LEVEL_START,
    LevelGenerationError,
    generate_expert_videos,
)
from evaluate import MIN_REPORT_SEEDS, evaluate_bundle, write_report
from experiments import (
    ABLATION_VARIANTS,
    DEFAULT_SHIFTS,
    ablation_table,
    default_seeds,
    labeling_table,
    summarize,
    sweep_shift,
)
from losses import TrainingDivergedError
from nets import load_checkpoint
from plots import ablation_bars, loss_curves, sweep_curve
from run_manifest import RunLockedError, RunManifest, file_hash, generate_run_id, run_lock, runs_root
from train_config import ConfigError, TrainConfig
from trainer import PhaseError, held_out_videos, run_full

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

DATA_ERRORS = (DatasetFormatError, EmptyDatasetError, FileNotFoundError, FileExistsError)
CONFIG_ERRORS = (ConfigError, LevelGenerationError)
HANDLED_ERRORS = CONFIG_ERRORS + (PhaseError, TrainingDivergedError, RunLockedError) + DATA_ERRORS


def configure_logging(level: Optional[str] = None) -> None:
    level = (level or os.getenv('UPESV_LOG_LEVEL', 'INFO')).upper()
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


def exit_code_for(exc: BaseException) -> int:
    """Exit code for an error escaping a command."""
    if isinstance(exc, PhaseError):
        return exit_code_for(exc.cause)
    if isinstance(exc, CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    return EXIT_FAILURE


def handle_errors(func):
    """Report expected errors on stderr and exit with their code."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except HANDLED_ERRORS as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(exit_code_for(exc))
    return wrapper


def banner(title: str) -> None:
    click.echo(f"\n{'=' * 50}")
    click.echo(title)
    click.echo('=' * 50)


def load_config(config_path: Optional[str], **overrides) -> TrainConfig:
    config = TrainConfig.from_file(config_path) if config_path else TrainConfig()
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return config.with_overrides(**overrides) if overrides else config


def load_dataset(path: str) -> VideoDataset:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_dataset(path)


def load_training_data(config: TrainConfig, experts: Optional[str],
                       held_out: Optional[str]) -> Tuple[VideoDataset, VideoDataset, Dict[str, str]]:
    """
    Expert videos and held-out labeled videos, read from files when given and
    generated from the config otherwise; returns their hashes for the manifest.
    """
    hashes: Dict[str, str] = {}
    if experts:
        videos = load_dataset(experts)
        hashes['experts'] = file_hash(experts)
        companion = Path(experts).with_suffix('.actions')
        if held_out is None and companion.exists():
            held_out = str(companion)
    else:
        videos = generate_expert_videos(config.env_spec(), config.n_train_levels, config.expert_frames,
                                        seed=config.seed, first_level=EXPERT_LEVEL_START)
        videos.actions = None
        hashes['experts'] = dataset_digest(videos)

    if held_out:
        labeled = load_dataset(held_out)
        if labeled.actions is None:
            raise DatasetFormatError(f"{held_out} has no action block")
        hashes['held_out'] = file_hash(held_out)
    else:
        labeled = held_out_videos(config)
        hashes['held_out'] = dataset_digest(labeled)
    return videos, labeled, hashes


def start_run(command: str, settings: Dict[str, object], run_id: Optional[str]) -> Tuple[str, Path]:
    run_id = run_id or generate_run_id(settings, label=command)
    return run_id, runs_root() / run_id


def require_seeds(config: TrainConfig) -> None:
    if config.n_seeds < MIN_REPORT_SEEDS:
        raise ConfigError('n_seeds', f"reports need at least {MIN_REPORT_SEEDS} seeds, got {config.n_seeds}")


@click.group()
@click.option('--log-level', default=None, help='Overrides UPESV_LOG_LEVEL')
def cli(log_level):
    """Learn a policy from action-free expert videos and reward-free interactions."""
    configure_logging(log_level)


@cli.command('gen-experts')
@click.option('--env', 'env_name', type=click.Choice(sorted(ENV_PRESETS)), default='procgrid8')
@click.option('--levels', type=int, default=200, help='Number of training level layouts')
@click.option('--frames', type=int, default=100_000, help='Exact number of expert frames')
@click.option('--seed', type=int, default=0)
@click.option('--out', required=True, help='Output prefix; writes {out}.upsv and {out}.actions')
@click.option('--held-out-levels', type=int, default=50)
@click.option('--held-out-frames', type=int, default=5_000)
@click.option('--force', is_flag=True, help='Overwrite existing outputs')
@click.option('--run-id', default=None)
@handle_errors
def gen_experts(env_name, levels, frames, seed, out, held_out_levels, held_out_frames, force, run_id):
    """Generate expert videos and the held-out labeled set."""
    spec = ENV_PRESETS[env_name]
    video_path = Path(f"{out}.upsv")
    actions_path = Path(f"{out}.actions")
    for path in (video_path, actions_path):
        if path.exists() and not force:
            raise FileExistsError(f"{path} exists; pass --force to overwrite")
    video_path.parent.mkdir(parents=True, exist_ok=True)

    settings = {'env': env_name, 'spec': asdict(spec), 'levels': levels, 'frames': frames, 'seed': seed,
                'held_out_levels': held_out_levels, 'held_out_frames': held_out_frames}
    run_id, run_dir = start_run('gen-experts', settings, run_id)
    with run_lock(run_dir):
        manifest = RunManifest(run_id=run_id, command='gen-experts', config=settings, seeds=[seed])
        manifest.write(run_dir)

        banner(f"Generating {frames} expert frames on {levels} {env_name} levels")
        videos = generate_expert_videos(spec, levels, frames, seed=seed, first_level=EXPERT_LEVEL_START)
        write_dataset(video_path, VideoDataset(videos.frames, videos.episode_starts, videos.meta))

        click.echo(f"Generating {held_out_frames} held-out frames on {held_out_levels} levels")
        held_out = generate_expert_videos(spec, held_out_levels, held_out_frames, seed=seed,
                                          first_level=HELD_OUT_LEVEL_START)
        write_dataset(actions_path, held_out)

        manifest.dataset_hashes = {'experts': file_hash(video_path), 'held_out': file_hash(actions_path)}
        manifest.mark_finished(run_dir)

    click.echo(f"  spec digest: {spec.digest()}")
    for name, path in (('experts', video_path), ('held_out', actions_path)):
        click.echo(f"  {path}: sha256 {manifest.dataset_hashes[name]}")
    click.echo(f"  manifest: {run_dir}")


@cli.command()
@click.option('--config', 'config_path', type=click.Path(), default=None, help='JSON config file')
@click.option('--seed', type=int, default=None)
@click.option('--deterministic', is_flag=True, help='Deterministic kernels and sequential stepping')
@click.option('--variant', type=click.Choice(['full', 'no_vsc', 'no_lfr', 'no_gap', 'bco']), default=None)
@click.option('--experts', type=click.Path(), default=None, help='Expert .upsv file; generated when omitted')
@click.option('--held-out', type=click.Path(), default=None, help='Held-out .actions file')
@click.option('--run-id', default=None)
@handle_errors
def train(config_path, seed, deterministic, variant, experts, held_out, run_id):
    """Train one run end to end and evaluate it."""
    config = load_config(config_path, seed=seed, deterministic=deterministic or None, variant=variant)
    videos, labeled, hashes = load_training_data(config, experts, held_out)
    run_id, run_dir = start_run('train', config.to_dict(), run_id)

    with run_lock(run_dir):
        manifest = RunManifest(run_id=run_id, command='train', config=config.to_dict(),
                               dataset_hashes=hashes, seeds=[config.seed])
        manifest.write(run_dir)
        banner(f"Training {config.variant} (seed {config.seed}) -> {run_dir}")
        result = run_full(config, videos, labeled, run_dir)
        loss_curves(result.metrics, run_dir / 'loss_curves.png')
        manifest.mark_finished(run_dir)

    for name, value in result.summary['final_losses'].items():
        click.echo(f"  final {name}: {value:.4f}")
    for name, value in result.report.as_dict().items():
        click.echo(f"  {name}: {value}")
    click.echo(f"\nRun finished: {run_dir}")


@cli.command('eval')
@click.option('--checkpoint', type=click.Path(), required=True)
@click.option('--held-out', type=click.Path(), default=None, help='Held-out .actions file')
@handle_errors
def eval_cmd(checkpoint, held_out):
    """Evaluate a checkpoint on held-out data and levels."""
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    bundle, config, _ = load_checkpoint(checkpoint)
    labeled = load_dataset(held_out) if held_out else held_out_videos(config)
    report = evaluate_bundle(bundle, config, labeled)
    path = write_report(pd.DataFrame([report.as_dict()]), Path(checkpoint).parent, 'eval')
    for name, value in report.as_dict().items():
        click.echo(f"  {name}: {value}")
    click.echo(f"Wrote {path}")


@cli.command()
@click.option('--config', 'config_path', type=click.Path(), default=None)
@click.option('--experts', type=click.Path(), default=None)
@click.option('--held-out', type=click.Path(), default=None, help='Held-out .actions file')
@click.option('--variants', multiple=True, type=click.Choice(ABLATION_VARIANTS), default=ABLATION_VARIANTS)
@click.option('--n-seeds', type=int, default=None)
@click.option('--run-id', default=None)
@handle_errors
def ablate(config_path, experts, held_out, variants, n_seeds, run_id):
    """Train every ablation variant over seeds and report mean +/- std."""
    config = load_config(config_path, n_seeds=n_seeds)
    require_seeds(config)
    videos, labeled, hashes = load_training_data(config, experts, held_out)
    run_id, run_dir = start_run('ablate', config.to_dict(), run_id)

    with run_lock(run_dir):
        manifest = RunManifest(run_id=run_id, command='ablate', config=config.to_dict(),
                               dataset_hashes=hashes, seeds=default_seeds(config))
        manifest.write(run_dir)
        banner(f"Ablating {', '.join(variants)} over {config.n_seeds} seeds")
        rows = ablation_table(config, videos, variants, held_out=labeled, run_dir=run_dir)
        write_report(rows, run_dir, 'ablation')
        summary = summarize(rows)
        write_report(summary, run_dir, 'ablation_summary')
        ablation_bars(summary, run_dir / 'ablation.png')
        manifest.mark_finished(run_dir)

    click.echo(summary.to_string(index=False))


@cli.command()
@click.option('--config', 'config_path', type=click.Path(), default=None)
@click.option('--experts', type=click.Path(), default=None)
@click.option('--held-out', type=click.Path(), default=None, help='Held-out .actions file')
@click.option('--shifts', type=int, multiple=True, default=DEFAULT_SHIFTS)
@click.option('--n-seeds', type=int, default=None)
@click.option('--run-id', default=None)
@handle_errors
def sweep(config_path, experts, held_out, shifts, n_seeds, run_id):
    """Train the full method at each maximum shift distance."""
    config = load_config(config_path, n_seeds=n_seeds)
    require_seeds(config)
    videos, labeled, hashes = load_training_data(config, experts, held_out)
    run_id, run_dir = start_run('sweep', config.to_dict(), run_id)

    with run_lock(run_dir):
        manifest = RunManifest(run_id=run_id, command='sweep', config=config.to_dict(),
                               dataset_hashes=hashes, seeds=default_seeds(config))
        manifest.write(run_dir)
        banner(f"Sweeping s in {list(shifts)} over {config.n_seeds} seeds")
        rows = sweep_shift(config, videos, shifts, held_out=labeled, run_dir=run_dir)
        write_report(rows, run_dir, 'sweep')
        summary = summarize(rows, 'shift')
        write_report(summary, run_dir, 'sweep_summary')
        sweep_curve(summary, run_dir / 'sweep.png')
        manifest.mark_finished(run_dir)

    click.echo(summary.to_string(index=False))


@cli.command()
@click.option('--config', 'config_path', type=click.Path(), default=None)
@click.option('--experts', type=click.Path(), default=None)
@click.option('--held-out', type=click.Path(), default=None, help='Held-out .actions file')
@click.option('--n-seeds', type=int, default=None)
@click.option('--run-id', default=None)
@handle_errors
def labeling(config_path, experts, held_out, n_seeds, run_id):
    """Compare held-out labeling accuracy with the BCO-style reference."""
    config = load_config(config_path, n_seeds=n_seeds)
    require_seeds(config)
    videos, labeled, hashes = load_training_data(config, experts, held_out)
    run_id, run_dir = start_run('labeling', config.to_dict(), run_id)

    with run_lock(run_dir):
        manifest = RunManifest(run_id=run_id, command='labeling', config=config.to_dict(),
                               dataset_hashes=hashes, seeds=default_seeds(config))
        manifest.write(run_dir)
        rows = labeling_table(config, videos, held_out=labeled, run_dir=run_dir)
        write_report(rows, run_dir, 'labeling')
        summary = summarize(rows)
        write_report(summary, run_dir, 'labeling_summary')
        manifest.mark_finished(run_dir)

    click.echo(summary[['variant', 'n_seeds', 'labeling_accuracy_mean', 'labeling_accuracy_std']]
               .to_string(index=False))


@cli.command('inspect-dataset')
@click.argument('path', type=click.Path())
@handle_errors
def inspect_dataset(path):
    """Print header fields and episode statistics of a UPSV file."""
    dataset = load_dataset(path)
    lengths = dataset.episode_lengths
    click.echo(f"{path}")
    click.echo(f"  frames: {dataset.n_frames}")
    click.echo(f"  shape: {dataset.obs_shape}")
    click.echo(f"  episodes: {len(lengths)}")
    click.echo(f"  episode length min/mean/max: {lengths.min()}/{lengths.mean():.1f}/{lengths.max()}")
    click.echo(f"  actions attached: {dataset.actions is not None}")
    click.echo(f"  digest: {dataset_digest(dataset)}")


if __name__ == '__main__':
    cli()
