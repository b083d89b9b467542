#!/usr/bin/env python3
"""
Experiment Harness

Multi-seed ablations, the shift-distance sweep and the labeling-accuracy
comparison against the BCO-style reference. Each harness trains one run per
(setting, seed), collects one row per run and summarizes mean and std over
seeds.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from databank import VideoDataset
from evaluate import summarize_rows
from train_config import TrainConfig
from trainer import held_out_videos, run_full

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ('full', 'no_vsc', 'no_lfr', 'no_gap')
DEFAULT_SHIFTS = (0, 1, 2, 4)
REPORT_METRICS = ('labeling_accuracy', 'latent_purity', 'policy_success', 'mean_return_steps')


def default_seeds(config: TrainConfig) -> List[int]:
    return [config.seed + i for i in range(config.n_seeds)]


def _row(config: TrainConfig, videos: VideoDataset, held_out: VideoDataset,
         run_dir: Optional[Path], label: str) -> Dict[str, object]:
    sub_dir = run_dir / f"{label}-seed{config.seed}" if run_dir is not None else None
    result = run_full(config, videos, held_out, sub_dir)
    row: Dict[str, object] = {'variant': config.variant, 'shift': config.shift, 'seed': config.seed,
                              'interactions_used': result.summary['interactions_used']}
    row.update(result.report.as_dict())
    return row


def ablate(config: TrainConfig, variant: str, videos: VideoDataset, seeds: Optional[Sequence[int]] = None,
           held_out: Optional[VideoDataset] = None, run_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """
    Train one ablation variant over seeds.

    Returns:
        One row per seed: variant, shift, seed, interactions_used and the
        EvalReport metrics
    """
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}, expected one of {ABLATION_VARIANTS}")
    seeds = list(seeds) if seeds is not None else default_seeds(config)
    held_out = held_out if held_out is not None else held_out_videos(config)
    run_dir = Path(run_dir) if run_dir is not None else None
    rows = []
    for seed in seeds:
        logger.info("Ablation %s seed %d", variant, seed)
        rows.append(_row(config.with_overrides(variant=variant, seed=seed), videos, held_out, run_dir, variant))
    return pd.DataFrame(rows)


def ablation_table(config: TrainConfig, videos: VideoDataset, variants: Sequence[str] = ABLATION_VARIANTS,
                   seeds: Optional[Sequence[int]] = None,
                   held_out: Optional[VideoDataset] = None, run_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """
    Rows for every variant and seed; every variant sees the same held-out set and budget.

    The held-out set is generated from the config when none is given.
    """
    held_out = held_out if held_out is not None else held_out_videos(config)
    frames = [ablate(config, v, videos, seeds, held_out, run_dir) for v in variants]
    return pd.concat(frames, ignore_index=True)


def sweep_shift(config: TrainConfig, videos: VideoDataset, s_values: Sequence[int] = DEFAULT_SHIFTS,
                seeds: Optional[Sequence[int]] = None,
                held_out: Optional[VideoDataset] = None, run_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Full runs at each maximum shift distance; one row per (shift, seed)."""
    # Reject an invalid shift before any run starts
    for s in s_values:
        config.with_overrides(shift=s)
    seeds = list(seeds) if seeds is not None else default_seeds(config)
    held_out = held_out if held_out is not None else held_out_videos(config)
    run_dir = Path(run_dir) if run_dir is not None else None
    rows = []
    for s in s_values:
        for seed in seeds:
            logger.info("Sweep s=%d seed %d", s, seed)
            run_config = config.with_overrides(variant='full', shift=s, seed=seed)
            rows.append(_row(run_config, videos, held_out, run_dir, f"shift{s}"))
    return pd.DataFrame(rows)


def labeling_table(config: TrainConfig, videos: VideoDataset, seeds: Optional[Sequence[int]] = None,
                   held_out: Optional[VideoDataset] = None, run_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Held-out labeling accuracy of the full method against the BCO-style reference."""
    seeds = list(seeds) if seeds is not None else default_seeds(config)
    held_out = held_out if held_out is not None else held_out_videos(config)
    run_dir = Path(run_dir) if run_dir is not None else None
    rows = []
    for variant in ('full', 'bco'):
        for seed in seeds:
            rows.append(_row(config.with_overrides(variant=variant, seed=seed), videos, held_out, run_dir, variant))
    return pd.DataFrame(rows)


def summarize(rows: pd.DataFrame, group_col: str = 'variant') -> pd.DataFrame:
    """Mean and std per group over seeds."""
    return summarize_rows(rows, group_col, REPORT_METRICS)
