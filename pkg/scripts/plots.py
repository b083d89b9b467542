#!/usr/bin/env python3
"""
Report Plots

Loss curves, ablation bars and the shift-sweep curve. Each plot is a pure
function of a CSV table: the Agg backend is used and no timestamp or
software metadata is written, so the same table always gives the same file.

Usage:
    python plots.py runs/<run_id>     # redraw every plot of a run directory
"""

import logging
from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PNG_METADATA = {'Software': None}
SMOOTHING_WINDOW = 50


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    logger.debug("Wrote %s", path)
    return path


def loss_curves(metrics: pd.DataFrame, path: PathLike) -> Path:
    """One panel per loss: raw value and a rolling mean against the global step."""
    names = list(dict.fromkeys(metrics['loss_name']))
    if not names:
        raise ValueError("metrics table has no rows")
    fig, axes = plt.subplots(len(names), 1, figsize=(7, 2.4 * len(names)), squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        rows = metrics[metrics['loss_name'] == name]
        ax.plot(rows['step'], rows['value'], color='0.75', linewidth=0.6)
        smooth = rows['value'].rolling(SMOOTHING_WINDOW, min_periods=1).mean()
        ax.plot(rows['step'], smooth, color='C0', linewidth=1.2)
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel('optimizer step')
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(summary: pd.DataFrame, path: PathLike, metric: str = 'labeling_accuracy') -> Path:
    """Mean +/- std bars per variant from a summarize() table."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(summary['variant'], summary[f"{metric}_mean"], yerr=summary[f"{metric}_std"].fillna(0.0),
           color='C0', capsize=4)
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"{metric} by variant (n={int(summary['n_seeds'].min())} seeds)")
    fig.tight_layout()
    return _save(fig, path)


def sweep_curve(summary: pd.DataFrame, path: PathLike, metric: str = 'labeling_accuracy') -> Path:
    """Mean +/- std of a metric against the maximum shift distance."""
    summary = summary.sort_values('shift')
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(summary['shift'], summary[f"{metric}_mean"], yerr=summary[f"{metric}_std"].fillna(0.0),
                marker='o', capsize=4)
    ax.set_xticks(summary['shift'])
    ax.set_xlabel('maximum shift distance s')
    ax.set_ylabel(metric)
    fig.tight_layout()
    return _save(fig, path)


if __name__ == '__main__':
    import sys

    from experiments import summarize

    for arg in sys.argv[1:]:
        run_dir = Path(arg)
        if (run_dir / 'metrics.csv').exists():
            print(loss_curves(pd.read_csv(run_dir / 'metrics.csv'), run_dir / 'loss_curves.png'))
        if (run_dir / 'ablation.csv').exists():
            print(ablation_bars(summarize(pd.read_csv(run_dir / 'ablation.csv')), run_dir / 'ablation.png'))
        if (run_dir / 'sweep.csv').exists():
            print(sweep_curve(summarize(pd.read_csv(run_dir / 'sweep.csv'), 'shift'), run_dir / 'sweep.png'))
