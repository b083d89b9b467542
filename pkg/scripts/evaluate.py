#!/usr/bin/env python3
"""
Evaluation Metrics

Labeling accuracy against held-out expert actions, latent-code purity,
greedy policy rollouts on unseen levels, and the multi-seed summaries every
reported number goes through.
"""

import logging
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from databank import EmptyDatasetError, VideoDataset, iter_pairs, to_float, to_uint8
from envsuite import (
    EXPERT_LEVEL_START,
    HELD_OUT_LEVEL_START,
    INTERACTION_LEVEL_START,
    EnvSpec,
    LevelState,
    make_env,
    observe,
    oracle_inverse_dynamics,
    step,
)
from nets import ModelBundle, label_actions, policy_act
from train_config import TrainConfig

logger = logging.getLogger(__name__)

MIN_REPORT_SEEDS = 3

PolicyFn = Callable[[LevelState, np.ndarray, np.ndarray], int]


@dataclass
class RolloutResult:
    success_rate: float
    mean_steps: float
    n_episodes: int


@dataclass
class EvalReport:
    """Headline metrics of one trained bundle."""
    labeling_accuracy: float
    latent_purity: float
    policy_success: float
    mean_return_steps: float
    active_codes: int

    def __post_init__(self):
        for name in ('labeling_accuracy', 'latent_purity', 'policy_success'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def assert_disjoint_levels(config: TrainConfig) -> None:
    """Expert, interaction and held-out level-seed ranges must not overlap."""
    ranges = {
        'expert': (EXPERT_LEVEL_START, EXPERT_LEVEL_START + config.n_train_levels),
        'interaction': (INTERACTION_LEVEL_START, INTERACTION_LEVEL_START + config.interaction_budget),
        'held_out': (HELD_OUT_LEVEL_START, HELD_OUT_LEVEL_START + max(config.n_held_out_levels,
                                                                        config.eval_episodes)),
    }
    spans = sorted(ranges.items(), key=lambda item: item[1][0])
    for (name_a, (_, end_a)), (name_b, (start_b, _)) in zip(spans, spans[1:]):
        if end_a > start_b:
            raise ValueError(f"level ranges overlap: {name_a} ends at {end_a}, {name_b} starts at {start_b}")


def _model_dtype(bundle: ModelBundle) -> torch.dtype:
    return bundle.codebook.dtype


def predict_pairs(bundle: ModelBundle, dataset: VideoDataset,
                  batch_size: int = 1024) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Label every valid pair of a dataset.

    Returns:
        (pair start indices, predicted actions, latent code indices)
    """
    dtype = _model_dtype(bundle)
    indices, actions, codes = [], [], []
    for batch in iter_pairs(dataset, batch_size, bundle.history):
        batch = batch.to(dtype)
        predicted, index = label_actions(bundle, batch.o_t, batch.o_t1, batch.o_hist)
        indices.append(batch.indices)
        actions.append(predicted.numpy())
        codes.append(index.numpy())
    if not indices:
        raise EmptyDatasetError("dataset has no valid observation pairs")
    return np.concatenate(indices), np.concatenate(actions), np.concatenate(codes)


def labeling_accuracy(bundle: ModelBundle, held_out: VideoDataset, batch_size: int = 1024) -> float:
    """Fraction of held-out pairs whose predicted action equals the logged expert action."""
    if held_out.actions is None:
        raise ValueError("held-out dataset carries no actions")
    indices, predicted, _ = predict_pairs(bundle, held_out, batch_size)
    return float(np.mean(predicted == held_out.actions[indices]))


def unambiguous_mask(dataset: VideoDataset, indices: np.ndarray) -> np.ndarray:
    """True where the oracle admits exactly one action for the pair."""
    frames = dataset.frames
    return np.array([len(oracle_inverse_dynamics(frames[t], frames[t + 1])) == 1 for t in indices], dtype=bool)


def purity_from_assignments(codes: Sequence[int], actions: Sequence[int]) -> float:
    """
    Majority-vote purity of code assignments.

    Each code is credited with its most frequent true action; purity is the
    fraction of pairs whose code's majority action matches their own.
    """
    if len(codes) == 0:
        raise EmptyDatasetError("no assignments to score")
    table = pd.crosstab(pd.Series(codes, name='code'), pd.Series(actions, name='action'))
    return float(table.max(axis=1).sum() / len(codes))


def latent_purity(bundle: ModelBundle, labeled: VideoDataset, batch_size: int = 1024) -> float:
    """Purity of latent codes against true actions on unambiguous transitions."""
    if labeled.actions is None:
        raise ValueError("labeled dataset carries no actions")
    indices, _, codes = predict_pairs(bundle, labeled, batch_size)
    keep = unambiguous_mask(labeled, indices)
    if not keep.any():
        raise EmptyDatasetError("no unambiguous transitions to score")
    return purity_from_assignments(codes[keep], labeled.actions[indices[keep]])


def rollout(policy: PolicyFn, spec: EnvSpec, level_seeds: Iterable[int], history: int = 1) -> RolloutResult:
    """
    Run one episode per level with the given policy.

    The policy sees the current level state (used only by scripted
    baselines), the observation, and zero-padded history frames.
    """
    successes: List[bool] = []
    steps: List[int] = []
    for level_seed in level_seeds:
        state = make_env(spec, level_seed)
        obs = observe(state)
        past = deque([np.zeros_like(obs)] * history, maxlen=history) if history else deque()
        while not state.done:
            hist = np.stack(past) if history else np.zeros((0,) + obs.shape, dtype=obs.dtype)
            action = policy(state, obs, hist)
            if history:
                past.append(obs)
            obs, _, info = step(state, action)
        successes.append(bool(info['success']))
        steps.append(state.step_count)
    if not successes:
        raise ValueError("no levels to roll out")
    return RolloutResult(success_rate=float(np.mean(successes)), mean_steps=float(np.mean(steps)),
                         n_episodes=len(successes))


def bundle_policy(bundle: ModelBundle) -> PolicyFn:
    """Greedy policy of a bundle, seeing observations as stored in the data bank."""
    dtype = _model_dtype(bundle)

    def policy(state: LevelState, obs: np.ndarray, hist: np.ndarray) -> int:
        o = to_float(to_uint8(obs)[None], dtype)
        h = to_float(to_uint8(hist)[None], dtype)
        return int(policy_act(bundle, o, h)[0])

    return policy


def rollout_policy(bundle: ModelBundle, spec: EnvSpec, n_episodes: int,
                   first_level: int = HELD_OUT_LEVEL_START) -> RolloutResult:
    """Greedy rollouts of the deployed policy on unseen levels."""
    seeds = range(first_level, first_level + n_episodes)
    return rollout(bundle_policy(bundle), spec, tqdm(seeds, desc='rollouts', leave=False,
                                                     disable=not logger.isEnabledFor(logging.INFO)),
                   history=bundle.history)


def evaluate_bundle(bundle: ModelBundle, config: TrainConfig, held_out: VideoDataset) -> EvalReport:
    """Every headline metric of a trained bundle on held-out data and levels."""
    indices, predicted, codes = predict_pairs(bundle, held_out)
    truth = held_out.actions[indices]
    keep = unambiguous_mask(held_out, indices)
    result = rollout_policy(bundle, config.env_spec(), config.eval_episodes)
    report = EvalReport(
        labeling_accuracy=float(np.mean(predicted == truth)),
        latent_purity=purity_from_assignments(codes[keep], truth[keep]),
        policy_success=result.success_rate,
        mean_return_steps=result.mean_steps,
        active_codes=int(np.unique(codes).size),
    )
    logger.info("Eval: accuracy %.3f purity %.3f success %.3f",
                report.labeling_accuracy, report.latent_purity, report.policy_success)
    return report


def summarize_rows(rows: pd.DataFrame, group_col: str, metrics: Sequence[str]) -> pd.DataFrame:
    """
    Mean and std over seeds per group; fewer than three seeds is refused.

    Returns:
        One row per group with n_seeds and <metric>_mean / <metric>_std columns
    """
    counts = rows.groupby(group_col, sort=False)['seed'].nunique()
    short = counts[counts < MIN_REPORT_SEEDS]
    if not short.empty:
        raise ValueError(f"refusing to report fewer than {MIN_REPORT_SEEDS} seeds: {short.to_dict()}")
    grouped = rows.groupby(group_col, sort=False)[list(metrics)]
    summary = grouped.agg(['mean', 'std'])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary.insert(0, 'n_seeds', counts)
    return summary.reset_index()


def write_report(table: pd.DataFrame, run_dir: Union[str, Path], name: str) -> Path:
    """Write a report table as {run_dir}/{name}.csv."""
    path = Path(run_dir) / f"{name}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    return path
