#!/usr/bin/env python3
"""
UPESV Training Schedule

Runs the iterative schedule:

    pretrain (VSC + LFR on videos) -> clone (UPC on videos)
        -> R x (collect interactions -> ground h on them) -> evaluate

Every phase is tagged; a failure inside one is re-raised as PhaseError with
the path of the last checkpoint that completed cleanly. The interaction
counter never exceeds the budget and equals it exactly at the end.

The environment's per-step info is discarded here: nothing from envsuite
except observations and the episode-end flag reaches training.
"""

import json
import logging
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm, trange

from databank import (
    DatasetFormatError,
    EmptyDatasetError,
    InteractionBuffer,
    VideoDataset,
    iter_transitions,
    sample_observations,
    sample_pairs,
    sample_transitions,
    to_float,
    to_uint8,
)
from envsuite import (
    HELD_OUT_LEVEL_START,
    INTERACTION_LEVEL_START,
    N_ACTIONS,
    EnvSpec,
    LevelState,
    generate_expert_videos,
    make_env,
    observe,
)
from envsuite import step as env_step
from evaluate import EvalReport, assert_disjoint_levels, evaluate_bundle
from losses import AUX_KEYS, LossReport, loss_gap, loss_lfr, loss_upc, loss_vsc
from nets import (
    LatentAction,
    ModelBundle,
    active_code_count,
    ema_update,
    encode,
    label_video,
    policy_act,
    restart_dead_codes,
    save_checkpoint,
    seed_codebook,
    track_code_usage,
    world_forward,
)
from train_config import TrainConfig

logger = logging.getLogger(__name__)

# Independent numpy streams per concern, keyed with the run seed
SAMPLING_STREAM = 0
COLLECT_STREAM = 1

# Dead codes are restarted only during this leading share of pretraining
RESTART_SHARE = 0.75
MIN_ACTIVE_CODES = 3

METRIC_COLUMNS = ['step', 'phase', 'loss_name', 'value'] + [
    f"aux_{key}" for key in sorted({k for keys in AUX_KEYS.values() for k in keys})
]


class Phase(str, Enum):
    PRETRAIN = 'pretrain'
    CLONE = 'clone'
    COLLECT = 'collect'
    GROUND = 'ground'
    DONE = 'done'


class BudgetExceededError(RuntimeError):
    """Raised before a collection round that would pass the interaction budget."""

    def __init__(self, used: int, requested: int, budget: int):
        super().__init__(f"collecting {requested} more interactions after {used} exceeds the budget of {budget}")
        self.used = used
        self.requested = requested
        self.budget = budget


class PhaseError(RuntimeError):
    """A failure inside a phase, tagged with the phase and the last good checkpoint."""

    def __init__(self, phase: Phase, checkpoint: Optional[str], cause: BaseException):
        where = checkpoint or 'none'
        super().__init__(f"{phase.value} phase failed: {cause} (last good checkpoint: {where})")
        self.phase = phase
        self.checkpoint = checkpoint
        self.cause = cause


OPTIMIZER_PHASES = (Phase.PRETRAIN, Phase.CLONE, Phase.GROUND)


@dataclass
class RunState:
    phase: Phase = Phase.PRETRAIN
    steps: Dict[str, int] = field(default_factory=lambda: {p.value: 0 for p in OPTIMIZER_PHASES})
    interactions_used: int = 0
    rounds_done: int = 0
    checkpoints: List[str] = field(default_factory=list)

    @property
    def last_checkpoint(self) -> Optional[str]:
        return self.checkpoints[-1] if self.checkpoints else None

    def to_dict(self) -> Dict[str, object]:
        return {
            'phase': self.phase.value,
            'steps': dict(self.steps),
            'interactions_used': self.interactions_used,
            'rounds_done': self.rounds_done,
            'checkpoints': list(self.checkpoints),
        }


class MetricsLog:
    """
    One row per optimizer step with a fixed column set.

    Rows are appended to the CSV every `flush_every` rows and on flush();
    aux columns a loss does not report stay empty.
    """

    def __init__(self, path: Optional[Path] = None, flush_every: int = 100):
        self.path = Path(path) if path is not None else None
        self.flush_every = flush_every
        self._rows: List[Dict[str, object]] = []
        self._pending = 0
        self._header_written = False
        if self.path is not None and self.path.exists():
            self.path.unlink()

    def __len__(self) -> int:
        return len(self._rows)

    def log(self, step: int, phase: Phase, report: LossReport) -> None:
        row: Dict[str, object] = {'step': step, 'phase': phase.value, 'loss_name': report.name,
                                  'value': report.value}
        row.update({f"aux_{k}": v for k, v in report.aux.items()})
        self._rows.append(row)
        self._pending += 1
        if self._pending >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if self.path is None or self._pending == 0:
            self._pending = 0
            return
        pending = pd.DataFrame(self._rows[-self._pending:], columns=METRIC_COLUMNS)
        pending.to_csv(self.path, mode='a', header=not self._header_written, index=False)
        self._header_written = True
        self._pending = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._rows, columns=METRIC_COLUMNS)

    def final_values(self) -> Dict[str, float]:
        """Last logged value of each loss."""
        final: Dict[str, float] = {}
        for row in self._rows:
            final[row['loss_name']] = row['value']
        return final


class EnvPool:
    """
    n_envs ProcGrid instances stepped one after another.

    A finished episode is replaced by a fresh level drawn from the
    interaction seed range. History frames are zero-padded at episode start.
    """

    def __init__(self, spec: EnvSpec, n_envs: int, history: int = 1,
                 first_level: int = INTERACTION_LEVEL_START):
        self.spec = spec
        self.history = history
        self.next_level = first_level
        self.n_episodes = 0
        self.states: List[LevelState] = [None] * n_envs
        self.obs: List[np.ndarray] = [None] * n_envs
        self.past: List[deque] = [None] * n_envs
        self.episode_ids: List[int] = [0] * n_envs
        for i in range(n_envs):
            self._reset(i)

    def __len__(self) -> int:
        return len(self.states)

    def _reset(self, i: int) -> None:
        state = make_env(self.spec, self.next_level)
        self.next_level += 1
        self.states[i] = state
        self.obs[i] = observe(state)
        self.past[i] = deque([np.zeros_like(self.obs[i])] * self.history, maxlen=self.history)
        self.episode_ids[i] = self.n_episodes
        self.n_episodes += 1

    def _hist(self, i: int) -> np.ndarray:
        if self.history == 0:
            return np.zeros((0,) + self.spec.obs_shape, dtype=np.float32)
        return np.stack(self.past[i])

    def observations(self) -> Tuple[np.ndarray, np.ndarray]:
        """Current (n_envs, C, H, W) observations and (n_envs, k, C, H, W) histories."""
        return np.stack(self.obs), np.stack([self._hist(i) for i in range(len(self))])

    def step(self, i: int, action: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
        """
        Step env i.

        Returns:
            (o_t, o_hist, o_t1, episode_id) for the transition just taken
        """
        o_t, o_hist, episode_id = self.obs[i], self._hist(i), self.episode_ids[i]
        o_t1, done, _ = env_step(self.states[i], action)
        if self.history:
            self.past[i].append(o_t)
        if done:
            self._reset(i)
        else:
            self.obs[i] = o_t1
        return o_t, o_hist, o_t1, episode_id


def make_optimizers(bundle: ModelBundle, config: TrainConfig) -> Dict[str, torch.optim.Adam]:
    """
    One Adam optimizer per objective, owning exactly the parameters that
    objective may update. f_ema belongs to none of them.
    """
    groups = bundle.parameter_groups()
    owned = {
        'VSC': (['f', 'u', 'w'], config.lr_vsc),
        'LFR': (['g', 'codebook', 'G_w'] + (['f'] if config.lfr_stop_target_only else []), config.lr_lfr),
        'GAP': ((['f', 'g', 'h'] if config.variant == 'bco' else ['h']), config.lr_gap),
        'UPC': (['g_pi'], config.lr_upc),
    }
    ema_ids = {id(p) for p in bundle.encoder_ema.parameters()}
    optimizers = {}
    for name, (components, lr) in owned.items():
        params = [p for c in components for p in groups[c]]
        if any(id(p) in ema_ids for p in params):
            raise RuntimeError(f"{name} optimizer would own EMA encoder parameters")
        optimizers[name] = torch.optim.Adam(params, lr=lr)
    return optimizers


@torch.no_grad()
def fit_code_decoder(bundle: ModelBundle, buffer: InteractionBuffer, batch_size: int = 1024) -> np.ndarray:
    """
    Map latent codes to real actions through the world model.

    Each logged transition is assigned the code whose one-step prediction
    G_w(f(o_t), code) lands closest to f(o_t1); each code then takes the
    majority logged action of its transitions. Codes with no transitions
    fall back to the overall majority action.

    Returns:
        (K,) code-to-action table, also written into bundle.code_to_action
    """
    if len(buffer) == 0:
        raise EmptyDatasetError("interaction buffer is empty")
    dtype = bundle.codebook.dtype
    codes = bundle.codebook.detach()
    k = codes.shape[0]
    assigned, logged = [], []
    for batch in iter_transitions(buffer, batch_size):
        batch = batch.to(dtype)
        feat_t = encode(bundle.encoder, batch.o_t)
        target = encode(bundle.encoder, batch.o_t1)
        n = len(feat_t)
        predicted = world_forward(bundle.world_model, feat_t.repeat_interleave(k, 0), codes.repeat(n, 1))
        errors = (predicted.view(n, k, -1) - target.unsqueeze(1)).pow(2).sum(-1)
        assigned.append(errors.argmin(dim=1).numpy())
        logged.append(batch.actions.numpy())

    table = pd.crosstab(pd.Series(np.concatenate(assigned), name='code'),
                        pd.Series(np.concatenate(logged), name='action'))
    table = table.reindex(index=range(k), columns=range(N_ACTIONS), fill_value=0)
    counts = table.to_numpy()
    mapping = counts.argmax(axis=1)
    mapping[counts.sum(axis=1) == 0] = int(counts.sum(axis=0).argmax())
    bundle.code_to_action.copy_(torch.from_numpy(mapping))
    logger.info("Code decoder: %d of %d codes matched to transitions", int((counts.sum(axis=1) > 0).sum()), k)
    return mapping


def configure_determinism(config: TrainConfig) -> None:
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _quiet() -> bool:
    return not logger.isEnabledFor(logging.INFO)


class Trainer:
    """
    Owns the bundle, the four optimizers, the interaction buffer and the
    env pool of one run, and executes the phases in order.
    """

    def __init__(self, config: TrainConfig, videos: VideoDataset, run_dir: Optional[Union[str, Path]] = None):
        spec = config.env_spec()
        if videos.obs_shape != spec.obs_shape:
            raise DatasetFormatError(f"expert videos have observation shape {videos.obs_shape}, "
                                     f"config expects {spec.obs_shape}")
        self.config = config
        self.videos = videos
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.dtype = config.torch_dtype

        self.bundle = ModelBundle.from_config(config)
        self.optimizers = make_optimizers(self.bundle, config)
        self.buffer = InteractionBuffer(config.capacity, spec.obs_shape, config.history)
        self.pool = EnvPool(spec, config.n_parallel_envs, config.history)
        self.rng = np.random.default_rng([config.seed, SAMPLING_STREAM])
        self.generator = torch.Generator().manual_seed(config.seed)
        self.state = RunState()
        self.global_step = 0

        metrics_path = None
        if self.run_dir is not None:
            (self.run_dir / 'checkpoints').mkdir(parents=True, exist_ok=True)
            metrics_path = self.run_dir / 'metrics.csv'
        self.metrics = MetricsLog(metrics_path, config.metrics_flush_every)

    def _apply(self, phase: Phase, report: LossReport) -> None:
        self.bundle.zero_grad(set_to_none=True)
        report.loss.backward()
        self.optimizers[report.name].step()
        self.global_step += 1
        self.state.steps[phase.value] += 1
        self.metrics.log(self.global_step, phase, report)

    @contextmanager
    def _phase(self, phase: Phase) -> Iterator[None]:
        self.state.phase = phase
        try:
            yield
        except PhaseError:
            raise
        except Exception as exc:
            self.metrics.flush()
            raise PhaseError(phase, self.state.last_checkpoint, exc) from exc

    def checkpoint(self, tag: str) -> Optional[Path]:
        self.metrics.flush()
        if self.run_dir is None:
            return None
        path = self.run_dir / 'checkpoints' / f"{tag}.pt"
        save_checkpoint(path, self.bundle, self.config, self.rng.bit_generator.state,
                        run_state=self.state.to_dict())
        self.state.checkpoints.append(str(path))
        return path

    def seed_codebook(self) -> None:
        """Place the codebook on latents of one video batch."""
        config, bundle = self.config, self.bundle
        size = max(config.batch_video, 4 * bundle.n_codes)
        batch = sample_pairs(self.videos, size, config.history, self.rng).to(self.dtype)
        with torch.no_grad():
            latent, _ = label_video(bundle, batch.o_t, batch.o_t1, batch.o_hist)
        seed_codebook(bundle, latent.pre, self.generator)

    def _maintain_codebook(self, latent: LatentAction, update: int, restart_until: int) -> None:
        config = self.config
        track_code_usage(self.bundle, latent.index, config.vq_usage_decay)
        if not config.vq_restart_every or update >= restart_until or (update + 1) % config.vq_restart_every:
            return
        restarted = restart_dead_codes(self.bundle, latent.pre, config.dead_code_threshold, self.generator)
        if restarted:
            logger.debug("Restarted %d dead codes at pretrain update %d", restarted, update + 1)

    def pretrain_on_videos(self) -> None:
        """
        VSC then LFR per update on independent batches; no interactions are used.

        Before the first LFR step the codebook is seeded from latents of a
        video batch. Codes whose usage EMA decays below the dead-code threshold
        are moved onto recent latents every vq_restart_every updates, during
        the leading RESTART_SHARE of pretraining only.
        """
        config, bundle = self.config, self.bundle
        use_vsc = config.variant != 'no_vsc'
        use_lfr = config.variant != 'no_lfr'
        n_updates = config.n_updates_vsc_lfr
        restart_until = int(RESTART_SHARE * n_updates)
        if use_lfr and not bool(bundle.codebook_seeded):
            self.seed_codebook()

        for update in trange(n_updates, desc='pretrain', disable=_quiet()):
            if use_vsc:
                obs = sample_observations(self.videos, config.batch_video, self.rng).to(self.dtype)
                self._apply(Phase.PRETRAIN, loss_vsc(bundle, obs, config.shift, self.generator))
                ema_update(bundle.encoder_ema, bundle.encoder, config.ema_m)
            if use_lfr:
                batch = sample_pairs(self.videos, config.batch_video, config.history, self.rng).to(self.dtype)
                report = loss_lfr(bundle, batch, config.vq_beta, config.lfr_stop_target_only)
                self._apply(Phase.PRETRAIN, report)
                self._maintain_codebook(report.latent, update, restart_until)

        if use_lfr:
            active = active_code_count(bundle, config.dead_code_threshold)
            if active < MIN_ACTIVE_CODES:
                logger.warning("Codebook collapsed: %d of %d codes in use after pretraining",
                               active, bundle.n_codes)
            else:
                logger.info("Pretraining done with %d of %d codes in use", active, bundle.n_codes)

    def clone_latent_policy(self, n_updates: Optional[int] = None) -> None:
        """Train g_pi to reproduce V's latent labels on video observations."""
        config = self.config
        n_updates = config.n_updates_upc if n_updates is None else n_updates
        for _ in trange(n_updates, desc='clone', disable=_quiet()):
            batch = sample_pairs(self.videos, config.batch_video, config.history, self.rng).to(self.dtype)
            self._apply(Phase.CLONE, loss_upc(self.bundle, batch))

    def _behavior_actions(self, obs: np.ndarray, hist: np.ndarray, round_index: int,
                          rng: np.random.Generator) -> np.ndarray:
        n = len(obs)
        explore_prob = 1.0 if round_index == 0 else self.config.epsilon
        explore = rng.random(n) < explore_prob
        random_actions = rng.integers(N_ACTIONS, size=n)
        if explore.all():
            return random_actions
        greedy = policy_act(self.bundle, to_float(to_uint8(obs), self.dtype),
                            to_float(to_uint8(hist), self.dtype)).numpy()
        return np.where(explore, random_actions, greedy)

    def collect_interactions(self, round_index: int) -> int:
        """
        Collect this round's share of the budget.

        Round 0 acts uniformly at random; later rounds act with the current
        policy under epsilon-greedy exploration. Envs are stepped in order,
        update_frequency steps per env per slice.

        Returns:
            Number of transitions appended to the buffer
        """
        config = self.config
        quota = config.round_share(config.interaction_budget, round_index)
        used = self.state.interactions_used
        if used + quota > config.interaction_budget:
            raise BudgetExceededError(used, quota, config.interaction_budget)

        rng = np.random.default_rng([config.seed, COLLECT_STREAM, round_index])
        collected = 0
        with tqdm(total=quota, desc=f"collect r{round_index}", disable=_quiet()) as bar:
            while collected < quota:
                for _ in range(config.update_frequency):
                    if collected >= quota:
                        break
                    obs, hist = self.pool.observations()
                    actions = self._behavior_actions(obs, hist, round_index, rng)[:quota - collected]
                    for i, action in enumerate(actions):
                        o_t, o_hist, o_t1, episode_id = self.pool.step(i, int(action))
                        self.buffer.add(o_t, int(action), o_t1, episode_id, o_hist)
                        collected += 1
                        self.state.interactions_used += 1
                        assert self.state.interactions_used <= config.interaction_budget
                    bar.update(len(actions))
                logger.debug("Round %d slice done: %d/%d interactions", round_index, collected, quota)

        logger.info("Round %d: collected %d interactions (%d/%d used)", round_index, collected,
                    self.state.interactions_used, config.interaction_budget)
        return collected

    def ground_actions(self, round_index: int) -> None:
        """This round's share of GAP updates on interaction transitions."""
        config = self.config
        if len(self.buffer) == 0:
            raise EmptyDatasetError("interaction buffer is empty")
        end_to_end = config.variant == 'bco'
        n_updates = config.round_share(config.n_updates_gap, round_index)
        for _ in trange(n_updates, desc=f"ground r{round_index}", disable=_quiet()):
            batch = sample_transitions(self.buffer, config.batch_transition, self.rng).to(self.dtype)
            self._apply(Phase.GROUND, loss_gap(self.bundle, batch, end_to_end))

    def fit_code_decoder(self) -> np.ndarray:
        return fit_code_decoder(self.bundle, self.buffer)

    def run(self) -> ModelBundle:
        """Execute the schedule for the configured variant."""
        config = self.config
        rounds = config.grounding_rounds

        if config.variant == 'bco':
            for r in range(rounds):
                with self._phase(Phase.COLLECT):
                    self.collect_interactions(r)
                with self._phase(Phase.GROUND):
                    self.ground_actions(r)
                with self._phase(Phase.CLONE):
                    self.clone_latent_policy(config.round_share(config.n_updates_upc, r))
                self.state.rounds_done += 1
                self.checkpoint(f"round{r}")
        else:
            with self._phase(Phase.PRETRAIN):
                self.pretrain_on_videos()
            self.checkpoint('pretrain')
            with self._phase(Phase.CLONE):
                self.clone_latent_policy()
            self.checkpoint('clone')
            for r in range(rounds):
                with self._phase(Phase.COLLECT):
                    self.collect_interactions(r)
                with self._phase(Phase.GROUND):
                    if config.variant == 'no_gap':
                        self.fit_code_decoder()
                    else:
                        self.ground_actions(r)
                self.state.rounds_done += 1
                self.checkpoint(f"round{r}")

        if self.state.interactions_used != config.interaction_budget:
            raise RuntimeError(f"used {self.state.interactions_used} interactions, "
                               f"budget is {config.interaction_budget}")
        self.state.phase = Phase.DONE
        self.metrics.flush()
        return self.bundle


@dataclass
class RunResult:
    bundle: ModelBundle
    checkpoint: Optional[Path]
    metrics: pd.DataFrame
    report: EvalReport
    summary: Dict[str, object]


def held_out_videos(config: TrainConfig) -> VideoDataset:
    """Expert videos with actions on the held-out level range."""
    return generate_expert_videos(config.env_spec(), config.n_held_out_levels, config.held_out_frames,
                                  seed=config.seed, first_level=HELD_OUT_LEVEL_START)


def _summary_text(summary: Dict[str, object]) -> str:
    lines = [f"variant: {summary['variant']}  seed: {summary['seed']}",
             f"interactions used: {summary['interactions_used']}"]
    for name, value in summary['final_losses'].items():
        lines.append(f"final {name} loss: {value:.6f}")
    for name, value in summary['eval'].items():
        lines.append(f"{name}: {value}")
    return '\n'.join(lines) + '\n'


def run_full(config: TrainConfig, videos: VideoDataset, held_out: Optional[VideoDataset] = None,
             run_dir: Optional[Union[str, Path]] = None) -> RunResult:
    """
    Train one variant end to end and evaluate it.

    Writes checkpoints/, checkpoint.pt, metrics.csv, summary.json and
    summary.txt under run_dir when one is given.
    """
    assert_disjoint_levels(config)
    configure_determinism(config)
    if held_out is None:
        held_out = held_out_videos(config)

    trainer = Trainer(config, videos, run_dir)
    logger.info("Training variant %s seed %d", config.variant, config.seed)
    bundle = trainer.run()
    report = evaluate_bundle(bundle, config, held_out)

    summary = {
        'variant': config.variant,
        'seed': config.seed,
        'interactions_used': trainer.state.interactions_used,
        'steps': dict(trainer.state.steps),
        'final_losses': trainer.metrics.final_values(),
        'eval': report.as_dict(),
    }
    checkpoint = None
    if trainer.run_dir is not None:
        checkpoint = trainer.run_dir / 'checkpoint.pt'
        save_checkpoint(checkpoint, bundle, config, trainer.rng.bit_generator.state,
                        run_state=trainer.state.to_dict(), eval=report.as_dict())
        (trainer.run_dir / 'summary.json').write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n')
        (trainer.run_dir / 'summary.txt').write_text(_summary_text(summary))
    return RunResult(bundle=bundle, checkpoint=checkpoint, metrics=trainer.metrics.to_frame(),
                     report=report, summary=summary)
