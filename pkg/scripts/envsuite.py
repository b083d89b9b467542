#!/usr/bin/env python3
"""
ProcGrid Environment Suite

Seeded, procedurally generated gridworld levels used as the desk-scale
stand-in for a visual control benchmark. Every level has its own wall layout,
goal, optional hazard and a fixed per-level texture, so a learner has to
generalize across layouts and visual styles.

Provides:
- make_env / step / observe: reward-free level dynamics
- expert_action: BFS shortest-path expert
- oracle_inverse_dynamics: exact set of actions consistent with a transition
- generate_expert_videos: action-free expert dataset plus hidden action log

Usage:
    python envsuite.py            # print a level and an expert rollout
"""

import hashlib
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from databank import NO_ACTION, VideoDataset, to_uint8

logger = logging.getLogger(__name__)

N_ACTIONS = 5
NOOP, UP, DOWN, LEFT, RIGHT = range(N_ACTIONS)
ACTION_NAMES = ('noop', 'up', 'down', 'left', 'right')
ACTION_DELTAS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))
MOVE_ACTIONS = (UP, DOWN, LEFT, RIGHT)

# Occupancy channels; texture channels follow
AGENT, WALL, GOAL, HAZARD = range(4)
N_OCCUPANCY_CHANNELS = 4

MAX_GENERATION_ATTEMPTS = 64
MAX_SKIPPED_EPISODES = 1_000

# Level-seed ranges keep expert, interaction and evaluation levels apart
EXPERT_LEVEL_START = 0
INTERACTION_LEVEL_START = 500_000
HELD_OUT_LEVEL_START = 1_000_000

_LAYOUT_STREAM = 0
_TEXTURE_STREAM = 1
_START_STREAM = 2

Cell = Tuple[int, int]


class LevelGenerationError(RuntimeError):
    """Raised when no playable level is found within the retry limit."""


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping a level whose episode already ended."""


class InvalidTransitionError(ValueError):
    """Raised when two observations cannot be consecutive frames of a level."""


@dataclass(frozen=True)
class EnvSpec:
    """Shape and generation parameters of a ProcGrid family."""
    grid_size: int = 8
    wall_density: float = 0.2
    texture_channels: int = 1
    hazard_prob: float = 0.5
    min_goal_distance: Optional[int] = None
    max_steps: Optional[int] = None
    obs_height: Optional[int] = None
    obs_width: Optional[int] = None
    n_actions: int = N_ACTIONS

    def __post_init__(self):
        if self.min_goal_distance is None:
            object.__setattr__(self, 'min_goal_distance', max(1, self.grid_size // 2))
        if self.max_steps is None:
            object.__setattr__(self, 'max_steps', 4 * self.grid_size)
        if self.obs_height is None:
            object.__setattr__(self, 'obs_height', self.grid_size)
        if self.obs_width is None:
            object.__setattr__(self, 'obs_width', self.grid_size)

        if self.grid_size < 2:
            raise ValueError(f"grid_size must be >= 2, got {self.grid_size}")
        if self.n_actions != N_ACTIONS:
            raise ValueError(f"n_actions is fixed at {N_ACTIONS}, got {self.n_actions}")
        if not 0.0 <= self.wall_density < 1.0:
            raise ValueError(f"wall_density must be in [0, 1), got {self.wall_density}")
        if not 0.0 <= self.hazard_prob <= 1.0:
            raise ValueError(f"hazard_prob must be in [0, 1], got {self.hazard_prob}")
        if self.texture_channels < 0:
            raise ValueError(f"texture_channels must be >= 0, got {self.texture_channels}")
        if self.max_steps <= 0:
            raise ValueError(f"max_steps must be > 0, got {self.max_steps}")
        if self.min_goal_distance < 1:
            raise ValueError(f"min_goal_distance must be >= 1, got {self.min_goal_distance}")
        if (self.obs_height, self.obs_width) != (self.grid_size, self.grid_size):
            raise ValueError("obs_height/obs_width must equal grid_size (one pixel per cell)")

    @property
    def obs_channels(self) -> int:
        return N_OCCUPANCY_CHANNELS + self.texture_channels

    @property
    def obs_shape(self) -> Tuple[int, int, int]:
        return (self.obs_channels, self.obs_height, self.obs_width)

    def digest(self) -> str:
        """Stable hash of the spec, recorded in dataset metadata."""
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


ENV_PRESETS: Dict[str, EnvSpec] = {
    'procgrid8': EnvSpec(grid_size=8),
    'procgrid12': EnvSpec(grid_size=12),
    'procgrid16': EnvSpec(grid_size=16),
}


@dataclass
class LevelState:
    """Mutable state of one level; a single instance is not safe to step concurrently."""
    spec: EnvSpec
    level_seed: int
    walls: np.ndarray
    goal_pos: Cell
    hazard_pos: Optional[Cell]
    texture: np.ndarray
    agent_pos: Cell
    step_count: int = 0
    done: bool = False
    success: bool = False
    goal_distances: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


def _stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def level_texture(spec: EnvSpec, level_seed: int) -> np.ndarray:
    """Per-level texture, a pure function of the level seed."""
    rng = _stream(level_seed, _TEXTURE_STREAM)
    shape = (spec.texture_channels, spec.grid_size, spec.grid_size)
    return rng.random(shape).astype(np.float32)


def bfs_distances(walls: np.ndarray, source: Cell,
                  blocked: Optional[Cell] = None) -> np.ndarray:
    """
    Shortest-path distances from source over free cells.

    Args:
        walls: Boolean wall grid
        source: Start cell
        blocked: Optional extra impassable cell (the hazard)

    Returns:
        Integer grid of distances, -1 where unreachable
    """
    size_r, size_c = walls.shape
    dist = np.full(walls.shape, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ACTION_DELTAS[1:]:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < size_r and 0 <= nc < size_c):
                continue
            if walls[nr, nc] or dist[nr, nc] >= 0 or (nr, nc) == blocked:
                continue
            dist[nr, nc] = dist[r, c] + 1
            queue.append((nr, nc))
    return dist


def _start_candidates(spec: EnvSpec, free: np.ndarray, dist: np.ndarray,
                      goal: Cell, hazard: Optional[Cell]) -> List[Cell]:
    g = spec.grid_size
    candidates = []
    for flat in free:
        cell = divmod(int(flat), g)
        if cell == goal or cell == hazard:
            continue
        if spec.min_goal_distance <= dist[cell] <= spec.max_steps:
            candidates.append(cell)
    return candidates


def make_env(spec: EnvSpec, level_seed: int, start_seed: Optional[int] = None) -> LevelState:
    """
    Generate a playable level.

    Args:
        spec: Environment family
        level_seed: Seed of the layout, goal, hazard and texture
        start_seed: Optional seed redrawing the agent start among valid cells

    Returns:
        Fresh LevelState; identical arguments give bitwise-identical levels
    """
    if level_seed < 0:
        raise ValueError(f"level_seed must be >= 0, got {level_seed}")

    g = spec.grid_size
    n_cells = g * g
    n_walls = int(round(spec.wall_density * n_cells))
    rng = _stream(level_seed, _LAYOUT_STREAM)

    for _ in range(MAX_GENERATION_ATTEMPTS):
        order = rng.permutation(n_cells)
        hazard_roll = rng.random()
        free = order[n_walls:]
        if len(free) < 2:
            continue

        walls = np.zeros(n_cells, dtype=bool)
        walls[order[:n_walls]] = True
        walls = walls.reshape(g, g)

        goal = divmod(int(free[0]), g)
        hazard = None
        if hazard_roll < spec.hazard_prob and len(free) >= 3:
            hazard = divmod(int(free[1]), g)

        dist = bfs_distances(walls, goal, blocked=hazard)
        candidates = _start_candidates(spec, free, dist, goal, hazard)
        if not candidates:
            continue

        agent = candidates[0]
        if start_seed is not None:
            pick = _stream(level_seed, _START_STREAM, start_seed).integers(len(candidates))
            agent = candidates[int(pick)]

        return LevelState(
            spec=spec,
            level_seed=level_seed,
            walls=walls,
            goal_pos=goal,
            hazard_pos=hazard,
            texture=level_texture(spec, level_seed),
            agent_pos=agent,
            goal_distances=dist,
        )

    raise LevelGenerationError(
        f"No playable level for seed {level_seed} after {MAX_GENERATION_ATTEMPTS} attempts "
        f"(grid {g}x{g}, wall_density {spec.wall_density})"
    )


def observe(state: LevelState) -> np.ndarray:
    """Render the (C, H, W) observation with values in [0, 1]."""
    spec = state.spec
    obs = np.zeros(spec.obs_shape, dtype=np.float32)
    obs[AGENT][state.agent_pos] = 1.0
    obs[WALL] = state.walls
    obs[GOAL][state.goal_pos] = 1.0
    if state.hazard_pos is not None:
        obs[HAZARD][state.hazard_pos] = 1.0
    obs[N_OCCUPANCY_CHANNELS:] = state.texture
    return obs


def _moved(walls: np.ndarray, pos: Cell, action: int) -> Cell:
    dr, dc = ACTION_DELTAS[action]
    r, c = pos[0] + dr, pos[1] + dc
    if not (0 <= r < walls.shape[0] and 0 <= c < walls.shape[1]) or walls[r, c]:
        return pos
    return (r, c)


def step(state: LevelState, action: int) -> Tuple[np.ndarray, bool, Dict[str, object]]:
    """
    Advance the level by one action.

    There is no reward on this interface; info['success'] exists for
    evaluation only.

    Returns:
        (observation, done, info)
    """
    if state.done:
        raise EpisodeFinishedError(f"Episode on level {state.level_seed} already finished")
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"action must be in [0, {N_ACTIONS}), got {action}")

    state.agent_pos = _moved(state.walls, state.agent_pos, int(action))
    state.step_count += 1

    reached_goal = state.agent_pos == state.goal_pos
    hit_hazard = state.agent_pos == state.hazard_pos
    state.success = reached_goal
    state.done = reached_goal or hit_hazard or state.step_count >= state.spec.max_steps

    info = {
        'success': reached_goal,
        'hazard': hit_hazard,
        'step_count': state.step_count,
        'level_seed': state.level_seed,
    }
    return observe(state), state.done, info


def expert_action(state: LevelState) -> int:
    """
    First move of a BFS shortest path to the goal.

    Ties are broken by action index (up < down < left < right); the expert
    never no-ops and never bumps into a wall.
    """
    if state.goal_distances is None:
        state.goal_distances = bfs_distances(state.walls, state.goal_pos, blocked=state.hazard_pos)
    dist = state.goal_distances
    d = dist[state.agent_pos]
    if d < 0:
        raise ValueError(f"No path to goal on level {state.level_seed}")
    if d == 0:
        raise ValueError(f"Agent already on goal on level {state.level_seed}")

    for action in MOVE_ACTIONS:
        nxt = _moved(state.walls, state.agent_pos, action)
        if nxt != state.agent_pos and dist[nxt] == d - 1:
            return action
    raise ValueError(f"Inconsistent distance map on level {state.level_seed}")


def _agent_cell(obs: np.ndarray) -> Cell:
    cells = np.argwhere(obs[AGENT] > 0.5)
    if len(cells) != 1:
        raise InvalidTransitionError(f"Expected exactly one agent cell, found {len(cells)}")
    return int(cells[0][0]), int(cells[0][1])


def oracle_inverse_dynamics(o_t: np.ndarray, o_t1: np.ndarray) -> FrozenSet[int]:
    """
    Exact set of actions consistent with a transition.

    A move gives a singleton; staying in place gives no-op plus every action
    that would bump into a wall or the border.
    """
    o_t = np.asarray(o_t)
    o_t1 = np.asarray(o_t1)
    if o_t.shape != o_t1.shape or o_t.ndim != 3 or o_t.shape[0] < N_OCCUPANCY_CHANNELS:
        raise InvalidTransitionError(f"Observation shapes {o_t.shape} and {o_t1.shape} do not match")
    if not np.array_equal(o_t[WALL:], o_t1[WALL:]):
        raise InvalidTransitionError("Static channels differ between observations")

    r0, c0 = _agent_cell(o_t)
    r1, c1 = _agent_cell(o_t1)
    delta = (r1 - r0, c1 - c0)
    if abs(delta[0]) + abs(delta[1]) > 1:
        raise InvalidTransitionError(f"Agent displacement {delta} exceeds one cell")
    if delta != (0, 0):
        return frozenset({ACTION_DELTAS.index(delta)})

    walls = o_t[WALL] > 0.5
    bumps = {a for a in MOVE_ACTIONS if _moved(walls, (r0, c0), a) == (r0, c0)}
    return frozenset({NOOP} | bumps)


def expert_policy(state: LevelState, obs: np.ndarray, hist: np.ndarray) -> int:
    return expert_action(state)


def make_random_policy(seed: int):
    """Uniform random policy over all actions, seeded."""
    rng = np.random.default_rng(seed)

    def policy(state: LevelState, obs: np.ndarray, hist: np.ndarray) -> int:
        return int(rng.integers(N_ACTIONS))

    return policy


def rollout_expert(state: LevelState) -> Tuple[List[np.ndarray], List[int], bool]:
    """Roll the expert to termination; returns frames, actions and success."""
    frames = [observe(state)]
    actions = []
    while not state.done:
        action = expert_action(state)
        obs, _, _ = step(state, action)
        frames.append(obs)
        actions.append(action)
    return frames, actions, state.success


def generate_expert_videos(spec: EnvSpec, n_levels: int, total_frames: int, seed: int,
                           first_level: int = EXPERT_LEVEL_START) -> VideoDataset:
    """
    Roll the expert over seeded levels until total_frames frames are stored.

    Levels are visited round-robin; each episode redraws the agent start from
    a stream keyed by (seed, episode index). The last episode may be truncated
    so the frame count is exact. True actions are kept in dataset.actions,
    aligned with frames, NO_ACTION marking the last frame of each episode.

    Args:
        spec: Environment family
        n_levels: Number of distinct level layouts
        total_frames: Exact number of frames to store
        seed: Seed for episode start positions
        first_level: First level seed of the range

    Returns:
        VideoDataset with hidden actions attached

    Raises:
        LevelGenerationError: no episode of the family fits the final frames exactly
    """
    if n_levels < 1:
        raise ValueError(f"n_levels must be >= 1, got {n_levels}")
    if total_frames < 2:
        raise ValueError(f"total_frames must be >= 2, got {total_frames}")

    frames: List[np.ndarray] = []
    actions: List[int] = []
    episode_starts: List[int] = []
    episode = 0
    complete = 0
    skipped = 0

    with tqdm(total=total_frames, desc='expert frames', disable=not logger.isEnabledFor(logging.INFO)) as bar:
        while len(frames) < total_frames:
            level_seed = first_level + episode % n_levels
            start_seed = int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])
            episode += 1

            state = make_env(spec, level_seed, start_seed=start_seed)
            ep_frames, ep_actions, success = rollout_expert(state)
            if not success:
                raise RuntimeError(f"Expert failed on level {level_seed}")

            remaining = total_frames - len(frames)
            take = min(len(ep_frames), remaining)
            if remaining - take == 1:
                if take <= 2:
                    # A 2-frame episode cannot leave a valid remainder of 1
                    skipped += 1
                    if skipped > MAX_SKIPPED_EPISODES:
                        raise LevelGenerationError(
                            f"no episode fits the last {remaining} frames after {skipped} tries; "
                            f"choose another total_frames")
                    continue
                take -= 1
            skipped = 0
            if take == len(ep_frames):
                complete += 1

            episode_starts.append(len(frames))
            frames.extend(to_uint8(f) for f in ep_frames[:take])
            actions.extend(ep_actions[:take - 1])
            actions.append(NO_ACTION)
            bar.update(take)

    logger.info("Generated %d frames in %d episodes (%d complete) over %d levels",
                len(frames), len(episode_starts), complete, n_levels)

    meta = {
        'spec': asdict(spec),
        'spec_digest': spec.digest(),
        'seed': seed,
        'n_levels': n_levels,
        'total_frames': total_frames,
        'first_level': first_level,
        'history_padding': 'zeros',
    }
    return VideoDataset(
        frames=np.stack(frames),
        episode_starts=np.asarray(episode_starts, dtype=np.int64),
        meta=meta,
        actions=np.asarray(actions, dtype=np.uint8),
    )


if __name__ == '__main__':
    spec = ENV_PRESETS['procgrid8']
    state = make_env(spec, level_seed=7)
    symbols = np.full(state.walls.shape, '.', dtype='<U1')
    symbols[state.walls] = '#'
    symbols[state.goal_pos] = 'G'
    if state.hazard_pos is not None:
        symbols[state.hazard_pos] = 'X'
    symbols[state.agent_pos] = 'A'

    print('ProcGrid level 7')
    print('=' * 20)
    for row in symbols:
        print(' '.join(row))

    _, expert_actions, success = rollout_expert(state)
    print(f"\nExpert: {[ACTION_NAMES[a] for a in expert_actions]}")
    print(f"Success: {success}")
