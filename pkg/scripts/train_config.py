#!/usr/bin/env python3
"""
Training Configuration

Flat, strictly validated configuration for a UPESV run. Files are JSON
objects whose keys are exactly the TrainConfig fields; unknown keys and
out-of-range values are rejected with the offending field named.

Usage:
    python train_config.py                 # print the desk-scale defaults
    python train_config.py my_config.json  # validate a config file
"""

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union, get_type_hints

import torch

from envsuite import EnvSpec

# Update counts used at full scale; desk defaults multiply by update_scale
FULL_SCALE_UPDATES = {
    'vsc_lfr': 60_000,
    'upc': 50_000,
    'gap': 3_000,
}

# Scaled-down runs never drop below these counts (capped at the full-scale count)
DESK_UPDATE_FLOORS = {
    'gap': 1_000,
}

VARIANTS = ('full', 'no_vsc', 'no_lfr', 'no_gap', 'bco')
PRECISIONS = {'float32': torch.float32, 'float64': torch.float64}


class ConfigError(ValueError):
    """Raised for an invalid configuration field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass(frozen=True)
class TrainConfig:
    # Environment
    grid_size: int = 8
    wall_density: float = 0.2
    texture_channels: int = 1
    hazard_prob: float = 0.5
    min_goal_distance: Optional[int] = None

    # Data
    n_train_levels: int = 200
    expert_frames: int = 100_000
    n_held_out_levels: int = 50
    held_out_frames: int = 5_000
    eval_episodes: int = 100

    # Batches and learning rates
    batch_video: int = 128
    batch_transition: int = 512
    lr_vsc: float = 3e-5
    lr_lfr: float = 3e-4
    lr_gap: float = 1e-3
    lr_upc: float = 2e-4

    # Schedule
    update_scale: float = 0.1
    updates_vsc_lfr: Optional[int] = None
    updates_upc: Optional[int] = None
    updates_gap: Optional[int] = None
    shift: int = 1
    ema_m: float = 0.05
    n_parallel_envs: int = 8
    update_frequency: int = 64
    interaction_budget: int = 20_000
    grounding_rounds: int = 4
    epsilon: float = 0.05
    history: int = 1
    buffer_capacity: Optional[int] = None

    # Architecture
    d_f: int = 128
    d_z: int = 16
    n_codes: int = 16
    vq_beta: float = 0.25
    vq_restart_every: int = 100
    vq_dead_fraction: float = 0.125
    vq_usage_decay: float = 0.99
    conv_channels: int = 32
    hidden: int = 256

    # Variants
    variant: str = 'full'
    lfr_stop_target_only: bool = False

    # Runtime
    seed: int = 0
    n_seeds: int = 3
    deterministic: bool = False
    precision: str = 'float32'
    metrics_flush_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Check every field; raises ConfigError naming the first violation."""
        hints = get_type_hints(type(self))
        for f in fields(self):
            _check_type(f.name, getattr(self, f.name), hints[f.name])

        positive = [
            'grid_size', 'n_train_levels', 'expert_frames', 'n_held_out_levels', 'held_out_frames',
            'eval_episodes', 'batch_transition', 'n_parallel_envs', 'update_frequency',
            'interaction_budget', 'grounding_rounds', 'd_f', 'd_z', 'conv_channels', 'hidden',
            'n_seeds', 'metrics_flush_every',
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(name, f"must be > 0, got {getattr(self, name)}")
        for name in ('updates_vsc_lfr', 'updates_upc', 'updates_gap', 'buffer_capacity', 'min_goal_distance'):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(name, f"must be > 0 when set, got {value}")
        for name in ('lr_vsc', 'lr_lfr', 'lr_gap', 'lr_upc', 'update_scale'):
            if getattr(self, name) <= 0:
                raise ConfigError(name, f"must be > 0, got {getattr(self, name)}")

        if self.batch_video < 2:
            raise ConfigError('batch_video', f"must be >= 2 for in-batch negatives, got {self.batch_video}")
        if not 0.0 <= self.wall_density < 1.0:
            raise ConfigError('wall_density', f"must be in [0, 1), got {self.wall_density}")
        if not 0.0 <= self.hazard_prob <= 1.0:
            raise ConfigError('hazard_prob', f"must be in [0, 1], got {self.hazard_prob}")
        if self.texture_channels < 0:
            raise ConfigError('texture_channels', f"must be >= 0, got {self.texture_channels}")
        for name in ('ema_m', 'epsilon'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, f"must be in [0, 1], got {getattr(self, name)}")
        if not 0 <= self.shift < self.grid_size:
            raise ConfigError('shift', f"must be in [0, grid_size), got {self.shift}")
        if self.history < 0:
            raise ConfigError('history', f"must be >= 0, got {self.history}")
        if self.n_codes < 5:
            raise ConfigError('n_codes', f"must be >= the 5 actions, got {self.n_codes}")
        if self.vq_beta < 0:
            raise ConfigError('vq_beta', f"must be >= 0, got {self.vq_beta}")
        if self.vq_restart_every < 0:
            raise ConfigError('vq_restart_every',
                              f"must be >= 0 (0 disables restarts), got {self.vq_restart_every}")
        if not 0.0 < self.vq_dead_fraction <= 1.0:
            raise ConfigError('vq_dead_fraction', f"must be in (0, 1], got {self.vq_dead_fraction}")
        if not 0.0 <= self.vq_usage_decay < 1.0:
            raise ConfigError('vq_usage_decay', f"must be in [0, 1), got {self.vq_usage_decay}")
        if self.grounding_rounds > self.interaction_budget:
            raise ConfigError('grounding_rounds', "must not exceed interaction_budget")
        if self.variant not in VARIANTS:
            raise ConfigError('variant', f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError('precision', f"must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.seed < 0:
            raise ConfigError('seed', f"must be >= 0, got {self.seed}")

    @property
    def n_updates_vsc_lfr(self) -> int:
        return self._updates('vsc_lfr', self.updates_vsc_lfr)

    @property
    def n_updates_upc(self) -> int:
        return self._updates('upc', self.updates_upc)

    @property
    def n_updates_gap(self) -> int:
        return self._updates('gap', self.updates_gap)

    def _updates(self, phase: str, override: Optional[int]) -> int:
        if override is not None:
            return override
        full_scale = FULL_SCALE_UPDATES[phase]
        floor = min(DESK_UPDATE_FLOORS.get(phase, 1), full_scale)
        return max(floor, int(round(full_scale * self.update_scale)))

    @property
    def dead_code_threshold(self) -> float:
        """Usage EMA below which a code counts as dead: vq_dead_fraction of a uniform share."""
        return self.vq_dead_fraction / self.n_codes

    @property
    def capacity(self) -> int:
        return self.buffer_capacity or self.interaction_budget

    @property
    def torch_dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def env_spec(self) -> EnvSpec:
        return EnvSpec(
            grid_size=self.grid_size,
            wall_density=self.wall_density,
            texture_channels=self.texture_channels,
            hazard_prob=self.hazard_prob,
            min_goal_distance=self.min_goal_distance,
        )

    def round_share(self, total: int, round_index: int) -> int:
        """Even split of total over grounding rounds, remainder on the last round."""
        base = total // self.grounding_rounds
        if round_index == self.grounding_rounds - 1:
            return total - base * (self.grounding_rounds - 1)
        return base

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides) -> 'TrainConfig':
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config key")
        return replace(self, **overrides)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        if not isinstance(data, dict):
            raise ConfigError('<root>', f"config must be a JSON object, got {type(data).__name__}")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown config key")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'TrainConfig':
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError('<file>', f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n')


def _check_type(name: str, value: Any, hint: Any) -> None:
    optional = getattr(hint, '__origin__', None) is Union
    if optional:
        if value is None:
            return
        hint = next(arg for arg in hint.__args__ if arg is not type(None))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, hint)
    if not ok:
        raise ConfigError(name, f"expected {hint.__name__}, got {type(value).__name__} {value!r}")


if __name__ == '__main__':
    import sys

    if len(sys.argv) > 1:
        config = TrainConfig.from_file(sys.argv[1])
        print(f"{sys.argv[1]} is valid")
    else:
        config = TrainConfig()
    print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    print(f"\nupdates: vsc/lfr={config.n_updates_vsc_lfr} upc={config.n_updates_upc} gap={config.n_updates_gap}")
