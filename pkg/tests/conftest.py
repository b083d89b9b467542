"""Shared fixtures: a tiny ProcGrid family, a tiny config and small datasets."""

import numpy as np
import pytest
import torch

from envsuite import EnvSpec, generate_expert_videos
from nets import ModelBundle
from train_config import TrainConfig

TINY = dict(
    grid_size=6,
    wall_density=0.1,
    n_train_levels=5,
    expert_frames=300,
    n_held_out_levels=3,
    held_out_frames=120,
    eval_episodes=4,
    batch_video=16,
    batch_transition=16,
    updates_vsc_lfr=3,
    updates_upc=3,
    updates_gap=4,
    n_parallel_envs=2,
    update_frequency=4,
    interaction_budget=40,
    grounding_rounds=2,
    d_f=16,
    d_z=4,
    n_codes=6,
    conv_channels=4,
    hidden=16,
    metrics_flush_every=5,
)


@pytest.fixture(autouse=True, scope='module')
def _restore_torch_globals():
    threads = torch.get_num_threads()
    yield
    torch.use_deterministic_algorithms(False)
    torch.set_num_threads(threads)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(**TINY)


@pytest.fixture
def tiny_spec(tiny_config) -> EnvSpec:
    return tiny_config.env_spec()


@pytest.fixture
def tiny_videos(tiny_config):
    """Expert videos on the training level range, hidden actions attached."""
    return generate_expert_videos(tiny_config.env_spec(), tiny_config.n_train_levels,
                                  tiny_config.expert_frames, seed=0)


@pytest.fixture
def tiny_bundle(tiny_config) -> ModelBundle:
    return ModelBundle.from_config(tiny_config)


@pytest.fixture
def double_bundle(tiny_config) -> ModelBundle:
    return ModelBundle.from_config(tiny_config.with_overrides(precision='float64'))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    path = tmp_path / 'runs'
    monkeypatch.setenv('UPESV_RUNS_DIR', str(path))
    return path


def perturb_zero_layers(bundle: ModelBundle, seed: int = 0, scale: float = 0.1) -> None:
    """Give the final layers of g, G_w and g_pi small random weights; G_w and g_pi start at zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in (bundle.latent_predictor, bundle.world_model, bundle.policy_predictor):
            final = module[-1]
            final.weight.copy_(torch.randn(final.weight.shape, generator=gen, dtype=torch.float64) * scale)
            final.bias.copy_(torch.randn(final.bias.shape, generator=gen, dtype=torch.float64) * scale)


def pin_latent_predictor(bundle: ModelBundle, code: int = 0) -> None:
    """Make g return codebook row `code` for every pair, so every pair gets that code."""
    with torch.no_grad():
        final = bundle.latent_predictor[-1]
        final.weight.zero_()
        final.bias.copy_(bundle.codebook[code])
