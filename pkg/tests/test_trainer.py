"""Tests for the training schedule: optimizer ownership, phases, collection and full runs."""

import ast
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import torch

import trainer as trainer_module
from conftest import pin_latent_predictor
from databank import DatasetFormatError, EmptyDatasetError, InteractionBuffer, to_float
from envsuite import INTERACTION_LEVEL_START, N_ACTIONS, NOOP
from evaluate import predict_pairs
from losses import LossReport, TrainingDivergedError
from nets import policy_act
from trainer import (
    METRIC_COLUMNS,
    MIN_ACTIVE_CODES,
    BudgetExceededError,
    EnvPool,
    MetricsLog,
    Phase,
    PhaseError,
    Trainer,
    fit_code_decoder,
    make_optimizers,
    run_full,
)


def snapshot(bundle):
    return {name: value.detach().clone() for name, value in bundle.state_dict().items()}


def changed(bundle, before):
    return {name for name, value in bundle.state_dict().items() if not torch.equal(value, before[name])}


class TestOptimizers:
    def owned_ids(self, optimizer):
        return [id(p) for group in optimizer.param_groups for p in group['params']]

    def test_partition_of_trainable_parameters(self, tiny_bundle, tiny_config):
        optimizers = make_optimizers(tiny_bundle, tiny_config)
        assert set(optimizers) == {'VSC', 'LFR', 'GAP', 'UPC'}
        owned = [pid for opt in optimizers.values() for pid in self.owned_ids(opt)]
        assert len(owned) == len(set(owned))
        trainable = {id(p) for p in tiny_bundle.parameters() if p.requires_grad}
        assert set(owned) == trainable
        ema = {id(p) for p in tiny_bundle.encoder_ema.parameters()}
        assert not ema & set(owned)

    def test_gap_owns_only_projector(self, tiny_bundle, tiny_config):
        gap = set(self.owned_ids(make_optimizers(tiny_bundle, tiny_config)['GAP']))
        assert gap == {id(p) for p in tiny_bundle.action_projector.parameters()}

    def test_end_to_end_baseline_owns_encoder_and_predictor(self, tiny_bundle, tiny_config):
        gap = set(self.owned_ids(make_optimizers(tiny_bundle, tiny_config.with_overrides(variant='bco'))['GAP']))
        groups = tiny_bundle.parameter_groups()
        expected = {id(p) for name in ('f', 'g', 'h') for p in groups[name]}
        assert gap == expected


class TestPhases:
    def test_pretrain_uses_no_interactions_and_moves_mirror(self, tiny_config, tiny_videos):
        trainer = Trainer(tiny_config, tiny_videos)
        before = snapshot(trainer.bundle)
        trainer.pretrain_on_videos()
        assert trainer.state.interactions_used == 0
        assert len(trainer.buffer) == 0
        assert trainer.state.steps['pretrain'] == 2 * tiny_config.n_updates_vsc_lfr
        moved = changed(trainer.bundle, before)
        assert any(name.startswith('encoder_ema.') for name in moved)
        assert not any(name.startswith(('policy_predictor.', 'action_projector.')) for name in moved)

    def test_pretrain_keeps_several_codes_in_use(self, tiny_config, tiny_videos):
        trainer = Trainer(tiny_config.with_overrides(updates_vsc_lfr=20), tiny_videos)
        trainer.pretrain_on_videos()
        assert bool(trainer.bundle.codebook_seeded)
        assert float(trainer.bundle.code_usage.sum()) == pytest.approx(1.0, abs=1e-5)
        _, _, codes = predict_pairs(trainer.bundle, trainer_module.held_out_videos(tiny_config))
        assert len(np.unique(codes)) >= MIN_ACTIVE_CODES

    def test_collapsed_codebook_is_reported(self, tiny_config, tiny_videos, caplog):
        config = tiny_config.with_overrides(updates_vsc_lfr=1, vq_usage_decay=0.0)
        trainer = Trainer(config, tiny_videos)
        pin_latent_predictor(trainer.bundle)
        with caplog.at_level(logging.WARNING, logger='trainer'):
            trainer.pretrain_on_videos()
        assert trainer.bundle.code_usage.tolist() == [1.0] + [0.0] * (tiny_config.n_codes - 1)
        assert any('Codebook collapsed' in record.getMessage() for record in caplog.records)

    def test_restarts_only_early_in_pretraining(self, tiny_config, tiny_videos, monkeypatch):
        calls = []
        monkeypatch.setattr(trainer_module, 'restart_dead_codes',
                            lambda bundle, pre, threshold, generator: calls.append(threshold) or 0)
        config = tiny_config.with_overrides(updates_vsc_lfr=12, vq_restart_every=2, variant='no_vsc')
        Trainer(config, tiny_videos).pretrain_on_videos()
        # updates 2, 4, 6, 8 fall inside the first 9 of 12
        assert calls == [config.dead_code_threshold] * 4

    def test_without_contrast_only_reconstruction_runs(self, tiny_config, tiny_videos):
        trainer = Trainer(tiny_config.with_overrides(variant='no_vsc'), tiny_videos)
        trainer.pretrain_on_videos()
        assert set(trainer.metrics.to_frame()['loss_name']) == {'LFR'}

    def test_clone_touches_only_policy_predictor(self, tiny_config, tiny_videos):
        trainer = Trainer(tiny_config, tiny_videos)
        before = snapshot(trainer.bundle)
        trainer.clone_latent_policy()
        moved = changed(trainer.bundle, before)
        assert moved
        assert all(name.startswith('policy_predictor.') for name in moved)

    def test_ground_touches_only_projector(self, tiny_config, tiny_videos):
        trainer = Trainer(tiny_config, tiny_videos)
        trainer.collect_interactions(0)
        before = snapshot(trainer.bundle)
        trainer.ground_actions(0)
        moved = changed(trainer.bundle, before)
        assert moved
        assert all(name.startswith('action_projector.') for name in moved)

    def test_ground_needs_interactions(self, tiny_config, tiny_videos):
        with pytest.raises(EmptyDatasetError):
            Trainer(tiny_config, tiny_videos).ground_actions(0)

    def test_observation_shape_mismatch(self, tiny_config, tiny_videos):
        with pytest.raises(DatasetFormatError):
            Trainer(tiny_config.with_overrides(grid_size=7), tiny_videos)


class TestCollection:
    def test_first_round_is_uniform(self, tiny_config, tiny_videos):
        config = tiny_config.with_overrides(interaction_budget=10_000, grounding_rounds=1)
        trainer = Trainer(config, tiny_videos)
        assert trainer.collect_interactions(0) == 10_000
        counts = np.bincount(trainer.buffer.actions[:len(trainer.buffer)], minlength=N_ACTIONS)
        freqs = counts / counts.sum()
        assert np.all(np.abs(freqs - 0.2) <= 0.02)

    def test_greedy_round_follows_policy(self, tiny_config, tiny_videos):
        config = tiny_config.with_overrides(epsilon=0.0)
        trainer = Trainer(config, tiny_videos)
        first = trainer.collect_interactions(0)
        second = trainer.collect_interactions(1)
        assert first + second == config.interaction_budget
        batch = trainer.buffer.batch(np.arange(first, first + second))
        expected = policy_act(trainer.bundle, batch.o_t, batch.o_hist)
        assert torch.equal(expected, batch.actions)

    def test_collection_replays_exactly(self, tiny_config, tiny_videos):
        config = tiny_config.with_overrides(epsilon=0.0)
        buffers = []
        for _ in range(2):
            trainer = Trainer(config, tiny_videos)
            trainer.collect_interactions(0)
            trainer.collect_interactions(1)
            buffers.append(trainer.buffer)
        np.testing.assert_array_equal(buffers[0].actions, buffers[1].actions)
        np.testing.assert_array_equal(buffers[0].obs, buffers[1].obs)

    def test_budget_is_never_exceeded(self, tiny_config, tiny_videos):
        trainer = Trainer(tiny_config, tiny_videos)
        trainer.state.interactions_used = tiny_config.interaction_budget - 1
        with pytest.raises(BudgetExceededError) as info:
            trainer.collect_interactions(0)
        assert info.value.budget == tiny_config.interaction_budget
        assert len(trainer.buffer) == 0


class TestCodeDecoder:
    def test_single_logged_action_fills_table(self, tiny_bundle, tiny_spec):
        buffer = InteractionBuffer(20, tiny_spec.obs_shape)
        pool = EnvPool(tiny_spec, 1)
        for _ in range(10):
            o_t, o_hist, o_t1, episode_id = pool.step(0, 2)
            buffer.add(o_t, 2, o_t1, episode_id, o_hist)
        mapping = fit_code_decoder(tiny_bundle, buffer)
        assert mapping.shape == (tiny_bundle.n_codes,)
        assert mapping.tolist() == [2] * tiny_bundle.n_codes
        assert tiny_bundle.has_code_decoder

    def test_empty_buffer(self, tiny_bundle, tiny_spec):
        with pytest.raises(EmptyDatasetError):
            fit_code_decoder(tiny_bundle, InteractionBuffer(4, tiny_spec.obs_shape))


class TestMetricsLog:
    def report(self, value):
        return LossReport('GAP', torch.tensor(value), {'accuracy': 0.5})

    def test_flushes_in_chunks(self, tmp_path):
        path = tmp_path / 'metrics.csv'
        log = MetricsLog(path, flush_every=3)
        for step in range(1, 5):
            log.log(step, Phase.GROUND, self.report(float(step)))
        assert len(pd.read_csv(path)) == 3
        log.flush()
        frame = pd.read_csv(path)
        assert list(frame.columns) == METRIC_COLUMNS
        assert frame['step'].tolist() == [1, 2, 3, 4]
        assert frame['aux_temperature'].isna().all()
        assert log.final_values() == {'GAP': 4.0}

    def test_existing_file_replaced(self, tmp_path):
        path = tmp_path / 'metrics.csv'
        path.write_text('stale\n')
        log = MetricsLog(path, flush_every=1)
        log.log(1, Phase.GROUND, self.report(1.0))
        assert pd.read_csv(path)['value'].tolist() == [1.0]


class TestEnvPool:
    def test_observations_and_reset(self, tiny_spec):
        pool = EnvPool(tiny_spec, 2, history=1)
        obs, hist = pool.observations()
        assert obs.shape == (2,) + tiny_spec.obs_shape
        assert hist.shape == (2, 1) + tiny_spec.obs_shape
        assert not hist.any()

        start = obs[0].copy()
        o_t, _, _, episode_id = pool.step(0, NOOP)
        np.testing.assert_array_equal(o_t, start)
        assert episode_id == 0
        _, hist = pool.observations()
        np.testing.assert_array_equal(hist[0, 0], start)

        for _ in range(tiny_spec.max_steps - 1):
            pool.step(0, NOOP)
        assert pool.episode_ids[0] == 2
        assert pool.next_level == INTERACTION_LEVEL_START + 3


class TestFullRun:
    def test_writes_artifacts_and_spends_budget(self, tiny_config, tiny_videos, tmp_path):
        run_dir = tmp_path / 'run'
        result = run_full(tiny_config, tiny_videos, run_dir=run_dir)
        assert result.summary['interactions_used'] == tiny_config.interaction_budget
        assert set(result.summary['final_losses']) == {'VSC', 'LFR', 'UPC', 'GAP'}
        for name in ('metrics.csv', 'checkpoint.pt', 'summary.json', 'summary.txt'):
            assert (run_dir / name).exists(), name
        tags = sorted(p.stem for p in (run_dir / 'checkpoints').glob('*.pt'))
        assert tags == ['clone', 'pretrain', 'round0', 'round1']
        expected_steps = 2 * tiny_config.n_updates_vsc_lfr + tiny_config.n_updates_upc + tiny_config.n_updates_gap
        assert len(pd.read_csv(run_dir / 'metrics.csv')) == expected_steps
        saved = json.loads((run_dir / 'summary.json').read_text())
        assert saved['eval'] == result.report.as_dict()
        assert saved['steps'] == {'pretrain': 2 * tiny_config.n_updates_vsc_lfr,
                                  'clone': tiny_config.n_updates_upc, 'ground': tiny_config.n_updates_gap}
        assert sum(saved['steps'].values()) == expected_steps

    def test_deterministic_runs_match(self, tiny_config, tiny_videos):
        config = tiny_config.with_overrides(deterministic=True)
        first = run_full(config, tiny_videos)
        second = run_full(config, tiny_videos)
        pd.testing.assert_frame_equal(first.metrics, second.metrics)
        assert first.report == second.report

    def test_end_to_end_baseline(self, tiny_config, tiny_videos, tmp_path):
        run_dir = tmp_path / 'bco'
        result = run_full(tiny_config.with_overrides(variant='bco'), tiny_videos, run_dir=run_dir)
        assert set(result.summary['final_losses']) == {'GAP', 'UPC'}
        assert result.summary['interactions_used'] == tiny_config.interaction_budget
        tags = sorted(p.stem for p in (run_dir / 'checkpoints').glob('*.pt'))
        assert tags == ['round0', 'round1']

    def test_world_model_decoder_variant(self, tiny_config, tiny_videos):
        result = run_full(tiny_config.with_overrides(variant='no_gap'), tiny_videos)
        assert result.bundle.has_code_decoder
        assert 'GAP' not in result.summary['final_losses']

    def test_failure_is_tagged_with_phase_and_checkpoint(self, tiny_config, tiny_videos, tmp_path, monkeypatch):
        def diverge(bundle, batch):
            raise TrainingDivergedError('UPC', {'policy_agreement': float('nan')})

        monkeypatch.setattr(trainer_module, 'loss_upc', diverge)
        run_dir = tmp_path / 'run'
        with pytest.raises(PhaseError) as info:
            run_full(tiny_config, tiny_videos, run_dir=run_dir)
        assert info.value.phase is Phase.CLONE
        assert info.value.checkpoint.endswith('pretrain.pt')
        assert isinstance(info.value.cause, TrainingDivergedError)
        assert set(pd.read_csv(run_dir / 'metrics.csv')['phase']) == {'pretrain'}


def test_training_code_never_reads_rewards():
    scripts = Path(trainer_module.__file__).parent
    for module in ('trainer.py', 'losses.py', 'nets.py', 'databank.py'):
        tree = ast.parse((scripts / module).read_text())
        for node in ast.walk(tree):
            name = getattr(node, 'id', None) or getattr(node, 'attr', None) or getattr(node, 'arg', None)
            if isinstance(node, (ast.FunctionDef, ast.ClassDef)):
                name = node.name
            assert 'reward' not in (name or '').lower(), f"{module}: {name}"
            if module in ('trainer.py', 'losses.py') and isinstance(node, ast.Subscript):
                key = node.slice
                if isinstance(key, ast.Constant):
                    assert key.value not in ('reward', 'success'), module
