"""Tests for the labeling model, policy, quantization, EMA and checkpoints."""

import pytest
import torch
from torch import nn

from conftest import perturb_zero_layers
from databank import sample_pairs, to_float
from envsuite import N_ACTIONS
from nets import (
    ModelBundle,
    TrainingDivergedError,
    active_code_count,
    contrast_logits,
    contrast_score,
    ema_update,
    encode,
    greedy_action,
    label_actions,
    label_video,
    load_checkpoint,
    policy_act,
    project_action,
    quantize,
    restart_dead_codes,
    save_checkpoint,
    seed_codebook,
    track_code_usage,
    world_forward,
)


class TestQuantize:
    def test_picks_nearest_row(self):
        codebook = torch.tensor([[0.0, 0.0], [1.0, 1.0], [-1.0, 2.0]])
        latent = quantize(codebook, torch.tensor([[0.9, 1.2], [-0.8, 1.7], [0.1, -0.1]]))
        assert latent.index.tolist() == [1, 2, 0]
        torch.testing.assert_close(latent.quantized, codebook[latent.index])

    def test_ties_go_to_lowest_index(self):
        codebook = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        latent = quantize(codebook, torch.tensor([[0.0, 0.0], [1.0, 0.0]]))
        assert latent.index.tolist() == [0, 0]

    def test_idempotent(self):
        codebook = torch.randn(7, 3, generator=torch.Generator().manual_seed(1))
        first = quantize(codebook, torch.randn(20, 3, generator=torch.Generator().manual_seed(2)))
        second = quantize(codebook, first.quantized)
        assert torch.equal(first.index, second.index)
        assert torch.equal(first.quantized, second.quantized)

    def test_straight_through_passes_gradient_unchanged(self):
        codebook = torch.randn(5, 3)
        pre = torch.randn(4, 3, requires_grad=True)
        upstream = torch.randn(4, 3)
        (quantize(codebook, pre).quantized * upstream).sum().backward()
        torch.testing.assert_close(pre.grad, upstream)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            quantize(torch.zeros(0, 3), torch.zeros(2, 3))
        with pytest.raises(ValueError):
            quantize(torch.zeros(4, 3), torch.zeros(2, 2))

    def test_non_finite_latent_is_divergence(self):
        pre = torch.tensor([[float('nan'), 0.0, 0.0], [0.0, 0.0, 0.0], [float('inf'), 1.0, 0.0]])
        with pytest.raises(TrainingDivergedError, match='latent') as raised:
            quantize(torch.zeros(4, 3), pre)
        assert raised.value.loss_name == 'latent'
        assert raised.value.aux == {'non_finite_rows': 2}


class TestEma:
    def test_momentum_one_copies(self, tiny_bundle):
        with torch.no_grad():
            for p in tiny_bundle.encoder.parameters():
                p.add_(1.0)
        ema_update(tiny_bundle.encoder_ema, tiny_bundle.encoder, 1.0)
        for p_ema, p in zip(tiny_bundle.encoder_ema.parameters(), tiny_bundle.encoder.parameters()):
            assert torch.equal(p_ema, p)

    def test_momentum_zero_is_noop(self, tiny_bundle):
        before = [p.clone() for p in tiny_bundle.encoder_ema.parameters()]
        with torch.no_grad():
            for p in tiny_bundle.encoder.parameters():
                p.add_(1.0)
        ema_update(tiny_bundle.encoder_ema, tiny_bundle.encoder, 0.0)
        for p_ema, old in zip(tiny_bundle.encoder_ema.parameters(), before):
            assert torch.equal(p_ema, old)

    def test_small_momentum_blends(self, tiny_bundle):
        with torch.no_grad():
            for p_ema, p in zip(tiny_bundle.encoder_ema.parameters(), tiny_bundle.encoder.parameters()):
                p_ema.zero_()
                p.fill_(1.0)
        ema_update(tiny_bundle.encoder_ema, tiny_bundle.encoder, 0.05)
        for p_ema in tiny_bundle.encoder_ema.parameters():
            torch.testing.assert_close(p_ema, torch.full_like(p_ema, 0.05))
        ema_update(tiny_bundle.encoder_ema, tiny_bundle.encoder, 0.05)
        for p_ema in tiny_bundle.encoder_ema.parameters():
            torch.testing.assert_close(p_ema, torch.full_like(p_ema, 0.0975))

    def test_invalid_momentum(self, tiny_bundle):
        with pytest.raises(ValueError):
            ema_update(tiny_bundle.encoder_ema, tiny_bundle.encoder, 1.5)

    def test_mirror_has_no_gradient(self, tiny_bundle):
        assert not any(p.requires_grad for p in tiny_bundle.encoder_ema.parameters())


class TestBundle:
    def test_parameter_groups_partition_trainable_parameters(self, tiny_bundle):
        groups = tiny_bundle.parameter_groups()
        listed = [id(p) for params in groups.values() for p in params]
        trainable = [id(p) for p in tiny_bundle.parameters() if p.requires_grad]
        assert len(listed) == len(set(listed))
        assert set(listed) == set(trainable)
        ema = {id(p) for p in tiny_bundle.encoder_ema.parameters()}
        assert not ema & set(listed)

    def test_same_seed_same_weights(self, tiny_config):
        a = ModelBundle.from_config(tiny_config, seed=3)
        b = ModelBundle.from_config(tiny_config, seed=3)
        for (name, pa), pb in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(pa, pb), name

    def test_float64_precision(self, double_bundle):
        assert all(p.dtype == torch.float64 for p in double_bundle.parameters())

    def test_codebook_must_cover_actions(self):
        with pytest.raises(ValueError):
            ModelBundle((5, 6, 6), n_codes=N_ACTIONS - 1)

    def test_encode_checks_shape(self, tiny_bundle):
        with pytest.raises(ValueError):
            encode(tiny_bundle.encoder, torch.zeros(2, 5, 7, 7))


class TestForward:
    def test_label_video_shapes(self, tiny_bundle, tiny_videos, rng):
        batch = sample_pairs(tiny_videos, 8, 1, rng)
        latent, logits = label_video(tiny_bundle, batch.o_t, batch.o_t1, batch.o_hist)
        assert logits.shape == (8, N_ACTIONS)
        assert latent.index.shape == (8,)
        assert latent.quantized.shape == (8, 4)

    def test_policy_acts_in_range(self, tiny_bundle, tiny_videos, rng):
        perturb_zero_layers(tiny_bundle)
        batch = sample_pairs(tiny_videos, 8, 1, rng)
        actions = policy_act(tiny_bundle, batch.o_t, batch.o_hist)
        assert actions.shape == (8,)
        assert ((actions >= 0) & (actions < N_ACTIONS)).all()

    def test_code_decoder_routes_labels_and_policy(self, tiny_bundle, tiny_videos, rng):
        assert not tiny_bundle.has_code_decoder
        tiny_bundle.code_to_action.fill_(3)
        assert tiny_bundle.has_code_decoder
        batch = sample_pairs(tiny_videos, 8, 1, rng)
        predicted, _ = label_actions(tiny_bundle, batch.o_t, batch.o_t1, batch.o_hist)
        assert predicted.tolist() == [3] * 8
        assert policy_act(tiny_bundle, batch.o_t, batch.o_hist).tolist() == [3] * 8

    def test_contrast_score_matches_logits_diagonal(self, tiny_bundle):
        gen = torch.Generator().manual_seed(0)
        anchors = torch.randn(6, 16, generator=gen)
        targets = torch.randn(6, 16, generator=gen)
        with torch.no_grad():
            tiny_bundle.log_temperature.fill_(0.7)
            logits = contrast_logits(tiny_bundle.log_temperature, tiny_bundle.contrast_head, anchors, targets)
            scores = contrast_score(tiny_bundle.log_temperature, tiny_bundle.contrast_head, anchors, targets)
        torch.testing.assert_close(logits.diagonal(), scores)
        assert logits.abs().max() <= torch.exp(torch.tensor(0.7)) + 1e-5

    def test_contrast_score_is_cosine_at_unit_temperature(self):
        w = torch.tensor(0.0)
        anchor = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        target = torch.tensor([[3.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        scores = contrast_score(w, nn.Sequential(), anchor, target)
        torch.testing.assert_close(scores, torch.tensor([1.0, 0.0]))

    def test_greedy_ties_go_to_lowest_action(self, tiny_bundle):
        with torch.no_grad():
            tiny_bundle.action_projector[-1].weight.zero_()
            tiny_bundle.action_projector[-1].bias.zero_()
        logits = project_action(tiny_bundle.action_projector, torch.randn(3, 4))
        assert greedy_action(logits).tolist() == [0, 0, 0]
        assert greedy_action(torch.tensor([[0.0, 2.0, 2.0, 1.0, 0.0]])).tolist() == [1]

    def test_world_model_starts_at_identity(self, tiny_bundle):
        feat = torch.randn(5, 16)
        z_q = torch.randn(5, 4)
        torch.testing.assert_close(world_forward(tiny_bundle.world_model, feat, z_q), feat)

    def test_features_are_layer_normalized(self, tiny_bundle, tiny_videos):
        obs = to_float(tiny_videos.frames[:12])
        feat = encode(tiny_bundle.encoder, obs)
        torch.testing.assert_close(feat.mean(-1), torch.zeros(12), atol=1e-5, rtol=0)
        torch.testing.assert_close(feat.var(-1, unbiased=False), torch.ones(12), atol=1e-3, rtol=0)

    def test_fresh_predictor_spreads_latents(self, tiny_bundle, tiny_videos, rng):
        batch = sample_pairs(tiny_videos, 32, 1, rng)
        latent, _ = label_video(tiny_bundle, batch.o_t, batch.o_t1, batch.o_hist)
        assert latent.pre.std(dim=0).min() > 0


class TestCodebookMaintenance:
    def test_seed_uses_distinct_latents(self, tiny_bundle):
        pre = torch.arange(40, dtype=torch.float32).view(10, 4)
        tiny_bundle.code_usage.fill_(0.0)
        seed_codebook(tiny_bundle, pre, torch.Generator().manual_seed(0))
        rows = {tuple(row.tolist()) for row in tiny_bundle.codebook}
        assert len(rows) == tiny_bundle.n_codes
        assert rows <= {tuple(row.tolist()) for row in pre}
        torch.testing.assert_close(tiny_bundle.code_usage, torch.full((6,), 1.0 / 6))
        assert bool(tiny_bundle.codebook_seeded)

    def test_seed_from_fewer_latents_than_codes(self, tiny_bundle):
        pre = torch.randn(2, 4, generator=torch.Generator().manual_seed(1))
        seed_codebook(tiny_bundle, pre, torch.Generator().manual_seed(0))
        assert torch.unique(tiny_bundle.codebook, dim=0).shape[0] == tiny_bundle.n_codes

    def test_seed_leaves_gradient_intact(self, tiny_bundle):
        seed_codebook(tiny_bundle, torch.randn(12, 4))
        assert tiny_bundle.codebook.requires_grad
        assert tiny_bundle.codebook.grad is None

    def test_usage_ema(self, tiny_bundle):
        usage = track_code_usage(tiny_bundle, torch.tensor([0, 0, 0, 1]), decay=0.5)
        expected = torch.full((6,), 0.5 / 6)
        expected[0] += 0.5 * 0.75
        expected[1] += 0.5 * 0.25
        torch.testing.assert_close(usage, expected)
        torch.testing.assert_close(usage.sum(), torch.tensor(1.0))

    def test_restart_moves_only_dead_codes(self, tiny_bundle):
        usage = torch.tensor([0.5, 0.0, 0.3, 0.01, 0.19, 0.0])
        tiny_bundle.code_usage.copy_(usage)
        before = tiny_bundle.codebook.detach().clone()
        pre = torch.full((8, 4), 7.0)
        restarted = restart_dead_codes(tiny_bundle, pre, threshold=0.02, generator=torch.Generator().manual_seed(0))
        assert restarted == 3
        for code in (1, 3, 5):
            assert tiny_bundle.codebook[code].tolist() == [7.0] * 4
            assert float(tiny_bundle.code_usage[code]) == pytest.approx(1.0 / 6)
        for code in (0, 2, 4):
            assert torch.equal(tiny_bundle.codebook[code], before[code])
            assert float(tiny_bundle.code_usage[code]) == pytest.approx(float(usage[code]))

    def test_restart_without_dead_codes(self, tiny_bundle):
        before = tiny_bundle.codebook.detach().clone()
        assert restart_dead_codes(tiny_bundle, torch.randn(8, 4), threshold=0.01) == 0
        assert torch.equal(tiny_bundle.codebook, before)

    def test_active_code_count(self, tiny_bundle):
        tiny_bundle.code_usage.copy_(torch.tensor([0.6, 0.3, 0.05, 0.05, 0.0, 0.0]))
        assert active_code_count(tiny_bundle, 0.05) == 4
        assert active_code_count(tiny_bundle, 0.1) == 2


class TestCheckpoint:
    def test_save_and_load(self, tmp_path, tiny_bundle, tiny_config):
        perturb_zero_layers(tiny_bundle)
        tiny_bundle.code_to_action.fill_(2)
        path = tmp_path / 'bundle.pt'
        save_checkpoint(path, tiny_bundle, tiny_config, None, note='x')
        loaded, config, payload = load_checkpoint(path)
        assert config == tiny_config
        assert payload['note'] == 'x'
        for name, value in tiny_bundle.state_dict().items():
            assert torch.equal(value, loaded.state_dict()[name]), name
