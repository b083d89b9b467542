#!/usr/bin/env python3
"""
Networks of the Video Labeling Model and the Policy

The labeling model V = h(g(f(o_t), f(o_t1))) is an inverse dynamics model
with a vector-quantized latent action between g and h. The policy shares
the encoder f and the action projector h with V and adds its own latent
predictor g_pi:

    f       encoder                      observation -> feature (d_f)
    f_ema   EMA mirror of f              never touched by an optimizer
    g       latent predictor             (hist..., t, t+1) features -> latent (d_z)
    codebook                             K x d_z, straight-through quantization
    h       action projector             quantized latent -> action logits
    u, w    contrast head                MLP and log-temperature for VSC
    G_w     latent world model           (feature, quantized latent) -> next feature
    g_pi    policy latent predictor      (hist..., t) features -> latent (d_z)
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from envsuite import N_ACTIONS
from train_config import TrainConfig

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8
CODE_USAGE_DECAY = 0.99


def mlp(in_dim: int, hidden: int, out_dim: int, n_layers: int = 2, zero_final: bool = False) -> nn.Sequential:
    """ReLU MLP with n_layers linear layers."""
    layers: List[nn.Module] = []
    dim = in_dim
    for _ in range(n_layers - 1):
        layers += [nn.Linear(dim, hidden), nn.ReLU()]
        dim = hidden
    final = nn.Linear(dim, out_dim)
    if zero_final:
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
    layers.append(final)
    return nn.Sequential(*layers)


def _in_features(module: nn.Sequential) -> int:
    return module[0].in_features


def _out_features(module: nn.Sequential) -> int:
    return module[-1].out_features


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or a latent becomes non-finite."""

    def __init__(self, loss_name: str, aux: Dict[str, float]):
        details = ', '.join(f"{k}={v:.4g}" for k, v in aux.items())
        super().__init__(f"{loss_name} is not finite ({details})")
        self.loss_name = loss_name
        self.aux = aux


class Encoder(nn.Module):
    """Three 3x3 conv layers, flatten, linear projection to d_f, layer-normalized without affine terms."""

    def __init__(self, obs_shape: Tuple[int, int, int], d_f: int, channels: int):
        super().__init__()
        c, h, w = obs_shape
        self.obs_shape = tuple(obs_shape)
        self.d_f = d_f
        self.conv = nn.Sequential(
            nn.Conv2d(c, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Flatten(),
        )
        self.out = nn.Linear(channels * h * w, d_f)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(self.out(self.conv(obs)), (self.d_f,))


@dataclass
class LatentAction:
    """Pre-quantization latent, chosen code index and quantized latent.

    `quantized` carries the straight-through gradient to `pre`; `code` is the
    raw codebook row and carries gradient to the codebook.
    """
    pre: torch.Tensor
    index: torch.Tensor
    quantized: torch.Tensor
    code: torch.Tensor


class ModelBundle(nn.Module):
    """Every trainable piece of V and the policy; f and h exist exactly once."""

    def __init__(self, obs_shape: Tuple[int, int, int], history: int = 1, n_actions: int = N_ACTIONS,
                 d_f: int = 128, d_z: int = 16, n_codes: int = 16, conv_channels: int = 32,
                 hidden: int = 256):
        super().__init__()
        if n_codes < n_actions:
            raise ValueError(f"codebook size {n_codes} must be >= {n_actions} actions")
        self.history = history
        self.n_actions = n_actions

        self.encoder = Encoder(obs_shape, d_f, conv_channels)
        self.encoder_ema = copy.deepcopy(self.encoder)
        self.encoder_ema.requires_grad_(False)

        self.latent_predictor = mlp((history + 2) * d_f, hidden, d_z)
        self.codebook = nn.Parameter(torch.empty(n_codes, d_z).uniform_(-1.0 / n_codes, 1.0 / n_codes))
        self.action_projector = mlp(d_z, hidden, n_actions)
        self.contrast_head = mlp(d_f, hidden, d_f)
        self.log_temperature = nn.Parameter(torch.zeros(()))
        self.world_model = mlp(d_f + d_z, hidden, d_f, n_layers=3, zero_final=True)
        self.policy_predictor = mlp((history + 1) * d_f, hidden, d_z, zero_final=True)

        # Filled only by the no_gap variant's world-model decoder
        self.register_buffer('code_to_action', torch.full((n_codes,), -1, dtype=torch.long))
        # EMA of the fraction of latents assigned to each code
        self.register_buffer('code_usage', torch.full((n_codes,), 1.0 / n_codes))
        self.register_buffer('codebook_seeded', torch.zeros((), dtype=torch.bool))

    @classmethod
    def from_config(cls, config: TrainConfig, seed: Optional[int] = None) -> 'ModelBundle':
        """Build with seeded fan-in uniform initialization."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed if seed is None else seed)
            bundle = cls(
                obs_shape=config.env_spec().obs_shape,
                history=config.history,
                d_f=config.d_f,
                d_z=config.d_z,
                n_codes=config.n_codes,
                conv_channels=config.conv_channels,
                hidden=config.hidden,
            )
        return bundle.to(config.torch_dtype)

    @property
    def n_codes(self) -> int:
        return self.codebook.shape[0]

    @property
    def has_code_decoder(self) -> bool:
        return bool((self.code_to_action >= 0).all())

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Trainable parameters keyed by component name; f_ema is not listed."""
        return {
            'f': list(self.encoder.parameters()),
            'u': list(self.contrast_head.parameters()),
            'w': [self.log_temperature],
            'g': list(self.latent_predictor.parameters()),
            'codebook': [self.codebook],
            'G_w': list(self.world_model.parameters()),
            'h': list(self.action_projector.parameters()),
            'g_pi': list(self.policy_predictor.parameters()),
        }


def encode(f: Encoder, obs: torch.Tensor) -> torch.Tensor:
    """Encode a (N, C, H, W) batch into (N, d_f) features."""
    if obs.dim() != 4 or tuple(obs.shape[1:]) != f.obs_shape:
        raise ValueError(f"observation shape {tuple(obs.shape)} does not match (N, {f.obs_shape})")
    return f(obs)


def encode_history(f: Encoder, o_hist: torch.Tensor) -> torch.Tensor:
    """Encode (N, k, C, H, W) history frames into (N, k, d_f)."""
    n, k = o_hist.shape[:2]
    if k == 0:
        return o_hist.new_zeros((n, 0, f.d_f))
    return encode(f, o_hist.flatten(0, 1)).view(n, k, f.d_f)


def predict_latent(g: nn.Sequential, feat_t: torch.Tensor, feat_t1: torch.Tensor,
                   feat_hist: torch.Tensor) -> torch.Tensor:
    """Latent action from features concatenated in the order (hist..., t, t+1)."""
    if feat_t.shape != feat_t1.shape:
        raise ValueError(f"feature shapes differ: {tuple(feat_t.shape)} vs {tuple(feat_t1.shape)}")
    x = torch.cat([feat_hist.flatten(1), feat_t, feat_t1], dim=-1)
    if x.shape[-1] != _in_features(g):
        raise ValueError(f"latent predictor expects {_in_features(g)} inputs, got {x.shape[-1]}")
    return g(x)


def quantize(codebook: torch.Tensor, pre: torch.Tensor) -> LatentAction:
    """
    Nearest codebook row by squared Euclidean distance, ties to the lowest index.

    The quantized latent uses the straight-through estimator, so the gradient
    with respect to pre equals the gradient with respect to the quantized value.
    """
    if codebook.shape[0] == 0:
        raise ValueError("codebook is empty")
    if pre.shape[-1] != codebook.shape[-1]:
        raise ValueError(f"latent dim {pre.shape[-1]} does not match codebook dim {codebook.shape[-1]}")
    if not torch.isfinite(pre).all():
        n_bad = float((~torch.isfinite(pre)).any(dim=-1).sum())
        raise TrainingDivergedError('latent', {'non_finite_rows': n_bad})

    with torch.no_grad():
        distances = (pre.unsqueeze(-2) - codebook).pow(2).sum(-1)
        index = distances.argmin(dim=-1)
    code = codebook[index]
    quantized = pre + (code - pre).detach()
    return LatentAction(pre=pre, index=index, quantized=quantized, code=code)


def project_action(h: nn.Sequential, z_q: torch.Tensor) -> torch.Tensor:
    """Action logits from a quantized latent."""
    if z_q.shape[-1] != _in_features(h):
        raise ValueError(f"action projector expects {_in_features(h)} inputs, got {z_q.shape[-1]}")
    return h(z_q)


def greedy_action(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over actions; ties go to the lowest index."""
    return logits.argmax(dim=-1)


def label_video(bundle: ModelBundle, o_t: torch.Tensor, o_t1: torch.Tensor,
                o_hist: torch.Tensor) -> Tuple[LatentAction, torch.Tensor]:
    """The video labeling model V: encode, predict latent, quantize, project."""
    f = bundle.encoder
    latent = quantize(
        bundle.codebook,
        predict_latent(bundle.latent_predictor, encode(f, o_t), encode(f, o_t1), encode_history(f, o_hist)),
    )
    return latent, project_action(bundle.action_projector, latent.quantized)


def actions_from_latent(bundle: ModelBundle, latent: LatentAction) -> torch.Tensor:
    """Real actions for quantized latents, through the code decoder when one is fitted."""
    if bundle.has_code_decoder:
        return bundle.code_to_action[latent.index]
    return greedy_action(project_action(bundle.action_projector, latent.quantized))


@torch.no_grad()
def label_actions(bundle: ModelBundle, o_t: torch.Tensor, o_t1: torch.Tensor,
                  o_hist: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Predicted actions and latent indices for observation pairs."""
    latent, _ = label_video(bundle, o_t, o_t1, o_hist)
    return actions_from_latent(bundle, latent), latent.index


def _normalized(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + COSINE_EPS)


def contrast_score(w: torch.Tensor, u: nn.Sequential, anchor: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """exp(w) * cos(u(anchor), target), row by row."""
    if anchor.shape[-1] != target.shape[-1]:
        raise ValueError(f"feature dims differ: {anchor.shape[-1]} vs {target.shape[-1]}")
    return w.exp() * (_normalized(u(anchor)) * _normalized(target)).sum(-1)


def contrast_logits(w: torch.Tensor, u: nn.Sequential, anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """All-pairs scores L_ij = contrast_score(anchor_i, target_j)."""
    return w.exp() * _normalized(u(anchors)) @ _normalized(targets).T


def world_forward(G_w: nn.Sequential, feat_t: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Predicted next feature: the current feature plus a change read from (feature, latent)."""
    x = torch.cat([feat_t, z_q], dim=-1)
    if x.shape[-1] != _in_features(G_w):
        raise ValueError(f"world model expects {_in_features(G_w)} inputs, got {x.shape[-1]}")
    return feat_t + G_w(x)


def policy_latent(g_pi: nn.Sequential, feat: torch.Tensor, feat_hist: torch.Tensor) -> torch.Tensor:
    """Policy-derived latent from the current feature and its history."""
    x = torch.cat([feat_hist.flatten(1), feat], dim=-1)
    if x.shape[-1] != _in_features(g_pi):
        raise ValueError(f"policy predictor expects {_in_features(g_pi)} inputs, got {x.shape[-1]}")
    return g_pi(x)


@torch.no_grad()
def policy_act(bundle: ModelBundle, obs: torch.Tensor, o_hist: torch.Tensor) -> torch.Tensor:
    """The deployed policy: argmax h(quantize(g_pi(f(o))))."""
    f = bundle.encoder
    pre = policy_latent(bundle.policy_predictor, encode(f, obs), encode_history(f, o_hist))
    return actions_from_latent(bundle, quantize(bundle.codebook, pre))


@torch.no_grad()
def seed_codebook(bundle: ModelBundle, pre: torch.Tensor, generator: Optional[torch.Generator] = None) -> None:
    """
    Overwrite every codebook row with a pre-quantization latent drawn from a batch.

    Rows are distinct samples while the batch has enough of them; the rest
    repeat samples with a small jitter so no two rows coincide.
    """
    k = bundle.n_codes
    pre = pre.detach().to(bundle.codebook.dtype)
    rows = pre[torch.randperm(len(pre), generator=generator)[:k]]
    if len(rows) < k:
        extra = pre[torch.randint(len(pre), (k - len(rows),), generator=generator)]
        scale = 1e-2 * (float(pre.std()) if len(pre) > 1 else 1.0)
        jitter = torch.randn(extra.shape, generator=generator, dtype=extra.dtype) * scale
        rows = torch.cat([rows, extra + jitter])
    bundle.codebook.copy_(rows)
    bundle.code_usage.fill_(1.0 / k)
    bundle.codebook_seeded.fill_(True)
    logger.debug("Seeded %d codebook rows from %d latents", k, len(pre))


@torch.no_grad()
def track_code_usage(bundle: ModelBundle, index: torch.Tensor, decay: float = CODE_USAGE_DECAY) -> torch.Tensor:
    """Fold one batch of code assignments into the usage EMA."""
    counts = torch.bincount(index.flatten(), minlength=bundle.n_codes).to(bundle.code_usage.dtype)
    bundle.code_usage.mul_(decay).add_(counts / max(index.numel(), 1), alpha=1.0 - decay)
    return bundle.code_usage


@torch.no_grad()
def restart_dead_codes(bundle: ModelBundle, pre: torch.Tensor, threshold: float,
                       generator: Optional[torch.Generator] = None) -> int:
    """
    Move every code whose usage EMA fell below threshold onto a recent latent.

    Returns:
        Number of restarted codes
    """
    dead = (bundle.code_usage < threshold).nonzero().flatten()
    if len(dead) == 0 or len(pre) == 0:
        return 0
    pick = torch.randint(len(pre), (len(dead),), generator=generator)
    bundle.codebook[dead] = pre.detach()[pick].to(bundle.codebook.dtype)
    bundle.code_usage[dead] = 1.0 / bundle.n_codes
    return len(dead)


def active_code_count(bundle: ModelBundle, threshold: float) -> int:
    return int((bundle.code_usage >= threshold).sum())


@torch.no_grad()
def ema_update(f_ema: nn.Module, f: nn.Module, m: float) -> None:
    """p' <- (1 - m) p' + m p for every parameter of the mirror."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1], got {m}")
    ema_params = list(f_ema.parameters())
    params = list(f.parameters())
    if len(ema_params) != len(params):
        raise ValueError("EMA mirror and encoder have different parameter counts")
    for p_ema, p in zip(ema_params, params):
        if p_ema.shape != p.shape:
            raise ValueError(f"EMA shape mismatch: {tuple(p_ema.shape)} vs {tuple(p.shape)}")
        p_ema.mul_(1.0 - m).add_(p, alpha=m)


def save_checkpoint(path: Union[str, Path], bundle: ModelBundle, config: TrainConfig,
                    np_rng_state: Optional[Dict[str, Any]] = None, **extra) -> None:
    """Save parameters keyed by component, the config echo and RNG states."""
    payload = {
        'state_dict': bundle.state_dict(),
        'config': config.to_dict(),
        'torch_rng_state': torch.get_rng_state(),
        'numpy_rng_state': np_rng_state,
    }
    payload.update(extra)
    torch.save(payload, path)
    logger.debug("Saved checkpoint to %s", path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelBundle, TrainConfig, Dict[str, Any]]:
    """Rebuild the bundle saved by save_checkpoint."""
    payload = torch.load(path, map_location='cpu', weights_only=False)
    config = TrainConfig.from_dict(payload['config'])
    bundle = ModelBundle.from_config(config)
    bundle.load_state_dict(payload['state_dict'])
    return bundle, config, payload


def restore_numpy_rng(state: Optional[Dict[str, Any]]) -> np.random.Generator:
    rng = np.random.default_rng()
    if state is not None:
        rng.bit_generator.state = state
    return rng
