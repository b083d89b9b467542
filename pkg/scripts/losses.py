#!/usr/bin/env python3
"""
Training Objectives

The four objectives and the random-shift augmentation. Each loss stops
gradients so that exactly one group of components learns from it:

    VSC  visual shift contrast          -> f, u, w
    LFR  latent future reconstruction   -> g, codebook, G_w
    GAP  ground-truth action prediction -> h
    UPC  unsupervised policy cloning    -> g_pi

The EMA mirror f_ema never receives gradient; the trainer moves it with
ema_update after each VSC step.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from databank import PairBatch, TransitionBatch
from nets import (
    LatentAction,
    ModelBundle,
    TrainingDivergedError,
    contrast_logits,
    encode,
    encode_history,
    greedy_action,
    label_video,
    policy_latent,
    predict_latent,
    project_action,
    quantize,
    world_forward,
)

VQ_BETA = 0.25

AUX_KEYS = {
    'VSC': ('positive_similarity', 'temperature', 'accuracy'),
    'LFR': ('reconstruction', 'vq_codebook', 'vq_commit', 'codebook_usage'),
    'GAP': ('accuracy',),
    'UPC': ('policy_agreement',),
}


@dataclass
class LossReport:
    """Differentiable loss plus the fixed set of named diagnostics for it."""
    name: str
    loss: torch.Tensor
    aux: Dict[str, float] = field(default_factory=dict)
    latent: Optional[LatentAction] = field(default=None, repr=False)

    @property
    def value(self) -> float:
        return float(self.loss.detach())


def _report(name: str, loss: torch.Tensor, aux: Dict[str, float],
            latent: Optional[LatentAction] = None) -> LossReport:
    if not torch.isfinite(loss.detach()).all():
        raise TrainingDivergedError(name, aux)
    missing = set(AUX_KEYS[name]) - set(aux)
    if missing:
        raise KeyError(f"{name} report is missing aux keys {sorted(missing)}")
    return LossReport(name=name, loss=loss, aux={k: aux[k] for k in AUX_KEYS[name]}, latent=latent)


def shift_by(obs: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """
    Translate each (C, H, W) sample by its integer (row, col) offset, zero-filling.

    Args:
        obs: (N, C, H, W) batch
        offsets: (N, 2) integer offsets

    Returns:
        Shifted batch with the same shape
    """
    n, _, h, w = obs.shape
    pad = int(offsets.abs().max()) if n else 0
    padded = F.pad(obs, (pad, pad, pad, pad))
    rows = torch.arange(h)[None, :] - offsets[:, 0:1] + pad
    cols = torch.arange(w)[None, :] - offsets[:, 1:2] + pad
    picked = padded[torch.arange(n)[:, None, None], :, rows[:, :, None], cols[:, None, :]]
    return picked.permute(0, 3, 1, 2).contiguous()


def random_shift(obs: torch.Tensor, s: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Shift observations by offsets drawn uniformly from [-s, s]^2, zero-filling vacated cells.

    Accepts a single (C, H, W) observation or an (N, C, H, W) batch; every
    sample gets its own offset. s = 0 is the identity.
    """
    single = obs.dim() == 3
    batch = obs.unsqueeze(0) if single else obs
    h, w = batch.shape[-2:]
    if s < 0:
        raise ValueError(f"shift must be >= 0, got {s}")
    if s >= min(h, w):
        raise ValueError(f"shift {s} must be smaller than the observation size {min(h, w)}")
    if s == 0:
        return obs.clone()

    offsets = torch.randint(-s, s + 1, (batch.shape[0], 2), generator=generator)
    shifted = shift_by(batch, offsets)
    return shifted[0] if single else shifted


def loss_vsc(bundle: ModelBundle, obs: torch.Tensor, s: int,
             generator: Optional[torch.Generator] = None) -> LossReport:
    """
    InfoNCE over in-batch negatives between two independent shifts of each frame.

    Anchors come from f, targets from the EMA mirror without gradient.
    """
    n = obs.shape[0]
    if n < 2:
        raise ValueError(f"visual shift contrast needs at least 2 observations, got {n}")

    anchors = encode(bundle.encoder, random_shift(obs, s, generator))
    with torch.no_grad():
        targets = encode(bundle.encoder_ema, random_shift(obs, s, generator))
    logits = contrast_logits(bundle.log_temperature, bundle.contrast_head, anchors, targets)
    labels = torch.arange(n)
    loss = F.cross_entropy(logits, labels)

    with torch.no_grad():
        temperature = float(bundle.log_temperature.exp())
        aux = {
            'positive_similarity': float(logits.diagonal().mean()) / temperature,
            'temperature': temperature,
            'accuracy': float((logits.argmax(dim=1) == labels).float().mean()),
        }
    return _report('VSC', loss, aux)


def vq_terms(latent: LatentAction) -> Tuple[torch.Tensor, torch.Tensor]:
    """Codebook term |sg(pre) - code|^2 and commitment term |pre - sg(code)|^2, batch means."""
    vq_codebook = (latent.pre.detach() - latent.code).pow(2).sum(-1).mean()
    vq_commit = (latent.pre - latent.code.detach()).pow(2).sum(-1).mean()
    return vq_codebook, vq_commit


def loss_lfr(bundle: ModelBundle, batch: PairBatch, beta: float = VQ_BETA,
             stop_target_only: bool = False) -> LossReport:
    """
    Reconstruct f(o_t1) in latent space from f(o_t) and the quantized latent action.

    Both encoder branches are gradient-stopped, so the reconstruction trains
    g, the codebook and G_w only. With stop_target_only the input branches
    keep their gradient and f learns through them as well.

    The VQ terms are |sg(pre) - code|^2 + beta * |pre - sg(code)|^2.
    """
    f = bundle.encoder
    with torch.no_grad():
        target = encode(f, batch.o_t1)
    if stop_target_only:
        feat_t = encode(f, batch.o_t)
        feat_t1 = encode(f, batch.o_t1)
        feat_hist = encode_history(f, batch.o_hist)
    else:
        with torch.no_grad():
            feat_t = encode(f, batch.o_t)
            feat_hist = encode_history(f, batch.o_hist)
        feat_t1 = target

    pre = predict_latent(bundle.latent_predictor, feat_t, feat_t1, feat_hist)
    latent = quantize(bundle.codebook, pre)
    predicted = world_forward(bundle.world_model, feat_t, latent.quantized)

    reconstruction = (predicted - target).pow(2).sum(-1).mean()
    vq_codebook, vq_commit = vq_terms(latent)
    loss = reconstruction + vq_codebook + beta * vq_commit

    aux = {
        'reconstruction': float(reconstruction.detach()),
        'vq_codebook': float(vq_codebook.detach()),
        'vq_commit': float(vq_commit.detach()),
        'codebook_usage': latent.index.unique().numel() / bundle.n_codes,
    }
    return _report('LFR', loss, aux, latent)


def action_cross_entropy(logits: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy against logged one-hot actions."""
    n_actions = logits.shape[-1]
    if actions.numel() and (int(actions.min()) < 0 or int(actions.max()) >= n_actions):
        raise ValueError(f"action index out of range [0, {n_actions})")
    return F.cross_entropy(logits, actions)


def loss_gap(bundle: ModelBundle, batch: TransitionBatch, end_to_end: bool = False) -> LossReport:
    """
    Predict logged real actions from interaction pairs.

    The gradient is stopped at g's input and g is not trained here, so only
    h learns. end_to_end lets the gradient reach f and g as well, which gives
    a plain inverse dynamics model trained on interactions alone.
    """
    if end_to_end:
        _, logits = label_video(bundle, batch.o_t, batch.o_t1, batch.o_hist)
    else:
        with torch.no_grad():
            latent, _ = label_video(bundle, batch.o_t, batch.o_t1, batch.o_hist)
        logits = project_action(bundle.action_projector, latent.quantized.detach())

    loss = action_cross_entropy(logits, batch.actions)
    aux = {'accuracy': float((greedy_action(logits.detach()) == batch.actions).float().mean())}
    return _report('GAP', loss, aux)


def loss_upc(bundle: ModelBundle, batch: PairBatch) -> LossReport:
    """
    Clone V's quantized latent actions into the policy's latent predictor.

    Targets are fully gradient-stopped and the policy reads stopped features,
    so only g_pi learns.
    """
    f = bundle.encoder
    with torch.no_grad():
        latent, target_logits = label_video(bundle, batch.o_t, batch.o_t1, batch.o_hist)
        target = latent.code
        feat_t = encode(f, batch.o_t)
        feat_hist = encode_history(f, batch.o_hist)

    predicted = policy_latent(bundle.policy_predictor, feat_t, feat_hist)
    loss = (predicted - target).pow(2).sum(-1).mean()
    if not torch.isfinite(loss.detach()):
        raise TrainingDivergedError('UPC', {'policy_agreement': math.nan})

    with torch.no_grad():
        policy_logits = project_action(bundle.action_projector, quantize(bundle.codebook, predicted).quantized)
        agreement = greedy_action(policy_logits) == greedy_action(target_logits)
    return _report('UPC', loss, {'policy_agreement': float(agreement.float().mean())})
