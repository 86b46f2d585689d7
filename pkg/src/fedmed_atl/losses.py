"""Training objectives.

The auxiliary terms are written as expected log-likelihoods in their
original form; here they are negative log-likelihoods (cross-entropy), so
every term is non-negative and the totals are minimized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

from .atm import CLASS_COUNTS, TRANSFORM_TYPES, ViewBatch
from .networks import Discriminator

LOG_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Loss weights; auxiliary weights differ between generator and critic updates."""

    adv: float = 1.0
    cyc: float = 10.0
    rot: float = 1.0
    trans: float = 1.0
    scale: float = 1.0
    d_rot: float = 0.5
    d_trans: float = 0.5
    d_scale: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    @property
    def uses_atm(self) -> bool:
        return any(getattr(self, n) > 0 for n in ("rot", "trans", "scale", "d_rot", "d_trans", "d_scale"))

    def only(self, *kinds: str) -> LossWeights:
        """Keep the auxiliary weights of ``kinds`` and zero the others."""
        changes = {}
        for kind in TRANSFORM_TYPES:
            if kind not in kinds:
                changes[kind] = 0.0
                changes[f"d_{kind}"] = 0.0
        return replace(self, **changes)


@dataclass
class GeneratorComponents:
    adv: torch.Tensor | float = 0.0
    cyc: torch.Tensor | float = 0.0
    rot: torch.Tensor | float = 0.0
    trans: torch.Tensor | float = 0.0
    scale: torch.Tensor | float = 0.0


@dataclass
class DiscriminatorComponents:
    adv: torch.Tensor | float = 0.0
    rot: torch.Tensor | float = 0.0
    trans: torch.Tensor | float = 0.0
    scale: torch.Tensor | float = 0.0


def _classification_loss(logits: torch.Tensor, labels, lam: float, n_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2 or logits.shape[1] != n_classes:
        raise ValueError(f"expected (N, {n_classes}) logits, got {tuple(logits.shape)}")
    if labels.shape != logits.shape[:1]:
        raise ValueError(f"{labels.numel()} labels for {logits.shape[0]} logit rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    logp = F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    return lam * -(logp.clamp_min(math.log(LOG_EPS))).mean()


def aux_rotation_loss(rot_logits: torch.Tensor, labels, lambda_rot: float = 1.0) -> torch.Tensor:
    return _classification_loss(rot_logits, labels, lambda_rot, CLASS_COUNTS["rot"])


def aux_translation_loss(trans_logits: torch.Tensor, labels, lambda_trans: float = 1.0) -> torch.Tensor:
    return _classification_loss(trans_logits, labels, lambda_trans, CLASS_COUNTS["trans"])


def aux_scaling_loss(scale_logits: torch.Tensor, labels, lambda_scale: float = 1.0) -> torch.Tensor:
    return _classification_loss(scale_logits, labels, lambda_scale, CLASS_COUNTS["scale"])


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_EPS, 1 - LOG_EPS))


def adversarial_loss_d(realness_real: torch.Tensor, realness_fake: torch.Tensor) -> torch.Tensor:
    """Critic side of the GAN objective: -E[log D(y)] - E[log(1 - D(G(x)))]."""
    return -_log(realness_real).mean() - _log(1 - realness_fake).mean()


def adversarial_loss_g(realness_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator side: -E[log D(G(x))]."""
    return -_log(realness_fake).mean()


def cycle_loss(x: torch.Tensor, x_cycled: torch.Tensor, y: torch.Tensor, y_cycled: torch.Tensor,
               lambda_cyc: float = 1.0) -> torch.Tensor:
    """Per-pixel mean L1 of both round trips, times ``lambda_cyc``."""
    if x.shape != x_cycled.shape or y.shape != y_cycled.shape:
        raise ValueError(f"cycle shapes differ: {tuple(x.shape)} vs {tuple(x_cycled.shape)}, "
                         f"{tuple(y.shape)} vs {tuple(y_cycled.shape)}")
    return lambda_cyc * ((x_cycled - x).abs().mean() + (y_cycled - y).abs().mean())


def total_generator_loss(c: GeneratorComponents, w: LossWeights):
    return w.adv * c.adv + w.cyc * c.cyc + w.rot * c.rot + w.trans * c.trans + w.scale * c.scale


def total_discriminator_loss(c: DiscriminatorComponents, w: LossWeights):
    return c.adv + w.d_rot * c.rot + w.d_trans * c.trans + w.d_scale * c.scale


_LOSS_FNS = {"rot": aux_rotation_loss, "trans": aux_translation_loss, "scale": aux_scaling_loss}


def atl_components(disc: Discriminator, batches: Sequence[ViewBatch], mode: str,
                   kinds: Iterable[str] = TRANSFORM_TYPES, device=None,
                   dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Unweighted auxiliary cross-entropies of ``disc`` on ATM views.

    ``mode="generator"`` accepts real-sample views only; ``mode="discriminator"``
    needs both real and fake views. All views of one transform type are
    pooled, so equally sized real and fake batches weigh equally. One encoder
    pass covers every requested view.
    """
    sources = {b.source_kind for b in batches}
    if mode == "generator":
        if sources - {"real"}:
            raise ValueError("generator updates may only see ATM views of real samples")
    elif mode == "discriminator":
        if sources != {"real", "fake"}:
            raise ValueError("critic updates need ATM views of both real and fake samples")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    kinds = [k for k in TRANSFORM_TYPES if k in set(kinds)]
    if not kinds:
        return {}
    chunks, labels, sizes = [], {}, []
    for kind in kinds:
        views = [torch.as_tensor(b.of_type(kind)[0], dtype=dtype) for b in batches]
        labels[kind] = torch.cat([torch.as_tensor(b.of_type(kind)[1]) for b in batches])
        chunks.extend(views)
        sizes.append(sum(len(v) for v in views))
    x = torch.cat(chunks)
    if device is not None:
        x = x.to(device)
    feats = disc.encode(x)
    out = {}
    for kind, part in zip(kinds, torch.split(feats, sizes)):
        head = {"rot": disc.head_r, "trans": disc.head_t, "scale": disc.head_s}[kind]
        out[kind] = _LOSS_FNS[kind](head(part), labels[kind].to(part.device), 1.0)
    return out
