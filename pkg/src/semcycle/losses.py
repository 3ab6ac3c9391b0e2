"""Training objectives: adversarial, semantic, weighted cycle, and their composition.

Tensors follow the torch layout: images ``N x 3 x H x W`` in [-1, 1], score
maps ``N x 1 x h x w`` (probabilities), segmentation logits ``N x C x H x W``,
labels ``N x H x W`` (int64), weight masks ``N x H x W``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from .errors import NonFiniteLossError

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_sem: float = 1.0
    lambda_rec: float = 3.0

    def __post_init__(self):
        if self.lambda_sem < 0 or self.lambda_rec < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Scalar loss parts for one step, all evaluated at the same parameters.

    ``adv_st``/``adv_ts`` are the adversarial values (<= 0) of the S->T and
    T->S directions. ``sem_st`` is the cross entropy of the target-side head
    on adapted source images, ``sem_ts`` that of the source-side head on raw
    source images. ``g_adv`` is the generator adversarial objective actually
    optimized (differs from ``adv_st + adv_ts`` under the non-saturating form).
    """

    adv_st: float = 0.0
    adv_ts: float = 0.0
    sem_st: float = 0.0
    sem_ts: float = 0.0
    rec: float = 0.0
    total_d: float = 0.0
    total_g: float = 0.0
    g_adv: float = 0.0

    @property
    def adv(self) -> float:
        return self.adv_st + self.adv_ts

    @property
    def sem(self) -> float:
        return self.sem_st + self.sem_ts

    def recomposed(self, weights: LossWeights) -> Tuple[float, float]:
        return compose_losses(self.adv, self.sem, self.rec, weights)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossBreakdown":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


def check_finite(name: str, value, step: Optional[int] = None) -> None:
    v = value.detach() if isinstance(value, torch.Tensor) else torch.as_tensor(value)
    if not bool(torch.isfinite(v).all()):
        raise NonFiniteLossError(name, step)


def _probs(p: torch.Tensor, name: str) -> torch.Tensor:
    if torch.isnan(p).any():
        raise NonFiniteLossError(name)
    if (p < 0).any() or (p > 1).any():
        raise ValueError(f"{name} must hold probabilities in [0, 1]")
    return p.clamp(EPS, 1.0 - EPS)


def adversarial_value(d_on_real: torch.Tensor, d_on_fake: torch.Tensor) -> torch.Tensor:
    """E[log D(real)] + E[log(1 - D(fake))]; per-patch scores are averaged."""
    real = _probs(d_on_real, "d_on_real")
    fake = _probs(d_on_fake, "d_on_fake")
    return torch.log(real).mean() + torch.log1p(-fake).mean()


def generator_adversarial(d_on_fake: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    fake = _probs(d_on_fake, "d_on_fake")
    if saturating:
        return torch.log1p(-fake).mean()
    return -torch.log(fake).mean()


def _logits(z: torch.Tensor, name: str) -> torch.Tensor:
    if torch.isnan(z).any():
        raise NonFiniteLossError(name)
    return z


def adversarial_value_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """``adversarial_value`` computed from pre-sigmoid scores.

    ``log sigmoid`` is finite for any finite logit, so no clamp is needed and
    the gradient does not vanish when the discriminator is very confident.
    """
    real = _logits(real_logits, "d_on_real")
    fake = _logits(fake_logits, "d_on_fake")
    return F.logsigmoid(real).mean() + F.logsigmoid(-fake).mean()


def generator_adversarial_logits(fake_logits: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    fake = _logits(fake_logits, "d_on_fake")
    if saturating:
        return F.logsigmoid(-fake).mean()
    return -F.logsigmoid(fake).mean()


def adversarial_loss_pair(
    d_on_real: torch.Tensor, d_on_fake: torch.Tensor, saturating: bool = False
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(d_objective, g_objective)``, both to be minimized.

    ``d_objective`` is the negated adversarial value. ``g_objective`` is the
    generator-dependent part of the adversarial value when ``saturating``;
    otherwise the non-saturating ``-E[log D(fake)]``.
    """
    return -adversarial_value(d_on_real, d_on_fake), generator_adversarial(d_on_fake, saturating)


def pixel_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 4 or labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not align")
    return F.cross_entropy(logits, labels.long(), reduction="mean")


def semantic_loss(
    seg_logits_on_adapted: Optional[torch.Tensor],
    seg_logits_on_source: Optional[torch.Tensor],
    labels: torch.Tensor,
) -> torch.Tensor:
    """Sum of the per-pixel mean cross entropies of both segmentation heads.

    Either head may be ``None`` (single-discriminator ablations).
    """
    terms = [pixel_cross_entropy(lg, labels) for lg in (seg_logits_on_adapted, seg_logits_on_source) if lg is not None]
    if not terms:
        raise ValueError("semantic_loss needs at least one head")
    return sum(terms)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def source_reconstruction(recon: torch.Tensor, x_s: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Mean over pixels and channels of ``(1 - w) * |recon - x_s|``."""
    _same_shape(recon, x_s, "source reconstruction")
    if w.dim() == 3:
        w = w.unsqueeze(1)
    if w.shape != (x_s.shape[0], 1) + tuple(x_s.shape[2:]):
        raise ValueError(f"weight mask {tuple(w.shape)} does not align with images {tuple(x_s.shape)}")
    return ((1.0 - w.to(x_s.dtype)) * (recon - x_s).abs()).mean()


def weighted_cycle_loss(
    target_cycle: Optional[torch.Tensor],
    x_t: Optional[torch.Tensor],
    source_cycle: torch.Tensor,
    x_s: torch.Tensor,
    w: torch.Tensor,
) -> torch.Tensor:
    """Mean L1 target cycle error plus (1 - w)-weighted mean L1 source cycle error."""
    loss = source_reconstruction(source_cycle, x_s, w)
    if target_cycle is not None:
        _same_shape(target_cycle, x_t, "target cycle")
        loss = loss + (target_cycle - x_t).abs().mean()
    return loss


def compose_losses(adv, sem, rec, weights: LossWeights):
    """Discriminator and generator totals: ``(-adv + ls*sem, adv + ls*sem + lr*rec)``."""
    for name, value in (("adv", adv), ("sem", sem), ("rec", rec)):
        if isinstance(value, torch.Tensor):
            check_finite(name, value)
        elif not math.isfinite(value):
            raise NonFiniteLossError(name)
    l_d = -adv + weights.lambda_sem * sem
    l_g = adv + weights.lambda_sem * sem + weights.lambda_rec * rec
    return l_d, l_g
