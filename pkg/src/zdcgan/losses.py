"""Loss terms of the regularized conditional GAN objective.

The generator objective is

    total = adv + lambda_div * div + lambda_in * intensity + lambda_aux * aux

where adv is the adversarial term (non-saturating by default), div the
variance-weighted diversity ratio, intensity the absolute pixel-sum gap to the
condition's reference sample and aux the squared error of the predicted shower
center. All functions accept torch tensors (or array-likes) and return scalar
torch tensors so they can sit on the autograd path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

# Sigmoid outputs are clamped away from {0, 1} before the log.
LOG_EPS = 1e-7
# Guard added to the image distance in the diversity ratio.
DIVERSITY_EPS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    """Per-term strengths; defaults are the grid-search optimum reported for
    the original detector dataset."""

    lambda_div: float = 1e-1
    lambda_in: float = 1e-10
    lambda_aux: float = 1e-3

    def validate(self) -> None:
        for name in ("lambda_div", "lambda_in", "lambda_aux"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return {
            "lambda_div": self.lambda_div,
            "lambda_in": self.lambda_in,
            "lambda_aux": self.lambda_aux,
        }


@dataclass
class LossBreakdown:
    """Per-term values plus their weighted sum. Fields may hold floats or
    scalar tensors; total stays on the autograd graph when tensors go in."""

    adv: object
    div: object
    intensity: object
    aux: object
    total: object

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*(float(getattr(self, f)) for f in ("adv", "div", "intensity", "aux", "total")))

    def to_dict(self) -> dict:
        f = self.as_floats()
        return {"adv": f.adv, "div": f.div, "intensity": f.intensity, "aux": f.aux, "total": f.total}


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t if t.is_floating_point() else t.double()


def adversarial_d_loss(d_real, d_fake) -> torch.Tensor:
    """Discriminator objective -mean log D(real) - mean log(1 - D(fake)).

    Inputs are probabilities in (0, 1); values at the boundary are clamped by
    LOG_EPS before the log.
    """
    dr, df = _as_tensor(d_real).flatten(), _as_tensor(d_fake).flatten()
    if dr.numel() == 0 or df.numel() == 0:
        raise ValueError("batches must be non-empty")
    if dr.numel() != df.numel():
        raise ValueError(f"batch lengths differ: {dr.numel()} vs {df.numel()}")
    return -torch.log(dr.clamp(min=LOG_EPS)).mean() - torch.log((1 - df).clamp(min=LOG_EPS)).mean()


def adversarial_g_loss(d_fake, saturating: bool = False) -> torch.Tensor:
    """Generator adversarial term: -mean log D(fake) (non-saturating default)
    or the saturating +mean log(1 - D(fake)) behind the flag."""
    df = _as_tensor(d_fake).flatten()
    if df.numel() == 0:
        raise ValueError("batch must be non-empty")
    if saturating:
        return torch.log((1 - df).clamp(min=LOG_EPS)).mean()
    return -torch.log(df.clamp(min=LOG_EPS)).mean()


def aux_loss(predicted, target) -> torch.Tensor:
    """Mean squared Euclidean error between predicted and target (row, col)
    shower-center coordinates."""
    p, t = _as_tensor(predicted), _as_tensor(target)
    if p.dim() == 1:
        p = p.unsqueeze(0)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if p.shape != t.shape or p.shape[-1] != 2:
        raise ValueError(f"coordinate batches must both be (n, 2), got {tuple(p.shape)} vs {tuple(t.shape)}")
    return ((p - t) ** 2).sum(dim=-1).mean()


def intensity_loss(x_ref, x_gen) -> torch.Tensor:
    """Absolute gap between the pixel sums of reference and generated
    responses; mean over the batch. Symmetric in its arguments."""
    r, g = _as_tensor(x_ref), _as_tensor(x_gen)
    if r.dim() == 2:
        r = r.unsqueeze(0)
    if g.dim() == 2:
        g = g.unsqueeze(0)
    if r.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(g.shape)}")
    return (r.sum(dim=(-2, -1)) - g.sum(dim=(-2, -1))).abs().mean()


def diversity_loss(weight, x1, x2, z1, z2, eps: float = DIVERSITY_EPS) -> torch.Tensor:
    """Variance-weighted ratio of latent distance to image distance.

    Per pair: weight * d_z / (d_I + eps) with d_z the mean absolute latent
    difference and d_I the mean absolute pixel difference; batch result is the
    mean over pairs. Identical latent codes are rejected: the ratio is only
    meaningful for two distinct draws.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    w = _as_tensor(weight).flatten()
    a, b = _as_tensor(x1), _as_tensor(x2)
    za, zb = _as_tensor(z1), _as_tensor(z2)
    if a.dim() == 2:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if za.dim() == 1:
        za, zb = za.unsqueeze(0), zb.unsqueeze(0)
    if a.shape != b.shape or za.shape != zb.shape:
        raise ValueError("pair shapes must match")
    d_z = (za - zb).abs().mean(dim=-1)
    if bool((d_z == 0).any()):
        raise ValueError("latent codes in a pair must be distinct")
    d_i = (a - b).abs().mean(dim=(-2, -1))
    return (w * d_z / (d_i + eps)).mean()


def total_generator_loss(adv, div, intensity, aux, w: LossWeights) -> LossBreakdown:
    """Weighted combination of the four generator terms."""
    w.validate()
    for name, v in (("adv", adv), ("div", div), ("intensity", intensity), ("aux", aux)):
        val = float(v)
        if not math.isfinite(val):
            raise ValueError(f"non-finite loss term {name}: {val}")
    total = adv + w.lambda_div * div + w.lambda_in * intensity + w.lambda_aux * aux
    return LossBreakdown(adv=adv, div=div, intensity=intensity, aux=aux, total=total)
