"""Training objective: content, style, gram, adversarial and identity terms.

All feature-space terms consume pyramids from the shared encoder so that
train-time and eval-time metric definitions cannot drift. Norms are plain
Euclidean distances (not squared) unless stated otherwise.
"""

import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LevelMismatchError, NonFiniteLossError, ShapeError
from .feature_codec import LEVELS

CONTENT_LEVELS = ("relu4_1", "relu5_1")
STATS_EPS = 1e-5


def euclidean(x: torch.Tensor) -> torch.Tensor:
    """Frobenius norm with an exact zero (and zero gradient) at x == 0."""
    q = (x * x).sum()
    return torch.where(q > 0, q.clamp(min=1e-40).sqrt(), torch.zeros_like(q))


def channel_stats(f: torch.Tensor, eps: float = STATS_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Channel-wise spatial mean and population std of a (C,H,W) feature."""
    flat = f.reshape(f.shape[0], -1)
    mu = flat.mean(dim=1)
    sigma = torch.sqrt(flat.var(dim=1, correction=0) + eps)
    return mu, sigma


def _check_levels(pyr_a: dict, pyr_b: dict, levels, spatial: bool) -> None:
    for level in levels:
        if level not in pyr_a or level not in pyr_b:
            raise LevelMismatchError(f"both pyramids must contain level {level}")
        sa, sb = pyr_a[level].shape, pyr_b[level].shape
        if sa[0] != sb[0] or (spatial and sa != sb):
            raise LevelMismatchError(f"{level}: pyramid shapes differ ({tuple(sa)} vs {tuple(sb)})")


def content_loss(pyr_cs: dict, pyr_c: dict, levels=CONTENT_LEVELS) -> torch.Tensor:
    """Euclidean feature distance, summed over the two deepest levels only
    (the shallow taps carry the color/texture the output must not copy)."""
    _check_levels(pyr_cs, pyr_c, levels, spatial=True)
    return sum(euclidean(pyr_cs[level] - pyr_c[level]) for level in levels)


def style_loss(pyr_cs: dict, pyr_s: dict) -> torch.Tensor:
    """Distance between channel-wise mean/std statistics over all 5 levels."""
    _check_levels(pyr_cs, pyr_s, LEVELS, spatial=False)
    total = None
    for level in LEVELS:
        mu_cs, sigma_cs = channel_stats(pyr_cs[level])
        mu_s, sigma_s = channel_stats(pyr_s[level])
        term = euclidean(mu_cs - mu_s) + euclidean(sigma_cs - sigma_s)
        total = term if total is None else total + term
    return total


def gram_matrix(f: torch.Tensor) -> torch.Tensor:
    """F F^T / (C*H*W) of a (C,H,W) feature."""
    c, h, w = f.shape
    flat = f.reshape(c, -1)
    return (flat @ flat.T) / (c * h * w)


def gram_loss(pyr_cs: dict, pyr_s: dict) -> torch.Tensor:
    """Mean-squared Gram difference over all levels. Metric only — not part
    of the training objective."""
    _check_levels(pyr_cs, pyr_s, LEVELS, spatial=False)
    total = None
    for level in LEVELS:
        diff = gram_matrix(pyr_cs[level]) - gram_matrix(pyr_s[level])
        term = diff.pow(2).mean()
        total = term if total is None else total + term
    return total


class Discriminator(nn.Module):
    """Four-stage strided patch classifier, 64 -> 512 channels, logit map out."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 64, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(64, 128, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(128, 256, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(256, 512, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(512, 1, 3, stride=1, padding=1),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 3 or img.shape[0] != 3:
            raise ShapeError(f"discriminator expects a 3xHxW image, got {tuple(img.shape)}")
        return self.net(img.unsqueeze(0)).squeeze(0).squeeze(0)


def discriminator_loss(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))] with the fake branch detached.

    softplus keeps the log-sigmoid terms finite for any logit.
    """
    return F.softplus(-disc(real)).mean() + F.softplus(disc(fake.detach())).mean()


def generator_adversarial_loss(disc: Discriminator, fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective -E[log D(fake)]."""
    return F.softplus(-disc(fake)).mean()


def adversarial_losses(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor):
    """(discriminator loss, generator loss) for one real/fake image pair."""
    return discriminator_loss(disc, real, fake), generator_adversarial_loss(disc, fake)


@dataclass
class LossWeights:
    """Objective weights: the five term multipliers plus the two inner
    identity coefficients."""

    style: float = 1.0
    content: float = 1.0
    identity: float = 1.0
    adversarial: float = 1.0
    style_prior: float = 1.0
    identity_pixel: float = 50.0
    identity_feature: float = 1.0

    def validate(self) -> None:
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


def identity_loss_from_parts(
    icc: torch.Tensor,
    iss: torch.Tensor,
    content_img: torch.Tensor,
    style_img: torch.Tensor,
    pyr_cc: dict,
    pyr_ss: dict,
    pyr_c: dict,
    pyr_s: dict,
    weights: LossWeights,
) -> torch.Tensor:
    """Reconstruction constraint from precomputed identity-branch outputs."""
    pixel = euclidean(icc - content_img) + euclidean(iss - style_img)
    _check_levels(pyr_cc, pyr_c, LEVELS, spatial=True)
    _check_levels(pyr_ss, pyr_s, LEVELS, spatial=True)
    feat = sum(
        euclidean(pyr_cc[level] - pyr_c[level]) + euclidean(pyr_ss[level] - pyr_s[level])
        for level in LEVELS
    )
    return weights.identity_pixel * pixel + weights.identity_feature * feat


def identity_loss(spast, encode, content_img, style_img, weights: LossWeights) -> torch.Tensor:
    """Penalty for the generator failing to reproduce (c,c) and (s,s) pairs.

    ``spast`` maps (content, style) images to a stylized image; ``encode``
    maps an image to a feature pyramid.
    """
    icc = spast(content_img, content_img)
    iss = spast(style_img, style_img)
    return identity_loss_from_parts(
        icc, iss, content_img, style_img,
        encode(icc), encode(iss), encode(content_img), encode(style_img),
        weights,
    )


@dataclass
class LossReport:
    """Per-step scalar breakdown of the training objective."""

    step: int
    content: float = 0.0
    style: float = 0.0
    identity: float = 0.0
    adversarial: float = 0.0
    style_prior: float = 0.0
    total: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "content": self.content,
                "style": self.style,
                "identity": self.identity,
                "adversarial": self.adversarial,
                "style_prior": self.style_prior,
                "total": self.total,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))


def total_loss(report: LossReport, weights: LossWeights) -> float:
    """Weighted sum of the five terms; recorded into ``report.total``.

    Aborts with NonFiniteLossError naming the offending term.
    """
    terms = {
        "style": (weights.style, report.style),
        "content": (weights.content, report.content),
        "identity": (weights.identity, report.identity),
        "adversarial": (weights.adversarial, report.adversarial),
        "style_prior": (weights.style_prior, report.style_prior),
    }
    for name, (_, value) in terms.items():
        if not torch.isfinite(torch.tensor(float(value))):
            raise NonFiniteLossError(f"loss term {name!r} is non-finite at step {report.step}: {value}")
    report.total = sum(lam * value for lam, value in terms.values())
    return report.total
