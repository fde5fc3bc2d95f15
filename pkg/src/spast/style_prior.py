"""Diffusion style prior: toy conditional denoiser and the prior loss.

Stage one trains a small conditional denoiser to reconstruct the noise
added to latent style images, conditioned on a learned style embedding
(self-attention pooling over frozen encoder features — the desk-scale
stand-in for a large pretrained image encoder). Stage two freezes the
whole prior and uses its noise-prediction residual to inject gradients
into the generator through the differentiable latent codec.
"""

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import load_container, module_fingerprint, save_container
from .errors import FrozenPriorError, ParameterRangeError, ShapeError, StepRangeError
from .feature_codec import Encoder

PRIOR_FILE_TYPE = "spast.prior"


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta diffusion schedule; alpha_bars[t-1] is the cumulative
    noise-retention coefficient for 1-indexed step t."""

    betas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def total_steps(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.total_steps:
            raise StepRangeError(f"timestep {t} outside [1, {self.total_steps}]")
        return float(self.alpha_bars[t - 1])

    def loss_weight(self, t: int) -> float:
        """Schedule weight w(t) = 1 - alpha_bar(t)."""
        return 1.0 - self.alpha_bar(t)


def build_schedule(total_steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if total_steps < 1:
        raise ParameterRangeError(f"total_steps must be >= 1, got {total_steps}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ParameterRangeError(f"need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = torch.linspace(beta_min, beta_max, total_steps, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(betas, alpha_bars)


def add_noise(z: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward-diffuse a latent: sqrt(ab_t) z + sqrt(1 - ab_t) eps."""
    if eps.shape != z.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * z + math.sqrt(1.0 - ab) * eps


class LatentCodec:
    """Interface: differentiable encode(image) -> latent, decode(latent) -> image."""

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class AvgPoolCodec(LatentCodec):
    """Fixed 4x average-pool codec — a degenerate but differentiable VAE
    stand-in. A learned codec can be swapped in behind the same methods."""

    factor = 4

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(img.unsqueeze(0), self.factor).squeeze(0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(z.unsqueeze(0), scale_factor=self.factor, mode="bilinear", align_corners=False)
        return up.squeeze(0).clamp(0.0, 1.0)


class StyleEmbedder(nn.Module):
    """Learnable self-attention pooling over relu4_1 features."""

    def __init__(self, channels: int = 512, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.key = nn.Linear(channels, dim)
        self.value = nn.Linear(channels, dim)
        self.query = nn.Parameter(torch.zeros(dim))
        self.out = nn.Linear(dim, dim)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        tokens = feat.reshape(feat.shape[0], -1).T  # (T, C)
        attn = torch.softmax(self.key(tokens) @ self.query / math.sqrt(self.dim), dim=0)
        return self.out(attn @ self.value(tokens))


def _timestep_features(t: int, dim: int, dtype, device) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=dtype, device=device) * (-math.log(10000.0) / max(half - 1, 1)))
    angles = t * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class ConditionalDenoiser(nn.Module):
    """Small U-shaped convnet predicting the injected noise.

    Conditioning (timestep features + style embedding) enters as a
    per-channel shift at both resolutions.
    """

    time_dim = 32

    def __init__(self, channels: int = 3, hidden: int = 32, embed_dim: int = 64):
        super().__init__()
        self.cond = nn.Sequential(nn.Linear(self.time_dim + embed_dim, 4 * hidden), nn.SiLU(), nn.Linear(4 * hidden, 4 * hidden))
        self.shift_in = nn.Linear(4 * hidden, hidden)
        self.shift_mid = nn.Linear(4 * hidden, 2 * hidden)
        self.conv_in = nn.Conv2d(channels, hidden, 3, padding=1)
        self.down = nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1)
        self.up = nn.Conv2d(2 * hidden, hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, z: torch.Tensor, embedding: torch.Tensor, t: int) -> torch.Tensor:
        tf = _timestep_features(t, self.time_dim, z.dtype, z.device)
        cond = self.cond(torch.cat([tf, embedding]))
        x = z.unsqueeze(0)
        h1 = F.silu(self.conv_in(x) + self.shift_in(cond).view(1, -1, 1, 1))
        h2 = F.silu(self.down(h1) + self.shift_mid(cond).view(1, -1, 1, 1))
        h2 = F.silu(self.mid(h2))
        u = F.silu(self.up(F.interpolate(h2, scale_factor=2, mode="nearest")))
        return self.conv_out(u + h1).squeeze(0)


class StylePrior(nn.Module):
    """Self-contained critic: frozen encoder snapshot, embedding head,
    conditional denoiser and the noise schedule they were trained with."""

    def __init__(
        self,
        encoder: Encoder,
        schedule: NoiseSchedule,
        embed_dim: int = 64,
        hidden: int = 32,
        resolution: int = 64,
        run_id: str = "",
    ):
        super().__init__()
        self.encoder = encoder
        self.embedder = StyleEmbedder(512, embed_dim)
        self.denoiser = ConditionalDenoiser(3, hidden, embed_dim)
        self.schedule = schedule
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.resolution = resolution
        self.run_id = run_id
        self._embed_cache: dict = {}
        # the encoder stands in for a frozen pretrained image encoder
        for p in self.encoder.parameters():
            p.requires_grad_(False)

    def embed_features(self, feat: torch.Tensor) -> torch.Tensor:
        return self.embedder(feat)

    def embed(self, style_img: torch.Tensor) -> torch.Tensor:
        """Style embedding of an image (resized to the prior's native size).

        Frozen priors memoize embeddings by image content, since repeated
        style crops dominate training steps.
        """
        if self.is_frozen:
            key = hashlib.sha256(style_img.detach().contiguous().numpy().tobytes()).hexdigest()
            if key in self._embed_cache:
                return self._embed_cache[key]
        img = resize_image(style_img, self.resolution)
        with torch.no_grad():
            feat = self.encoder(img)["relu4_1"]
        embedding = self.embed_features(feat)
        if self.is_frozen:
            if len(self._embed_cache) >= 256:
                self._embed_cache.clear()
            self._embed_cache[key] = embedding.detach()
        return embedding

    def predict(self, z_t: torch.Tensor, embedding: torch.Tensor, t: int) -> torch.Tensor:
        return self.denoiser(z_t, embedding, t)

    def freeze(self) -> "StylePrior":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def is_frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())

    def fingerprint(self) -> str:
        return module_fingerprint(self)


def resize_image(img: torch.Tensor, size: int) -> torch.Tensor:
    """Differentiable bilinear resize to size x size (no-op when already there)."""
    if img.shape[-2] == size and img.shape[-1] == size:
        return img
    out = F.interpolate(img.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False)
    return out.squeeze(0)


def prior_recon_loss(
    prior: StylePrior,
    codec: LatentCodec,
    sched: NoiseSchedule,
    style_img: torch.Tensor,
    t: int,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Squared noise-prediction error used to train the prior."""
    img = resize_image(style_img, prior.resolution)
    z = codec.encode(img)
    z_t = add_noise(z, t, eps, sched)
    embedding = prior.embed(style_img)
    return ((eps - prior.predict(z_t, embedding, t)) ** 2).sum()


def style_prior_loss(
    prior: StylePrior,
    codec: LatentCodec,
    sched: NoiseSchedule,
    stylized: torch.Tensor,
    style_img: torch.Tensor,
    t: int = 500,
    eps: torch.Tensor | None = None,
    include_jacobian: bool = False,
    weight: float | None = None,
    generator: torch.Generator | None = None,
):
    """Gradient-injection objective from the frozen prior.

    Computes the noise residual r = eps_hat - eps at the fixed timestep and
    feeds w(t) * r back through the differentiable latent encode of the
    stylized image. By default the residual is treated as a constant (the
    denoiser Jacobian is omitted, the stable standard estimator);
    ``include_jacobian`` backpropagates through the denoiser activations
    instead. Returns ``(proxy, surrogate)``: the detached scalar
    w(t) * mean(r^2) for logging and the tensor to include in the backward
    objective.
    """
    if not prior.is_frozen:
        raise FrozenPriorError("style prior parameters must be frozen before use as a critic")
    z = codec.encode(resize_image(stylized, prior.resolution))
    if eps is None:
        eps = torch.empty_like(z).normal_(generator=generator)
    z_t = add_noise(z, t, eps, sched)
    with torch.no_grad():
        embedding = prior.embed(style_img)
    w = sched.loss_weight(t) if weight is None else weight
    if include_jacobian:
        eps_hat = prior.predict(z_t, embedding, t)
        residual = eps_hat - eps
        surrogate = 0.5 * w * (residual**2).sum()
        proxy = (w * residual.detach().pow(2).mean()).detach()
    else:
        with torch.no_grad():
            eps_hat = prior.predict(z_t, embedding, t)
        residual = (eps_hat - eps).detach()
        surrogate = w * (residual * z_t).sum()
        proxy = (w * residual.pow(2).mean()).detach()
    return proxy, surrogate


def save_prior(path, prior: StylePrior) -> None:
    tensors = dict(prior.state_dict())
    tensors["schedule.betas"] = prior.schedule.betas
    save_container(
        path,
        PRIOR_FILE_TYPE,
        tensors,
        extra={
            "embed_dim": prior.embed_dim,
            "hidden": prior.hidden,
            "resolution": prior.resolution,
            "run_id": prior.run_id,
        },
    )


def load_prior(path, frozen: bool = True) -> StylePrior:
    _, tensors, extra = load_container(path, expected_type=PRIOR_FILE_TYPE)
    betas = tensors.pop("schedule.betas")
    sched = NoiseSchedule(betas, torch.cumprod(1.0 - betas, dim=0))
    prior = StylePrior(
        Encoder(),
        sched,
        embed_dim=extra["embed_dim"],
        hidden=extra["hidden"],
        resolution=extra["resolution"],
        run_id=extra["run_id"],
    )
    prior.load_state_dict(tensors)
    if frozen:
        prior.freeze()
    return prior
