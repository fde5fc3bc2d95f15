"""Training configuration: dataclasses plus the flat key=value file format.

Keys are namespaced ``train.*``, ``lgwssm.*``, ``loss.*``, ``prior.*``;
one ``key=value`` pair per line, ``#`` starts a comment.
"""

import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .losses import LossWeights


@dataclass
class PriorConfig:
    total_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    t_fixed: int = 500
    sample_t: bool = False
    include_jacobian: bool = False
    ckpt: str = ""
    use_untrained: bool = False
    resolution: int = 64
    embed_dim: int = 64
    hidden: int = 32
    train_steps: int = 3000
    lr: float = 1e-4
    freeze_denoiser: bool = False


@dataclass
class TrainConfig:
    iterations: int = 160_000
    lr: float = 1e-4
    batch: int = 1
    resize: int = 512
    crop: int = 256
    seed: int = 0
    content_dir: str = ""
    style_dir: str = ""
    out_dir: str = ""
    grad_clip: float = 10.0
    log_every: int = 100
    encoder_weights: str = ""
    b: int = 4
    levels: tuple = ("relu4_1", "relu5_1")
    use_local: bool = True
    use_global: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    prior: PriorConfig = field(default_factory=PriorConfig)

    def validate(self) -> None:
        if self.iterations < 1 or self.batch < 1:
            raise ConfigError("iterations and batch must be positive")
        if self.crop % 8 or self.crop < 16:
            raise ConfigError(f"crop must be a multiple of 8 and >= 16, got {self.crop}")
        if self.resize < self.crop:
            raise ConfigError(f"resize ({self.resize}) must be >= crop ({self.crop})")
        self.weights.validate()


_TRAIN_KEYS = {
    "train.iterations": ("iterations", int),
    "train.lr": ("lr", float),
    "train.batch": ("batch", int),
    "train.resize": ("resize", int),
    "train.crop": ("crop", int),
    "train.seed": ("seed", int),
    "train.content_dir": ("content_dir", str),
    "train.style_dir": ("style_dir", str),
    "train.out_dir": ("out_dir", str),
    "train.grad_clip": ("grad_clip", float),
    "train.log_every": ("log_every", int),
    "train.encoder_weights": ("encoder_weights", str),
}
_LGWSSM_KEYS = {
    "lgwssm.b": ("b", int),
    "lgwssm.levels": ("levels", "levels"),
    "lgwssm.use_local": ("use_local", "bool"),
    "lgwssm.use_global": ("use_global", "bool"),
}
_LOSS_KEYS = {
    "loss.style": "style",
    "loss.content": "content",
    "loss.identity": "identity",
    "loss.adversarial": "adversarial",
    "loss.style_prior": "style_prior",
    "loss.identity_pixel": "identity_pixel",
    "loss.identity_feature": "identity_feature",
}
_PRIOR_KEYS = {
    "prior.T": ("total_steps", int),
    "prior.beta_min": ("beta_min", float),
    "prior.beta_max": ("beta_max", float),
    "prior.t_fixed": ("t_fixed", int),
    "prior.sample_t": ("sample_t", "bool"),
    "prior.include_jacobian": ("include_jacobian", "bool"),
    "prior.ckpt": ("ckpt", str),
    "prior.use_untrained": ("use_untrained", "bool"),
    "prior.resolution": ("resolution", int),
    "prior.embed_dim": ("embed_dim", int),
    "prior.hidden": ("hidden", int),
    "prior.train_steps": ("train_steps", int),
    "prior.lr": ("lr", float),
    "prior.freeze_denoiser": ("freeze_denoiser", "bool"),
}


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _convert(raw: str, kind):
    if kind == "bool":
        return _parse_bool(raw)
    if kind == "levels":
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    return kind(raw)


def parse_config(text: str) -> TrainConfig:
    cfg = TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _TRAIN_KEYS:
            name, kind = _TRAIN_KEYS[key]
            setattr(cfg, name, _convert(raw, kind))
        elif key in _LGWSSM_KEYS:
            name, kind = _LGWSSM_KEYS[key]
            setattr(cfg, name, _convert(raw, kind))
        elif key in _LOSS_KEYS:
            setattr(cfg.weights, _LOSS_KEYS[key], float(raw))
        elif key in _PRIOR_KEYS:
            name, kind = _PRIOR_KEYS[key]
            setattr(cfg.prior, name, _convert(raw, kind))
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    cfg.validate()
    return cfg


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, (name, kind) in _TRAIN_KEYS.items():
        lines.append(f"{key}={getattr(cfg, name)}")
    for key, (name, kind) in _LGWSSM_KEYS.items():
        value = getattr(cfg, name)
        if kind == "levels":
            value = ",".join(value)
        lines.append(f"{key}={value}")
    for key, name in _LOSS_KEYS.items():
        lines.append(f"{key}={getattr(cfg.weights, name)}")
    for key, (name, kind) in _PRIOR_KEYS.items():
        lines.append(f"{key}={getattr(cfg.prior, name)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def cache_dir() -> str:
    """Corpus/preset cache directory, overridable via SPAST_CACHE_DIR."""
    return os.environ.get("SPAST_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "spast"))


def desk_preset(workdir, iterations: int = 2000, seed: int = 0) -> TrainConfig:
    """Small self-contained preset: 50 synthetic content / 10 synthetic
    style images at 64x64, b=2, batch 1, lr 1e-4."""
    from .data import generate_corpus

    content_dir, style_dir = generate_corpus(workdir, n_content=50, n_style=10, size=64)
    cfg = TrainConfig(
        iterations=iterations,
        lr=1e-4,
        batch=1,
        resize=64,
        crop=64,
        seed=seed,
        content_dir=content_dir,
        style_dir=style_dir,
        out_dir=str(workdir),
        b=2,
    )
    cfg.prior.ckpt = os.path.join(workdir, "prior.spast")
    cfg.prior.train_steps = 3000
    cfg.validate()
    return cfg
