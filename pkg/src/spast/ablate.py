"""Ablation harness: retrain preset variants with one component disabled
and tabulate their metrics.

The built-in variants mirror the framework's ablation axes: drop the
style-prior term, drop the adversarial term, drop the local or the global
attention branch, or swap the trained prior for an untrained one. Timestep
sweeps and arbitrary config overrides (e.g. ``loss.adversarial=5``) cover
the weight-sensitivity experiments.

Metrics for the table are measured with a fixed, seed-pinned random
encoder shared by every variant, so style statistics are comparable across
runs that each train their own encoder.
"""

import copy
import json
import os

import torch

from .config import TrainConfig
from .data import list_images, load_image, seeded_generator
from .errors import ConfigError
from .eval_metrics import perceptual_distance
from .feature_codec import Encoder
from .losses import content_loss, gram_loss, style_loss
from .trainer import init_state, seeded_init_, stylize, train

TERMS = ("sp", "adv", "lwssm", "gwssm", "swap-prior")

_METRIC_ENCODER_SEED = 90210


def variant_config(base: TrainConfig, term: str | None = None, overrides: dict | None = None) -> TrainConfig:
    cfg = copy.deepcopy(base)
    if term == "sp":
        cfg.weights.style_prior = 0.0
    elif term == "adv":
        cfg.weights.adversarial = 0.0
    elif term == "lwssm":
        cfg.use_local = False
    elif term == "gwssm":
        cfg.use_global = False
    elif term == "swap-prior":
        cfg.prior.use_untrained = True
    elif term is not None:
        raise ConfigError(f"unknown ablation term {term!r}, expected one of {TERMS}")
    for key, value in (overrides or {}).items():
        _apply_override(cfg, key, value)
    return cfg


def _apply_override(cfg: TrainConfig, key: str, value: str) -> None:
    from .config import parse_config, format_config

    text = format_config(cfg)
    lines = [line for line in text.splitlines() if not line.startswith(key + "=")]
    lines.append(f"{key}={value}")
    parsed = parse_config("\n".join(lines))
    cfg.__dict__.update(parsed.__dict__)


def metric_encoder() -> Encoder:
    """Fixed random-weights encoder used to measure every variant."""
    encoder = Encoder()
    seeded_init_(encoder, seeded_generator(_METRIC_ENCODER_SEED, "metric-encoder"))
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder


def measure_run(state, encoder: Encoder, content_dir, style_dir, max_content: int = 10) -> dict:
    """Average metrics of a trained run over a fixed deterministic pair set."""
    content_files = list_images(content_dir)[:max_content]
    style_files = list_images(style_dir)
    sums = {"content_loss": 0.0, "style_loss": 0.0, "gram_loss": 0.0, "perceptual_distance": 0.0}
    pairs = 0
    with torch.no_grad():
        styles = [(load_image(f), None) for f in style_files]
        styles = [(img, encoder(img)) for img, _ in styles]
        for content_path in content_files:
            content_img = load_image(content_path)
            pyr_c = encoder(content_img)
            for style_img, pyr_s in styles:
                stylized = stylize(state, content_img, style_img)
                pyr_cs = encoder(stylized)
                sums["content_loss"] += float(content_loss(pyr_cs, pyr_c))
                sums["style_loss"] += float(style_loss(pyr_cs, pyr_s))
                sums["gram_loss"] += float(gram_loss(pyr_cs, pyr_s))
                sums["perceptual_distance"] += float(perceptual_distance(pyr_cs, pyr_c))
                pairs += 1
    return {k: v / pairs for k, v in sums.items()}


def run_variant(
    cfg: TrainConfig,
    name: str,
    seed: int,
    workdir,
    encoder: Encoder,
    quiet: bool = True,
) -> dict:
    run_cfg = copy.deepcopy(cfg)
    run_cfg.seed = seed
    run_dir = os.path.join(workdir, f"{name.replace('=', '-').replace('.', '-')}-seed{seed}")
    os.makedirs(run_dir, exist_ok=True)
    run_cfg.out_dir = run_dir
    reports = train(run_cfg, quiet=quiet)
    from .trainer import load_checkpoint

    state = load_checkpoint(os.path.join(run_dir, "checkpoint.spast"))
    row = {"variant": name, "seed": seed, "steps": run_cfg.iterations}
    row.update(measure_run(state, encoder, run_cfg.content_dir, run_cfg.style_dir))
    tail = reports[-min(50, len(reports)) :]
    row["final_total"] = sum(r.total for r in tail) / len(tail)
    return row


def ablate(
    base: TrainConfig,
    workdir,
    terms: tuple = TERMS,
    seeds: tuple = (0,),
    steps: int | None = None,
    timesteps: tuple = (),
    overrides: tuple = (),
    include_full: bool = True,
    quiet: bool = True,
) -> list:
    """Train the requested variants and return one metric row per run.

    ``steps`` overrides the per-run iteration budget (ablation tables do
    not need the full preset length). The full (unablated) model is run on
    every seed; named variants run on the first seed unless ``seeds`` has
    one entry, in which case everything shares it.
    """
    cfg = copy.deepcopy(base)
    if steps:
        cfg.iterations = steps
    encoder = metric_encoder()
    rows = []
    if include_full:
        for seed in seeds:
            rows.append(run_variant(variant_config(cfg), "full", seed, workdir, encoder, quiet))
    for term in terms:
        rows.append(run_variant(variant_config(cfg, term), f"no-{term}" if term != "swap-prior" else term, seeds[0], workdir, encoder, quiet))
    for t in timesteps:
        t_cfg = variant_config(cfg, None, {"prior.t_fixed": str(t)})
        rows.append(run_variant(t_cfg, f"t{t}", seeds[0], workdir, encoder, quiet))
    for override in overrides:
        key, _, value = override.partition("=")
        o_cfg = variant_config(cfg, None, {key: value})
        rows.append(run_variant(o_cfg, override, seeds[0], workdir, encoder, quiet))
    return rows


def format_table(rows: list) -> str:
    columns = ("variant", "seed", "content_loss", "style_loss", "gram_loss", "perceptual_distance", "final_total")
    lines = ["\t".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            value = row[col]
            cells.append(f"{value:.5g}" if isinstance(value, float) else str(value))
        lines.append("\t".join(cells))
    return "\n".join(lines)


def write_table(rows: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
