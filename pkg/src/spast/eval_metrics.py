"""Quantitative evaluation over content x style directories plus an
inference-time benchmark.

Metric definitions are the ``losses`` module's — shared code, so train-time
and eval-time formulas cannot drift. The perceptual distance is an
in-library stand-in: mean squared distance of channelwise unit-normalized
encoder features, averaged over all five levels (levels are declared in
the report header).
"""

import csv
import json
import math
import platform
import statistics
import time
from dataclasses import dataclass, field

import torch

from .data import list_images, load_image
from .errors import UnreadableImageError
from .feature_codec import LEVELS
from .losses import content_loss, gram_loss, style_loss

PERCEPTUAL_LEVELS = LEVELS


def perceptual_distance(pyr_a: dict, pyr_b: dict, levels=PERCEPTUAL_LEVELS) -> torch.Tensor:
    """LPIPS-like distance without external pretrained networks."""
    total = None
    for level in levels:
        ua = torch.nn.functional.normalize(pyr_a[level], dim=0, eps=1e-10)
        ub = torch.nn.functional.normalize(pyr_b[level], dim=0, eps=1e-10)
        term = (ua - ub).pow(2).sum(dim=0).mean()
        total = term if total is None else total + term
    return total / len(levels)


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB."""
    mse = float((a - b).pow(2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class EvalReport:
    """Per-pair metric records plus their aggregates."""

    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    METRICS = ("content_loss", "style_loss", "gram_loss", "perceptual_distance")

    def aggregate(self) -> None:
        for metric in self.METRICS:
            values = [r[metric] for r in self.records]
            self.aggregates[metric] = sum(values) / len(values) if values else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["content", "style", *self.METRICS])
            writer.writeheader()
            for record in self.records:
                writer.writerow(record)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"meta": self.meta, "aggregates": self.aggregates, "pairs": len(self.records)}, fh, indent=2)


def evaluate(stylize_fn, encoder, content_dir, style_dir) -> EvalReport:
    """Metrics over the full cross product of two image directories.

    ``stylize_fn`` maps (content, style) image tensors to a stylized image.
    Pair order is the sorted-filename cross product, so reports are
    deterministic for fixed inputs.
    """
    content_files = list_images(content_dir)
    style_files = list_images(style_dir)
    if not content_files or not style_files:
        raise UnreadableImageError(f"no images found in {content_dir} or {style_dir}")

    report = EvalReport(meta={"perceptual_levels": list(PERCEPTUAL_LEVELS)})
    with torch.no_grad():
        style_cache = {}
        for style_path in style_files:
            img = load_image(style_path)
            style_cache[style_path] = (img, encoder(img))
        for content_path in content_files:
            content_img = load_image(content_path)
            pyr_c = encoder(content_img)
            for style_path in style_files:
                style_img, pyr_s = style_cache[style_path]
                stylized = stylize_fn(content_img, style_img)
                pyr_cs = encoder(stylized)
                report.records.append(
                    {
                        "content": content_path,
                        "style": style_path,
                        "content_loss": float(content_loss(pyr_cs, pyr_c)),
                        "style_loss": float(style_loss(pyr_cs, pyr_s)),
                        "gram_loss": float(gram_loss(pyr_cs, pyr_s)),
                        "perceptual_distance": float(perceptual_distance(pyr_cs, pyr_c)),
                    }
                )
    report.aggregate()
    return report


def benchmark_inference(stylize_fn, resolution: int = 512, trials: int = 10) -> dict:
    """Wall-clock stylization timing: one excluded warm-up, then ``trials``
    recorded runs on random inputs at the given square resolution. Image
    decode/encode I/O is outside the timed region by construction."""
    if trials < 3:
        raise ValueError(f"need at least 3 trials, got {trials}")
    gen = torch.Generator().manual_seed(0)
    content = torch.rand(3, resolution, resolution, generator=gen)
    style = torch.rand(3, resolution, resolution, generator=gen)
    samples = []
    with torch.no_grad():
        stylize_fn(content, style)  # warm-up
        for _ in range(trials):
            started = time.perf_counter()
            stylize_fn(content, style)
            samples.append(time.perf_counter() - started)
    ordered = sorted(samples)
    return {
        "resolution": resolution,
        "trials": trials,
        "samples": samples,
        "mean_s": statistics.fmean(samples),
        "p50_s": statistics.median(samples),
        "p95_s": ordered[min(int(math.ceil(0.95 * trials)) - 1, trials - 1)],
        "device": "cpu",
        "env": f"{platform.platform()} / python {platform.python_version()} / torch {torch.__version__}",
        "threads": torch.get_num_threads(),
    }
