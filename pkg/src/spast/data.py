"""Image I/O, deterministic sampling and the bundled synthetic corpora.

The desk-scale corpora are generated procedurally so nothing external is
ever downloaded: "content" images are smooth photo-like compositions of
gradients and soft shapes, "style" images come from a few distinct
procedural texture families (stripes, checkers, blobs, speckle) with
random palettes.
"""

import hashlib
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import UnreadableImageError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

STYLE_FAMILIES = ("stripes", "checker", "blobs", "speckle")


def seeded_generator(*parts) -> torch.Generator:
    """Generator keyed by an arbitrary tuple; stable across platforms/runs."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    gen = torch.Generator()
    gen.manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF)
    return gen


def load_image(path) -> torch.Tensor:
    """Read an 8-bit RGB image file into a float tensor in [0,1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise UnreadableImageError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img: torch.Tensor, path) -> None:
    arr = (img.clamp(0, 1) * 255.0).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy()).save(path)


def list_images(directory) -> list:
    files = [
        os.path.join(directory, name)
        for name in sorted(os.listdir(directory))
        if name.lower().endswith(IMAGE_EXTENSIONS)
    ]
    return files


def resize_shorter_side(img: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize so the shorter side equals ``size``."""
    _, h, w = img.shape
    if min(h, w) == size:
        return img
    if h <= w:
        new_h, new_w = size, max(round(w * size / h), size)
    else:
        new_h, new_w = max(round(h * size / w), size), size
    out = F.interpolate(img.unsqueeze(0), size=(new_h, new_w), mode="bilinear", align_corners=False)
    return out.squeeze(0).clamp(0.0, 1.0)


def random_crop(img: torch.Tensor, size: int, gen: torch.Generator) -> torch.Tensor:
    _, h, w = img.shape
    if h < size or w < size:
        img = resize_shorter_side(img, size)
        _, h, w = img.shape
    top = int(torch.randint(0, h - size + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - size + 1, (1,), generator=gen))
    return img[:, top : top + size, left : left + size]


def _rand(gen, *shape) -> torch.Tensor:
    return torch.rand(*shape, generator=gen)


def _smooth_noise(gen: torch.Generator, size: int, cells: int) -> torch.Tensor:
    """Low-frequency noise field in [0,1], bilinear-upsampled from a coarse grid."""
    coarse = torch.rand(1, 1, cells, cells, generator=gen)
    field = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)
    return field[0, 0]


def _palette(gen: torch.Generator, n: int = 2) -> torch.Tensor:
    return 0.05 + 0.9 * torch.rand(n, 3, generator=gen)


def make_content_image(gen: torch.Generator, size: int = 64) -> torch.Tensor:
    """Photo-like composition: smooth background plus a few soft shapes."""
    yy, xx = torch.meshgrid(
        torch.linspace(0, 1, size), torch.linspace(0, 1, size), indexing="ij"
    )
    c0, c1 = _palette(gen, 2)
    t = (xx * float(_rand(gen, 1) * 2 - 1) + yy * float(_rand(gen, 1) * 2 - 1) + 1.0) / 2.0
    img = c0.view(3, 1, 1) * (1 - t) + c1.view(3, 1, 1) * t
    for _ in range(int(torch.randint(2, 5, (1,), generator=gen))):
        cx, cy = float(_rand(gen, 1)), float(_rand(gen, 1))
        radius = 0.08 + 0.22 * float(_rand(gen, 1))
        color = _palette(gen, 1)[0]
        dist = ((xx - cx) ** 2 + (yy - cy) ** 2).sqrt()
        mask = torch.sigmoid((radius - dist) * size)  # soft-edged disc
        img = img * (1 - mask) + color.view(3, 1, 1) * mask
    img = img + 0.02 * (torch.rand(3, size, size, generator=gen) - 0.5)
    return img.clamp(0.0, 1.0)


def make_style_image(gen: torch.Generator, size: int = 64, family: str = "stripes") -> torch.Tensor:
    """Procedural texture from one of the style families."""
    yy, xx = torch.meshgrid(
        torch.linspace(0, 1, size), torch.linspace(0, 1, size), indexing="ij"
    )
    c0, c1 = _palette(gen, 2)
    if family == "stripes":
        theta = float(_rand(gen, 1)) * 3.14159
        freq = 4 + 12 * float(_rand(gen, 1))
        wave = torch.sin(2 * 3.14159 * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        t = (wave + 1) / 2
    elif family == "checker":
        cells = int(torch.randint(3, 8, (1,), generator=gen))
        t = (((xx * cells).floor() + (yy * cells).floor()) % 2.0)
    elif family == "blobs":
        t = (_smooth_noise(gen, size, 5) > 0.5).float()
        t = F.avg_pool2d(t.view(1, 1, size, size), 3, stride=1, padding=1)[0, 0]
    elif family == "speckle":
        t = _smooth_noise(gen, size, max(size // 4, 2))
        t = (t - t.min()) / (t.max() - t.min() + 1e-8)
    else:
        raise ValueError(f"unknown style family {family!r}")
    img = c0.view(3, 1, 1) * (1 - t) + c1.view(3, 1, 1) * t
    img = img + 0.03 * (torch.rand(3, size, size, generator=gen) - 0.5)
    return img.clamp(0.0, 1.0)


def generate_corpus(
    root,
    n_content: int = 50,
    n_style: int = 10,
    size: int = 64,
    seed: int = 1234,
    families: tuple = STYLE_FAMILIES,
) -> tuple:
    """Materialize content/ and style/ PNG directories under ``root``."""
    content_dir = os.path.join(root, "content")
    style_dir = os.path.join(root, "style")
    os.makedirs(content_dir, exist_ok=True)
    os.makedirs(style_dir, exist_ok=True)
    for i in range(n_content):
        path = os.path.join(content_dir, f"content_{i:03d}.png")
        if not os.path.exists(path):
            save_image(make_content_image(seeded_generator(seed, "content", i), size), path)
    for i in range(n_style):
        family = families[i % len(families)]
        path = os.path.join(style_dir, f"style_{i:03d}_{family}.png")
        if not os.path.exists(path):
            save_image(make_style_image(seeded_generator(seed, "style", i), size, family), path)
    return content_dir, style_dir


class DataPipeline:
    """Deterministic per-step sampler over two image directories.

    Every emitted image is exactly crop x crop in [0,1]; the sample drawn
    at a given step depends only on (seed, step), so runs reproduce and
    resume exactly regardless of prefetching.
    """

    def __init__(self, content_dir, style_dir, resize: int, crop: int, seed: int):
        self.content_files = list_images(content_dir)
        self.style_files = list_images(style_dir)
        if not self.content_files or not self.style_files:
            raise FileNotFoundError(
                f"empty corpus: {content_dir} ({len(self.content_files)} images), "
                f"{style_dir} ({len(self.style_files)} images)"
            )
        self.resize = resize
        self.crop = crop
        self.seed = seed

    def _prepare(self, path, gen: torch.Generator) -> torch.Tensor:
        img = resize_shorter_side(load_image(path), self.resize)
        return random_crop(img, self.crop, gen)

    def sample(self, step: int, member: int = 0) -> tuple:
        gen = seeded_generator(self.seed, "data", step, member)
        ci = int(torch.randint(0, len(self.content_files), (1,), generator=gen))
        si = int(torch.randint(0, len(self.style_files), (1,), generator=gen))
        content = self._prepare(self.content_files[ci], gen)
        style = self._prepare(self.style_files[si], gen)
        return content, style
