"""Image <-> feature-pyramid codec.

The encoder exposes five taps with the classic VGG-19 channel/stride
arithmetic (64/128/256/512/512 channels at /1,/2,/4,/8,/16 of the input
resolution). At desk scale it is a slim stand-in — one strided 3x3
convolution per block — trained jointly through the reconstruction branch
rather than loaded from a pretrained file, though pretrained weight files
plug into the same container format. The decoder mirrors blocks 4..1 with
nearest-neighbor upsampling between blocks and returns images in [0, 1].
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import load_container, save_container
from .errors import ShapeError

LEVELS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
LEVEL_CHANNELS = {
    "relu1_1": 64,
    "relu2_1": 128,
    "relu3_1": 256,
    "relu4_1": 512,
    "relu5_1": 512,
}
LEVEL_STRIDES = {
    "relu1_1": 1,
    "relu2_1": 2,
    "relu3_1": 4,
    "relu4_1": 8,
    "relu5_1": 16,
}

ENCODER_FILE_TYPE = "spast.encoder-weights"


def validate_image(img: torch.Tensor) -> None:
    """Check the 3xHxW, [0,1], multiple-of-8 image contract."""
    if img.dim() != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a 3xHxW image tensor, got shape {tuple(img.shape)}")
    h, w = img.shape[1], img.shape[2]
    if h % 8 or w % 8:
        raise ShapeError(f"image sides must be multiples of 8, got {h}x{w}")
    if h < 16 or w < 16:
        raise ShapeError(f"image sides must be at least 16 pixels, got {h}x{w}")
    with torch.no_grad():
        if not torch.isfinite(img).all():
            raise ShapeError("image contains non-finite values")
        lo, hi = float(img.min()), float(img.max())
    if lo < 0.0 or hi > 1.0:
        raise ShapeError(f"image values must lie in [0,1], got range [{lo:.4g},{hi:.4g}]")


def validate_pyramid(pyr: dict) -> None:
    """Check that a pyramid holds all five levels with consistent shapes."""
    for level in LEVELS:
        if level not in pyr:
            raise ShapeError(f"pyramid is missing level {level}")
        feat = pyr[level]
        if feat.shape[0] != LEVEL_CHANNELS[level]:
            raise ShapeError(
                f"{level}: expected {LEVEL_CHANNELS[level]} channels, got {feat.shape[0]}"
            )
    base_h = pyr["relu1_1"].shape[1]
    base_w = pyr["relu1_1"].shape[2]
    for level in LEVELS:
        stride = LEVEL_STRIDES[level]
        expect = (base_h // stride, base_w // stride)
        if tuple(pyr[level].shape[1:]) != expect:
            raise ShapeError(f"{level}: expected spatial size {expect}, got {tuple(pyr[level].shape[1:])}")


class Encoder(nn.Module):
    """Five-tap feature encoder following the VGG-19 shape law.

    Per-channel normalization constants travel with the weights so that
    preprocessing is tied to weight provenance.
    """

    def __init__(self):
        super().__init__()
        self.register_buffer("pixel_mean", torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1))
        self.conv1 = nn.Conv2d(3, 64, 3, stride=1)
        self.conv2 = nn.Conv2d(64, 128, 3, stride=2)
        self.conv3 = nn.Conv2d(128, 256, 3, stride=2)
        self.conv4 = nn.Conv2d(256, 512, 3, stride=2)
        self.conv5 = nn.Conv2d(512, 512, 3, stride=2)
        self.provenance = "toy-trained"
        self.run_id = ""

    def forward(self, img: torch.Tensor, detach_params: bool = False) -> dict:
        """Encode a 3xHxW image into the five-level pyramid.

        With ``detach_params`` the convolution weights are detached, so
        gradients flow to the input image but never to the encoder itself
        (used when the encoder serves as a loss metric).
        """
        validate_image(img)
        stack = self._run(img.unsqueeze(0), detach_params)
        return {level: feats.squeeze(0) for level, feats in stack.items()}

    def encode_batch(self, imgs: list, detach_params: bool = False) -> list:
        """Encode same-sized images in one batched pass; returns one
        pyramid per image."""
        for img in imgs:
            validate_image(img)
        stack = self._run(torch.stack(imgs), detach_params)
        return [{level: feats[i] for level, feats in stack.items()} for i in range(len(imgs))]

    def _run(self, x: torch.Tensor, detach_params: bool) -> dict:
        x = (x - self.pixel_mean) / self.pixel_std
        stack = {}
        for level, conv in zip(LEVELS, (self.conv1, self.conv2, self.conv3, self.conv4, self.conv5)):
            w, b = conv.weight, conv.bias
            if detach_params:
                w, b = w.detach(), b.detach()
            # reflection padding: zero halos at the deep low-res taps would
            # corrupt a large fraction of positions on small images
            x = F.relu(F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), w, b, stride=conv.stride))
            stack[level] = x
        return stack


class Decoder(nn.Module):
    """Mirror decoder: relu4_1-resolution features back to an image.

    Nearest-neighbor upsampling between blocks; the sigmoid output keeps
    every pixel inside [0, 1] no matter the feature magnitude.
    """

    def __init__(self):
        super().__init__()
        self.conv4a = nn.Conv2d(512, 512, 3)
        self.conv4 = nn.Conv2d(512, 256, 3)
        self.conv3 = nn.Conv2d(256, 128, 3)
        self.conv2 = nn.Conv2d(128, 64, 3)
        self.conv1 = nn.Conv2d(64, 3, 3)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.dim() != 3 or feat.shape[0] != 512:
            raise ShapeError(f"decoder expects a 512xH'xW' feature, got {tuple(feat.shape)}")
        return self._run(feat.unsqueeze(0)).squeeze(0)

    def decode_batch(self, feats: list) -> list:
        out = self._run(torch.stack(feats))
        return [out[i] for i in range(len(feats))]

    @staticmethod
    def _conv(x: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
        return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), conv.weight, conv.bias)

    def _run(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self._conv(x, self.conv4a))
        x = F.interpolate(F.relu(self._conv(x, self.conv4)), scale_factor=2, mode="nearest")
        x = F.interpolate(F.relu(self._conv(x, self.conv3)), scale_factor=2, mode="nearest")
        x = F.interpolate(F.relu(self._conv(x, self.conv2)), scale_factor=2, mode="nearest")
        return torch.sigmoid(self._conv(x, self.conv1))


def encode_pyramid(img: torch.Tensor, encoder: Encoder, detach_params: bool = False) -> dict:
    return encoder(img, detach_params=detach_params)


def decode(feat: torch.Tensor, decoder: Decoder) -> torch.Tensor:
    return decoder(feat)


def save_encoder_weights(path, encoder: Encoder, provenance: str = "toy-trained", run_id: str = "") -> None:
    """Persist encoder weights with provenance in the binary container."""
    if provenance not in ("pretrained-file", "toy-trained"):
        raise ValueError(f"unknown provenance {provenance!r}")
    if provenance == "toy-trained" and not run_id:
        raise ValueError("toy-trained weights need a training-run identifier")
    save_container(
        path,
        ENCODER_FILE_TYPE,
        dict(encoder.state_dict()),
        extra={"provenance": provenance, "run_id": run_id},
    )


def load_encoder_weights(path) -> Encoder:
    """Load encoder weights; checksum failures raise ChecksumError."""
    _, tensors, extra = load_container(path, expected_type=ENCODER_FILE_TYPE)
    encoder = Encoder()
    encoder.load_state_dict(tensors)
    encoder.provenance = extra["provenance"]
    encoder.run_id = extra["run_id"]
    return encoder
