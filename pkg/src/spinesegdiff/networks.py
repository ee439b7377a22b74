"""Denoising architectures.

Two diffusion networks share one U-shaped backbone:

    - the direct-mask model: a dual-encoder UNet that takes the noised
      mask concatenated with the image, fuses multi-scale features from
      a dedicated image encoder by addition, and outputs clean-mask
      logits
    - the noise-predicting baseline: the same backbone without the
      auxiliary encoder, outputting the noise estimate

plus a plain UNet (no timestep, image input only) used as the in-repo
fallback pre-segmenter.

Shapes are fully determined by a JSON-serializable architecture
descriptor, so checkpoints can be rebuilt from the descriptor alone.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

LEAKY_SLOPE = 0.01
ARCH_FORMAT = "spinesegdiff-arch-v1"

# Channel hierarchies; one entry per resolution level (spatial size halves
# per level after the first).
PRESETS = {
    "full": {"channels": [64, 64, 128, 256, 512, 64], "time_dim": 256, "image_size": 320},
    "small": {"channels": [16, 32, 64], "time_dim": 64, "image_size": 64},
}


def embed_time(t: int, dim: int) -> np.ndarray:
    """Sinusoidal timestep embedding of even dimension ``dim``.

    Component i of the first half is sin(t / 10000^(i/half)), the second
    half the matching cosines. Values lie in [-1, 1] and distinct
    timesteps map to distinct vectors.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    if t < 0:
        raise ValueError(f"timestep must be >= 0, got {t}")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class TimeEmbedding(nn.Module):
    """Sinusoid table plus a 2-layer projection, shared across blocks."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError(f"embedding dimension must be even, got {dim}")
        self.dim = dim
        self.proj = nn.Sequential(
            nn.Linear(dim, dim),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(dim, dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = 10000.0 ** (
            -torch.arange(half, dtype=torch.float64, device=t.device) / half
        )
        ang = t.double()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
        return self.proj(emb.to(self.proj[0].weight.dtype))


def _as_timesteps(t) -> torch.Tensor:
    """Accept an int, float, or tensor timestep; return a 1-D float tensor."""
    ts = torch.as_tensor(t, dtype=torch.float32)
    if ts.ndim == 0:
        ts = ts[None]
    if ts.ndim != 1:
        raise ValueError(f"timesteps must be scalar or 1-D, got shape {tuple(ts.shape)}")
    return ts


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups != 0:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class DoubleConv(nn.Module):
    """Two 3x3 conv + group-norm + LeakyReLU blocks with an additive
    per-channel time bias between them."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _group_norm(out_ch)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        return self.act(self.norm2(self.conv2(h)))


class MultiScaleImageEncoder(nn.Module):
    """Convolutional pyramid over the conditioning image.

    Emits one feature map per hierarchy level; spatial size halves at
    each level after the first.
    """

    def __init__(self, in_ch: int, channels: list[int]):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = in_ch
        for i, ch in enumerate(channels):
            self.downs.append(
                nn.Identity() if i == 0 else nn.Conv2d(prev, prev, 3, stride=2, padding=1)
            )
            self.blocks.append(DoubleConv(prev, ch))
            prev = ch

    def forward(self, y: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = y
        for down, block in zip(self.downs, self.blocks):
            h = block(down(h))
            feats.append(h)
        return feats


class DenoisingUNet(nn.Module):
    """U-shaped backbone with optional time conditioning and optional
    additive fusion of external per-level features on the encoder path."""

    def __init__(self, in_ch: int, out_ch: int, channels: list[int], time_dim: int | None = None):
        super().__init__()
        self.channels = list(channels)
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = in_ch
        for i, ch in enumerate(channels):
            self.downs.append(
                nn.Identity() if i == 0 else nn.Conv2d(prev, prev, 3, stride=2, padding=1)
            )
            self.enc_blocks.append(DoubleConv(prev, ch, time_dim))
            prev = ch
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(len(channels) - 2, -1, -1):
            self.ups.append(nn.ConvTranspose2d(channels[i + 1], channels[i], 2, stride=2))
            self.dec_blocks.append(DoubleConv(2 * channels[i], channels[i], time_dim))
        self.head = nn.Conv2d(channels[0], out_ch, 1)
        # zero head: the net starts from the mean prediction
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self,
        x: torch.Tensor,
        temb: torch.Tensor | None = None,
        cond_feats: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        skips = []
        h = x
        for i, (down, block) in enumerate(zip(self.downs, self.enc_blocks)):
            h = block(down(h), temb)
            if cond_feats is not None:
                h = h + cond_feats[i]
            skips.append(h)
        for j, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            skip = skips[len(self.channels) - 2 - j]
            h = block(torch.cat([up(h), skip], dim=1), temb)
        return self.head(h)


class SpineSegDiffNet(nn.Module):
    """Dual-encoder direct-mask network.

    The conditioning image feeds a dedicated multi-scale encoder whose
    features are added into the UNet encoder path; the image is also
    concatenated with the noised mask at the UNet input. Output is
    clean-mask logits, one channel per class.
    """

    kind = "spinesegdiff"

    def __init__(self, classes: int, image_channels: int, channels: list[int],
                 time_dim: int, image_size: int):
        super().__init__()
        self.classes = classes
        self.image_channels = image_channels
        self.image_size = image_size
        self.time_dim = time_dim
        self.time_embed = TimeEmbedding(time_dim)
        self.image_encoder = MultiScaleImageEncoder(image_channels, channels)
        self.unet = DenoisingUNet(image_channels + classes, classes, channels, time_dim)

    def forward(self, x_t: torch.Tensor, t, y: torch.Tensor) -> torch.Tensor:
        temb = self.time_embed(_as_timesteps(t).to(x_t.device))
        feats = self.image_encoder(y)
        return self.unet(torch.cat([y, x_t], dim=1), temb, feats)


class IISDMNet(nn.Module):
    """Noise-predicting UNet: estimates eps from (x_t, image, t)."""

    kind = "iisdm"

    def __init__(self, classes: int, image_channels: int, channels: list[int],
                 time_dim: int, image_size: int):
        super().__init__()
        self.classes = classes
        self.image_channels = image_channels
        self.image_size = image_size
        self.time_dim = time_dim
        self.time_embed = TimeEmbedding(time_dim)
        self.unet = DenoisingUNet(image_channels + classes, classes, channels, time_dim)

    def forward(self, x_t: torch.Tensor, t, y: torch.Tensor) -> torch.Tensor:
        temb = self.time_embed(_as_timesteps(t).to(x_t.device))
        return self.unet(torch.cat([y, x_t], dim=1), temb)


class PlainUNet(nn.Module):
    """Image-only UNet used as the fallback pre-segmenter."""

    kind = "unet"

    def __init__(self, classes: int, image_channels: int, channels: list[int],
                 time_dim: int | None, image_size: int):
        super().__init__()
        self.classes = classes
        self.image_channels = image_channels
        self.image_size = image_size
        self.time_dim = None
        self.unet = DenoisingUNet(image_channels, classes, channels, time_dim=None)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.unet(y)


_KINDS = {cls.kind: cls for cls in (SpineSegDiffNet, IISDMNet, PlainUNet)}


def make_descriptor(kind: str, classes: int = 4, image_channels: int = 1,
                    preset: str = "full", **overrides) -> dict:
    """Architecture descriptor for a model kind plus a size preset."""
    if kind not in _KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    desc = {
        "format": ARCH_FORMAT,
        "kind": kind,
        "classes": classes,
        "image_channels": image_channels,
        "norm": "group8",
        "activation": f"leaky_relu:{LEAKY_SLOPE}",
        **PRESETS[preset],
    }
    desc.update(overrides)
    return desc


def build_model(desc: dict) -> nn.Module:
    """Instantiate a network from its descriptor; shapes depend only on it."""
    if desc.get("format") != ARCH_FORMAT:
        raise ValueError(f"unsupported architecture format {desc.get('format')!r}")
    cls = _KINDS[desc["kind"]]
    model = cls(
        classes=desc["classes"],
        image_channels=desc["image_channels"],
        channels=list(desc["channels"]),
        time_dim=desc["time_dim"],
        image_size=desc["image_size"],
    )
    model.descriptor = dict(desc)
    return model


def describe_model(model: nn.Module) -> dict:
    return dict(model.descriptor)


def _to_batch(arr, name: str) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(arr), dtype=torch.float32)
    if t.ndim != 3:
        raise ValueError(f"{name} must be [C, H, W], got shape {tuple(t.shape)}")
    return t[None]


def _check_spatial(model: nn.Module, arr: torch.Tensor, name: str):
    size = model.image_size
    if arr.shape[-2:] != (size, size):
        raise ValueError(f"{name} spatial size {tuple(arr.shape[-2:])} != trained size {size}")


def encode_image(y, model: SpineSegDiffNet) -> list[np.ndarray]:
    """Multi-scale features of a single [C_img, H, W] image."""
    yb = _to_batch(y, "y")
    _check_spatial(model, yb, "y")
    if yb.shape[1] != model.image_channels:
        raise ValueError(f"expected {model.image_channels} image channels, got {yb.shape[1]}")
    with torch.no_grad():
        feats = model.image_encoder(yb)
    return [f[0].numpy() for f in feats]


def predict_mask(x_t, t: int, y, model: SpineSegDiffNet) -> np.ndarray:
    """Clean-mask logits [C, H, W] for one noised state and image."""
    xb, yb = _to_batch(x_t, "x_t"), _to_batch(y, "y")
    _check_spatial(model, xb, "x_t")
    if xb.shape[1] != model.classes:
        raise ValueError(f"x_t must have {model.classes} channels, got {xb.shape[1]}")
    with torch.no_grad():
        out = model(xb, torch.tensor([t], dtype=torch.float32), yb)
    return out[0].numpy()


def predict_noise(x_t, t: int, y, model: IISDMNet) -> np.ndarray:
    """Noise estimate with the same shape as x_t."""
    xb, yb = _to_batch(x_t, "x_t"), _to_batch(y, "y")
    _check_spatial(model, xb, "x_t")
    with torch.no_grad():
        out = model(xb, torch.tensor([t], dtype=torch.float32), yb)
    return out[0].numpy()
