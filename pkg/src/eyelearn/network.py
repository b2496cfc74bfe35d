"""U-Net style partial-convolution autoencoder, projection head and frozen feature extractor."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .pconv import PartialConv2d

THICKNESS_SCALE = 350.0

DEFAULT_CHANNELS = (64, 128, 256, 512, 512, 512, 512, 512)
DEFAULT_KERNELS = (7, 5, 5, 3, 3, 3, 3, 3)


@dataclass
class ArchConfig:
    input_size: int = 64
    encoder_depth: int = 6
    channels: tuple[int, ...] = ()
    kernels: tuple[int, ...] = ()
    decoder_kernel: int = 3
    projection_dims: tuple[int, ...] = (512, 256, 128)
    extractor_channels: tuple[int, ...] = (32, 64, 128)
    extractor_seed: int = 1234
    init_seed: int = 0

    def __post_init__(self) -> None:
        if not self.channels:
            self.channels = DEFAULT_CHANNELS[: self.encoder_depth]
        if not self.kernels:
            self.kernels = DEFAULT_KERNELS[: self.encoder_depth]
        self.channels = tuple(self.channels)
        self.kernels = tuple(self.kernels)
        self.projection_dims = tuple(self.projection_dims)
        self.extractor_channels = tuple(self.extractor_channels)

    def validate(self) -> None:
        if self.encoder_depth < 1:
            raise ValueError("encoder_depth must be at least 1")
        if len(self.channels) != self.encoder_depth or len(self.kernels) != self.encoder_depth:
            raise ValueError("channels and kernels need one entry per encoder layer")
        if any(k % 2 == 0 for k in (*self.kernels, self.decoder_kernel)):
            raise ValueError("kernel sizes must be odd")
        if self.input_size < 1:
            raise ValueError("input_size must be positive")

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]


class EncoderLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, norm: bool):
        super().__init__()
        self.conv = PartialConv2d(in_ch, out_ch, kernel, stride=2)
        self.norm = nn.BatchNorm2d(out_ch) if norm else None

    def forward(self, x, mask):
        x, mask = self.conv(x, mask)
        if self.norm is not None:
            x = self.norm(x)
        # re-zero invalid locations so features stay inert downstream
        return F.relu(x) * mask, mask


class DecoderLayer(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, kernel: int, last: bool):
        super().__init__()
        self.conv = PartialConv2d(in_ch + skip_ch, out_ch, kernel, stride=1)
        self.norm = None if last else nn.BatchNorm2d(out_ch)
        self.last = last

    def forward(self, x, mask, skip, skip_mask):
        size = skip.shape[-2:]
        x = F.interpolate(x, size=size, mode="nearest")
        mask = F.interpolate(mask, size=size, mode="nearest")
        feats = torch.cat([x, skip], dim=1)
        masks = torch.cat([mask.expand(-1, x.shape[1], -1, -1), skip_mask.expand(-1, skip.shape[1], -1, -1)], dim=1)
        out, new_mask = self.conv(feats, masks)
        if self.last:
            return out, new_mask
        out = self.norm(out)
        return F.leaky_relu(out, 0.2) * new_mask, new_mask


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, dims: Sequence[int] = (512, 256, 128)):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for i, d in enumerate(dims):
            layers.append(nn.Linear(prev, d))
            if i < len(dims) - 1:
                layers.append(nn.ReLU())
            prev = d
        self.mlp = nn.Sequential(*layers)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(h), dim=-1, eps=1e-12)


class FrozenExtractor(nn.Module):
    """Fixed random conv stack standing in for a pretrained perceptual network.

    Three stages of conv-ReLU-conv-ReLU-avgpool. Weights are drawn once from
    ``seed`` and stored as buffers, so no optimizer ever sees them.
    """

    def __init__(self, channels: Sequence[int] = (32, 64, 128), seed: int = 1234, in_channels: int = 1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.n_stages = len(channels)
        prev = in_channels
        for s, ch in enumerate(channels):
            for j, (cin, cout) in enumerate(((prev, ch), (ch, ch))):
                std = (2.0 / (cin * 9)) ** 0.5
                self.register_buffer(f"w{s}_{j}", torch.randn(cout, cin, 3, 3, generator=gen) * std)
                self.register_buffer(f"b{s}_{j}", torch.zeros(cout))
            prev = ch

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for s in range(self.n_stages):
            for j in range(2):
                x = F.relu(F.conv2d(x, getattr(self, f"w{s}_{j}"), getattr(self, f"b{s}_{j}"), padding=1))
            x = F.avg_pool2d(x, 2)
            feats.append(x)
        return feats


def masked_average(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Spatial mean over valid locations only; all-invalid maps pool to zero."""
    num = (features * mask).sum(dim=(2, 3))
    den = mask.sum(dim=(2, 3)).clamp(min=1.0)
    return num / den


class EyeLearnModel(nn.Module):
    """Partial-conv autoencoder. Inputs are thickness maps already divided by ``THICKNESS_SCALE``."""

    def __init__(self, arch: ArchConfig, extractor: Callable[[torch.Tensor], list[torch.Tensor]] | None = None):
        super().__init__()
        arch.validate()
        self.arch = arch
        with torch.random.fork_rng():
            torch.manual_seed(arch.init_seed)
            self._build(arch)
        if extractor is None:
            extractor = FrozenExtractor(arch.extractor_channels, arch.extractor_seed)
        elif isinstance(extractor, nn.Module):
            for p in extractor.parameters():
                p.requires_grad_(False)
        self.extractor = extractor
        self.epoch = 0

    def _build(self, arch: ArchConfig) -> None:
        enc, dec = [], []
        prev = 1
        for i, (ch, k) in enumerate(zip(arch.channels, arch.kernels)):
            enc.append(EncoderLayer(prev, ch, k, norm=i > 0))
            prev = ch
        skips = (1, *arch.channels[:-1])
        for i in reversed(range(arch.encoder_depth)):
            last = i == 0
            out_ch = 1 if last else arch.channels[i - 1]
            dec.append(DecoderLayer(prev, skips[i], out_ch, arch.decoder_kernel, last))
            prev = out_ch
        self.encoder = nn.ModuleList(enc)
        self.decoder = nn.ModuleList(dec)
        self.head = ProjectionHead(arch.embedding_dim, arch.projection_dims)

    @property
    def n_partial_convs(self) -> int:
        return sum(isinstance(m, PartialConv2d) for m in self.modules())

    def encode(self, x: torch.Tensor, mask: torch.Tensor):
        """Returns the pooled embedding and the per-level (features, mask) stack for the decoder."""
        if x.shape[-2:] != (self.arch.input_size, self.arch.input_size):
            raise ValueError(f"expected {self.arch.input_size}x{self.arch.input_size} input, got {tuple(x.shape[-2:])}")
        if mask.shape != x.shape:
            raise ValueError("map and mask shapes differ")
        x = x * mask
        stack = [(x, mask)]
        for layer in self.encoder:
            x, mask = layer(x, mask)
            stack.append((x, mask))
        return masked_average(x, mask), stack

    def decode(self, stack) -> tuple[torch.Tensor, torch.Tensor]:
        if len(stack) != self.arch.encoder_depth + 1:
            raise ValueError("skip stack does not match encoder depth")
        x, mask = stack[-1]
        for layer, (skip, skip_mask) in zip(self.decoder, reversed(stack[:-1])):
            x, mask = layer(x, mask, skip, skip_mask)
        return x, mask

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return self.head(h)

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        h, stack = self.encode(x, mask)
        out, _ = self.decode(stack)
        return h, out

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


@torch.no_grad()
def embed_images(model: EyeLearnModel, x: torch.Tensor, mask: torch.Tensor | None = None, batch_size: int = 64) -> torch.Tensor:
    """Embeddings for scaled maps ``(N, 1, H, W)`` in inference mode; all-ones masks by default."""
    was_training = model.training
    model.eval()
    try:
        if mask is None:
            mask = torch.ones_like(x)
        out = [model.encode(x[i : i + batch_size], mask[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out) if out else x.new_zeros(0, model.arch.embedding_dim)
