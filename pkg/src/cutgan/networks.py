"""Generators, discriminators and projection heads.

The resnet generator downsamples with a stride-1 convolution followed by a
fixed 3x3 binomial blur subsampled by two. Tapping the convolution outputs
then gives the receptive fields 1, 9, 15, 35 and 99 for pixels, the two
downsampling convolutions and residual blocks 1 and 5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import EMBED_DIM
from .errors import InvalidArgument, InvalidState
from .nce import PatchEmbeddingSet, PatchLayer, normalize

GENERATOR_VARIANTS = ("resnet9", "singleimage")
DISCRIMINATOR_VARIANTS = ("patchgan", "tile64")

DEFAULT_TAPS = {
    "resnet9": ("pixels", "down1", "down2", "res1", "res5"),
    "singleimage": ("pixels", "down1", "res1", "res2", "res3"),
}
DEFAULT_BLOCKS = {"resnet9": 9, "singleimage": 6}


@dataclass(frozen=True)
class GeneratorSpec:
    variant: str = "resnet9"
    input_channels: int = 3
    output_channels: int = 3
    base_width: int = 64
    n_blocks: int | None = None
    tap_layers: tuple[str, ...] | None = None
    norm: str = "instance"

    def __post_init__(self):
        if self.variant not in GENERATOR_VARIANTS:
            raise InvalidArgument(f"unknown generator variant {self.variant!r}")
        if self.norm not in ("instance", "none"):
            raise InvalidArgument(f"unknown norm {self.norm!r}")
        if self.n_blocks is None:
            object.__setattr__(self, "n_blocks", DEFAULT_BLOCKS[self.variant])
        if self.tap_layers is None:
            object.__setattr__(self, "tap_layers", DEFAULT_TAPS[self.variant])
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        if self.base_width < 1 or self.n_blocks < 1:
            raise InvalidArgument("base_width and n_blocks must be positive")


@dataclass(frozen=True)
class DiscriminatorSpec:
    variant: str = "patchgan"
    input_channels: int = 3
    base_width: int = 64
    n_layers: int = 3
    tile_size: int = 64
    norm: str = "instance"

    def __post_init__(self):
        if self.variant not in DISCRIMINATOR_VARIANTS:
            raise InvalidArgument(f"unknown discriminator variant {self.variant!r}")


@dataclass
class FeatureStack:
    """Tapped encoder features plus the encoder's deepest output."""

    taps: dict[str, torch.Tensor] = field(default_factory=dict)
    final: torch.Tensor | None = None

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: tuple(v.shape[-2:]) for k, v in self.taps.items()}

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "FeatureStack":
        final = None if self.final is None else fn(self.final)
        return FeatureStack({k: fn(v) for k, v in self.taps.items()}, final)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _norm(kind: str, channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels) if kind == "instance" else nn.Identity()


class BlurPool(nn.Module):
    """Depthwise [1,2,1] x [1,2,1] blur followed by stride-2 subsampling."""

    def __init__(self, channels: int):
        super().__init__()
        k = torch.tensor([1.0, 2.0, 1.0])
        k = torch.outer(k, k)
        self.register_buffer("kernel", (k / k.sum()).expand(channels, 1, 3, 3).clone())
        self.channels = channels

    def forward(self, x):
        x = F.pad(x, (1, 1, 1, 1), mode="reflect")
        return F.conv2d(x, self.kernel.to(x.dtype), stride=2, groups=self.channels)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), _norm(norm, dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), _norm(norm, dim),
        )

    def forward(self, x):
        return x + self.body(x)


class LeakyResBlock(nn.Module):
    """Residual block without style modulation, optionally resampling."""

    def __init__(self, c_in: int, c_out: int, norm: str, resample: str | None = None):
        super().__init__()
        layers: list[nn.Module] = []
        if resample == "up":
            layers.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
        layers += [
            nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="reflect"), _norm(norm, c_out), nn.LeakyReLU(0.2),
            nn.Conv2d(c_out, c_out, 3, padding=1, padding_mode="reflect"), _norm(norm, c_out), nn.LeakyReLU(0.2),
        ]
        skip: list[nn.Module] = []
        if resample == "down":
            layers.append(BlurPool(c_out))
            skip.append(BlurPool(c_in))
        elif resample == "up":
            skip.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
        if c_in != c_out:
            skip.append(nn.Conv2d(c_in, c_out, 1, bias=False))
        self.main = nn.Sequential(*layers)
        self.skip = nn.Sequential(*skip)

    def forward(self, x):
        return (self.main(x) + self.skip(x)) / math.sqrt(2)


def _encoder_units(spec: GeneratorSpec):
    """(name, module, [(kernel, stride), ...], out_channels) for every encoder unit."""
    w, n = spec.base_width, spec.norm
    if spec.variant == "resnet9":
        units = [
            ("stem", nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(spec.input_channels, w, 7),
                                   _norm(n, w), nn.ReLU(True)), [(7, 1)], w),
            ("down1", nn.Conv2d(w, 2 * w, 3, padding=1), [(3, 1)], 2 * w),
            ("down1_pool", nn.Sequential(_norm(n, 2 * w), nn.ReLU(True), BlurPool(2 * w)), [(3, 2)], 2 * w),
            ("down2", nn.Conv2d(2 * w, 4 * w, 3, padding=1), [(3, 1)], 4 * w),
            ("down2_pool", nn.Sequential(_norm(n, 4 * w), nn.ReLU(True), BlurPool(4 * w)), [(3, 2)], 4 * w),
        ]
        units += [(f"res{i}", ResnetBlock(4 * w, n), [(3, 1), (3, 1)], 4 * w)
                  for i in range(1, spec.n_blocks + 1)]
    else:
        units = [
            ("stem", nn.Conv2d(spec.input_channels, w, 1), [(1, 1)], w),
            ("down1", LeakyResBlock(w, 2 * w, n, "down"), [(3, 1), (3, 1), (3, 2)], 2 * w),
        ]
        units += [(f"res{i}", LeakyResBlock(2 * w, 2 * w, n), [(3, 1), (3, 1)], 2 * w)
                  for i in range(1, spec.n_blocks + 1)]
    return units


def _split_point(spec: GeneratorSpec, names: Sequence[str]) -> int:
    """Number of units belonging to the encoder: everything up to the deepest tap."""
    positions = []
    for tap in spec.tap_layers:
        if tap == "pixels":
            positions.append(-1)
        elif tap in names:
            positions.append(names.index(tap))
        else:
            raise InvalidArgument(f"unknown tap layer {tap!r}; available: pixels, {', '.join(names)}")
    if len(set(spec.tap_layers)) != len(spec.tap_layers):
        raise InvalidArgument("tap layers must be unique")
    return max(positions) + 1


class Encoder(nn.Module):
    def __init__(self, spec: GeneratorSpec, units=None):
        super().__init__()
        units = units if units is not None else _encoder_units(spec)
        self.spec = spec
        self.names = [u[0] for u in units]
        self.units = nn.ModuleList(u[1] for u in units)
        self.kernels = [u[2] for u in units]
        self.channels = {u[0]: u[3] for u in units}
        self.channels["pixels"] = spec.input_channels
        self.taps = spec.tap_layers
        self.factor = 1
        for ks in self.kernels:
            for _, s in ks:
                self.factor *= s

    @property
    def tap_channels(self) -> dict[str, int]:
        return {t: self.channels[t] for t in self.taps}

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise InvalidArgument(f"expected (B, {self.spec.input_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise InvalidArgument(f"spatial size {h}x{w} is not divisible by {self.factor}")

    def forward(self, x: torch.Tensor) -> FeatureStack:
        self.check_input(x)
        stack = FeatureStack()
        if "pixels" in self.taps:
            stack.taps["pixels"] = x
        h = x
        for name, unit in zip(self.names, self.units):
            h = unit(h)
            if name in self.taps:
                stack.taps[name] = h
        stack.taps = {t: stack.taps[t] for t in self.taps}
        stack.final = h
        return stack

    def receptive_fields(self) -> dict[str, int]:
        """Receptive field of every tap, traced from the declared kernels and strides."""
        rf, jump = 1, 1
        out = {"pixels": 1}
        for name, ks in zip(self.names, self.kernels):
            for k, s in ks:
                rf += (k - 1) * jump
                jump *= s
            out[name] = rf
        return {t: out[t] for t in self.taps}


def _decoder(spec: GeneratorSpec, remaining) -> nn.Sequential:
    w, n = spec.base_width, spec.norm
    layers: list[nn.Module] = [u[1] for u in remaining]
    if spec.variant == "resnet9":
        for c_in, c_out in ((4 * w, 2 * w), (2 * w, w)):
            layers += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                       nn.Conv2d(c_in, c_out, 3, padding=1), _norm(n, c_out), nn.ReLU(True)]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, spec.output_channels, 7), nn.Tanh()]
    else:
        layers += [LeakyResBlock(2 * w, w, n, "up"), nn.Conv2d(w, spec.output_channels, 1), nn.Tanh()]
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """Encoder followed by decoder; the encoder ends at the deepest tap."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        units = _encoder_units(spec)
        split = _split_point(spec, [u[0] for u in units])
        self.spec = spec
        self.encoder = Encoder(spec, units[:split])
        self.decoder = _decoder(spec, units[split:])
        init_weights(self)

    def encode(self, x: torch.Tensor) -> FeatureStack:
        return self.encoder(x)

    def decode(self, features: FeatureStack) -> torch.Tensor:
        if features.final is None:
            raise InvalidState("feature stack has no deepest encoder output")
        return self.decoder(features.final)

    def forward(self, x: torch.Tensor, return_features: bool = False):
        feats = self.encode(x)
        out = self.decode(feats)
        return (out, feats) if return_features else out


def _patchgan(spec: DiscriminatorSpec) -> tuple[nn.Sequential, list[tuple[int, int]]]:
    ndf = spec.base_width
    layers: list[nn.Module] = [nn.Conv2d(spec.input_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True)]
    kernels = [(4, 2)]
    mult = 1
    for i in range(1, spec.n_layers):
        prev, mult = mult, min(2 ** i, 8)
        layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, 2, 1), _norm(spec.norm, ndf * mult), nn.LeakyReLU(0.2, True)]
        kernels.append((4, 2))
    prev, mult = mult, min(2 ** spec.n_layers, 8)
    layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, 1, 1), _norm(spec.norm, ndf * mult), nn.LeakyReLU(0.2, True),
               nn.Conv2d(ndf * mult, 1, 4, 1, 1)]
    kernels += [(4, 1), (4, 1)]
    return nn.Sequential(*layers), kernels


def split_tiles(images: torch.Tensor, tile: int) -> torch.Tensor:
    """(B, C, H, W) -> (B * H/tile * W/tile, C, tile, tile), row-major per image."""
    b, c, h, w = images.shape
    if h % tile or w % tile:
        raise InvalidArgument(f"{h}x{w} crops do not split into {tile}x{tile} tiles")
    t = images.reshape(b, c, h // tile, tile, w // tile, tile)
    return t.permute(0, 2, 4, 1, 3, 5).reshape(-1, c, tile, tile)


class Discriminator(nn.Module):
    """Real/fake scorer. Returns an (N, 1, h, w) map of unbounded scores."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        if spec.variant == "patchgan":
            self.body, self.kernels = _patchgan(spec)
            self.head = nn.Identity()
        else:
            w = spec.base_width
            widths = [w, 2 * w, 4 * w, 8 * w, 8 * w]
            layers: list[nn.Module] = [nn.Conv2d(spec.input_channels, w, 1), nn.LeakyReLU(0.2)]
            size = spec.tile_size
            for c_in, c_out in zip(widths[:-1], widths[1:]):
                layers.append(LeakyResBlock(c_in, c_out, "none", "down"))
                size //= 2
            layers += [nn.Conv2d(widths[-1], widths[-1], 3, padding=1), nn.LeakyReLU(0.2)]
            self.body = nn.Sequential(*layers)
            self.head = nn.Sequential(nn.Flatten(), nn.Linear(widths[-1] * size * size, widths[-1]),
                                      nn.LeakyReLU(0.2), nn.Linear(widths[-1], 1))
            self.kernels = []
        init_weights(self)

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in self.kernels:
            rf += (k - 1) * jump
            jump *= s
        return rf

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.spec.variant == "tile64":
            t = self.spec.tile_size
            if x.shape[-2:] != (t, t):
                x = split_tiles(x, t)
            return self.head(self.body(x)).view(-1, 1, 1, 1)
        return self.body(x)


class ProjectionHeads(nn.Module):
    """One two-layer MLP per tap layer, followed by L2 normalization."""

    def __init__(self, channels: Mapping[str, int], width: int = EMBED_DIM):
        super().__init__()
        self.layer_ids = list(channels)
        self.width = width
        self.mlps = nn.ModuleDict({
            lid: nn.Sequential(nn.Linear(c, width), nn.ReLU(), nn.Linear(width, width))
            for lid, c in channels.items()
        })
        init_weights(self)

    def forward(self, features: FeatureStack, indices: Mapping[str, torch.Tensor]) -> PatchEmbeddingSet:
        layers = []
        for lid in self.layer_ids:
            if lid not in indices:
                continue
            feat = features.taps[lid]
            h, w = feat.shape[-2:]
            idx = indices[lid].to(feat.device)
            if idx.numel() and (idx.min() < 0 or (idx[:, 0] >= h).any() or (idx[:, 1] >= w).any()):
                raise InvalidArgument(f"{lid}: index outside {h}x{w}")
            flat = idx[:, 0] * w + idx[:, 1]
            picked = feat.flatten(2).index_select(2, flat).transpose(1, 2)  # (B, S, C)
            emb = normalize(self.mlps[lid](picked))
            layers.append(PatchLayer(lid, emb, idx, (h, w)))
        return PatchEmbeddingSet(layers)


def project(features: FeatureStack, heads: ProjectionHeads, indices: Mapping[str, torch.Tensor]) -> PatchEmbeddingSet:
    return heads(features, indices)


def all_locations(shape: tuple[int, int]) -> torch.Tensor:
    h, w = shape
    rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    return torch.stack([rows.reshape(-1), cols.reshape(-1)], 1)
