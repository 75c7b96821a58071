"""Unpaired data loading, augmentation, patch-location sampling and single-image crops.

Every random choice is drawn from a generator seeded by ``(seed, iteration)``,
so a batch is a pure function of the file lists, the seed and the iteration
number. Resuming a run therefore needs no data-loader state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import PATCHES_PER_LAYER
from .errors import InvalidArgument, InvalidState
from .networks import FeatureStack

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
MANIFEST_NAME = "manifest.txt"

ImageSource = Union[str, Path, np.ndarray]


# --------------------------------------------------------------------- image io

def list_images(directory: str | Path) -> list[Path]:
    """Image files of ``directory`` in manifest order if a manifest exists, else sorted."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if manifest.exists():
        names = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
        return [directory / n for n in names]
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def load_image(source: ImageSource) -> np.ndarray:
    """Decode to an (H, W, 3) uint8 array."""
    if isinstance(source, np.ndarray):
        arr = source
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        return arr.astype(np.uint8, copy=False)
    with Image.open(source) as im:
        return np.asarray(im.convert("RGB"))


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [-1, 1]."""
    return torch.from_numpy(np.array(arr, dtype=np.float32)).permute(2, 0, 1) / 127.5 - 1.0


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """float (3, H, W) or (1, 3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    if img.dim() == 4:
        img = img[0]
    arr = ((img.detach().float().cpu().clamp(-1, 1) + 1.0) * 127.5).round()
    return arr.permute(1, 2, 0).numpy().astype(np.uint8)


def save_image(img: torch.Tensor | np.ndarray, path: str | Path) -> None:
    arr = img if isinstance(img, np.ndarray) else to_uint8(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def resize_bilinear(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    if arr.shape[1] == width and arr.shape[0] == height:
        return arr
    return np.asarray(Image.fromarray(arr).resize((width, height), Image.BILINEAR))


# ------------------------------------------------------------ unpaired dataset

class UnpairedDataset:
    """Two independently shuffled image domains.

    Items of ``domain_x`` / ``domain_y`` are file paths or uint8 arrays. One
    epoch is ``max(len(X), len(Y))`` iterations; each domain is reshuffled
    every epoch with its own stream.
    """

    def __init__(self, domain_x: Sequence[ImageSource], domain_y: Sequence[ImageSource],
                 load_size: int = 286, crop_size: int = 256, flip: bool = True, seed: int = 0):
        if not len(domain_x) or not len(domain_y):
            raise InvalidState("both domains must contain at least one image")
        if crop_size > load_size:
            raise InvalidArgument("crop_size cannot exceed load_size")
        self.domain_x = list(domain_x)
        self.domain_y = list(domain_y)
        self.load_size = load_size
        self.crop_size = crop_size
        self.flip = flip
        self.seed = seed

    @classmethod
    def from_directory(cls, root: str | Path, phase: str = "train", **kwargs) -> "UnpairedDataset":
        root = Path(root)
        return cls(list_images(root / f"{phase}A"), list_images(root / f"{phase}B"), **kwargs)

    def __len__(self) -> int:
        return max(len(self.domain_x), len(self.domain_y))

    def _order(self, epoch: int, stream: int, n: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch, stream]).permutation(n)

    def _load(self, items: list, order: np.ndarray, pos: int) -> np.ndarray:
        for attempt in range(len(items)):
            item = items[order[(pos + attempt) % len(items)]]
            try:
                return load_image(item)
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", item, exc)
        raise InvalidState("no readable image in domain")

    def _augment(self, arr: np.ndarray, rng: np.random.Generator) -> torch.Tensor:
        arr = resize_bilinear(arr, self.load_size, self.load_size)
        c = self.crop_size
        top = int(rng.integers(0, arr.shape[0] - c + 1))
        left = int(rng.integers(0, arr.shape[1] - c + 1))
        arr = arr[top:top + c, left:left + c]
        if self.flip and rng.random() < 0.5:
            arr = arr[:, ::-1]
        return to_tensor(arr).unsqueeze(0)

    def batch(self, iteration: int) -> tuple[torch.Tensor, torch.Tensor]:
        epoch, pos = divmod(iteration, len(self))
        ox = self._order(epoch, 0, len(self.domain_x))
        oy = self._order(epoch, 1, len(self.domain_y))
        rng = np.random.default_rng([self.seed, iteration, 2])
        x = self._augment(self._load(self.domain_x, ox, pos), rng)
        y = self._augment(self._load(self.domain_y, oy, pos), rng)
        return x, y

    def fingerprint(self) -> dict:
        import hashlib

        h = hashlib.sha256()
        for item in self.domain_x + [None] + self.domain_y:
            if item is None:
                h.update(b"|")
            elif isinstance(item, np.ndarray):
                h.update(item.tobytes())
            else:
                h.update(str(item).encode())
        return {"files_x": len(self.domain_x), "files_y": len(self.domain_y), "sha256": h.hexdigest()}


def next_batch(dataset: UnpairedDataset, iteration: int) -> tuple[torch.Tensor, torch.Tensor]:
    """One (x, y) pair of batch size 1 for the given global iteration."""
    return dataset.batch(iteration)


# ------------------------------------------------------------- flip transform

def flip_equivariance_transform(apply: bool, image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1) if apply else image


def unflip_features(features: FeatureStack) -> FeatureStack:
    """Mirror every tap back along the width axis: (h, w) -> (h, W_l - 1 - w)."""
    return features.map(lambda t: t.flip(-1))


# ------------------------------------------------------------ index sampling

class IndexSampler:
    """Uniform patch locations without replacement, from a seeded torch generator."""

    def __init__(self, seed: int = 0, patches_per_layer: int = PATCHES_PER_LAYER):
        self.patches_per_layer = patches_per_layer
        self.generator = torch.Generator().manual_seed(seed)

    def sample(self, layer_shapes: Mapping[str, tuple[int, int]]) -> dict[str, torch.Tensor]:
        out = {}
        for lid, (h, w) in layer_shapes.items():
            perm = torch.randperm(h * w, generator=self.generator)[: self.patches_per_layer]
            out[lid] = torch.stack([perm // w, perm % w], 1)
        return out

    def state_dict(self) -> dict:
        return {"patches_per_layer": self.patches_per_layer, "rng": self.generator.get_state()}

    def load_state_dict(self, state: dict) -> None:
        self.patches_per_layer = state["patches_per_layer"]
        self.generator.set_state(state["rng"])


def sample_indices(sampler: IndexSampler, layer_shapes: Mapping[str, tuple[int, int]]) -> dict[str, torch.Tensor]:
    return sampler.sample(layer_shapes)


# ------------------------------------------------------- single-image batches

@dataclass(frozen=True)
class SingleImageBatchSpec:
    scale_width_range: tuple[int, int] = (384, 1024)
    crops_per_iteration: int = 16
    crop_size: int = 128
    tile_size: int = 64

    def __post_init__(self):
        if self.crop_size % self.tile_size:
            raise InvalidArgument("crop_size must be divisible by tile_size")
        lo, hi = self.scale_width_range
        if not 0 < lo <= hi:
            raise InvalidArgument("invalid scale_width_range")


class ScaledCrops(NamedTuple):
    crops: torch.Tensor  # (n, C, crop, crop)
    width: int
    height: int
    boxes: list[tuple[int, int]]  # (top, left) in the scaled image


def random_scaled_crops(image: torch.Tensor, spec: SingleImageBatchSpec, rng: np.random.Generator) -> ScaledCrops:
    """Rescale ``image`` (C, H, W) to a random width, keeping aspect, and cut random crops."""
    _, h, w = image.shape
    lo, hi = spec.scale_width_range
    width = int(rng.integers(lo, hi + 1))
    height = int(round(h * width / w))
    c = spec.crop_size
    if height < c or width < c:
        raise InvalidArgument(f"image scaled to {width}x{height} is smaller than the {c}px crop")
    scaled = F.interpolate(image.unsqueeze(0), size=(height, width), mode="bilinear",
                           align_corners=False, antialias=width < w)[0]
    boxes, crops = [], []
    for _ in range(spec.crops_per_iteration):
        top = int(rng.integers(0, height - c + 1))
        left = int(rng.integers(0, width - c + 1))
        boxes.append((top, left))
        crops.append(scaled[:, top:top + c, left:left + c])
    return ScaledCrops(torch.stack(crops), width, height, boxes)


def single_image_batch(source: torch.Tensor, target: torch.Tensor, spec: SingleImageBatchSpec,
                       rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    return random_scaled_crops(source, spec, rng).crops, random_scaled_crops(target, spec, rng).crops


class SingleImagePair:
    """One source and one target image; each iteration yields fresh scaled crops."""

    def __init__(self, source: ImageSource, target: ImageSource, spec: SingleImageBatchSpec | None = None,
                 seed: int = 0, iterations_per_epoch: int = 100):
        self.source = to_tensor(load_image(source))
        self.target = to_tensor(load_image(target))
        self.spec = spec or SingleImageBatchSpec()
        self.seed = seed
        self.iterations_per_epoch = iterations_per_epoch

    @classmethod
    def from_directory(cls, root: str | Path, **kwargs) -> "SingleImagePair":
        root = Path(root)
        return cls(list_images(root / "trainA")[0], list_images(root / "trainB")[0], **kwargs)

    def __len__(self) -> int:
        return self.iterations_per_epoch

    def batch(self, iteration: int) -> tuple[torch.Tensor, torch.Tensor]:
        rng = np.random.default_rng([self.seed, iteration, 4])
        return single_image_batch(self.source, self.target, self.spec, rng)

    def fingerprint(self) -> dict:
        import hashlib

        h = hashlib.sha256(self.source.numpy().tobytes() + b"|" + self.target.numpy().tobytes())
        return {"files_x": 1, "files_y": 1, "sha256": h.hexdigest()}


# ------------------------------------------------------------ synthetic task

def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    a, b = rng.uniform(0.15, 0.35, 2) * size
    t = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
    v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synthetic_image(size: int, striped: bool, rng: np.random.Generator) -> np.ndarray:
    """Gray ellipse on a noise background; with ``striped`` the ellipse carries stripes."""
    img = rng.uniform(0.15, 0.45, (size, size))
    mask = _ellipse_mask(size, rng)
    if striped:
        yy, xx = np.mgrid[0:size, 0:size]
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(5.0, 8.0)
        phase = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
        fill = np.where(phase > 0, 0.95, 0.05)
    else:
        fill = np.full((size, size), 0.75)
    img = np.where(mask, fill, img)
    return np.repeat((img * 255).round().astype(np.uint8)[..., None], 3, axis=2)


def synthetic_domains(n: int, size: int = 64, seed: int = 0) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """``n`` plain-ellipse images (domain X) and ``n`` striped-ellipse images (domain Y)."""
    rx = np.random.default_rng([seed, 0])
    ry = np.random.default_rng([seed, 1])
    return ([synthetic_image(size, False, rx) for _ in range(n)],
            [synthetic_image(size, True, ry) for _ in range(n)])


def write_domains(root: str | Path, xs: Sequence[np.ndarray], ys: Sequence[np.ndarray], phase: str = "train") -> Path:
    root = Path(root)
    for tag, images in (("A", xs), ("B", ys)):
        for i, arr in enumerate(images):
            save_image(arr, root / f"{phase}{tag}" / f"{i:04d}.png")
    return root
