"""Fréchet distance, pixel-fraction statistics and embedding visualizations."""

from __future__ import annotations

import importlib.util
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import load_image, save_image, to_tensor, to_uint8
from .errors import InvalidArgument
from .model import TranslationModel
from .networks import all_locations

EMBEDDER_KINDS = ("external_inception", "fixed_random_projection", "identity_pool")
INCEPTION_SIZE = 299


@dataclass(frozen=True)
class EmbedderSpec:
    """How images become feature vectors.

    ``fixed_random_projection`` resizes to ``resize`` x ``resize``, flattens
    and multiplies by a seeded Gaussian matrix. ``identity_pool`` averages
    each channel over a ``resize`` x ``resize`` grid. ``external_inception``
    needs Inception V3 weights at ``weights_path``.
    """

    kind: str = "fixed_random_projection"
    dim: int = 64
    resize: int = 32
    seed: int = 0
    weights_path: str | None = None

    def __post_init__(self):
        if self.kind not in EMBEDDER_KINDS:
            raise InvalidArgument(f"unknown embedder {self.kind!r}; expected one of {EMBEDDER_KINDS}")

    @property
    def output_dim(self) -> int:
        if self.kind == "identity_pool":
            return 3 * self.resize ** 2
        return 2048 if self.kind == "external_inception" else self.dim


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    tensors = []
    for img in images:
        if isinstance(img, torch.Tensor):
            tensors.append(img if img.dim() == 3 else img[0])
        else:
            tensors.append(to_tensor(load_image(img)))
    return torch.stack(tensors)


def resize_for_inception(batch: torch.Tensor) -> torch.Tensor:
    return F.interpolate(batch, size=(INCEPTION_SIZE, INCEPTION_SIZE), mode="bilinear", align_corners=False)


def _inception(weights_path: str | None):
    if not weights_path:
        raise InvalidArgument("external_inception needs a path to pretrained Inception V3 weights")
    from torchvision.models import inception_v3

    net = inception_v3(weights=None, aux_logits=True, init_weights=False)
    net.load_state_dict(torch.load(weights_path, map_location="cpu"))
    net.fc = torch.nn.Identity()
    return net.eval()


def make_embedder(spec: EmbedderSpec) -> Callable[[torch.Tensor], np.ndarray]:
    """Frozen function mapping a (B, 3, H, W) batch in [-1, 1] to (B, d) float64 features."""
    if spec.kind == "identity_pool":
        def embed(batch):
            return F.adaptive_avg_pool2d(batch.double(), spec.resize).flatten(1).numpy()
        return embed
    if spec.kind == "fixed_random_projection":
        n_in = 3 * spec.resize ** 2
        gen = torch.Generator().manual_seed(spec.seed)
        proj = torch.randn(n_in, spec.dim, generator=gen, dtype=torch.float64) / np.sqrt(n_in)

        def embed(batch):
            small = F.interpolate(batch.double(), size=(spec.resize, spec.resize), mode="bilinear",
                                  align_corners=False, antialias=True)
            return (small.flatten(1) @ proj).numpy()
        return embed
    net = _inception(spec.weights_path)

    @torch.no_grad()
    def embed(batch):
        # Inception expects [0, 1] inputs normalized with ImageNet statistics
        x = resize_for_inception(batch.float())
        x = (x + 1) / 2
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return net((x - mean) / std).double().numpy()
    return embed


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise InvalidArgument(f"covariance shape {self.cov.shape} does not match mean dimension {d}")
        if self.count < 2:
            raise InvalidArgument("a summary needs at least 2 samples")
        scale = max(1.0, float(np.abs(self.cov).max()))
        if np.abs(self.cov - self.cov.T).max() > 1e-8 * scale:
            raise InvalidArgument("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianSummary":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] < 2:
            raise InvalidArgument("need at least 2 samples")
        cov = np.cov(feats, rowvar=False, ddof=1)
        return cls(feats.mean(0), (cov + cov.T) / 2, feats.shape[0])


def summarize(images, embedder: EmbedderSpec | Callable, batch_size: int = 64) -> GaussianSummary:
    """Embed images and return their sample mean and unbiased covariance."""
    batch = _as_batch(images)
    if batch.shape[0] < 2:
        raise InvalidArgument("summarize needs at least 2 images")
    fn = make_embedder(embedder) if isinstance(embedder, EmbedderSpec) else embedder
    feats = np.concatenate([fn(batch[i:i + batch_size]) for i in range(0, batch.shape[0], batch_size)])
    return GaussianSummary.from_features(feats)


def _psd_eigenvalues(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((m + m.T) / 2)
    tol = 1e-8 * max(np.linalg.norm(m), 1e-300)
    if w.min(initial=0.0) < -tol:
        raise InvalidArgument(f"matrix has eigenvalue {w.min():.3e}, not positive semidefinite")
    return np.clip(w, 0.0, None), v


def trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((A B)^(1/2)) for symmetric PSD A, B via the symmetric form A^(1/2) B A^(1/2)."""
    w, v = _psd_eigenvalues(a)
    sqrt_a = (v * np.sqrt(w)) @ v.T
    inner, _ = _psd_eigenvalues(sqrt_a @ b @ sqrt_a)
    return float(np.sqrt(inner).sum())


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    if a.mean.shape != b.mean.shape:
        raise InvalidArgument(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt_product(a.cov, b.cov)
    return max(float(value), 0.0)


def fid(real_images, fake_images, embedder: EmbedderSpec) -> float:
    fn = make_embedder(embedder)
    return frechet_distance(summarize(real_images, fn), summarize(fake_images, fn))


# ------------------------------------------------------- pixel-fraction statistic

def class_pixel_fraction(images: Iterable, segmenter: Callable[[np.ndarray], np.ndarray],
                         class_ids: Sequence[int]) -> float:
    """Share of all pixels, pooled over ``images``, whose label is in ``class_ids``."""
    hits = total = 0
    ids = np.asarray(list(class_ids))
    for img in images:
        arr = img if isinstance(img, np.ndarray) and img.dtype == np.uint8 else (
            to_uint8(img) if isinstance(img, torch.Tensor) else load_image(img))
        labels = np.asarray(segmenter(arr))
        if labels.shape != arr.shape[:2]:
            raise InvalidArgument(f"segmenter returned {labels.shape} labels for a {arr.shape[:2]} image")
        hits += int(np.isin(labels, ids).sum())
        total += labels.size
    if total == 0:
        raise InvalidArgument("no images given")
    return hits / total


def load_segmenter(path: str | Path) -> Callable[[np.ndarray], np.ndarray]:
    """Load ``segment(image) -> labels`` from a Python file."""
    spec = importlib.util.spec_from_file_location("cutgan_user_segmenter", path)
    if spec is None or spec.loader is None:
        raise InvalidArgument(f"cannot import segmenter from {path}")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    if not hasattr(module, "segment"):
        raise InvalidArgument(f"{path} does not define segment(image)")
    return module.segment


# ---------------------------------------------------------------- visualizations

def _image_tensor(img, model: TranslationModel) -> torch.Tensor:
    t = img if isinstance(img, torch.Tensor) else to_tensor(load_image(img))
    t = t if t.dim() == 4 else t.unsqueeze(0)
    p = next(model.parameters())
    return t.to(p.device, p.dtype)


@dataclass
class SimilarityMap:
    heatmap: np.ndarray  # (H, W) in [0, 1] at image resolution
    layer_map: np.ndarray  # (h, w) raw exp(v . v- / tau) at layer resolution


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


@torch.no_grad()
def similarity_map(model: TranslationModel, input_image, output_image, query_location: tuple[int, int],
                   layer_id: str = "res1", temperature: float = 0.07, out_path: str | Path | None = None
                   ) -> SimilarityMap:
    """exp(v . v- / tau) between one output-image patch and every input-image patch of a layer."""
    x = _image_tensor(input_image, model)
    y = _image_tensor(output_image, model)
    feats_in = model.key_features(x)
    feats_out = model.query_features(y)
    if layer_id not in feats_in.taps:
        raise InvalidArgument(f"unknown layer {layer_id!r}; taps are {list(feats_in.taps)}")
    h, w = feats_in.taps[layer_id].shape[-2:]
    r, c = query_location
    if not (0 <= r < h and 0 <= c < w):
        raise InvalidArgument(f"query location {query_location} outside the {h}x{w} layer")
    keys = model.embed_keys(feats_in, {layer_id: all_locations((h, w))})[layer_id].embeddings[0]
    loc = torch.tensor([[r, c]])
    query = model.embed_queries(feats_out, {layer_id: loc})[layer_id].embeddings[0, 0]
    raw = torch.exp(keys.double() @ query.double() / temperature).reshape(h, w)
    up = F.interpolate(raw[None, None], size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    heat = _minmax(up.numpy())
    if out_path is not None:
        import matplotlib

        colored = matplotlib.colormaps["jet"](heat)[..., :3]
        base = to_uint8(x[0]).astype(np.float64) / 255.0
        save_image((255 * (0.5 * base + 0.5 * colored)).round().astype(np.uint8), out_path)
    return SimilarityMap(heat, raw.numpy())


@dataclass
class PCARendering:
    images: list[np.ndarray]  # each (h, w, 3) in [0, 1]
    components: np.ndarray  # (3, K)
    mean: np.ndarray  # (K,)


@torch.no_grad()
def pca_embedding_image(model: TranslationModel, images: Sequence, layer_id: str = "res1",
                        out_dir: str | Path | None = None) -> PCARendering:
    """Render the top three principal components of patch embeddings as RGB.

    One basis is fitted on the pooled embeddings of all ``images`` and used
    for every rendering; colors share one per-component range.
    """
    if not len(images):
        raise InvalidArgument("need at least one image")
    per_image, shapes = [], []
    for img in images:
        x = _image_tensor(img, model)
        feats = model.key_features(x)
        if layer_id not in feats.taps:
            raise InvalidArgument(f"unknown layer {layer_id!r}")
        shape = tuple(feats.taps[layer_id].shape[-2:])
        emb = model.embed_keys(feats, {layer_id: all_locations(shape)})[layer_id].embeddings[0]
        per_image.append(emb.double().cpu().numpy())
        shapes.append(shape)
    pooled = np.concatenate(per_image)
    mean = pooled.mean(0)
    _, s, vt = np.linalg.svd(pooled - mean, full_matrices=False)
    rank = int((s > 1e-10 * max(s.max(initial=0.0), 1e-300)).sum())
    components = np.zeros((3, pooled.shape[1]))
    k = min(3, rank)
    components[:k] = vt[:k]
    if k < 3:
        warnings.warn(f"embeddings have rank {rank}; padding {3 - k} PCA component(s) with zeros")
    projected = [(e - mean) @ components.T for e in per_image]
    allp = np.concatenate(projected)
    lo, hi = allp.min(0), allp.max(0)
    span = np.where(hi > lo, hi - lo, 1.0)
    renders = [((p - lo) / span).reshape(*shape, 3) for p, shape in zip(projected, shapes)]
    if out_dir is not None:
        out_dir = Path(out_dir)
        for i, r in enumerate(renders):
            save_image((r * 255).round().astype(np.uint8), out_dir / f"pca_{i:03d}.png")
    return PCARendering(renders, components, mean)
