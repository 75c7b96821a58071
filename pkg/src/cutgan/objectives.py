"""Adversarial terms, R1 penalty and the composed generator objective."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace

import torch
import torch.nn.functional as F

from . import TEMPERATURE
from .bank import NegativeQueue
from .data import IndexSampler, flip_equivariance_transform, unflip_features
from .errors import ConfigurationWarning, InvalidArgument, InvalidState
from .model import TranslationModel
from .nce import REDUCTIONS, external_nce_loss, patchnce_loss

GAN_MODES = ("least_squares", "non_saturating")
NEGATIVE_SOURCES = ("internal", "external", "both")


@dataclass
class ObjectiveConfig:
    lambda_x: float = 1.0
    lambda_y: float = 1.0
    gan_mode: str = "least_squares"
    r1_gamma: float = 0.0
    temperature: float = TEMPERATURE
    decoder_grad_through_nce: bool = True
    shared_embedding_weights: bool = True
    nce_reduction: str = "mean"

    def validate(self) -> "ObjectiveConfig":
        if self.gan_mode not in GAN_MODES:
            raise InvalidArgument(f"gan_mode must be one of {GAN_MODES}, got {self.gan_mode!r}")
        if self.lambda_x < 0 or self.lambda_y < 0 or self.r1_gamma < 0:
            raise InvalidArgument("lambda_x, lambda_y and r1_gamma must be non-negative")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be positive")
        if self.nce_reduction not in REDUCTIONS[:2]:
            raise InvalidArgument("nce_reduction must be 'mean' or 'sum'")
        if self.lambda_x == 0 and self.lambda_y == 0:
            warnings.warn("lambda_x = lambda_y = 0: no content-preservation loss", ConfigurationWarning)
        return self

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


OBJECTIVE_PRESETS = {
    "cut": ObjectiveConfig(lambda_x=1.0, lambda_y=1.0, gan_mode="least_squares"),
    "fastcut": ObjectiveConfig(lambda_x=10.0, lambda_y=0.0, gan_mode="least_squares"),
    "sincut": ObjectiveConfig(lambda_x=1.0, lambda_y=1.0, gan_mode="non_saturating", r1_gamma=10.0),
}


def objective_preset(name: str) -> ObjectiveConfig:
    if name not in OBJECTIVE_PRESETS:
        raise InvalidArgument(f"unknown preset {name!r}")
    return replace(OBJECTIVE_PRESETS[name])


# ------------------------------------------------------------------ GAN terms

def generator_gan_term(fake_scores: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "least_squares":
        return ((fake_scores - 1) ** 2).mean()
    if mode == "non_saturating":
        return F.softplus(-fake_scores).mean()
    raise InvalidArgument(f"unknown gan mode {mode!r}")


def discriminator_gan_term(real_scores: torch.Tensor, fake_scores: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "least_squares":
        return 0.5 * ((real_scores - 1) ** 2).mean() + 0.5 * (fake_scores ** 2).mean()
    if mode == "non_saturating":
        return F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()
    raise InvalidArgument(f"unknown gan mode {mode!r}")


def gan_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor, mode: str) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator term, discriminator term) for the given score maps."""
    return generator_gan_term(fake_scores, mode), discriminator_gan_term(real_scores, fake_scores, mode)


def r1_penalty(discriminator, real_batch: torch.Tensor, gamma: float) -> torch.Tensor:
    """(gamma / 2) * E[ ||d D(x) / d x||^2 ] at real samples.

    The score map is summed per sample before differentiating, so each
    sample's gradient is that of its total score.
    """
    real = real_batch.detach().requires_grad_(True)
    scores = discriminator(real)
    if not scores.requires_grad:
        raise InvalidState("discriminator output carries no gradient")
    (grad,) = torch.autograd.grad(scores.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return scores.sum() * 0.0
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


# --------------------------------------------------------- generator objective

@dataclass
class GeneratorLoss:
    """Scalar objective plus its unweighted components and their weights."""

    total: torch.Tensor
    components: dict[str, torch.Tensor]
    weights: dict[str, float]
    fake: torch.Tensor
    identity: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)

    def contributions(self) -> dict[str, torch.Tensor]:
        return {k: self.weights[k] * v for k, v in self.components.items()}


def patch_nce(model: TranslationModel, source: torch.Tensor, output: torch.Tensor, sampler: IndexSampler,
              config: ObjectiveConfig, *, source_features=None, flipped: bool = False,
              negative_source: str = "internal", queue: NegativeQueue | None = None) -> torch.Tensor:
    """PatchNCE between an input image and the generator's output for it.

    ``flipped`` means ``output`` was generated from the mirrored input; its
    features are mirrored back before sampling so locations correspond.
    """
    keys_feat = source_features if source_features is not None else model.key_features(source)
    if not config.decoder_grad_through_nce:
        output = output.detach()
    query_feat = model.query_features(output)
    if flipped:
        query_feat = unflip_features(query_feat)
    indices = sampler.sample(keys_feat.shapes())
    keys = model.embed_keys(keys_feat, indices)
    queries = model.embed_queries(query_feat, indices)
    tau, red = config.temperature, config.nce_reduction
    if negative_source == "internal":
        return patchnce_loss(queries, keys, tau, red)
    if negative_source not in NEGATIVE_SOURCES:
        raise InvalidArgument(f"unknown negative source {negative_source!r}")
    warm = queue is not None and queue.is_warm(sampler.patches_per_layer)
    if not warm:
        # external negatives switch on once every layer's queue holds a full batch
        if negative_source == "both":
            return patchnce_loss(queries, keys, tau, red)
        return source.new_zeros(())
    return external_nce_loss(queries, keys, queue.as_dict(), tau,
                             include_internal=negative_source == "both", reduction=red)


def total_generator_loss(x: torch.Tensor, y: torch.Tensor, model: TranslationModel, config: ObjectiveConfig,
                         sampler: IndexSampler, *, flip: bool = False, negative_source: str = "internal",
                         queue: NegativeQueue | None = None, discriminator_input=None) -> GeneratorLoss:
    """GAN term + lambda_x * PatchNCE(x, G(x)) + lambda_y * PatchNCE(y, G(y)).

    The identity term is evaluated only when ``lambda_y > 0`` and draws its
    own patch locations. ``discriminator_input`` optionally maps the fake
    batch before scoring (SinCUT tiles it).
    """
    gen = model.generator
    x_in = flip_equivariance_transform(flip, x)
    fake, feats = gen(x_in, return_features=True)
    d_in = discriminator_input(fake) if discriminator_input else fake
    gan_g = generator_gan_term(model.discriminator(d_in), config.gan_mode)

    components = {"gan_g": gan_g}
    weights = {"gan_g": 1.0}
    nce_kw = dict(negative_source=negative_source, queue=queue)
    if config.lambda_x > 0:
        # without flipping, the forward pass already holds the input's features
        src_feats = None if flip else feats
        components["nce_x"] = patch_nce(model, x, fake, sampler, config, source_features=src_feats,
                                        flipped=flip, **nce_kw)
        weights["nce_x"] = config.lambda_x
    identity = None
    if config.lambda_y > 0:
        identity, y_feats = gen(y, return_features=True)
        components["nce_y"] = patch_nce(model, y, identity, sampler, config, source_features=y_feats, **nce_kw)
        weights["nce_y"] = config.lambda_y
    total = sum(weights[k] * v for k, v in components.items())
    return GeneratorLoss(total, components, weights, fake, identity)
