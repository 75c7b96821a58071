"""All networks of one translation run in a single module."""

from __future__ import annotations

import copy

import torch.nn as nn

from . import EMBED_DIM
from .networks import (
    Discriminator,
    DiscriminatorSpec,
    FeatureStack,
    Generator,
    GeneratorSpec,
    ProjectionHeads,
    init_weights,
    parameter_count,
)


class TranslationModel(nn.Module):
    """Generator, discriminator and projection heads.

    With ``shared_embedding=False`` the output image is embedded by its own
    encoder and heads instead of reusing the generator's encoder and the
    input-path heads.
    """

    def __init__(self, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                 embed_dim: int = EMBED_DIM, shared_embedding: bool = True):
        super().__init__()
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec
        self.embed_dim = embed_dim
        self.shared_embedding = shared_embedding
        self.generator = Generator(gen_spec)
        self.discriminator = Discriminator(disc_spec)
        self.heads = ProjectionHeads(self.generator.encoder.tap_channels, embed_dim)
        if shared_embedding:
            self.query_encoder = None
            self.query_heads = None
        else:
            self.query_encoder = copy.deepcopy(self.generator.encoder)
            init_weights(self.query_encoder)
            self.query_heads = ProjectionHeads(self.generator.encoder.tap_channels, embed_dim)

    def key_features(self, x) -> FeatureStack:
        return self.generator.encode(x)

    def query_features(self, y) -> FeatureStack:
        return (self.query_encoder or self.generator.encoder)(y)

    def embed_keys(self, features, indices):
        return self.heads(features, indices)

    def embed_queries(self, features, indices):
        return (self.query_heads or self.heads)(features, indices)

    def generator_modules(self) -> list[nn.Module]:
        mods = [self.generator, self.heads]
        if not self.shared_embedding:
            mods += [self.query_encoder, self.query_heads]
        return mods

    def generator_parameters(self):
        for m in self.generator_modules():
            yield from m.parameters()

    def parameter_counts(self) -> dict[str, int]:
        counts = {"generator": parameter_count(self.generator),
                  "discriminator": parameter_count(self.discriminator),
                  "heads": parameter_count(self.heads)}
        if not self.shared_embedding:
            counts["query_encoder"] = parameter_count(self.query_encoder)
            counts["query_heads"] = parameter_count(self.query_heads)
        return counts
