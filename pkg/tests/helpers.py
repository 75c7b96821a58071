"""Tiny float64 models shared by the gradient tests."""

import torch
import torch.nn as nn

from cutgan.data import IndexSampler
from cutgan.model import TranslationModel
from cutgan.networks import DiscriminatorSpec, GeneratorSpec

TINY_TAPS = ("pixels", "down1", "res1")


def tiny_model(shared=True, seed=0):
    torch.manual_seed(seed)
    gen = GeneratorSpec(base_width=1, n_blocks=1, tap_layers=TINY_TAPS)
    disc = DiscriminatorSpec(base_width=1)
    return TranslationModel(gen, disc, embed_dim=4, shared_embedding=shared).double()


def tiny_images(seed=0, size=32):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, size, size, generator=g, dtype=torch.float64) * 2 - 1
    y = torch.rand(1, 3, size, size, generator=g, dtype=torch.float64) * 2 - 1
    return x, y


def tiny_sampler(seed=0):
    return IndexSampler(seed, patches_per_layer=6)


class LinearCritic(nn.Module):
    """s(x) = w . flatten(x)."""

    def __init__(self, n):
        super().__init__()
        self.w = nn.Parameter(torch.randn(n, dtype=torch.float64))

    def forward(self, x):
        return (x.flatten(1) @ self.w).view(-1, 1, 1, 1)
