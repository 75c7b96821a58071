import numpy as np
import pytest
import torch
import torch.nn as nn

from cutgan.errors import InvalidArgument, InvalidState
from cutgan.networks import (BlurPool, DiscriminatorSpec, Discriminator, FeatureStack, Generator, GeneratorSpec,
                             LeakyResBlock, ProjectionHeads, all_locations, parameter_count, split_tiles)


def positive_weights(module):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.abs_().add_(0.01)
                if m.bias is not None:
                    m.bias.fill_(0.01)


def gradient_support(net_fn, x, tap, cell):
    x = x.clone().requires_grad_(True)
    feat = net_fn(x).taps[tap]
    feat[0, :, cell[0], cell[1]].sum().backward()
    nz = (x.grad[0].abs().sum(0) > 0).nonzero()
    return int(nz[:, 0].max() - nz[:, 0].min() + 1), int(nz[:, 1].max() - nz[:, 1].min() + 1)


def test_default_taps_are_paper_layers():
    spec = GeneratorSpec()
    assert spec.tap_layers == ("pixels", "down1", "down2", "res1", "res5")
    assert spec.n_blocks == 9


def test_receptive_fields_declared_and_measured():
    spec = GeneratorSpec(base_width=2, norm="none")
    gen = Generator(spec).double()
    assert gen.encoder.receptive_fields() == {"pixels": 1, "down1": 9, "down2": 15, "res1": 35, "res5": 99}
    positive_weights(gen)
    x = torch.rand(1, 3, 160, 160, dtype=torch.float64) + 0.1
    for tap, rf in gen.encoder.receptive_fields().items():
        h, w = gen.encode(x).taps[tap].shape[-2:]
        assert gradient_support(gen.encode, x, tap, (h // 2, w // 2)) == (rf, rf), tap


def test_tap_sizes_at_256():
    gen = Generator(GeneratorSpec(base_width=2))
    shapes = gen.encode(torch.zeros(1, 3, 256, 256)).shapes()
    assert shapes == {"pixels": (256, 256), "down1": (256, 256), "down2": (128, 128),
                      "res1": (64, 64), "res5": (64, 64)}


def test_pixel_tap_is_identity_and_roundtrip_shape():
    gen = Generator(GeneratorSpec(base_width=4, n_blocks=5))
    x = torch.rand(2, 3, 32, 48) * 2 - 1
    feats = gen.encode(x)
    assert torch.equal(feats.taps["pixels"], x)
    out = gen.decode(feats)
    assert out.shape == x.shape
    assert out.abs().max() <= 1


def test_encoder_ends_at_deepest_tap():
    gen = Generator(GeneratorSpec(base_width=4))
    assert gen.encoder.names[-1] == "res5"
    with pytest.raises(InvalidState):
        gen.decode(FeatureStack({}, None))


def test_bad_input_and_taps_rejected():
    gen = Generator(GeneratorSpec(base_width=4))
    with pytest.raises(InvalidArgument):
        gen(torch.zeros(1, 3, 30, 32))
    with pytest.raises(InvalidArgument):
        Generator(GeneratorSpec(base_width=4, tap_layers=("res12",)))


def test_translation_equivariance_interior():
    spec = GeneratorSpec(base_width=2, n_blocks=5, norm="none")
    gen = Generator(spec).double()
    x = torch.rand(1, 3, 128, 128, dtype=torch.float64)
    shifted = torch.roll(x, shifts=(4, 4), dims=(-2, -1))
    a = gen.encode(x).taps["res5"]
    b = gen.encode(shifted).taps["res5"]
    # cells farther than half a receptive field (99 px = 25 cells) from any border
    lo, hi = 14, 32 - 14
    assert torch.allclose(b[..., lo + 1:hi + 1, lo + 1:hi + 1], a[..., lo:hi, lo:hi], atol=1e-10)


def test_parameter_counts_deterministic():
    assert parameter_count(Generator(GeneratorSpec())) == 11_378_179
    spec = GeneratorSpec(base_width=8)
    assert parameter_count(Generator(spec)) == parameter_count(Generator(spec))


def test_singleimage_structure():
    gen = Generator(GeneratorSpec("singleimage", base_width=4))
    blocks = [m for m in gen.modules() if isinstance(m, LeakyResBlock)]
    down = [b for b in blocks if isinstance(b.main[-1], BlurPool)]
    up = [b for b in blocks if isinstance(b.main[0], nn.Upsample)]
    assert (len(down), len(blocks) - len(down) - len(up), len(up)) == (1, 6, 1)
    x = torch.rand(1, 3, 96, 160) * 2 - 1
    assert gen(x).shape == x.shape


def test_heads_unit_norm_and_shared():
    gen = Generator(GeneratorSpec(base_width=4))
    heads = ProjectionHeads(gen.encoder.tap_channels, 32)
    x = torch.rand(1, 3, 64, 64)
    feats = gen.encode(x)
    idx = {k: all_locations(s)[:20] for k, s in feats.shapes().items()}
    a, b = heads(feats, idx), heads(feats, idx)
    assert len(a) == 5
    for la, lb in zip(a, b):
        assert torch.allclose(la.embeddings.norm(dim=-1), torch.ones(1, 20), atol=1e-5)
        assert torch.equal(la.embeddings, lb.embeddings)


def test_heads_constant_input_gives_identical_rows():
    heads = ProjectionHeads({"f": 6}, 16)
    with torch.no_grad():
        for m in heads.modules():
            if isinstance(m, nn.Linear):
                m.bias.uniform_(0.1, 1.0)
    feats = FeatureStack({"f": torch.zeros(1, 6, 4, 4)})
    emb = heads(feats, {"f": all_locations((4, 4))})["f"].embeddings[0]
    assert torch.allclose(emb @ emb.T, torch.ones(16, 16), atol=1e-6)


def test_heads_reject_out_of_bounds():
    heads = ProjectionHeads({"f": 2}, 4)
    with pytest.raises(InvalidArgument):
        heads(FeatureStack({"f": torch.zeros(1, 2, 3, 3)}), {"f": torch.tensor([[3, 0]])})


def test_patchgan_map_and_receptive_field():
    disc = Discriminator(DiscriminatorSpec(base_width=4, norm="none")).double()
    assert disc.receptive_field() == 70
    out = disc(torch.rand(1, 3, 256, 256, dtype=torch.float64))
    assert out.shape == (1, 1, 30, 30)
    x = torch.rand(1, 3, 256, 256, dtype=torch.float64, requires_grad=True)
    disc(x)[0, 0, 15, 15].backward()
    nz = (x.grad[0].abs().sum(0) > 0).nonzero()
    assert int(nz[:, 0].max() - nz[:, 0].min() + 1) == 70


def test_tile64_splits_crops():
    disc = Discriminator(DiscriminatorSpec("tile64", base_width=4))
    crop = torch.rand(1, 3, 128, 128)
    assert split_tiles(crop, 64).shape == (4, 3, 64, 64)
    assert torch.equal(split_tiles(crop, 64)[1], crop[0, :, :64, 64:])
    out = disc(crop)
    assert out.shape == (4, 1, 1, 1)
    assert torch.equal(out, disc(crop))
    with pytest.raises(InvalidArgument):
        split_tiles(torch.zeros(1, 3, 100, 128), 64)
