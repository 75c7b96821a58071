import json
from pathlib import Path

import numpy as np
import pytest
import torch

from cutgan.data import (IndexSampler, SingleImageBatchSpec, SingleImagePair, UnpairedDataset,
                         flip_equivariance_transform, list_images, load_image, next_batch, random_scaled_crops,
                         sample_indices, save_image, synthetic_domains, to_tensor, to_uint8, unflip_features,
                         write_domains)
from cutgan.errors import InvalidArgument, InvalidState
from cutgan.networks import FeatureStack, Generator, GeneratorSpec, ProjectionHeads, split_tiles

GOLDEN = Path(__file__).parent / "golden" / "index_sampler_seed17_8x8_4.json"


def test_sampler_golden():
    ref = json.loads(GOLDEN.read_text())
    idx = IndexSampler(ref["seed"], ref["request"]).sample({"l": tuple(ref["shape"])})["l"]
    assert idx.tolist() == ref["indices"]


def test_sampler_counts_and_uniqueness():
    s = IndexSampler(0)
    out = sample_indices(s, {"big": (64, 64), "small": (10, 10)})
    flat = out["big"][:, 0] * 64 + out["big"][:, 1]
    assert out["big"].shape == (256, 2)
    assert flat.unique().numel() == 256 and flat.min() >= 0 and flat.max() < 4096
    assert out["small"].shape == (100, 2)
    assert (out["small"][:, 0] * 10 + out["small"][:, 1]).sort().values.tolist() == list(range(100))


def test_sampler_state_roundtrip():
    a = IndexSampler(5, 8)
    a.sample({"l": (4, 4)})
    b = IndexSampler(99, 8)
    b.load_state_dict(a.state_dict())
    assert torch.equal(a.sample({"l": (4, 4)})["l"], b.sample({"l": (4, 4)})["l"])


def test_to_tensor_range_and_roundtrip():
    arr = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    t = to_tensor(arr)
    assert t.min() == -1 and t.max() == 1 and t.shape == (3, 16, 16)
    assert np.array_equal(to_uint8(t), arr)


def test_batches_deterministic_and_sized():
    xs, ys = synthetic_domains(5, 32, seed=0)
    ds = UnpairedDataset(xs, ys[:3], load_size=36, crop_size=32, seed=7)
    assert len(ds) == 5
    x, y = next_batch(ds, 3)
    assert x.shape == (1, 3, 32, 32) and y.shape == (1, 3, 32, 32)
    assert x.min() >= -1 and x.max() <= 1
    again = UnpairedDataset(xs, ys[:3], load_size=36, crop_size=32, seed=7)
    for it in (0, 3, 11):
        a, b = ds.batch(it), again.batch(it)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    other = UnpairedDataset(xs, ys[:3], load_size=36, crop_size=32, seed=8)
    assert not all(torch.equal(ds.batch(i)[0], other.batch(i)[0]) for i in range(5))


def test_epoch_visits_every_x_once():
    xs = [np.full((8, 8, 3), v, np.uint8) for v in range(0, 250, 50)]
    ds = UnpairedDataset(xs, xs[:2], load_size=8, crop_size=8, flip=False)
    seen = sorted(int(to_uint8(ds.batch(i)[0][0])[0, 0, 0]) for i in range(len(ds)))
    assert seen == [0, 50, 100, 150, 200]


def test_directory_layout_and_bad_files(tmp_path, caplog):
    xs, ys = synthetic_domains(3, 16)
    write_domains(tmp_path, xs, ys)
    (tmp_path / "trainA" / "broken.png").write_bytes(b"not an image")
    (tmp_path / "trainA" / "notes.txt").write_text("ignored")
    ds = UnpairedDataset.from_directory(tmp_path, load_size=16, crop_size=16)
    assert len(ds.domain_x) == 4
    for i in range(len(ds)):
        assert ds.batch(i)[0].shape == (1, 3, 16, 16)
    assert "broken.png" in caplog.text
    assert np.array_equal(load_image(tmp_path / "trainB" / "0001.png"), ys[1])


def test_manifest_orders_files(tmp_path):
    d = tmp_path / "imgs"
    for name in ("a.png", "b.png", "c.png"):
        save_image(np.zeros((4, 4, 3), np.uint8), d / name)
    (d / "manifest.txt").write_text("c.png\na.png\n")
    assert [p.name for p in list_images(d)] == ["c.png", "a.png"]


def test_empty_domain_rejected():
    with pytest.raises(InvalidState):
        UnpairedDataset([], [np.zeros((4, 4, 3), np.uint8)])
    with pytest.raises(InvalidArgument):
        UnpairedDataset([np.zeros((4, 4, 3), np.uint8)] * 2, [np.zeros((4, 4, 3), np.uint8)], 8, 16)


def test_unflip_is_involution_and_width_one_fixed():
    feats = FeatureStack({"a": torch.randn(1, 4, 5, 7), "b": torch.randn(1, 2, 3, 1)}, torch.randn(1, 2, 3, 3))
    back = unflip_features(unflip_features(feats))
    assert all(torch.equal(back.taps[k], feats.taps[k]) for k in feats.taps)
    assert torch.equal(unflip_features(feats).taps["b"], feats.taps["b"])
    img = torch.randn(1, 3, 4, 6)
    assert torch.equal(flip_equivariance_transform(False, img), img)
    assert torch.equal(flip_equivariance_transform(True, img)[..., 0], img[..., -1])


def test_pixel_tap_embeddings_bit_identical_under_flip():
    gen = Generator(GeneratorSpec(base_width=4))
    heads = ProjectionHeads(gen.encoder.tap_channels, 16)
    x = torch.rand(1, 3, 32, 32)
    idx = IndexSampler(3, 50).sample({"pixels": (32, 32)})
    direct = heads(gen.encode(x), idx)["pixels"].embeddings
    via_flip = heads(unflip_features(gen.encode(flip_equivariance_transform(True, x))), idx)["pixels"].embeddings
    assert torch.equal(direct, via_flip)


def test_single_image_crops():
    img = torch.rand(3, 200, 512) * 2 - 1
    spec = SingleImageBatchSpec()
    rng = np.random.default_rng(0)
    out = random_scaled_crops(img, spec, rng)
    assert out.crops.shape == (16, 3, 128, 128)
    assert 384 <= out.width <= 1024 and out.height == round(200 * out.width / 512)
    scaled = torch.nn.functional.interpolate(img[None], size=(out.height, out.width), mode="bilinear",
                                             align_corners=False, antialias=out.width < 512)[0]
    top, left = out.boxes[3]
    assert torch.equal(out.crops[3], scaled[:, top:top + 128, left:left + 128])
    assert split_tiles(out.crops[:1], 64).shape[0] == 4


def test_single_image_pair_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    a = (rng.random((256, 512, 3)) * 255).astype(np.uint8)
    pair = SingleImagePair(a, a[:, ::-1].copy(), seed=3)
    x1, y1 = pair.batch(5)
    x2, _ = SingleImagePair(a, a[:, ::-1].copy(), seed=3).batch(5)
    assert x1.shape == (16, 3, 128, 128) and y1.shape == (16, 3, 128, 128)
    assert torch.equal(x1, x2)


def test_synthetic_domains_share_geometry_statistics():
    xs, ys = synthetic_domains(4, 64, seed=0)
    assert xs[0].shape == (64, 64, 3) and xs[0].dtype == np.uint8
    assert len({x.tobytes() for x in xs}) == 4
    # stripes show up as many strong horizontal edges inside the ellipse
    assert np.abs(np.diff(ys[0][..., 0].astype(int), axis=1)).max() > np.abs(np.diff(xs[0][..., 0].astype(int), axis=1)).max()
