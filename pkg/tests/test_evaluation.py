import numpy as np
import pytest
import scipy.linalg
import torch

from cutgan.errors import InvalidArgument
from cutgan.evaluation import (EmbedderSpec, GaussianSummary, class_pixel_fraction, fid, frechet_distance,
                               load_segmenter, make_embedder, pca_embedding_image, resize_for_inception,
                               similarity_map, summarize)
from cutgan.model import TranslationModel
from cutgan.networks import DiscriminatorSpec, GeneratorSpec


def spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def eigen_oracle(m1, c1, m2, c2):
    """Fréchet distance via scipy's Schur-based square root of the product."""
    covmean = scipy.linalg.sqrtm(c1 @ c2)
    return float(np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2 * covmean.real))


def test_identical_is_zero():
    rng = np.random.default_rng(0)
    s = GaussianSummary(rng.standard_normal(4), spd(rng, 4), 10)
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-10)


def test_shifted_identity_gives_squared_distance():
    a = GaussianSummary(np.zeros(3), np.eye(3), 5)
    b = GaussianSummary(np.array([3.0, 4.0, 0.0]), np.eye(3), 5)
    assert frechet_distance(a, b) == pytest.approx(25.0, abs=1e-8)


def test_random_spd_matches_oracle_and_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m1, m2 = rng.standard_normal(4), rng.standard_normal(4)
        c1, c2 = spd(rng, 4), spd(rng, 4)
        a, b = GaussianSummary(m1, c1, 9), GaussianSummary(m2, c2, 9)
        assert frechet_distance(a, b) == pytest.approx(eigen_oracle(m1, c1, m2, c2), rel=1e-6)
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8


def test_commuting_covariances_closed_form():
    la, lb = np.array([1.0, 4.0, 0.25]), np.array([9.0, 1.0, 0.0])
    a = GaussianSummary(np.zeros(3), np.diag(la), 3)
    b = GaussianSummary(np.zeros(3), np.diag(lb), 3)
    assert frechet_distance(a, b) == pytest.approx(float(np.sum((np.sqrt(la) - np.sqrt(lb)) ** 2)), abs=1e-8)


def test_invalid_summaries():
    with pytest.raises(InvalidArgument):
        GaussianSummary(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 3)
    with pytest.raises(InvalidArgument):
        GaussianSummary(np.zeros(2), np.eye(2), 1)
    with pytest.raises(InvalidArgument):
        frechet_distance(GaussianSummary(np.zeros(2), np.eye(2), 2), GaussianSummary(np.zeros(3), np.eye(3), 2))
    with pytest.raises(InvalidArgument):
        frechet_distance(GaussianSummary(np.zeros(2), np.diag([1.0, -1.0]), 2),
                         GaussianSummary(np.zeros(2), np.eye(2), 2))


def test_summarize_shapes_and_constant_images():
    imgs = torch.zeros(5, 3, 16, 16) + 0.3
    s = summarize(imgs, EmbedderSpec("identity_pool", resize=2))
    assert s.cov.shape == (12, 12) and np.all(s.cov == 0)
    rnd = torch.rand(7, 3, 16, 16) * 2 - 1
    s = summarize(rnd, EmbedderSpec(dim=64))
    assert s.mean.shape == (64,) and s.cov.shape == (64, 64) and s.count == 7
    with pytest.raises(InvalidArgument):
        summarize(rnd[:1], EmbedderSpec())


def test_summarize_permutation_invariant():
    rnd = torch.rand(9, 3, 16, 16) * 2 - 1
    a = summarize(rnd, EmbedderSpec())
    b = summarize(rnd[torch.randperm(9)], EmbedderSpec())
    assert np.allclose(a.mean, b.mean, atol=1e-10) and np.allclose(a.cov, b.cov, atol=1e-10)


def test_random_projection_is_frozen():
    x = torch.rand(3, 3, 20, 20)
    f1, f2 = make_embedder(EmbedderSpec(seed=4)), make_embedder(EmbedderSpec(seed=4))
    assert np.array_equal(f1(x), f2(x))
    assert not np.array_equal(f1(x), make_embedder(EmbedderSpec(seed=5))(x))


def test_inception_needs_weights_and_resizes_to_299():
    with pytest.raises(InvalidArgument):
        make_embedder(EmbedderSpec("external_inception"))
    assert resize_for_inception(torch.zeros(1, 3, 64, 80)).shape == (1, 3, 299, 299)
    with pytest.raises(InvalidArgument):
        EmbedderSpec("vgg")


def test_fid_sees_distribution_shift():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(40, 3, 16, 16, generator=g) * 2 - 1
    b = torch.rand(40, 3, 16, 16, generator=g) * 2 - 1
    assert fid(a, b, EmbedderSpec()) < fid(a, b * 0.3 + 0.5, EmbedderSpec())


def test_pixel_fraction():
    img = np.zeros((8, 8, 3), np.uint8)
    img[:4, :4] = 255
    seg = lambda im: (im[..., 0] > 128).astype(int)
    assert class_pixel_fraction([img], seg, [1]) == 0.25
    assert class_pixel_fraction([img, img], lambda im: np.ones(im.shape[:2], int), [1]) == 1.0
    with pytest.raises(InvalidArgument):
        class_pixel_fraction([img], lambda im: np.ones((2, 2)), [1])


def test_load_segmenter(tmp_path):
    path = tmp_path / "seg.py"
    path.write_text("import numpy as np\ndef segment(image):\n    return np.zeros(image.shape[:2], int)\n")
    assert class_pixel_fraction([np.zeros((4, 4, 3), np.uint8)], load_segmenter(path), [0]) == 1.0
    (tmp_path / "bad.py").write_text("x = 1\n")
    with pytest.raises(InvalidArgument):
        load_segmenter(tmp_path / "bad.py")


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    return TranslationModel(GeneratorSpec(base_width=4), DiscriminatorSpec(base_width=4), 16).eval()


def test_similarity_self_location_is_max(small_model, tmp_path):
    x = torch.rand(3, 32, 32) * 2 - 1
    out = similarity_map(small_model, x, x, (3, 5), "res1", out_path=tmp_path / "sim.png")
    assert out.layer_map.shape == (8, 8)
    assert np.unravel_index(out.layer_map.argmax(), out.layer_map.shape) == (3, 5)
    assert out.heatmap.min() == 0.0 and out.heatmap.max() == 1.0
    assert out.heatmap.shape == (32, 32)
    assert (tmp_path / "sim.png").exists()
    with pytest.raises(InvalidArgument):
        similarity_map(small_model, x, x, (8, 0), "res1")


def test_pca_shared_basis(small_model, tmp_path):
    x = torch.rand(3, 32, 32) * 2 - 1
    r = pca_embedding_image(small_model, [x, x], "res1", out_dir=tmp_path)
    assert np.allclose(r.components @ r.components.T, np.eye(3), atol=1e-6)
    assert np.array_equal(r.images[0], r.images[1])
    assert r.images[0].shape == (8, 8, 3)
    assert len(list(tmp_path.glob("pca_*.png"))) == 2
    y = torch.rand(3, 32, 32) * 2 - 1
    both = pca_embedding_image(small_model, [x, y], "res1")
    assert both.components.shape == (3, 16)


def test_pca_pads_low_rank(small_model):
    with pytest.warns(UserWarning, match="rank"):
        r = pca_embedding_image(small_model, [torch.zeros(3, 32, 32)], "pixels")
    assert np.all(r.components[1:] == 0)
