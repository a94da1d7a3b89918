import zlib

import numpy as np
import pytest

from mumodig.transforms import (
    IDENTITY,
    KINDS,
    TransformRanges,
    TransformSpec,
    apply_transform,
    sample_transform,
    transform_adjoint,
)


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(0.05, 1.0, size=(3, 20, 20))


def test_uniform_kind_selection():
    rng = np.random.default_rng(1)
    kinds = [sample_transform(("resize_pad", "affine"), rng, (3, 16, 16)).kind for _ in range(10000)]
    freq = kinds.count("resize_pad") / len(kinds)
    assert 0.47 <= freq <= 0.53


def test_singleton_library_and_determinism():
    rng = np.random.default_rng(2)
    assert all(sample_transform(("affine",), rng).kind == "affine" for _ in range(20))
    a = sample_transform(KINDS, np.random.default_rng(3), (3, 8, 8))
    b = sample_transform(KINDS, np.random.default_rng(3), (3, 8, 8))
    assert a == b


def test_empty_library_rejected():
    with pytest.raises(ValueError):
        sample_transform((), np.random.default_rng(0))


def test_identity_bit_identical(image):
    assert apply_transform(image, IDENTITY).tobytes() == image.tobytes()


def test_affine_identity_parameters(image):
    spec = TransformSpec("affine", {"angle": 0.0, "translate": (0.0, 0.0), "scale": 1.0})
    np.testing.assert_allclose(apply_transform(image, spec), image, atol=1e-9)


def test_resize_pad_support_area():
    x = np.full((3, 40, 40), 0.5)
    for ratio in (0.8, 0.85, 0.95):
        n = int(round(ratio * 40))
        spec = TransformSpec("resize_pad", {"ratio": ratio, "size": (n, n), "offset": (40 - n, 1)})
        out = apply_transform(x, spec)
        support = np.count_nonzero(out[0]) / out[0].size
        assert abs(support - ratio**2) < 0.02


def test_affine_translation_moves_content():
    x = np.zeros((1, 10, 10))
    x[0, 5, 5] = 1.0
    spec = TransformSpec("affine", {"angle": 0.0, "translate": (0.0, 0.2), "scale": 1.0})
    out = apply_transform(x, spec)
    assert out[0, 5, 7] == pytest.approx(1.0)


def test_shape_range_and_purity(image):
    rng = np.random.default_rng(4)
    for _ in range(200):
        spec = sample_transform(KINDS, rng, image.shape)
        out = apply_transform(image, spec)
        assert out.shape == image.shape
        assert out.min() >= 0 and out.max() <= 1
        assert apply_transform(image, spec).tobytes() == out.tobytes()


def test_sampled_parameters_within_ranges():
    rng = np.random.default_rng(5)
    r = TransformRanges()
    for _ in range(500):
        s = sample_transform(KINDS, rng, (3, 32, 32), r)
        p = s.params
        if s.kind == "resize_pad":
            assert r.resize_ratio[0] <= p["ratio"] < r.resize_ratio[1]
            assert p["offset"][0] + p["size"][0] <= 32
        elif s.kind == "affine":
            assert abs(p["angle"]) <= 10 and 0.9 <= p["scale"] <= 1.1
            assert max(abs(t) for t in p["translate"]) <= 0.1
        elif s.kind == "blur":
            assert p["kernel"] in (3, 5)
        elif s.kind == "noise":
            assert 0 < p["sigma"] <= 0.05


def test_works_on_batches(image):
    spec = sample_transform(("affine",), np.random.default_rng(6), image.shape)
    batch = np.stack([image, image * 0.5])
    out = apply_transform(batch, spec)
    np.testing.assert_allclose(out[0], apply_transform(image, spec))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        TransformSpec("swirl")


@pytest.mark.parametrize("kind", KINDS)
def test_adjoint_matches_jacobian_transpose(kind):
    # <J u, g> == <u, J^T g>, with J estimated by a small directional step
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(10):
        x = rng.uniform(0.2, 0.8, size=(2, 3, 12, 14))
        spec = sample_transform((kind,), rng, x.shape[1:])
        u, g = rng.normal(size=x.shape), rng.normal(size=x.shape)
        h = 1e-6
        ju = (apply_transform(x + h * u, spec) - apply_transform(x - h * u, spec)) / (2 * h)
        lhs, rhs = (ju * g).sum(), (u * transform_adjoint(g, x, spec)).sum()
        assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_adjoint_masks_clipped_pixels():
    x = np.full((1, 6, 6), 0.98)
    spec = TransformSpec("noise", {"sigma": 0.05, "noise_seed": 3})
    raw = x + np.random.default_rng(3).normal(0.0, 0.05, x.shape)
    g = transform_adjoint(np.ones_like(x), x, spec)
    np.testing.assert_array_equal(g, (raw <= 1.0).astype(float))
