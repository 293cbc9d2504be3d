import numpy as np
import pytest

from diar.descriptors import (
    CNN_OFFSET,
    CNN_SCALE,
    cnn_descriptors,
    flatten_feature_map,
    init_cnn_descriptor_params,
    patch_descriptors,
    pyramid_keypoints,
)
from diar.imaging import Image
from diar.matching import mutual_matches, score_matrix
from diar.tensor import ParamStore


def random_image(seed, h=32, w=32, c=3):
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(0.0, 1.0, size=(h, w, c)))


def test_patch_rejects_even_k():
    with pytest.raises(ValueError, match="odd"):
        patch_descriptors(random_image(0), 4)


def test_patch_rejects_oversized_k():
    with pytest.raises(ValueError, match="exceeds"):
        patch_descriptors(random_image(0, 8, 8), 9)


def test_patch_k1_is_zero():
    # 1x1 mean subtraction annihilates the descriptor: documented degenerate
    fm = patch_descriptors(random_image(0, 8, 8, 1), 1)
    assert np.allclose(fm.grid, 0.0)


def test_patch_constant_image_is_zero():
    fm = patch_descriptors(Image(np.full((16, 16, 3), 0.5)), 7)
    assert np.allclose(fm.grid, 0.0, atol=1e-6)


def test_patch_shape_and_coords():
    img = random_image(1, 20, 24)
    fm = patch_descriptors(img, 5)
    assert fm.grid.shape == (20, 24, 5 * 5 * 3)
    assert fm.scale == 1.0 and fm.offset == (0.0, 0.0)


def test_patch_self_match_audit():
    # matching an image against itself: each descriptor's best match is
    # itself on at least 99% of pixels
    img = random_image(2, 24, 24)
    km = flatten_feature_map(patch_descriptors(img, 7))
    s = score_matrix(km, km)
    hits = (s.s.argmax(axis=1) == np.arange(len(km.x))).mean()
    assert hits >= 0.99


def test_patch_translation_equivariance():
    rng = np.random.default_rng(3)
    big = rng.uniform(0.0, 1.0, size=(24, 24, 3))
    a = Image(big[:20, :20])
    b = Image(big[4:, 4:])  # a shifted by (+4, +4)
    fa = patch_descriptors(a, 5).grid
    fb = patch_descriptors(b, 5).grid
    # interior pixels (away from differing reflect-pad borders)
    assert np.allclose(fa[6:18, 6:18], fb[2:14, 2:14], atol=1e-6)


def test_cnn_shape_contract():
    img = random_image(4, 128, 128)
    fm = cnn_descriptors(img, init_cnn_descriptor_params(0))
    assert fm.grid.shape == (16, 16, 64)
    assert fm.scale == CNN_SCALE and fm.offset == (CNN_OFFSET, CNN_OFFSET)


def test_cnn_deterministic():
    img = random_image(5, 64, 64)
    weights = init_cnn_descriptor_params(1)
    f1 = cnn_descriptors(img, weights)
    f2 = cnn_descriptors(img, weights)
    assert np.array_equal(f1.grid, f2.grid)


def test_cnn_missing_param_named():
    weights = ParamStore()
    with pytest.raises(ValueError, match="conv0.w"):
        cnn_descriptors(random_image(0, 16, 16), weights)


def test_cnn_bad_shape_named():
    weights = init_cnn_descriptor_params(0)
    weights["conv1.w"].data = np.zeros((8, 8, 3, 3))
    with pytest.raises(ValueError, match="conv1.w"):
        cnn_descriptors(random_image(0, 16, 16), weights)


def test_cnn_translation_matching():
    # random-weight descriptors still localize a 4-pixel shift: at least 70%
    # of mutual matches land within one grid cell of the true offset
    from diar.datagen import synthetic_base_image

    big = synthetic_base_image(6, 132, 132).data
    a = Image(big[:128, :128])
    b = Image(big[4:, 4:])
    weights = init_cnn_descriptor_params(0)
    ka = flatten_feature_map(cnn_descriptors(a, weights))
    kb = flatten_feature_map(cnn_descriptors(b, weights))
    ms = mutual_matches(score_matrix(ka, kb))
    assert len(ms) > 10
    pa = ka.coords[ms.idx1]
    pb = kb.coords[ms.idx2]
    # true map: b-coordinates = a-coordinates - 4
    err = np.linalg.norm(pb - (pa - 4.0), axis=1)
    assert (err <= CNN_SCALE).mean() >= 0.7


def test_pyramid_single_scale_matches_flatten():
    img = random_image(7, 16, 16)
    provider = lambda im: patch_descriptors(im, 5)
    km = pyramid_keypoints(img, [1.0], provider)
    ref = flatten_feature_map(provider(img))
    assert np.array_equal(km.x, ref.x)
    assert np.array_equal(km.coords, ref.coords)


def test_pyramid_row_count():
    img = random_image(8, 128, 128)
    km = pyramid_keypoints(img, [1.0, 0.5], lambda im: patch_descriptors(im, 5))
    assert len(km.x) == 128 * 128 + 64 * 64


def test_pyramid_coords_in_bounds():
    img = random_image(9, 48, 40)
    km = pyramid_keypoints(img, [1.0, 0.75, 0.5], lambda im: patch_descriptors(im, 5))
    assert np.all(km.coords[:, 0] >= 0) and np.all(km.coords[:, 0] <= 39)
    assert np.all(km.coords[:, 1] >= 0) and np.all(km.coords[:, 1] <= 47)


def test_pyramid_rejects_bad_scales():
    img = random_image(0, 16, 16)
    provider = lambda im: patch_descriptors(im, 3)
    with pytest.raises(ValueError, match="non-empty"):
        pyramid_keypoints(img, [], provider)
    with pytest.raises(ValueError, match="positive"):
        pyramid_keypoints(img, [1.0, -0.5], provider)
