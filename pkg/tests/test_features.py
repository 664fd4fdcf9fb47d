import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwmvs.exceptions import DomainError
from uwmvs.features import (
    LEVEL_CHANNELS,
    PixelAlignedFeature,
    average_volumes,
    extract_pyramid,
    grid_features,
    pool_views,
    ray_delta,
    sample_features,
)
from uwmvs.geometry import pixel_grid

# level-3 channel layout: R, G, B, luminance, then luminance first derivatives at 0/45/90/135 degrees
DX, DY = 4, 6


def test_pyramid_shapes(rng):
    p = extract_pyramid(rng.random((64, 96, 3)))
    assert p.level1.shape == (16, 24, LEVEL_CHANNELS[0])
    assert p.level2.shape == (32, 48, LEVEL_CHANNELS[1])
    assert p.level3.shape == (64, 96, LEVEL_CHANNELS[2])
    assert p.level1.dtype == np.float32
    assert all(np.isfinite(lv).all() for lv in (p.level1, p.level2, p.level3))


def test_pyramid_pads_non_divisible_input(rng):
    p = extract_pyramid(rng.random((30, 37, 3)))
    top, bottom, left, right = p.pad
    assert (30 + top + bottom) % 4 == 0 and (37 + left + right) % 4 == 0
    assert p.level3.shape[:2] == (30 + top + bottom, 37 + left + right)


@pytest.mark.parametrize("normalize", [False, True])
def test_constant_image_has_zero_derivatives(normalize):
    img = np.full((32, 32, 3), 0.4)
    p = extract_pyramid(img, normalize=normalize)
    for lv in (p.level1, p.level2, p.level3):
        assert np.all(lv[..., 4:] == 0.0)
        for c in range(4):
            assert np.ptp(lv[..., c]) == 0.0


def test_horizontal_ramp_derivatives():
    u, _ = pixel_grid(32, 48)
    img = np.repeat((u / 47.0)[..., None], 3, axis=-1)
    f = extract_pyramid(img, normalize=False).level3
    inner = f[8:-8, 8:-8]
    assert np.all(inner[..., DX] > 0)
    np.testing.assert_allclose(inner[..., DX], inner[0, 0, DX], rtol=1e-5)
    np.testing.assert_allclose(inner[..., DY], 0.0, atol=1e-7)


def test_pyramid_deterministic(rng):
    img = rng.random((32, 48, 3))
    a, b = extract_pyramid(img), extract_pyramid(img.copy())
    for x, y in zip((a.level1, a.level2, a.level3), (b.level1, b.level2, b.level3)):
        assert x.tobytes() == y.tobytes()


def test_pyramid_translation_equivariance(rng):
    img = rng.random((160, 264, 3))
    k = 8
    a, b = extract_pyramid(img[:, k:]), extract_pyramid(img[:, :-k])
    # b is a shifted k pixels right of a; compare well inside both frames
    for lv, m in ((3, 40), (2, 28), (1, 22)):
        s = k // 2 ** (3 - lv)
        fa, fb = a.level(lv), b.level(lv)
        np.testing.assert_allclose(fb[m:-m, m + s : -m], fa[m:-m, m : -m - s], atol=1e-5)


def test_pyramid_rejects_grey_input():
    with pytest.raises(DomainError):
        extract_pyramid(np.zeros((16, 16)))


# -- sampling --------------------------------------------------------------------
def test_sample_features_integer_midpoint_and_outside():
    fmap = np.zeros((3, 4, 2), np.float32)
    fmap[1, 1] = (1.0, 5.0)
    fmap[1, 2] = (3.0, 7.0)
    vals, ok = sample_features(fmap, [(1, 1), (1.5, 1), (4.5, 0), (-1, 1)])
    np.testing.assert_array_equal(vals[0], (1, 5))
    np.testing.assert_allclose(vals[1], (2, 6))
    np.testing.assert_array_equal(ok, [True, True, False, False])
    np.testing.assert_array_equal(vals[2:], 0.0)


def test_ray_delta_components(rng):
    a = rng.normal(size=(10, 3))
    b = rng.normal(size=(10, 3))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b /= np.linalg.norm(b, axis=-1, keepdims=True)
    r = ray_delta(a, b)
    np.testing.assert_allclose(r[:, :3], a - b)
    np.testing.assert_allclose(r[:, 3], np.sum(a * b, -1))
    assert np.all(np.abs(r[:, 3]) <= 1)


# -- pooling ---------------------------------------------------------------------
def _paf(values, valid=True):
    values = np.asarray(values, np.float32).reshape(1, -1)
    return PixelAlignedFeature(values, np.zeros((1, 4)), np.array([valid]))


def test_pool_single_view():
    pooled, ok = pool_views([_paf([0.3, -1.0])])
    np.testing.assert_allclose(pooled[0, :6], [0.3, -1.0, 0, 0, 0, 0])
    np.testing.assert_array_equal(pooled[0, 6:], 0.0)
    assert ok[0]


def test_pool_identical_views_zero_variance():
    pooled, _ = pool_views([_paf([0.5, 2.0]), _paf([0.5, 2.0])])
    np.testing.assert_array_equal(pooled[0, 6:], 0.0)


def test_pool_population_variance():
    pooled, _ = pool_views([_paf([1.0]), _paf([3.0])])
    assert pooled[0, 0] == 2.0
    assert pooled[0, 5] == 1.0  # (1 + 1) / 2


def test_pool_excludes_invalid_views_and_flags_empty_pixels():
    pooled, ok = pool_views([_paf([1.0]), _paf([9.0], valid=False)])
    assert pooled[0, 0] == 1.0 and ok[0]
    _, ok = pool_views([_paf([1.0], False), _paf([9.0], False)])
    assert not ok[0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.randoms(use_true_random=False))
def test_pool_permutation_invariant_and_bounded(values, rnd):
    feats = [_paf([v]) for v in values]
    pooled, _ = pool_views(feats)
    perm = list(feats)
    rnd.shuffle(perm)
    np.testing.assert_allclose(pool_views(perm)[0], pooled, atol=1e-5)
    assert min(values) - 1e-5 <= pooled[0, 0] <= max(values) + 1e-5
    assert pooled[0, 5] <= (max(values) - min(values)) ** 2 + 1e-5


def test_pool_needs_a_view():
    with pytest.raises(DomainError):
        pool_views([])


# -- grid features -----------------------------------------------------------------
def test_average_volumes_respects_masks():
    a = np.ones((2, 3, 3, 1))
    b = 3 * np.ones((2, 3, 3, 1))
    mb = np.ones((2, 3, 3))
    mb[0] = 0
    avg = average_volumes([a, b], [np.ones((2, 3, 3)), mb])
    assert np.all(avg[0] == 1.0) and np.all(avg[1] == 2.0)


def test_grid_features_on_and_between_planes(rng):
    vol = rng.random((4, 5, 6, 3))
    planes = np.array([1.0, 2.0, 3.0, 5.0])
    coords = np.array([[2.0, 3.0], [2.0, 3.0]])
    vals, ok = grid_features(vol, planes, coords, np.array([3.0, 4.0]))
    np.testing.assert_allclose(vals[0], vol[2, 3, 2], atol=1e-6)
    np.testing.assert_allclose(vals[1], 0.5 * (vol[2, 3, 2] + vol[3, 3, 2]), atol=1e-6)
    assert ok.all()


def test_grid_features_clamps_and_flags_out_of_range(rng):
    vol = rng.random((3, 4, 4, 2))
    vals, ok = grid_features(vol, np.array([1.0, 2.0, 3.0]), np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([0.5, 9.0]))
    np.testing.assert_array_equal(ok, [False, False])
    np.testing.assert_allclose(vals[0], vol[0, 1, 1], atol=1e-6)
    np.testing.assert_allclose(vals[1], vol[2, 1, 1], atol=1e-6)


def _trilinear_oracle(vol, planes, x, y, z):
    # brute force: bilinear in (x, y) on every slice and on the plane map, then linear in depth
    D = vol.shape[0]
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0

    def bil(a):
        return (
            a[y0, x0] * (1 - fx) * (1 - fy)
            + a[y0, x0 + 1] * fx * (1 - fy)
            + a[y0 + 1, x0] * (1 - fx) * fy
            + a[y0 + 1, x0 + 1] * fx * fy
        )

    slices = [bil(vol[d]) for d in range(D)]
    lp = [bil(planes[d]) for d in range(D)]
    for d in range(D - 1):
        if lp[d] <= z <= lp[d + 1]:
            t = (z - lp[d]) / (lp[d + 1] - lp[d])
            return (1 - t) * slices[d] + t * slices[d + 1]
    raise AssertionError("depth outside planes")


def test_grid_features_matches_dense_oracle(rng):
    D, h, w = 6, 7, 9
    vol = rng.random((D, h, w, 4))
    # per-pixel planes: 0.4 apart plus a jitter below 0.1, so they stay ordered and span [1.1, 3.0]
    planes = np.linspace(1.0, 3.0, D)[:, None, None] + 0.1 * rng.random((D, h, w))
    for _ in range(50):
        x, y = rng.uniform(0, w - 1.001), rng.uniform(0, h - 1.001)
        z = rng.uniform(1.2, 2.9)
        got, ok = grid_features(vol, planes, np.array([[x, y]]), np.array([z]))
        np.testing.assert_allclose(got[0], _trilinear_oracle(vol, planes, x, y, z), atol=1e-6)
        assert ok[0]
