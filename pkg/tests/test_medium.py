import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwmvs.exceptions import DomainError
from uwmvs.medium import (
    MLPWeights,
    MediumParams,
    blend_clear,
    blend_weights,
    compose_underwater,
    init_color_weights,
    init_medium_weights,
    medium_forward,
    render_pixel,
    restore_pixel,
    sh_encode,
    softmax_views,
)
from uwmvs.synthetic import medium_coefficients, oracle_render

LN2 = np.log(2.0)


def _unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


# -- spherical harmonics -----------------------------------------------------------
def test_sh_constant_channel(rng):
    enc = sh_encode(_unit(rng, 20))
    assert enc.shape == (20, 16)
    np.testing.assert_allclose(enc[:, 0], 1 / (2 * np.sqrt(np.pi)), rtol=1e-15)
    assert abs(enc[0, 0] - 0.2820948) < 1e-7


def test_sh_axis_direction():
    enc = sh_encode(np.array([0.0, 0.0, 1.0]))
    assert enc[1] == 0 and enc[3] == 0
    assert abs(enc[2] - np.sqrt(3 / (4 * np.pi))) < 1e-15


def _sh_oracle(d):
    """Real SH from associated Legendre polynomials (degrees 0..3), independent of the table."""
    from math import factorial

    from scipy.special import lpmv

    x, y, z = d
    theta, phi = np.arccos(z), np.arctan2(y, x)
    out = []
    for l in range(4):
        for m in range(-l, l + 1):
            am = abs(m)
            n = np.sqrt((2 * l + 1) / (4 * np.pi) * factorial(l - am) / factorial(l + am))
            # scipy includes the Condon-Shortley phase; the encoding does not
            p = (-1) ** am * lpmv(am, l, np.cos(theta))
            if m == 0:
                out.append(n * p)
            elif m > 0:
                out.append(np.sqrt(2) * n * p * np.cos(m * phi))
            else:
                out.append(np.sqrt(2) * n * p * np.sin(am * phi))
    return np.array(out)


def test_sh_matches_legendre_oracle(rng):
    for d in _unit(rng, 25):
        np.testing.assert_allclose(sh_encode(d), _sh_oracle(d), atol=1e-12)


def test_sh_level_and_unit_checks(rng):
    assert sh_encode(_unit(rng, 3), level=3).shape == (3, 9)
    with pytest.raises(DomainError):
        sh_encode(np.array([0.0, 0.0, 1.1]))
    with pytest.raises(DomainError):
        sh_encode(np.array([0.0, 0.0, 1.0]), level=0)


# -- medium subnet -------------------------------------------------------------------
def test_zero_weights_give_neutral_medium(rng):
    w = MLPWeights.zeros((16, 128, 64, 9))
    p = medium_forward(sh_encode(_unit(rng, 5)), w)
    np.testing.assert_allclose(p.sigma_atten, LN2, rtol=1e-6)
    np.testing.assert_allclose(p.sigma_bs, LN2, rtol=1e-6)
    np.testing.assert_allclose(p.c_bs, 0.5)


def test_medium_depends_only_on_direction(rng):
    w = init_medium_weights(rng)
    d = _unit(rng, 1)
    p = medium_forward(sh_encode(np.concatenate([d, d])), w)
    np.testing.assert_array_equal(p.sigma_atten[0], p.sigma_atten[1])
    np.testing.assert_array_equal(p.c_bs[0], p.c_bs[1])


def test_medium_forward_hand_computed(rng):
    w = init_medium_weights(rng, dtype=np.float64)
    w = MLPWeights([(W, rng.normal(scale=0.1, size=b.shape)) for W, b in w.layers])
    enc = sh_encode(_unit(rng, 1))[0]
    h = enc
    for i, (W, b) in enumerate(w.layers):
        h = h @ W + b
        if i < 2:
            h = np.maximum(h, 0)
    p = medium_forward(enc[None], w)
    np.testing.assert_allclose(p.sigma_atten[0], np.log1p(np.exp(h[0:3])), atol=1e-6)
    np.testing.assert_allclose(p.sigma_bs[0], np.log1p(np.exp(h[3:6])), atol=1e-6)
    np.testing.assert_allclose(p.c_bs[0], 1 / (1 + np.exp(-h[6:9])), atol=1e-6)


def test_medium_init_shapes_and_ranges(rng):
    w = init_medium_weights(rng)
    assert w.sizes == (16, 128, 64, 9)
    assert all(np.all(b == 0) for _, b in w.layers)
    assert np.abs(w.layers[0][0]).max() <= 1 / np.sqrt(16)
    p = medium_forward(sh_encode(_unit(rng, 50)), w)
    assert np.all(p.sigma_atten >= 0) and np.all(p.sigma_bs >= 0)
    assert np.all((p.c_bs > 0) & (p.c_bs < 1))


def test_medium_forward_shape_mismatch(rng):
    with pytest.raises(DomainError):
        medium_forward(np.zeros((4, 9)), init_medium_weights(rng))


# -- imaging equation ----------------------------------------------------------------
def _const(sa, sb, cb, shape=()):
    return MediumParams.constant(sa, sb, cb, shape)


def test_render_examples():
    p = _const(LN2, LN2, 0.5)
    np.testing.assert_allclose(render_pixel(np.ones(3), p, 1.0), 0.75, rtol=1e-15)
    c = np.array([0.2, 0.5, 0.9])
    np.testing.assert_array_equal(render_pixel(c, _const(0.3, 0.2, (0.1, 0.2, 0.3)), 0.0), c)
    far = 1e6 / 0.15
    np.testing.assert_allclose(render_pixel(c, _const(0.3, (0.2, 0.15, 0.4), (0.1, 0.2, 0.3)), far), (0.1, 0.2, 0.3), atol=1e-6)


def test_restore_examples():
    p = _const(LN2, LN2, 0.5)
    np.testing.assert_allclose(restore_pixel(np.full(3, 0.75), p, 1.0).clear, 1.0, rtol=1e-15)
    c = np.array([0.3, 0.6, 0.1])
    np.testing.assert_array_equal(restore_pixel(c, _const(0.3, 0.2, 0.4), 0.0).clear, c)


def test_negative_depth_rejected():
    with pytest.raises(DomainError):
        render_pixel(np.ones(3), _const(0.1, 0.1, 0.1), -0.5)
    with pytest.raises(DomainError):
        restore_pixel(np.ones(3), _const(0.1, 0.1, 0.1), -0.5)


def test_restore_flags_ill_conditioned():
    r = restore_pixel(np.full((2, 3), 0.5), _const(1.0, 1.0, 0.2, (2,)), np.array([1.0, 30.0]))
    np.testing.assert_array_equal(r.ill_conditioned, [False, True])
    assert np.all(np.isfinite(r.raw))


def test_render_restore_inverse_pair(rng):
    n = 100_000
    c = rng.random((n, 3))
    sa = rng.uniform(0.01, 1.0, (n, 3))
    z = rng.uniform(0, 5, (n, 1)) / sa.max(axis=1, keepdims=True)  # z * sigma <= 5
    p = MediumParams(sa, rng.uniform(0, 1, (n, 3)), rng.random((n, 3)))
    back = restore_pixel(render_pixel(c, p, z[:, 0]), p, z[:, 0]).raw
    assert np.abs(back - c).max() <= 1e-6


@settings(max_examples=100, deadline=None)
@given(
    st.tuples(*[st.floats(0, 1)] * 3),
    st.tuples(*[st.floats(0, 1)] * 3),
    st.floats(0, 2),
    st.floats(0, 2),
    st.floats(0, 20),
)
def test_render_stays_in_range(c, cb, sa, sb, z):
    c, cb = np.array(c), np.array(cb)
    a = render_pixel(c, _const(sa, sb, cb), z)
    assert np.all(a >= -1e-12)
    # e^{-sa z} + (1 - e^{-sb z}) <= 1 needs sb <= sa; otherwise the result can exceed max(c, c_bs)
    if sb <= sa:
        assert np.all(a <= np.maximum(c, cb) + 1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.tuples(*[st.floats(0, 1)] * 3),
    st.tuples(*[st.floats(0, 1)] * 3),
    st.floats(0, 2),
    st.floats(0, 20),
    st.floats(0, 20),
)
def test_render_moves_monotonically_toward_water_colour(c, cb, sigma, z1, z2):
    c, cb = np.array(c), np.array(cb)
    p = _const(sigma, sigma, cb)
    lo, hi = sorted((z1, z2))
    ra, rb = render_pixel(c, p, lo), render_pixel(c, p, hi)
    dec = c >= cb
    assert np.all(rb[dec] <= ra[dec] + 1e-12) and np.all(rb[~dec] >= ra[~dec] - 1e-12)


def test_compose_identity_and_zero_depth(rng):
    c = rng.random((6, 7, 3))
    p = MediumParams(rng.random((6, 7, 3)), rng.random((6, 7, 3)), rng.random((6, 7, 3)))
    z = rng.uniform(0, 5, (6, 7))
    i_hat, i_att, i_bs = compose_underwater(c, p, z)
    np.testing.assert_array_equal(i_hat, i_att + i_bs)
    i_hat, _, i_bs = compose_underwater(c, p, np.zeros((6, 7)))
    np.testing.assert_array_equal(i_hat, c)
    np.testing.assert_array_equal(i_bs, 0.0)


def test_compose_eq19_flag_uses_attenuation_in_backscatter(rng):
    c = rng.random((3, 3))
    p = MediumParams(np.full((3, 3), 0.3), np.full((3, 3), 0.7), np.full((3, 3), 0.4))
    _, _, i_bs = compose_underwater(c, p, np.ones(3), eq19_compat=True)
    np.testing.assert_allclose(i_bs, 0.4 * (1 - np.exp(-0.3)))


def test_compose_reproduces_oracle(default_spec, default_dataset):
    vp = default_dataset.viewpoints[0]
    o = oracle_render(default_spec, vp)
    sa, sb, cb = medium_coefficients(default_spec, o.directions)
    i_hat, _, _ = compose_underwater(o.clear, MediumParams(sa, sb, cb), o.depth)
    np.testing.assert_allclose(i_hat, o.underwater, atol=1e-6)


def test_medium_matches_oracle_on_random_pixels(rng, default_spec):
    # 1e5 random pixels of a 400x250 view: oracle image vs render_pixel on the oracle's own J and z
    from uwmvs.geometry import CameraIntrinsics, CameraPose, Viewpoint

    vp = Viewpoint(CameraIntrinsics(300, 300, 199.5, 124.5), CameraPose.look_at((0.2, 0.1, -1.0), (0, 0, 3)), 400, 250)
    o = oracle_render(default_spec, vp)
    sa, sb, cb = medium_coefficients(default_spec, o.directions)
    mine = render_pixel(o.clear, MediumParams(sa, sb, cb), o.depth)
    np.testing.assert_allclose(mine, o.underwater, atol=1e-9)


# -- blending --------------------------------------------------------------------------
def test_blend_single_and_symmetric_views(rng):
    w = init_color_weights(rng, 10)
    f_img, f_grid = rng.random((5, 4)), rng.random((5, 2))
    f = rng.random((1, 5, 4))
    np.testing.assert_array_equal(blend_weights(f_img, f_grid, f, w), 1.0)
    np.testing.assert_allclose(blend_weights(f_img, f_grid, np.concatenate([f, f]), w), 0.5, rtol=1e-6)


def test_softmax_views_examples():
    w = softmax_views(np.array([[0.0], [np.log(3.0)]], np.float64)).data
    np.testing.assert_allclose(w[:, 0], [0.25, 0.75], rtol=1e-12)
    w = softmax_views(np.array([[0.0, 1.0], [5.0, 2.0]], np.float64), valid=np.array([[True, False], [False, False]])).data
    np.testing.assert_allclose(w[:, 0], [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(w[:, 1].sum(), 1.0)


def test_blend_weights_shift_invariant(rng):
    logits = rng.normal(size=(4, 10))
    a = softmax_views(logits.astype(np.float64)).data
    b = softmax_views((logits + 3.0).astype(np.float64)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.all(a > 0) and np.allclose(a.sum(0), 1)


def test_blend_clear_examples():
    src = np.stack([np.zeros((1, 3)), np.ones((1, 3))])
    np.testing.assert_allclose(blend_clear(src, np.full((2, 1), 0.5)), 0.5)
    np.testing.assert_array_equal(blend_clear(src, np.array([[0.0], [1.0]])), 1.0)
    src = np.stack([np.full((1, 3), 0.2), np.full((1, 3), 0.6)])
    np.testing.assert_allclose(blend_clear(src, np.array([[0.25], [0.75]])), 0.5, rtol=1e-12)


def test_blend_shape_mismatch(rng):
    with pytest.raises(DomainError):
        blend_clear(np.zeros((2, 4, 3)), np.zeros((3, 4)))
    w = init_color_weights(rng, 10)
    with pytest.raises(DomainError):
        blend_weights(rng.random((5, 4)), rng.random((5, 2)), rng.random((2, 6, 4)), w)
