import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from heliocast.embed import (
    PatchEmbed, TIME_PERIODS, apply_rotary, cyclical_time, denormalize_coords, keep_count,
    mask_tokens, normalize_coords, patch_centers, patchify, rope_phases, rope_scales, unpatchify,
)
from heliocast.errors import ParameterError, ShapeError, ValidationError

PAIRS = {name: 2 * i for i, name in enumerate(TIME_PERIODS)}


def pair(vec, name):
    i = PAIRS[name]
    return vec[..., i], vec[..., i + 1]


# ------------------------------------------------------------------ time

def test_time_hour_zero_and_six():
    f0 = cyclical_time(np.datetime64("2021-05-10T00:00"))
    f6 = cyclical_time(np.datetime64("2021-05-10T06:00"))
    assert pair(f0, "hour") == pytest.approx((0.0, 1.0), abs=1e-12)
    assert pair(f6, "hour") == pytest.approx((1.0, 0.0), abs=1e-12)


def test_time_month_three_is_quarter_turn():
    f = cyclical_time(np.datetime64("2021-03-15T12:30"))
    assert pair(f, "month") == pytest.approx((1.0, 0.0), abs=1e-12)


def test_time_width_and_minute():
    f = cyclical_time(np.array(["2021-01-01T00:15", "2021-01-01T00:45"], dtype="datetime64[m]"))
    assert f.shape == (2, 8)
    assert pair(f[0], "minute") == pytest.approx((1.0, 0.0), abs=1e-12)
    assert pair(f[1], "minute") == pytest.approx((-1.0, 0.0), abs=1e-12)


@given(st.integers(0, 5_000_000))
def test_time_pairs_on_unit_circle(minutes):
    t = np.datetime64("2000-01-01T00:00") + np.timedelta64(minutes, "m")
    f = cyclical_time(t)
    for name in TIME_PERIODS:
        s, c = pair(f, name)
        assert abs(s * s + c * c - 1) < 1e-6


@given(st.integers(0, 23), st.integers(0, 59))
def test_time_hour_and_minute_periodicity(h, m):
    a = cyclical_time(np.datetime64("2021-07-04T00:00") + np.timedelta64(60 * h + m, "m"))
    # one day later: hour and minute identical
    b = cyclical_time(np.datetime64("2021-07-05T00:00") + np.timedelta64(60 * h + m, "m"))
    np.testing.assert_allclose(pair(a, "hour"), pair(b, "hour"), atol=1e-9)
    np.testing.assert_allclose(pair(a, "minute"), pair(b, "minute"), atol=1e-9)


def test_time_month_periodicity_across_years():
    a = cyclical_time(np.datetime64("2020-04-11T08:00"))
    b = cyclical_time(np.datetime64("2021-04-11T08:00"))
    np.testing.assert_allclose(a, b, atol=1e-9)


# ----------------------------------------------------------------- coords

def test_coords_endpoints_and_midpoint():
    assert normalize_coords(90, 180) == pytest.approx((1.0, 1.0))
    assert normalize_coords(-90, -180) == pytest.approx((-1.0, -1.0))
    assert normalize_coords(0, 0) == pytest.approx((0.0, 0.0))


def test_coords_cabauw():
    x_lat, x_lon = normalize_coords(51.9667, 4.9167)
    assert x_lat == pytest.approx(0.5774, abs=1e-4)
    assert x_lon == pytest.approx(0.0273, abs=1e-4)


def test_coords_out_of_range():
    with pytest.raises(ValidationError):
        normalize_coords(91, 0)
    with pytest.raises(ValidationError):
        normalize_coords(0, -181)


@given(st.floats(-90, 90), st.floats(-90, 90), st.floats(-180, 180))
def test_coords_monotone_and_invertible(a, b, lon):
    xa, xl = normalize_coords(a, lon)
    xb, _ = normalize_coords(b, lon)
    if b - a > 1e-9:  # below float resolution of the affine map
        assert xa < xb
    lat_back, lon_back = denormalize_coords(xa, xl)
    assert float(lat_back) == pytest.approx(a, abs=1e-9)
    assert float(lon_back) == pytest.approx(lon, abs=1e-9)


def test_patch_centers_are_mean_of_cells():
    lat = np.arange(4) * 1.0
    lon = np.arange(4) * 2.0
    c = patch_centers(lat, lon, 2)
    expected = normalize_coords(np.array([0.5, 0.5, 2.5, 2.5]), np.array([1.0, 5.0, 1.0, 5.0]))
    np.testing.assert_allclose(c, np.stack(expected, -1))


# ------------------------------------------------------------------- rope

def test_rope_scales_linear():
    s = rope_scales(64, 128)
    assert len(s) == 16
    np.testing.assert_allclose(s.numpy(), np.linspace(1.0, 64.0, 16))


def test_rope_dim_not_multiple_of_four():
    with pytest.raises(ParameterError):
        rope_phases(torch.zeros(3, 2), 6)


def test_rope_zero_coords_identity():
    sin, cos = rope_phases(torch.zeros(5, 2, dtype=torch.float64), 16)
    assert torch.all(sin == 0) and torch.all(cos == 1)
    x = torch.randn(5, 16, dtype=torch.float64)
    torch.testing.assert_close(apply_rotary(x, sin, cos), x)


def test_rope_pairs_share_frequency():
    sin, cos = rope_phases(torch.rand(3, 2, dtype=torch.float64), 8)
    torch.testing.assert_close(sin[:, 0::2], sin[:, 1::2])
    torch.testing.assert_close(sin ** 2 + cos ** 2, torch.ones_like(sin))


def test_rope_axes_split_width():
    # only latitude moves: the longitude half stays at zero phase
    coords = torch.tensor([[0.3, 0.0]], dtype=torch.float64)
    sin, _ = rope_phases(coords, 16)
    assert torch.all(sin[:, 8:] == 0)
    assert torch.all(sin[:, :8] != 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.5, 0.5))
def test_rope_relative_position(seed, delta):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(4, 32, generator=g, dtype=torch.float64)
    k = torch.randn(6, 32, generator=g, dtype=torch.float64)
    pq = torch.rand(4, 2, generator=g, dtype=torch.float64) * 2 - 1
    pk = torch.rand(6, 2, generator=g, dtype=torch.float64) * 2 - 1

    def scores(shift):
        rq = apply_rotary(q, *rope_phases(pq + shift, 32))
        rk = apply_rotary(k, *rope_phases(pk + shift, 32))
        return rq @ rk.T

    torch.testing.assert_close(scores(0.0), scores(delta), atol=1e-5, rtol=0)
    torch.testing.assert_close(scores(0.0), scores(0.17), atol=1e-5, rtol=0)


@given(st.integers(0, 10_000))
def test_rope_norm_preserving(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(7, 16, generator=g, dtype=torch.float64)
    sin, cos = rope_phases(torch.rand(7, 2, generator=g, dtype=torch.float64), 16)
    torch.testing.assert_close(apply_rotary(x, sin, cos).norm(dim=-1), x.norm(dim=-1),
                               atol=1e-5, rtol=0)


def test_rotary_shape_mismatch():
    sin, cos = rope_phases(torch.zeros(3, 2), 8)
    with pytest.raises(ShapeError):
        apply_rotary(torch.zeros(3, 16), sin, cos)


# ---------------------------------------------------------------- patches

def test_patch_count_and_width():
    frames = torch.randn(3, 2, 64, 64)
    tokens = patchify(frames, 8)
    assert tokens.shape == (3, 64, 8 * 8 * 2)


def test_patch_indivisible():
    with pytest.raises(ParameterError):
        patchify(torch.zeros(1, 1, 64, 64), 7)


def test_patch_row_major_order():
    frame = torch.arange(16.0).reshape(1, 1, 4, 4)
    tokens = patchify(frame, 2)
    torch.testing.assert_close(tokens[0, 0], torch.tensor([0.0, 1.0, 4.0, 5.0]))
    torch.testing.assert_close(tokens[0, 1], torch.tensor([2.0, 3.0, 6.0, 7.0]))


@given(st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 1000))
def test_patch_round_trip(c, p, seed):
    g = torch.Generator().manual_seed(seed)
    frames = torch.randn(2, c, 8, 8, generator=g)
    torch.testing.assert_close(unpatchify(patchify(frames, p), p, 8, 8), frames, rtol=0, atol=0)


def test_patch_embed_zero_input_zero_bias():
    emb = PatchEmbed(3, 4, 16)
    torch.nn.init.zeros_(emb.proj.bias)
    out = emb(torch.zeros(2, 3, 8, 8))
    assert out.shape == (2, 4, 16)
    assert torch.all(out == 0)


def test_patch_embed_linear():
    emb = PatchEmbed(1, 2, 8)
    torch.nn.init.zeros_(emb.proj.bias)
    a, b = torch.randn(1, 1, 4, 4), torch.randn(1, 1, 4, 4)
    torch.testing.assert_close(emb(a + 2 * b), emb(a) + 2 * emb(b), atol=1e-5, rtol=1e-5)


# ---------------------------------------------------------------- masking

@pytest.mark.parametrize("ratio,kept", [(0.0, 64), (0.5, 32), (0.99, 1)])
def test_mask_keep_counts(ratio, kept):
    assert keep_count(64, ratio) == kept
    tokens = torch.randn(3, 64, 4)
    out, idx = mask_tokens(tokens, ratio, np.random.default_rng(0))
    assert out.shape == (3, kept, 4)
    assert idx.shape == (3, kept)


def test_mask_zero_ratio_keeps_order():
    tokens = torch.randn(64, 4)
    out, idx = mask_tokens(tokens, 0.0)
    torch.testing.assert_close(out, tokens)
    np.testing.assert_array_equal(idx, np.arange(64))


def test_mask_gathers_the_named_tokens():
    tokens = torch.randn(2, 10, 3)
    out, idx = mask_tokens(tokens, 0.7, np.random.default_rng(3))
    for f in range(2):
        torch.testing.assert_close(out[f], tokens[f, idx[f]])
        assert np.all(np.diff(idx[f]) > 0)


def test_mask_ratio_out_of_range():
    with pytest.raises(ParameterError):
        mask_tokens(torch.zeros(4, 2), 1.0, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        mask_tokens(torch.zeros(4, 2), -0.1, np.random.default_rng(0))


def test_mask_deterministic_per_seed():
    tokens = torch.randn(5, 16, 2)
    _, a = mask_tokens(tokens, 0.6, np.random.default_rng(11))
    _, b = mask_tokens(tokens, 0.6, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


def test_mask_uniform_selection():
    rng = np.random.default_rng(0)
    tokens = np.zeros((10_000, 8, 1))
    _, idx = mask_tokens(tokens, 0.5, rng)
    counts = np.bincount(idx.ravel(), minlength=8) / 10_000
    assert np.all(np.abs(counts - 0.5) <= 0.03)


def test_mask_frames_independent():
    _, idx = mask_tokens(np.zeros((200, 8, 1)), 0.5, np.random.default_rng(1))
    assert len({tuple(r) for r in idx}) > 1
