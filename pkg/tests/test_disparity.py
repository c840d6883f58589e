import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trifuse.disparity import (
    DisparityFormatError,
    DisparityMap,
    complete_disparity,
    decode_cityscapes_disparity,
    to_network_channel,
)


# ----------------------------------------------------------------- decoding

def test_decode_sentinel_zero_is_invalid():
    raw = np.zeros((2, 2), dtype=np.uint16)
    d = decode_cityscapes_disparity(raw)
    assert not d.valid.any()
    assert not d.values.any()


def test_decode_offset_definition():
    raw = np.array([[1]], dtype=np.uint16)
    d = decode_cityscapes_disparity(raw)
    assert d.valid[0, 0]
    assert d.values[0, 0] == 0.0


def test_decode_scale():
    raw = np.array([[25601]], dtype=np.uint16)
    assert decode_cityscapes_disparity(raw).values[0, 0] == 100.0


def test_decode_rejects_wrong_depth():
    with pytest.raises(DisparityFormatError):
        decode_cityscapes_disparity(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(DisparityFormatError):
        decode_cityscapes_disparity(np.zeros((2, 2, 3), dtype=np.uint16))


# --------------------------------------------------------------- completion

def completion_oracle(values, valid, max_iters):
    """Direct reimplementation: per-pixel loops, simultaneous updates."""
    values = values.copy()
    valid = valid.copy()
    h, w = values.shape
    for _ in range(max_iters):
        new_values = values.copy()
        new_valid = valid.copy()
        changed = False
        for i in range(h):
            for j in range(w):
                if valid[i, j]:
                    continue
                neigh = []
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < h and 0 <= jj < w and valid[ii, jj]:
                            neigh.append(values[ii, jj])
                if neigh:
                    new_values[i, j] = np.median(neigh)
                    new_valid[i, j] = True
                    changed = True
        values, valid = new_values, new_valid
        if not changed:
            break
    return values, valid


def test_complete_fixpoint_on_full_map(rng):
    values = rng.random((8, 8)) * 30
    d = DisparityMap(values, np.ones((8, 8), bool))
    out = complete_disparity(d)
    assert np.array_equal(out.values, values)
    assert out.valid.all()


def test_complete_constant_neighborhood():
    values = np.full((3, 3), 10.0)
    valid = np.ones((3, 3), bool)
    values[1, 1] = 0.0
    valid[1, 1] = False
    out = complete_disparity(DisparityMap(values, valid))
    assert out.values[1, 1] == 10.0
    assert out.valid.all()


def test_complete_matches_oracle(rng):
    values = rng.random((64, 64)) * 50
    valid = rng.random((64, 64)) >= 0.3
    values[~valid] = 0.0
    for budget in (1, 3, 100):
        got = complete_disparity(DisparityMap(values, valid), max_iters=budget)
        exp_values, exp_valid = completion_oracle(values, valid, budget)
        assert np.array_equal(got.valid, exp_valid)
        assert np.allclose(got.values, exp_values, atol=0, rtol=0)


def test_complete_all_invalid_warns():
    d = DisparityMap(np.zeros((4, 4)), np.zeros((4, 4), bool))
    with pytest.warns(UserWarning):
        out = complete_disparity(d)
    assert not out.values.any()
    assert not out.valid.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_complete_preserves_valid_and_grows(seed, hole_frac):
    r = np.random.default_rng(seed)
    values = r.random((12, 12)) * 20
    valid = r.random((12, 12)) >= hole_frac
    values[~valid] = 0.0
    d = DisparityMap(values, valid)
    prev_count = int(valid.sum())
    for budget in (1, 2, 3):
        out = complete_disparity(d, max_iters=budget)
        # originally valid pixels bitwise unchanged
        assert np.array_equal(out.values[valid], values[valid])
        count = int(out.valid.sum())
        assert count >= prev_count
        prev_count = count
    if valid.any():
        full = complete_disparity(d, max_iters=100)
        assert full.valid.all()  # every pixel reachable becomes valid


# ------------------------------------------------------------ normalization

def test_channel_constant_map_is_zero():
    d = DisparityMap(np.full((4, 4), 7.0), np.ones((4, 4), bool))
    assert not to_network_channel(d).any()


def test_channel_linear_midpoint():
    values = np.array([[2.0, 6.0, 10.0]])
    out = to_network_channel(values)
    assert out[0, 1] == pytest.approx(0.5)
    assert out[0, 0] == 0.0 and out[0, 2] == 1.0


def test_channel_elvdiff_equivalence(rng):
    img = rng.integers(0, 256, (16, 16)).astype(np.uint8)
    img.flat[0], img.flat[1] = 0, 255  # both extremes present
    out = to_network_channel(img)
    assert np.allclose(out, img / 255.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_channel_always_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    values = r.random((9, 9)) * r.uniform(0.1, 100)
    valid = r.random((9, 9)) >= 0.4
    values[~valid] = 0.0
    out = to_network_channel(values, valid)
    assert out.min() >= 0.0 and out.max() <= 1.0
