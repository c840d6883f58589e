"""Stereo disparity maps as the network's 3D channel.

Covers the Cityscapes 16-bit storage convention, hole completion by
iterated neighborhood medians, and the shared single-channel [0, 1]
contract both 3D sources (disparity and elevation images) feed into the
network.
"""

import warnings
from dataclasses import dataclass

import numpy as np


class DisparityFormatError(ValueError):
    """Raw disparity image has the wrong bit depth or channel count."""


@dataclass
class DisparityMap:
    """Per-pixel horizontal stereo shift with a validity mask.

    Invalid pixels carry value 0 and mask False; valid values are finite
    and >= 0.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("values and validity mask shapes differ")
        if np.any(self.values[~self.valid] != 0):
            raise ValueError("invalid pixels must carry value 0")
        vals = self.values[self.valid]
        if vals.size and (not np.all(np.isfinite(vals)) or np.any(vals < 0)):
            raise ValueError("valid disparities must be finite and >= 0")


def decode_cityscapes_disparity(raw):
    """Decode a 16-bit stored disparity image.

    Stored value p > 0 means disparity (p - 1) / 256; p == 0 marks an
    invalid pixel.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise DisparityFormatError(f"expected single-channel image, got shape {raw.shape}")
    if raw.dtype != np.uint16:
        raise DisparityFormatError(f"expected 16-bit image, got dtype {raw.dtype}")
    valid = raw > 0
    values = np.zeros(raw.shape, dtype=np.float64)
    values[valid] = (raw[valid].astype(np.float64) - 1.0) / 256.0
    return DisparityMap(values, valid)


def _neighbor_stack(values, valid):
    # 3x3 shifted copies of values/valid with NaN outside the image
    h, w = values.shape
    stack = np.full((9, h, w), np.nan)
    idx = 0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            src = values[
                max(0, -dr): h - max(0, dr),
                max(0, -dc): w - max(0, dc),
            ]
            ok = valid[
                max(0, -dr): h - max(0, dr),
                max(0, -dc): w - max(0, dc),
            ]
            tile = np.full((h, w), np.nan)
            tile[
                max(0, dr): h - max(0, -dr),
                max(0, dc): w - max(0, -dc),
            ] = np.where(ok, src, np.nan)
            stack[idx] = tile
            idx += 1
    return stack


def complete_disparity(d, max_iters=100):
    """Grow valid pixels into holes by iterated 3x3 valid medians.

    Per iteration, every invalid pixel with at least one valid neighbor
    is filled with the median of the valid values in its 3x3 window,
    all fills computed from the previous iteration's state. Originally
    valid pixels are never modified. Stops when nothing changes or at
    max_iters. An all-invalid input returns unchanged with a warning.
    """
    if not d.valid.any():
        warnings.warn("all-invalid disparity map; nothing to complete")
        return DisparityMap(np.zeros_like(d.values), np.zeros_like(d.valid))
    values = d.values.copy()
    valid = d.valid.copy()
    for _ in range(max_iters):
        if valid.all():
            break
        stack = _neighbor_stack(values, valid)
        has_source = ~np.all(np.isnan(stack), axis=0)
        fillable = ~valid & has_source
        if not fillable.any():
            break
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(stack, axis=0)
        values[fillable] = med[fillable]
        valid = valid | fillable
    return DisparityMap(values, valid)


def to_network_channel(values, valid=None):
    """Min-max normalize to [0, 1] over valid pixels.

    Accepts a DisparityMap or a plain array (optionally with a mask).
    Constant or empty-valid maps normalize to all zeros; invalid pixels
    map to 0.
    """
    if isinstance(values, DisparityMap):
        valid = values.valid
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.ones(values.shape, dtype=bool)
    out = np.zeros(values.shape, dtype=np.float64)
    vals = values[valid]
    if vals.size == 0:
        return out
    lo, hi = vals.min(), vals.max()
    if lo == hi:
        return out
    out[valid] = (values[valid] - lo) / (hi - lo)
    return out
