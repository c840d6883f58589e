"""Paired augmentation of (rgb, 3D channel, label) samples.

Geometric transforms (mirror, rotation, shear, affine, perspective,
crop) share one parameter draw across all three planes: bilinear
resampling for the two image planes, nearest for labels, ignore_index
fill at borders. Photometric transforms (the noise family, blur, color
cast/jitter) touch the RGB plane only; the 3D channel encodes physical
heights, so injecting photometric noise there would corrupt it.
"""

from dataclasses import dataclass, replace

import cv2
import numpy as np


@dataclass
class AugmentConfig:
    mirror_prob: float = 0.5
    rotation_prob: float = 0.5
    rotation_max_deg: float = 10.0
    shear_prob: float = 0.5
    shear_max: float = 0.1
    affine_prob: float = 0.5
    affine_max_translate: float = 0.05  # fraction of width/height
    affine_max_scale: float = 0.1       # +/- around 1
    perspective_prob: float = 0.5
    perspective_max: float = 0.03       # corner jitter, fraction of dims
    crop_prob: float = 0.5
    crop_min_frac: float = 0.8
    crop_size: tuple | None = None      # absolute (w, h), overrides frac
    salt_pepper_prob: float = 0.5
    salt_pepper_amount: float = 0.01
    poisson_prob: float = 0.5
    speckle_prob: float = 0.5
    speckle_sigma: float = 0.1
    blur_prob: float = 0.5
    blur_sigma_max: float = 1.5
    color_cast_prob: float = 0.5
    color_cast_max: float = 20.0
    color_jitter_prob: float = 0.5
    color_jitter_strength: float = 0.2
    ignore_index: int = 255

    @classmethod
    def identity(cls):
        fields = {name: 0.0 for name in cls.__dataclass_fields__ if name.endswith("_prob")}
        return cls(**fields)

    @classmethod
    def geometric_only(cls):
        cfg = cls()
        photo = (
            "salt_pepper_prob", "poisson_prob", "speckle_prob",
            "blur_prob", "color_cast_prob", "color_jitter_prob",
        )
        return replace(cfg, **{name: 0.0 for name in photo})


def warp_affine_sample(rgb, threed, label, matrix, ignore_index=255, out_wh=None):
    """Apply one 2x3 forward affine map to all three planes.

    Bilinear for rgb/threed with zero fill, nearest for the label with
    ignore_index fill.
    """
    h, w = label.shape[:2]
    out_w, out_h = out_wh or (w, h)
    rgb_out = cv2.warpAffine(rgb, matrix, (out_w, out_h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    threed_out = cv2.warpAffine(threed.astype(np.float32), matrix, (out_w, out_h),
                                flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT,
                                borderValue=0)
    label_out = cv2.warpAffine(label.astype(np.float32), matrix, (out_w, out_h),
                               flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT,
                               borderValue=float(ignore_index))
    return rgb_out, threed_out.astype(threed.dtype, copy=False), label_out.astype(label.dtype)


def warp_perspective_sample(rgb, threed, label, matrix, ignore_index=255):
    h, w = label.shape[:2]
    rgb_out = cv2.warpPerspective(rgb, matrix, (w, h), flags=cv2.INTER_LINEAR,
                                  borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    threed_out = cv2.warpPerspective(threed.astype(np.float32), matrix, (w, h),
                                     flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT,
                                     borderValue=0)
    label_out = cv2.warpPerspective(label.astype(np.float32), matrix, (w, h),
                                    flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT,
                                    borderValue=float(ignore_index))
    return rgb_out, threed_out.astype(threed.dtype, copy=False), label_out.astype(label.dtype)


def _rotation_shear_matrix(w, h, angle_deg, shear, scale, tx, ty):
    m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle_deg, scale)
    shear_m = np.array([[1.0, shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    m3 = np.vstack([m, [0.0, 0.0, 1.0]]) @ shear_m
    m3[0, 2] += tx
    m3[1, 2] += ty
    return m3[:2]


def _crop_resize(rgb, threed, label, x0, y0, cw, ch):
    h, w = label.shape[:2]
    rgb_c = rgb[y0:y0 + ch, x0:x0 + cw]
    threed_c = threed[y0:y0 + ch, x0:x0 + cw]
    label_c = label[y0:y0 + ch, x0:x0 + cw]
    rgb_r = cv2.resize(rgb_c, (w, h), interpolation=cv2.INTER_LINEAR)
    threed_r = cv2.resize(threed_c.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
    label_r = cv2.resize(label_c.astype(np.float32), (w, h), interpolation=cv2.INTER_NEAREST)
    return rgb_r, threed_r.astype(threed.dtype, copy=False), label_r.astype(label.dtype)


def _salt_pepper(rgb, amount, rng):
    out = rgb.copy()
    mask = rng.random(rgb.shape[:2])
    out[mask < amount / 2] = 0
    out[(mask >= amount / 2) & (mask < amount)] = 255
    return out


def _color_jitter(rgb, strength, rng):
    img = rgb.astype(np.float64)
    brightness = 1.0 + rng.uniform(-strength, strength)
    contrast = 1.0 + rng.uniform(-strength, strength)
    mean = img.mean()
    img = (img - mean) * contrast + mean
    img = img * brightness
    return np.clip(img, 0, 255).astype(np.uint8)


def augment(rgb, threed, label, cfg, rng):
    """Randomly transform one sample; identity when all probabilities are 0.

    rgb: (H, W, 3) uint8; threed: (H, W) float in [0, 1] or uint8;
    label: (H, W) integer class ids plus ignore_index.
    """
    h, w = label.shape[:2]
    if rgb.shape[:2] != (h, w) or threed.shape[:2] != (h, w):
        raise ValueError("rgb/threed/label are not spatially aligned")

    if rng.random() < cfg.mirror_prob:
        rgb = rgb[:, ::-1].copy()
        threed = threed[:, ::-1].copy()
        label = label[:, ::-1].copy()

    angle = shear = tx = ty = 0.0
    scale = 1.0
    if rng.random() < cfg.rotation_prob:
        angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    if rng.random() < cfg.shear_prob:
        shear = rng.uniform(-cfg.shear_max, cfg.shear_max)
    if rng.random() < cfg.affine_prob:
        scale = 1.0 + rng.uniform(-cfg.affine_max_scale, cfg.affine_max_scale)
        tx = rng.uniform(-cfg.affine_max_translate, cfg.affine_max_translate) * w
        ty = rng.uniform(-cfg.affine_max_translate, cfg.affine_max_translate) * h
    if angle or shear or tx or ty or scale != 1.0:
        m = _rotation_shear_matrix(w, h, angle, shear, scale, tx, ty)
        rgb, threed, label = warp_affine_sample(rgb, threed, label, m, cfg.ignore_index)

    if rng.random() < cfg.perspective_prob:
        corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float32)
        jitter = rng.uniform(-cfg.perspective_max, cfg.perspective_max, size=(4, 2))
        moved = corners + jitter * np.array([w, h], dtype=np.float32)
        pm = cv2.getPerspectiveTransform(corners, moved.astype(np.float32))
        rgb, threed, label = warp_perspective_sample(rgb, threed, label, pm, cfg.ignore_index)

    if rng.random() < cfg.crop_prob:
        if cfg.crop_size is not None:
            cw, ch = cfg.crop_size
            if cw > w or ch > h:
                raise ValueError(f"crop {cfg.crop_size} larger than image {(w, h)}")
        else:
            frac = rng.uniform(cfg.crop_min_frac, 1.0)
            cw, ch = max(1, int(round(w * frac))), max(1, int(round(h * frac)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        rgb, threed, label = _crop_resize(rgb, threed, label, x0, y0, cw, ch)

    if rng.random() < cfg.salt_pepper_prob:
        rgb = _salt_pepper(rgb, cfg.salt_pepper_amount, rng)
    if rng.random() < cfg.poisson_prob:
        rgb = np.clip(rng.poisson(rgb.astype(np.float64)), 0, 255).astype(np.uint8)
    if rng.random() < cfg.speckle_prob:
        noise = rng.normal(0.0, cfg.speckle_sigma, size=rgb.shape)
        rgb = np.clip(rgb.astype(np.float64) * (1.0 + noise), 0, 255).astype(np.uint8)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(0.3, cfg.blur_sigma_max)
        rgb = cv2.GaussianBlur(rgb, (0, 0), sigma)
    if rng.random() < cfg.color_cast_prob:
        cast = rng.uniform(-cfg.color_cast_max, cfg.color_cast_max, size=3)
        rgb = np.clip(rgb.astype(np.float64) + cast, 0, 255).astype(np.uint8)
    if rng.random() < cfg.color_jitter_prob:
        rgb = _color_jitter(rgb, cfg.color_jitter_strength, rng)

    return rgb, threed, label
