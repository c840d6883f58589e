"""LiDAR clouds to elevation pattern images.

A velodyne-style point cloud is range/FOV filtered, projected into the
camera plane with the frame calibration, rasterized as normalized point
heights and gap-filled with a grayscale dilation. The result is a single
8-bit channel whose intensity encodes ground/object elevation, suitable
as the 3D input of the fusion network.

Coordinate conventions: LiDAR frame x forward, y left, z up (meters);
image frame u right, v down (pixels).
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter


class CalibrationError(ValueError):
    """Projection chain unusable (singular or malformed matrices)."""


@dataclass(frozen=True)
class PointCloud:
    """Set of 3D points, LiDAR frame, meters.

    xyz: (N, 3) float array; reflectance: optional (N,) array in [0, 1].
    Empty clouds are legal.
    """

    xyz: np.ndarray
    reflectance: np.ndarray | None = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "xyz", xyz)
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.reflectance is not None:
            refl = np.asarray(self.reflectance, dtype=np.float64).reshape(-1)
            if refl.shape[0] != xyz.shape[0]:
                raise ValueError("reflectance length does not match point count")
            object.__setattr__(self, "reflectance", refl)

    def __len__(self):
        return self.xyz.shape[0]


@dataclass(frozen=True)
class Calibration:
    """Camera projection chain for one frame.

    p: 3x4 projection (pixels), r_rect: 4x4 rectification (homogeneous),
    t_velo_to_cam: 4x4 LiDAR-to-camera extrinsic.
    """

    p: np.ndarray
    r_rect: np.ndarray
    t_velo_to_cam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64).reshape(3, 4))
        object.__setattr__(self, "r_rect", np.asarray(self.r_rect, dtype=np.float64).reshape(4, 4))
        object.__setattr__(
            self, "t_velo_to_cam", np.asarray(self.t_velo_to_cam, dtype=np.float64).reshape(4, 4)
        )

    def validate(self, tol=1e-6):
        """Check rotation blocks are orthonormal and focal entries nonzero."""
        for name, m in (("r_rect", self.r_rect), ("t_velo_to_cam", self.t_velo_to_cam)):
            r = m[:3, :3]
            if not np.allclose(r @ r.T, np.eye(3), atol=tol):
                raise CalibrationError(f"{name} rotation block is not orthonormal")
        if self.p[0, 0] == 0.0 or self.p[1, 1] == 0.0:
            raise CalibrationError("projection matrix has zero focal entries")

    def chain(self):
        """Composed 3x4 matrix mapping homogeneous LiDAR points to pixels."""
        m = self.p @ self.r_rect @ self.t_velo_to_cam
        if np.linalg.matrix_rank(m) < 3:
            raise CalibrationError("singular calibration chain")
        return m


@dataclass(frozen=True)
class ElevationFilterConfig:
    """Range and FOV gates plus the dilation kernel side.

    Angles in degrees, ranges in meters, all intervals closed. The z
    interval doubles as the normalization range of the output image.
    """

    fov_h: tuple = (-60.0, 60.0)
    fov_v: tuple = (-13.9, 2.9)
    x_range: tuple = (0.0, 80.0)
    y_range: tuple = (-60.0, 60.0)
    z_range: tuple = (-2.1, 2.9)
    dilation_kernel: int = 9

    def __post_init__(self):
        for name in ("fov_h", "fov_v", "x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must satisfy min < max, got ({lo}, {hi})")
        k = self.dilation_kernel
        if k < 1 or k % 2 == 0:
            raise ValueError(f"dilation_kernel must be odd and >= 1, got {k}")


def filter_points(cloud, cfg):
    """Keep points inside the coordinate ranges and both FOV cones.

    Azimuth is atan2(y, x); elevation angle is measured against the
    horizontal plane at the sensor origin. Order is preserved; an empty
    result is legal.
    """
    xyz = cloud.xyz
    if len(cloud) == 0:
        return cloud
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    az = np.degrees(np.arctan2(y, x))
    el = np.degrees(np.arctan2(z, np.hypot(x, y)))
    keep = (
        (x >= cfg.x_range[0]) & (x <= cfg.x_range[1])
        & (y >= cfg.y_range[0]) & (y <= cfg.y_range[1])
        & (z >= cfg.z_range[0]) & (z <= cfg.z_range[1])
        & (az >= cfg.fov_h[0]) & (az <= cfg.fov_h[1])
        & (el >= cfg.fov_v[0]) & (el <= cfg.fov_v[1])
    )
    refl = cloud.reflectance[keep] if cloud.reflectance is not None else None
    return PointCloud(xyz[keep], refl)


def normalize_elevation(z, z_range):
    """Map heights in [zmin, zmax] linearly onto [0, 255], real-valued.

    Rounding to integers happens only at rasterization.
    """
    zmin, zmax = z_range
    if zmin == zmax:
        raise ValueError(f"degenerate z_range ({zmin}, {zmax})")
    return (np.asarray(z, dtype=np.float64) - zmin) / (zmax - zmin) * 255.0


def project_points(cloud, calib, image_dims):
    """Project filtered points into the image plane.

    Returns an (N, 3) array of (u, v, z) where u, v are real pixel
    coordinates inside [0, W) x [0, H) and z is the original LiDAR
    elevation. Points with non-positive camera depth or projecting
    outside the image are dropped.
    """
    width, height = image_dims
    m = calib.chain()
    if len(cloud) == 0:
        return np.empty((0, 3), dtype=np.float64)
    hom = np.hstack([cloud.xyz, np.ones((len(cloud), 1))])
    proj = hom @ m.T
    depth = proj[:, 2]
    keep = depth > 0
    uv = np.full((len(cloud), 2), -1.0)
    uv[keep] = proj[keep, :2] / depth[keep, None]
    keep &= (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)
    return np.column_stack([uv[keep], cloud.xyz[keep, 2]])


def _round_half_up(x):
    # nearest integer, ties away from zero; inputs here are non-negative
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def rasterize(points, cfg, image_dims):
    """Scatter normalized elevations onto an 8-bit image.

    Pixel coordinates and intensities round to nearest (ties away from
    zero); colliding points keep the maximum intensity; untouched pixels
    stay 0.
    """
    width, height = image_dims
    img = np.zeros((height, width), dtype=np.uint8)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return img
    cols = _round_half_up(points[:, 0])
    rows = _round_half_up(points[:, 1])
    # u in [W-0.5, W) rounds up to W; drop those half-pixel boundary cases
    ok = (cols < width) & (rows < height)
    vals = _round_half_up(normalize_elevation(points[ok, 2], cfg.z_range))
    np.maximum.at(img, (rows[ok], cols[ok]), vals.astype(np.uint8))
    return img


def dilate(img, kernel):
    """Grayscale dilation with a centered kernel x kernel square window.

    Edge windows are clipped to the image (equivalent to zero padding on
    non-negative images).
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return img.copy()
    return maximum_filter(img, size=kernel, mode="constant", cval=0)


def generate_elvdiff(cloud, calib, cfg, image_dims):
    """Full elevation-pattern pipeline: filter, project, rasterize, dilate.

    Deterministic for fixed inputs.
    """
    kept = filter_points(cloud, cfg)
    pts = project_points(kept, calib, image_dims)
    img = rasterize(pts, cfg, image_dims)
    return dilate(img, cfg.dilation_kernel)


def load_velodyne(path):
    """Read a KITTI velodyne binary: little-endian float32 (x, y, z, r) quads."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise ValueError(f"corrupt velodyne file (not a multiple of 4 floats): {path}")
    pts = raw.reshape(-1, 4)
    return PointCloud(pts[:, :3].astype(np.float64), pts[:, 3].astype(np.float64))


def load_kitti_calib(path):
    """Parse a KITTI calib text file into a Calibration.

    Reads keys P2, R0_rect and Tr_velo_to_cam; the latter two are
    promoted to homogeneous 4x4 form.
    """
    entries = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            vals = rest.split()
            if vals:
                entries[key.strip()] = np.array([float(v) for v in vals])
    try:
        p = entries["P2"].reshape(3, 4)
        r0 = entries["R0_rect"].reshape(3, 3)
        tr = entries["Tr_velo_to_cam"].reshape(3, 4)
    except KeyError as exc:
        raise CalibrationError(f"missing calibration key {exc} in {path}") from exc
    r_rect = np.eye(4)
    r_rect[:3, :3] = r0
    t = np.eye(4)
    t[:3, :] = tr
    calib = Calibration(p, r_rect, t)
    calib.validate()
    return calib


def save_kitti_calib(path, calib):
    """Write a Calibration in the KITTI text layout (inverse of load)."""
    with open(path, "w") as fh:
        fh.write("P2: " + " ".join(f"{v:.12e}" for v in calib.p.reshape(-1)) + "\n")
        fh.write("R0_rect: " + " ".join(f"{v:.12e}" for v in calib.r_rect[:3, :3].reshape(-1)) + "\n")
        fh.write(
            "Tr_velo_to_cam: "
            + " ".join(f"{v:.12e}" for v in calib.t_velo_to_cam[:3, :].reshape(-1))
            + "\n"
        )


def save_velodyne(path, cloud):
    """Write a PointCloud as a KITTI velodyne binary."""
    refl = cloud.reflectance
    if refl is None:
        refl = np.zeros(len(cloud))
    arr = np.column_stack([cloud.xyz, refl]).astype("<f4")
    arr.tofile(path)
