"""Spatial (crop + rotation) and non-spatial (photometric) augmentations.

Spatial transforms move geometry and are applied jointly to image and
label; non-spatial transforms touch pixel values only, so labels are
untouched by construction. Everything here is a pure function of its
inputs: randomness lives solely in the sample_* helpers, which consume a
fixed number of draws per call from the caller's generator.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidConfigError, InvalidInputError

MAX_ROTATION_DEG = 30.0
JITTER_STRENGTH = 0.7
JITTER_FLOOR = 0.05
BLUR_PROB = 0.5
BLUR_MAX_SIGMA = 2.0
SHARPEN_MAX = 1.0
MIN_CROP_FRACTION = 0.5


@dataclass(frozen=True)
class SpatialSpec:
    """Rotation (degrees) plus a crop box (top, left, height, width)."""

    rotation_degrees: float
    crop_box: tuple

    def __post_init__(self):
        if not np.isfinite(self.rotation_degrees):
            raise InvalidConfigError("rotation must be finite")
        if abs(self.rotation_degrees) > MAX_ROTATION_DEG:
            raise InvalidConfigError(
                f"|rotation| must be <= {MAX_ROTATION_DEG} degrees")
        top, left, h, w = self.crop_box
        if h < 1 or w < 1 or top < 0 or left < 0:
            raise InvalidConfigError(f"bad crop box {self.crop_box}")

    def validate_for(self, image_shape):
        top, left, h, w = self.crop_box
        if top + h > image_shape[0] or left + w > image_shape[1]:
            raise InvalidConfigError(
                f"crop box {self.crop_box} exceeds image {image_shape[:2]}")

    @staticmethod
    def identity(image_shape):
        return SpatialSpec(0.0, (0, 0, int(image_shape[0]), int(image_shape[1])))


@dataclass(frozen=True)
class NonSpatialSpec:
    """Photometric transform parameters; all 1/0 is the identity."""

    brightness_factor: float = 1.0
    contrast_factor: float = 1.0
    saturation_factor: float = 1.0
    blur_sigma: float = 0.0
    sharpen_amount: float = 0.0

    def __post_init__(self):
        vals = (self.brightness_factor, self.contrast_factor,
                self.saturation_factor, self.blur_sigma, self.sharpen_amount)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidConfigError("non-spatial factors must be finite")
        if self.brightness_factor <= 0 or self.contrast_factor <= 0:
            raise InvalidConfigError("brightness/contrast factors must be > 0")
        if (self.saturation_factor < 0 or self.blur_sigma < 0
                or self.sharpen_amount < 0):
            raise InvalidConfigError("saturation/blur/sharpen must be >= 0")

    @property
    def is_identity(self):
        return (self.brightness_factor == 1.0 and self.contrast_factor == 1.0
                and self.saturation_factor == 1.0 and self.blur_sigma == 0.0
                and self.sharpen_amount == 0.0)

    @staticmethod
    def identity():
        return NonSpatialSpec()


def sample_spatial(rng, image_shape):
    """Draw a random crop (>= half of each dimension) and rotation.

    Draw order is fixed (rotation, crop fractions, crop position) so a
    spec is a pure function of the generator state.
    """
    h, w = int(image_shape[0]), int(image_shape[1])
    if h < 2 or w < 2:
        raise InvalidInputError(f"image too small to augment: {h}x{w}")
    rotation = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    ch = int(np.clip(round(rng.uniform(MIN_CROP_FRACTION, 1.0) * h), 2, h))
    cw = int(np.clip(round(rng.uniform(MIN_CROP_FRACTION, 1.0) * w), 2, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return SpatialSpec(rotation, (top, left, ch, cw))


def sample_nonspatial(rng, strength=JITTER_STRENGTH, blur_prob=BLUR_PROB,
                      blur_max=BLUR_MAX_SIGMA, sharpen_max=SHARPEN_MAX):
    """Draw photometric jitter factors (uniform in [1-s, 1+s]), blur, sharpen."""
    lo = max(JITTER_FLOOR, 1.0 - strength)
    hi = 1.0 + strength
    brightness = float(rng.uniform(lo, hi))
    contrast = float(rng.uniform(lo, hi))
    saturation = float(rng.uniform(lo, hi))
    blur_gate = rng.uniform()
    blur_sigma = float(rng.uniform(0.0, blur_max))
    if blur_gate >= blur_prob:
        blur_sigma = 0.0
    sharpen = float(rng.uniform(0.0, sharpen_max))
    return NonSpatialSpec(brightness, contrast, saturation, blur_sigma, sharpen)


def _spatial_matrix(spec, out_h, out_w):
    """2x3 map from output pixel (i, j) to source coordinates (r, c).

    The crop box is scaled to the output size and the content is rotated
    about the crop centre (positive angles turn the content clockwise in
    the usual row-0-at-top view).
    """
    top, left, ch, cw = spec.crop_box
    sr = ch / out_h
    sc = cw / out_w
    tr = top + 0.5 * sr - 0.5
    tc = left + 0.5 * sc - 0.5
    cy = top + (ch - 1) / 2.0
    cx = left + (cw - 1) / 2.0
    a = np.deg2rad(spec.rotation_degrees)
    ca, sa = np.cos(a), np.sin(a)
    # rows of R(theta) applied to (p_abs - centre)
    m = np.empty((2, 3), dtype=np.float64)
    m[0, 0] = ca * sr
    m[0, 1] = -sa * sc
    m[0, 2] = ca * (tr - cy) - sa * (tc - cx) + cy
    m[1, 0] = sa * sr
    m[1, 1] = ca * sc
    m[1, 2] = sa * (tr - cy) + ca * (tc - cx) + cx
    if spec.rotation_degrees == 0.0:
        # exact-identity fast path: avoid cos/sin roundoff entirely
        m[0, 0], m[0, 1], m[0, 2] = sr, 0.0, tr
        m[1, 0], m[1, 1], m[1, 2] = 0.0, sc, tc
    return m


def apply_spatial(image, label, spec, out_size=None, ignore_index=255):
    """Apply one geometric mapping to image (bilinear) and label (nearest).

    Content warped in from outside the source is filled with 0 in the
    image and with ignore_index in the label, keeping borders out of the
    losses.
    """
    image = np.asarray(image)
    label = np.asarray(label)
    if image.ndim != 3 or label.ndim != 2 or image.shape[:2] != label.shape:
        raise InvalidInputError(
            f"image {image.shape} and label {label.shape} must share HxW")
    spec.validate_for(image.shape)
    out_h, out_w = out_size if out_size is not None else image.shape[:2]
    m = _spatial_matrix(spec, out_h, out_w)
    img_out = kernels.affine_warp_image(image, m, out_h, out_w, 0.0)
    lab_out = kernels.affine_warp_label(label, m, out_h, out_w, ignore_index)
    return img_out, lab_out


def apply_spatial_image(image, spec, out_size=None):
    """Spatial warp of an image alone (for unlabeled samples)."""
    image = np.asarray(image)
    spec.validate_for(image.shape)
    out_h, out_w = out_size if out_size is not None else image.shape[:2]
    m = _spatial_matrix(spec, out_h, out_w)
    return kernels.affine_warp_image(image, m, out_h, out_w, 0.0)


def _luminance(image):
    if image.shape[2] == 3:
        return (0.299 * image[..., 0] + 0.587 * image[..., 1]
                + 0.114 * image[..., 2])
    return image.mean(axis=2)


def apply_nonspatial(image, spec):
    """Photometric transform of an HWC image in [0, 1].

    Order: brightness, contrast, saturation, blur, unsharp-mask sharpen.
    Identity-valued stages are skipped so the all-identity spec is exact.
    Output is clamped to [0, 1] and keeps shape and dtype.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidInputError(f"expected HWC image, got shape {image.shape}")
    x = image.copy()
    if spec.brightness_factor != 1.0:
        x = np.clip(x * spec.brightness_factor, 0.0, 1.0)
    if spec.contrast_factor != 1.0:
        mean = float(_luminance(x).mean(dtype=np.float64))
        x = np.clip((x - mean) * spec.contrast_factor + mean, 0.0, 1.0)
    if spec.saturation_factor != 1.0 and x.shape[2] > 1:
        gray = _luminance(x)[..., None]
        x = np.clip(gray + (x - gray) * spec.saturation_factor, 0.0, 1.0)
    if spec.blur_sigma > 0.0:
        x = kernels.gaussian_blur(x, spec.blur_sigma)
    if spec.sharpen_amount > 0.0:
        base = kernels.gaussian_blur(x, 1.0)
        x = np.clip(x + spec.sharpen_amount * (x - base), 0.0, 1.0)
    return x.astype(image.dtype, copy=False)
