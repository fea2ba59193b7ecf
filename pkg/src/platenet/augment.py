"""On-the-fly image augmentation.

A transform is sampled per image (:func:`sample`) and applied by
:func:`apply` in a fixed order:

1. one affine warp (rotation, then shear, then zoom, then shift, all about
   the image centre), nearest-neighbour sampled with nearest-edge fill;
2. horizontal / vertical flips;
3. brightness scaling of the raw 0-255 intensities, clamped to [0, 255];
4. rescaling (default 1/255) into [0, 1].

Coordinates are ``x`` = column, ``y`` = row (pointing down). A positive
rotation angle turns the picture counter-clockwise as displayed.
"""

import math
from dataclasses import dataclass

import numpy as np

from platenet.errors import ShapeError


@dataclass
class AugmentConfig:
    rotation_range: float = 90.0  # degrees, sampled in [-r, r]
    width_shift_range: float = 0.05  # fraction of width
    height_shift_range: float = 0.05  # fraction of height
    shear_range: float = 0.05  # degrees
    zoom_range: float = 0.05  # zoom factors sampled in [1 - r, 1 + r]
    horizontal_flip: bool = True
    vertical_flip: bool = True
    brightness_range: tuple = (0.75, 1.25)
    rescale: float = 1.0 / 255

    def __post_init__(self):
        self.brightness_range = tuple(float(b) for b in self.brightness_range)
        for name in ("rotation_range", "width_shift_range", "height_shift_range", "shear_range", "zoom_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        lo, hi = self.brightness_range
        if not 0 <= lo <= hi:
            raise ValueError(f"brightness_range must satisfy 0 <= low <= high, got {self.brightness_range}")
        if self.zoom_range >= 1:
            raise ValueError("zoom_range must be < 1")
        if self.rescale <= 0:
            raise ValueError("rescale must be > 0")

    @classmethod
    def identity(cls, rescale=1.0 / 255):
        """A config whose samples never change the image (rescale only)."""
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, False, False, (1.0, 1.0), rescale)


@dataclass
class AugmentParams:
    rotation: float = 0.0  # degrees
    shift_x: float = 0.0  # pixels
    shift_y: float = 0.0
    shear: float = 0.0  # degrees
    zoom_x: float = 1.0
    zoom_y: float = 1.0
    flip_h: bool = False
    flip_v: bool = False
    brightness: float = 1.0


def sample(config, rng, image_shape):
    """Draw one :class:`AugmentParams`; shifts are scaled by ``image_shape`` (H, W, ...)."""
    h, w = image_shape[0], image_shape[1]

    def uniform(r):
        return float(rng.uniform(-r, r)) if r > 0 else 0.0

    rotation = uniform(config.rotation_range)
    shift_x = uniform(config.width_shift_range * w)
    shift_y = uniform(config.height_shift_range * h)
    shear = uniform(config.shear_range)
    zoom_x = 1.0 + uniform(config.zoom_range)
    zoom_y = 1.0 + uniform(config.zoom_range)
    flip_h = bool(rng.random() < 0.5) if config.horizontal_flip else False
    flip_v = bool(rng.random() < 0.5) if config.vertical_flip else False
    lo, hi = config.brightness_range
    brightness = float(rng.uniform(lo, hi)) if hi > lo else lo
    return AugmentParams(rotation, shift_x, shift_y, shear, zoom_x, zoom_y, flip_h, flip_v, brightness)


def affine_matrix(params):
    """2x2 linear part (acting on centred ``(x, y)``) and translation of the forward warp."""
    t = math.radians(params.rotation)
    rot = np.array([[math.cos(t), math.sin(t)],
                    [-math.sin(t), math.cos(t)]])
    s = math.radians(params.shear)
    shear = np.array([[1.0, -math.sin(s)],
                      [0.0, math.cos(s)]])
    zoom = np.diag([params.zoom_x, params.zoom_y])
    linear = zoom @ shear @ rot
    return linear, np.array([params.shift_x, params.shift_y])


def _round_half_up(v):
    return np.floor(v + 0.5).astype(np.intp)


def warp(image, params):
    """Nearest-neighbour affine warp of a 2-D array (inverse mapping, edge fill)."""
    h, w = image.shape
    linear, shift = affine_matrix(params)
    if np.array_equal(linear, np.eye(2)) and not shift.any():
        return image.copy()
    inv = np.linalg.inv(linear)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx - cx - shift[0]
    dy = yy - cy - shift[1]
    src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
    src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy
    # snap values within rounding noise of an integer so exact quarter turns stay exact
    src_x = np.where(np.abs(src_x - np.rint(src_x)) < 1e-9, np.rint(src_x), src_x)
    src_y = np.where(np.abs(src_y - np.rint(src_y)) < 1e-9, np.rint(src_y), src_y)
    sx = np.clip(_round_half_up(src_x), 0, w - 1)
    sy = np.clip(_round_half_up(src_y), 0, h - 1)
    return image[sy, sx]


def _check_image(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 1:
        raise ShapeError(f"expected a single-channel (H, W, 1) image, got shape {image.shape}")
    return image


def apply(image, params, rescale=1.0 / 255):
    """Augment a raw 0-255 ``(H, W, 1)`` image; the result is float32 in [0, 1]."""
    image = _check_image(image)
    out = warp(image[:, :, 0].astype(np.float64), params)
    if params.flip_h:
        out = out[:, ::-1]
    if params.flip_v:
        out = out[::-1, :]
    if params.brightness != 1.0:
        out = np.clip(out * params.brightness, 0.0, 255.0)
    return _rescale(out, rescale)[:, :, None]


def _rescale(raw, rescale):
    return np.ascontiguousarray(np.clip(raw * rescale, 0.0, 1.0), dtype=np.float32)


def passthrough(image, rescale=1.0 / 255):
    """Rescale only. Callers must pass the raw image exactly once."""
    image = _check_image(image)
    return _rescale(image[:, :, 0].astype(np.float64), rescale)[:, :, None]
