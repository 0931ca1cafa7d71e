"""Image formation for objects moving during the exposure.

A blurred observation is ``I = P*O + (1 - P*M) B`` where ``P`` is the point
spread function of the motion, ``O`` the sharp object appearance, ``M`` its
mask and ``B`` the background. Everything here works on plain numpy arrays in
float64; points are ``(row, col)`` in pixel units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from blurret.errors import (
    DomainError,
    EmptyAlpha,
    EmptyErodedMask,
    OutOfBounds,
    ShapeMismatch,
)

SQUARE_3X3 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PointSpreadFunction:
    """Normalized motion kernel on the image canvas.

    A delta at cell ``(r, c)`` places the sprite's reference point at ``(r, c)``.
    """

    weights: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def support(self) -> np.ndarray:
        """``(k, 2)`` array of the nonzero cells."""
        return np.argwhere(self.weights > 0)


@dataclass(frozen=True)
class Sprite:
    rgb: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.rgb.shape[:2] != self.mask.shape or self.rgb.shape[-1] != 3:
            raise ShapeMismatch(f"sprite rgb {self.rgb.shape} vs mask {self.mask.shape}")

    @property
    def extent(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class CompositeResult:
    image: np.ndarray
    alpha: np.ndarray
    background: np.ndarray


@dataclass(frozen=True)
class BlurAnnotation:
    bs: float
    bl: int
    bbox: tuple[float, float, float, float]


def _check_point(point, canvas):
    h, w = canvas
    r, c = point
    if not (0 <= r <= h - 1 and 0 <= c <= w - 1):
        raise OutOfBounds(f"point {tuple(point)} outside canvas {canvas}")


def rasterize_linear_psf(start, end, canvas, n_samples=64):
    """Kernel of a linear trajectory from ``start`` to ``end``.

    ``n_samples`` equally spaced positions (endpoints included) each deposit
    ``1 / n_samples`` bilinearly onto their four neighbouring cells. A single
    sample sits at the segment midpoint.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    h, w = canvas
    _check_point(start, canvas)
    _check_point(end, canvas)
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)

    if n_samples == 1:
        t = np.array([0.5])
    else:
        t = np.linspace(0.0, 1.0, n_samples)
    pts = start[None, :] + t[:, None] * (end - start)[None, :]

    r0 = np.floor(pts[:, 0]).astype(np.int64)
    c0 = np.floor(pts[:, 1]).astype(np.int64)
    fr = pts[:, 0] - r0
    fc = pts[:, 1] - c0
    share = 1.0 / n_samples

    weights = np.zeros((h, w), dtype=np.float64)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr, cc = r0 + dr, c0 + dc
        # at the last row/column the outward weight is exactly zero
        keep = (wgt > 0) & (rr < h) & (cc < w)
        np.add.at(weights, (rr[keep], cc[keep]), share * wgt[keep])
    return PointSpreadFunction(weights)


def delta_psf(point, canvas):
    """Kernel of a static object at integer cell ``point``."""
    _check_point(point, canvas)
    weights = np.zeros(canvas, dtype=np.float64)
    weights[int(point[0]), int(point[1])] = 1.0
    return PointSpreadFunction(weights)


def _splat(weights, layer, origin):
    """Sum of ``layer`` shifted to every kernel cell (offset by ``origin``), cropped to the frame."""
    h, w = weights.shape
    lh, lw = layer.shape[:2]
    out = np.zeros((h, w) + layer.shape[2:], dtype=np.float64)
    for r, c in np.argwhere(weights > 0):
        top, left = r + origin[0], c + origin[1]
        r_lo, r_hi = max(top, 0), min(top + lh, h)
        c_lo, c_hi = max(left, 0), min(left + lw, w)
        if r_lo >= r_hi or c_lo >= c_hi:
            continue
        out[r_lo:r_hi, c_lo:c_hi] += weights[r, c] * layer[
            r_lo - top : r_hi - top, c_lo - left : c_hi - left
        ]
    return out


def composite(psf, sprite, sprite_origin, background):
    """Render the sprite moving along ``psf`` over ``background``.

    ``sprite_origin`` is the integer offset of the sprite's top-left corner
    from its reference point, so with a delta PSF at ``q`` the sprite's
    top-left lands at ``q + sprite_origin``. Mass leaving the frame is lost.
    The sprite colour is premultiplied by its mask before blurring.
    """
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 3 or background.shape[2] != 3:
        raise ShapeMismatch(f"background must be HxWx3, got {background.shape}")
    if psf.shape != background.shape[:2]:
        raise ShapeMismatch(f"psf {psf.shape} vs background {background.shape[:2]}")
    origin = (int(sprite_origin[0]), int(sprite_origin[1]))

    alpha = _splat(psf.weights, sprite.mask.astype(np.float64), origin)
    appearance = sprite.rgb.astype(np.float64) * sprite.mask[..., None]
    fg = _splat(psf.weights, appearance, origin)
    image = fg + (1.0 - alpha)[..., None] * background
    return CompositeResult(image=image, alpha=alpha, background=background)


def eroded_support(alpha, erosion_radius=3, structure=SQUARE_3X3):
    support = np.asarray(alpha) > 0
    if erosion_radius == 0:
        return support
    return ndimage.binary_erosion(
        support, structure=structure, iterations=erosion_radius, border_value=0
    )


def blur_severity(alpha, erosion_radius=3, structure=SQUARE_3X3):
    """One minus the mean alpha over the eroded nonzero support."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = eroded_support(alpha, erosion_radius, structure)
    n = np.count_nonzero(beta)
    if n == 0:
        raise EmptyErodedMask(f"no support left after eroding by {erosion_radius}")
    bs = 1.0 - alpha[beta].sum() / n
    return max(bs, 0.0)


def blur_level(bs):
    if not 0.0 <= bs < 1.0:
        raise DomainError(f"blur severity {bs} outside [0, 1)")
    return max(1, math.ceil(10 * bs))


def bbox_from_alpha(alpha):
    """Tight normalized ``(x, y, w, h)`` box around the nonzero alpha cells."""
    alpha = np.asarray(alpha)
    rows = np.flatnonzero((alpha > 0).any(axis=1))
    cols = np.flatnonzero((alpha > 0).any(axis=0))
    if rows.size == 0:
        raise EmptyAlpha("alpha has no nonzero cell")
    h, w = alpha.shape
    return (
        cols[0] / w,
        rows[0] / h,
        (cols[-1] - cols[0] + 1) / w,
        (rows[-1] - rows[0] + 1) / h,
    )


def mask_iou(a, b):
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def accept_sample(mask_at_start, mask_at_end, alpha, min_area_frac=0.015, min_endpoint_iou=0.20):
    """Area and endpoint-silhouette filter.

    The endpoint masks only need to share a shape with each other; they may be
    frame-sized or already registered in sprite coordinates.
    """
    alpha = np.asarray(alpha)
    if np.shape(mask_at_start) != np.shape(mask_at_end):
        raise ShapeMismatch("endpoint masks differ in shape")
    if np.count_nonzero(alpha > 0) / alpha.size < min_area_frac:
        return False
    return mask_iou(mask_at_start, mask_at_end) >= min_endpoint_iou


def annotate(alpha, erosion_radius=3):
    bs = blur_severity(alpha, erosion_radius)
    return BlurAnnotation(bs=bs, bl=blur_level(bs), bbox=bbox_from_alpha(alpha))
