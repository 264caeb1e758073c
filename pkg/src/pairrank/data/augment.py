"""Nuisance transforms: rigid motion plus brightness and contrast."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0  # degrees, counter-clockwise on screen
    translation: Tuple[float, float] = (0.0, 0.0)  # (dx, dy) pixels, x to the right, y down
    brightness: float = 1.0
    contrast: float = 1.0

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation == 0.0
            and tuple(self.translation) == (0.0, 0.0)
            and self.brightness == 1.0
            and self.contrast == 1.0
        )


@dataclass(frozen=True)
class AugmentRanges:
    rotation: float = 10.0
    translation: float = 10.0
    brightness: Tuple[float, float] = (0.8, 1.2)
    contrast: Tuple[float, float] = (0.8, 1.2)

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            rotation=float(rng.uniform(-self.rotation, self.rotation)),
            translation=(
                float(rng.uniform(-self.translation, self.translation)),
                float(rng.uniform(-self.translation, self.translation)),
            ),
            brightness=float(rng.uniform(*self.brightness)),
            contrast=float(rng.uniform(*self.contrast)),
        )


def rigid_warp(plane: np.ndarray, rotation: float, translation: Tuple[float, float], order: int = 1) -> np.ndarray:
    """Rotate about the image centre then shift; zero outside the source image."""
    h, w = plane.shape
    theta = np.deg2rad(rotation)
    c, s = np.cos(theta), np.sin(theta)
    # forward map in (row, col): screen-CCW rotation, then shift by (dy, dx)
    fwd = np.array([[c, s], [-s, c]])
    inv = fwd.T
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([translation[1], translation[0]])
    offset = centre - inv @ (centre + shift)
    return ndimage.affine_transform(plane, inv, offset=offset, order=order, mode="constant", cval=0.0)


def forward_point(point_rc, shape, rotation: float, translation: Tuple[float, float]) -> np.ndarray:
    """Where a (row, col) point lands under :func:`rigid_warp`."""
    h, w = shape
    theta = np.deg2rad(rotation)
    c, s = np.cos(theta), np.sin(theta)
    fwd = np.array([[c, s], [-s, c]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    return fwd @ (np.asarray(point_rc, dtype=float) - centre) + centre + np.array([translation[1], translation[0]])


def augment(image: np.ndarray, params: AugmentParams, clamp: bool = True) -> np.ndarray:
    """Apply rigid motion, brightness, then contrast about the image mean; clamp to [0, 1]."""
    if params.brightness <= 0 or params.contrast <= 0:
        raise ValueError("brightness and contrast factors must be positive")
    img = np.asarray(image, dtype=np.float64)
    if params.is_identity:
        return img.copy()
    squeeze = img.ndim == 2
    planes = img[None] if squeeze else img
    out = np.empty_like(planes)
    for ch, plane in enumerate(planes):
        p = plane
        if params.rotation != 0.0 or tuple(params.translation) != (0.0, 0.0):
            p = rigid_warp(p, params.rotation, params.translation)
        p = p * params.brightness
        if params.contrast != 1.0:
            m = p.mean()
            p = m + params.contrast * (p - m)
        out[ch] = p
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out[0] if squeeze else out
