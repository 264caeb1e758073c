"""Weighted class-activation maps for image pairs and PNG overlays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from ..model import ModelState, feature_extract

BASES = ("later", "earlier", "mean")


@dataclass
class ActivationMap:
    raw: np.ndarray  # h x w
    normalized: np.ndarray  # H x W in [0, 1]
    weights: np.ndarray  # per-channel weights
    pair: Optional[Tuple] = None


def upsample(raw: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    h, w = raw.shape
    H, W = size
    rows = (np.arange(H) + 0.5) * (h / H) - 0.5
    cols = (np.arange(W) + 0.5) * (w / W) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(raw, [rr, cc], order=1, mode="nearest")


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo
    if span <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / span


def pair_channel_weights(w: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """|w_c (f_c(I1) - f_c(I2))|, unchanged when the pair is swapped."""
    return np.abs(w * (f1 - f2))


def combine(weights: np.ndarray, acts_first: np.ndarray, acts_second: np.ndarray, basis: str,
            size: Tuple[int, int], pair=None) -> ActivationMap:
    if basis not in BASES:
        raise ValueError(f"unknown CAM basis {basis!r}; choose from {BASES}")
    if basis == "later":
        acts = acts_second
    elif basis == "earlier":
        acts = acts_first
    else:
        acts = 0.5 * (acts_first + acts_second)
    raw = np.tensordot(weights, acts, axes=(0, 0))
    return ActivationMap(raw=raw, normalized=normalize_map(upsample(raw, size)), weights=weights, pair=pair)


def weighted_cam(model: ModelState, image1, image2, basis: str = "later", pair=None) -> ActivationMap:
    """Change map for an (earlier, later) pair: channel weights times final-layer activations."""
    # separate passes so a duplicated image yields exactly zero weights
    outs = [feature_extract(model, np.asarray(im, dtype=np.float64)[None]) for im in (image1, image2)]
    f = [o.feature.data[0] for o in outs]
    a = [o.activations.data[0] for o in outs]
    weights = pair_channel_weights(model.params["rank.w"].data, f[0], f[1])
    return combine(weights, a[0], a[1], basis, np.shape(image1)[-2:], pair)


def csr_cam(model: ModelState, image, pair=None) -> ActivationMap:
    """Single-image CAM of the regression head: sum_c w_c A_c, min-max normalised."""
    out = feature_extract(model, np.asarray(image, dtype=np.float64)[None])
    a = out.activations.data[0]
    w = model.params["csr.w"].data
    raw = np.tensordot(w, a, axes=(0, 0))
    return ActivationMap(raw=raw, normalized=normalize_map(upsample(raw, np.shape(image)[-2:])), weights=w, pair=pair)


def _warm(m: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp."""
    return np.stack([np.clip(3 * m, 0, 1), np.clip(3 * m - 1, 0, 1), np.clip(3 * m - 2, 0, 1)], axis=-1)


def render_overlay(image: np.ndarray, amap: np.ndarray, out_path: Union[str, Path], alpha: float = 0.5) -> Path:
    """Blend the warm colour ramp of ``amap`` over a grayscale image; pixels where the map is 0 stay gray."""
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray[0]
    m = np.asarray(amap, dtype=np.float64)
    if m.shape != gray.shape:
        raise ValueError(f"map shape {m.shape} does not match image {gray.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("map must be normalised to [0, 1]")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    a = np.where(m > 0.0, alpha, 0.0)[..., None]
    rgb = (1.0 - a) * np.repeat(np.clip(gray, 0, 1)[..., None], 3, axis=-1) + a * _warm(m)
    out = Path(out_path)
    try:
        Image.fromarray(np.round(rgb * 255.0).astype(np.uint8), mode="RGB").save(out, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write overlay to {out}: {exc}") from exc
    return out
