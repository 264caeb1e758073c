"""Procedural longitudinal datasets.

``generate_starmen``: a stick figure whose left arm rises with a
subject-specific progression ``t* = alpha * (t - tau)``.

``generate_tumor``: a textured brain-like ellipse with a growing disc whose
radius is the target.

Every image receives an independent rigid nuisance motion. Each subject
draws from its own substream of ``(seed, subject number)`` so generation is
a pure function of config and seed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .augment import forward_point, rigid_warp
from .dataset import LongitudinalDataset, LongitudinalSample

log = logging.getLogger(__name__)

_STARMEN_STREAM = 0x57A2
_TUMOR_STREAM = 0x7E30


def _subject_rng(seed: int, subject: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(subject), stream]))


def _grid(size: int):
    r, c = np.mgrid[0:size, 0:size]
    return r.astype(np.float64), c.astype(np.float64)


def _segment_distance(rr, cc, a, b) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = b - a
    denom = float(d @ d) or 1.0
    t = np.clip(((rr - a[0]) * d[0] + (cc - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(rr - (a[0] + t * d[0]), cc - (a[1] + t * d[1]))


# -- Starmen ----------------------------------------------------------------------
@dataclass
class StarmenConfig:
    n_subjects: int = 200
    timepoints: int = 10
    image_size: int = 64
    alpha_range: Tuple[float, float] = (0.5, 1.5)
    tau_range: Tuple[float, float] = (2.0, 7.0)
    arm_offset_deg: float = 0.0
    arm_slope_deg: float = 7.0  # degrees of elevation per unit of t*
    arm_limits_deg: Tuple[float, float] = (-70.0, 70.0)
    rotation: float = 10.0
    translation: float = 6.8
    stroke_width: float = 2.0


def arm_angle(t_star, config: StarmenConfig = StarmenConfig()):
    """Left-arm elevation in degrees, monotone non-decreasing in t*."""
    lo, hi = config.arm_limits_deg
    return np.clip(config.arm_offset_deg + config.arm_slope_deg * np.asarray(t_star, float), lo, hi)


def progression(alpha: float, tau: float, t) -> np.ndarray:
    """Affine reparametrisation of time, t* = alpha * (t - tau)."""
    return alpha * (np.asarray(t, dtype=float) - tau)


def _render_figure(size, shape, angle_deg, rotation, translation, stroke_width) -> np.ndarray:
    """Rasterise one stick figure with anti-aliased strokes directly in the moved frame."""
    s = size / 64.0
    rr, cc = _grid(size)

    def move(p):
        return forward_point(np.asarray(p) * s, (size, size), rotation, translation)

    head = move(shape["head"])
    neck, hip = move(shape["neck"]), move(shape["hip"])
    shoulder = move(shape["shoulder"])
    theta = np.deg2rad(angle_deg)
    sh0 = np.asarray(shape["shoulder"])
    left_hand = move(sh0 + shape["arm_len"] * np.array([-np.sin(theta), np.cos(theta)]))
    phi = np.deg2rad(shape["right_arm_deg"])
    right_hand = move(sh0 + shape["arm_len"] * np.array([-np.sin(phi), -np.cos(phi)]))
    legs = [move(p) for p in shape["feet"]]

    half = stroke_width * s / 2.0
    img = np.clip(shape["head_r"] * s + 0.5 - np.hypot(rr - head[0], cc - head[1]), 0.0, 1.0)
    segments = [(neck, hip), (shoulder, left_hand), (shoulder, right_hand)] + [(hip, f) for f in legs]
    for a, b in segments:
        img = np.maximum(img, np.clip(half + 0.5 - _segment_distance(rr, cc, a, b), 0.0, 1.0))
    return np.clip(img * shape["ink"], 0.0, 1.0)


def _starmen_shape(rng: np.random.Generator) -> dict:
    torso = 18.0 * rng.uniform(0.9, 1.1)
    neck = np.array([19.0 + rng.uniform(-1, 1), 32.0])
    hip = neck + np.array([torso, 0.0])
    leg = 16.0 * rng.uniform(0.85, 1.1)
    spread = rng.uniform(5.0, 9.0)
    return {
        "head": np.array([neck[0] - 5.5, 32.0]),
        "head_r": rng.uniform(4.0, 5.5),
        "neck": neck,
        "hip": hip,
        "shoulder": neck + np.array([4.0, 0.0]),
        "arm_len": rng.uniform(12.0, 15.0),
        "right_arm_deg": rng.uniform(-60.0, -25.0),
        "feet": [hip + np.array([leg, -spread]), hip + np.array([leg, spread])],
        "ink": rng.uniform(0.8, 1.0),
    }


def generate_starmen(
    n_subjects: int = 200,
    timepoints_per_subject: int = 10,
    image_size: int = 64,
    seed: int = 0,
    config: Optional[StarmenConfig] = None,
) -> LongitudinalDataset:
    """Stick-figure dataset; ``target`` is the progression t*."""
    cfg = config or StarmenConfig()
    cfg = StarmenConfig(**{**asdict(cfg), "n_subjects": n_subjects, "timepoints": timepoints_per_subject,
                           "image_size": image_size})
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if timepoints_per_subject < 2:
        raise ValueError("timepoints_per_subject must be >= 2")
    if image_size < 32:
        raise ValueError(f"image_size {image_size} too small to render the figure (need >= 32)")

    samples: List[LongitudinalSample] = []
    width = len(str(n_subjects - 1))
    for subj in range(n_subjects):
        rng = _subject_rng(seed, subj, _STARMEN_STREAM)
        alpha = rng.uniform(*cfg.alpha_range)
        tau = rng.uniform(*cfg.tau_range)
        shape = _starmen_shape(rng)
        sid = f"starman{subj:0{width}d}"
        for t in range(cfg.timepoints):
            t_star = float(progression(alpha, tau, t))
            angle = float(arm_angle(t_star, cfg))
            rot = float(rng.uniform(-cfg.rotation, cfg.rotation))
            shift = (float(rng.uniform(-cfg.translation, cfg.translation)),
                     float(rng.uniform(-cfg.translation, cfg.translation)))
            img = _render_figure(cfg.image_size, shape, angle, rot, shift, cfg.stroke_width)
            samples.append(
                LongitudinalSample(
                    subject_id=sid,
                    time_index=t,
                    target=t_star,
                    image=img[None],
                    meta={"alpha": alpha, "tau": tau, "arm_deg": angle, "rotation": rot,
                          "translation": list(shift)},
                )
            )
    return LongitudinalDataset(samples, name="starmen", config={"generator": "starmen", "seed": seed,
                                                                 **_jsonable(asdict(cfg))})


# -- Tumor ---------------------------------------------------------------------
@dataclass
class TumorConfig:
    n_subjects: int = 100
    image_size: int = 96
    timepoints_range: Tuple[int, int] = (3, 5)
    radius0_range: Tuple[float, float] = (5.0, 12.0)  # px at image_size 96
    growth_range: Tuple[float, float] = (1.5, 4.0)  # px per visit at image_size 96
    intensity_range: Tuple[float, float] = (0.15, 0.4)
    rotation: float = 10.0
    translation: float = 10.0
    placement_attempts: int = 32

    def __post_init__(self):
        if self.growth_range[0] <= 0:
            raise ValueError("growth_range must be strictly positive so radii increase")
        if self.timepoints_range[0] < 2:
            raise ValueError("need at least 2 time points per subject")


def _brain(rng: np.random.Generator, size: int):
    """Textured elliptical tissue image and its binary mask."""
    rr, cc = _grid(size)
    centre = np.array([(size - 1) / 2.0 + rng.uniform(-2, 2), (size - 1) / 2.0 + rng.uniform(-2, 2)])
    a = size * rng.uniform(0.38, 0.43)
    b = size * rng.uniform(0.31, 0.36)
    rho = np.hypot((rr - centre[0]) / a, (cc - centre[1]) / b)
    edge = np.clip((1.0 - rho) * min(a, b) + 0.5, 0.0, 1.0)

    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 20.0)
    fine = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.0)
    coarse /= coarse.std() or 1.0
    fine /= fine.std() or 1.0
    tissue = rng.uniform(0.35, 0.5) + 0.07 * coarse + 0.03 * fine

    # ventricle-like dark core
    va, vb = size * rng.uniform(0.05, 0.1), size * rng.uniform(0.03, 0.06)
    vrho = np.hypot((rr - centre[0]) / va, (cc - centre[1]) / vb)
    tissue -= 0.15 * np.clip((1.0 - vrho) * min(va, vb) + 0.5, 0.0, 1.0)
    return np.clip(tissue, 0.0, 1.0) * edge, rho < 1.0


def disc_mask(size: int, centre_rc, radius: float) -> np.ndarray:
    rr, cc = _grid(size)
    return np.hypot(rr - centre_rc[0], cc - centre_rc[1]) <= radius


def generate_tumor(
    n_subjects: int = 100,
    image_size: int = 96,
    seed: int = 0,
    config: Optional[TumorConfig] = None,
) -> LongitudinalDataset:
    """Growing-disc dataset; ``target`` is the disc radius in pixels."""
    cfg = config or TumorConfig()
    cfg = TumorConfig(**{**asdict(cfg), "n_subjects": n_subjects, "image_size": image_size})
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if image_size < 32:
        raise ValueError(f"image_size {image_size} too small (need >= 32)")
    size = cfg.image_size
    scale = size / 96.0
    rr, cc = _grid(size)

    samples: List[LongitudinalSample] = []
    width = len(str(n_subjects - 1))
    for subj in range(n_subjects):
        rng = _subject_rng(seed, subj, _TUMOR_STREAM)
        for regen in range(100):
            background, tissue = _brain(rng, size)
            n_t = int(rng.integers(cfg.timepoints_range[0], cfg.timepoints_range[1] + 1))
            r0 = rng.uniform(*cfg.radius0_range) * scale
            growth = rng.uniform(*cfg.growth_range) * scale
            radii = r0 + growth * np.arange(n_t)
            depth = ndimage.distance_transform_edt(tissue)
            inside = np.argwhere(tissue)
            centre = None
            for _ in range(cfg.placement_attempts):
                cand = inside[rng.integers(len(inside))].astype(float)
                if depth[int(cand[0]), int(cand[1])] >= radii[-1] + 1.0:
                    centre = cand
                    break
            if centre is not None:
                break
            log.info("subject %d: disc of radius %.1f did not fit, regenerating (%d)", subj, radii[-1], regen)
        else:
            raise RuntimeError(f"subject {subj}: could not place a disc after 100 regenerations")

        intensity = rng.uniform(*cfg.intensity_range)
        dist = np.hypot(rr - centre[0], cc - centre[1])
        sid = f"tumor{subj:0{width}d}"
        for k, r in enumerate(radii):
            cover = np.clip(r + 0.5 - dist, 0.0, 1.0)
            base = np.clip(background + intensity * cover, 0.0, 1.0)
            rot = float(rng.uniform(-cfg.rotation, cfg.rotation))
            shift = (float(rng.uniform(-cfg.translation, cfg.translation)),
                     float(rng.uniform(-cfg.translation, cfg.translation)))
            img = np.clip(rigid_warp(base, rot, shift), 0.0, 1.0)
            moved = forward_point(centre, (size, size), rot, shift)
            cur = disc_mask(size, moved, r)
            prev = disc_mask(size, moved, radii[k - 1]) if k else np.zeros_like(cur)
            samples.append(
                LongitudinalSample(
                    subject_id=sid,
                    time_index=k,
                    target=float(r),
                    image=img[None],
                    change_mask=cur & ~prev,
                    meta={"centre": centre.tolist(), "radii": radii[: k + 1].tolist(), "intensity": intensity,
                          "rotation": rot, "translation": list(shift)},
                )
            )
    return LongitudinalDataset(samples, name="tumor", config={"generator": "tumor", "seed": seed,
                                                               **_jsonable(asdict(cfg))})


def pair_change_mask(earlier: LongitudinalSample, later: LongitudinalSample, frame: str = "later") -> np.ndarray:
    """Region gained between two visits, drawn in the chosen image's frame.

    Uses the disc geometry recorded by :func:`generate_tumor` when present;
    otherwise falls back to the stored per-visit change masks.
    """
    ref = later if frame == "later" else earlier
    size = ref.image.shape[-1]
    if "centre" in later.meta and "radii" in later.meta:
        moved = forward_point(later.meta["centre"], (size, size), ref.meta["rotation"], ref.meta["translation"])
        r_late = later.meta["radii"][-1]
        r_early = earlier.meta["radii"][-1]
        return disc_mask(size, moved, r_late) & ~disc_mask(size, moved, r_early)
    if ref.change_mask is None:
        raise ValueError(f"sample {ref.subject_id}/{ref.time_index} has no change mask")
    return ref.change_mask


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
