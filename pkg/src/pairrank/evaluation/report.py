"""Dataset-level evaluation: correlation, ordering AUC, Dice curves, robustness and report files."""

from __future__ import annotations

import csv
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..data.augment import AugmentParams, augment
from ..data.dataset import LongitudinalDataset, sample_pairs
from ..data.synth import pair_change_mask
from ..model import ModelState, feature_extract, features, score_from_features
from .cam import combine, render_overlay, weighted_cam
from .metrics import DICE_THRESHOLDS, auc, binarize, dice, pearson_r

METHODS = ("pairnet", "csr")

# test-time perturbations, each applied to the later image of every test pair
ROBUSTNESS_TRANSFORMS: "OrderedDict[str, AugmentParams]" = OrderedDict(
    [
        ("translate_x_+10", AugmentParams(translation=(10.0, 0.0))),
        ("translate_x_-10", AugmentParams(translation=(-10.0, 0.0))),
        ("translate_y_+10", AugmentParams(translation=(0.0, 10.0))),
        ("translate_y_-10", AugmentParams(translation=(0.0, -10.0))),
        ("rotate_+10", AugmentParams(rotation=10.0)),
        ("rotate_-10", AugmentParams(rotation=-10.0)),
        ("contrast_0.8", AugmentParams(contrast=0.8)),
        ("contrast_1.2", AugmentParams(contrast=1.2)),
        ("brightness_0.8", AugmentParams(brightness=0.8)),
        ("brightness_1.2", AugmentParams(brightness=1.2)),
    ]
)


@dataclass
class EvalReport:
    method: str
    split: str
    pearson_r: float
    auc: Optional[float] = None
    mse: Optional[float] = None
    n_pairs: int = 0
    dice_curve: Optional[List[Tuple[float, float]]] = None
    robustness: Optional[Dict[str, float]] = None
    pairs: List[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        if self.dice_curve is not None:
            d["dice_curve"] = [[t, v] for t, v in self.dice_curve]
        return d


def _head_weights(model: ModelState, method: str) -> np.ndarray:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "csr":
        if not model.has_csr_head:
            raise ValueError("model has no CSR head")
        return model.params["csr.w"].data
    return model.params["rank.w"].data


def predicted_change(model: ModelState, image_a, image_b, method: str = "pairnet") -> float:
    """Predicted target change going from ``image_a`` to ``image_b``.

    pairnet: the pre-sigmoid score w . (f(b) - f(a)); csr: y(b) - y(a), whose bias cancels.
    """
    w = _head_weights(model, method)
    f = features(model, np.stack([np.asarray(image_a, np.float64), np.asarray(image_b, np.float64)]))
    return float(score_from_features(w, f[1], f[0]))


class _SplitCache:
    """Infer-mode features of one split, keyed by dataset index."""

    def __init__(self, model: ModelState, dataset: LongitudinalDataset, split: Optional[str], activations=False):
        self.idx = dataset.indices(split)
        if not self.idx:
            raise ValueError(f"split {split!r} is empty")
        self.pos = {i: k for k, i in enumerate(self.idx)}
        imgs = dataset.images(self.idx)
        if activations:
            feats, acts = [], []
            for s in range(0, len(imgs), 64):
                out = feature_extract(model, imgs[s : s + 64])
                feats.append(out.feature.data)
                acts.append(out.activations.data)
            self.feats, self.acts = np.concatenate(feats), np.concatenate(acts)
        else:
            self.feats, self.acts = features(model, imgs), None

    def rows(self, indices) -> np.ndarray:
        return np.array([self.pos[int(i)] for i in indices], dtype=int)


def _ordered_pairs(dataset, split):
    pairs = sample_pairs(dataset, split, "all_ordered")
    return pairs.take(np.flatnonzero((pairs.label == 1) & (pairs.delta > 0)))


def evaluate(
    model: ModelState,
    dataset: LongitudinalDataset,
    method: str = "pairnet",
    split: str = "test",
    dice_thresholds: Optional[Sequence[float]] = None,
    basis: str = "later",
    robustness: bool = False,
) -> EvalReport:
    """Correlation on strictly ordered pairs, AUC on both orientations (ties excluded), optional extras."""
    w = _head_weights(model, method)
    cache = _SplitCache(model, dataset, split)
    pairs = _ordered_pairs(dataset, split)
    if len(pairs) < 2:
        raise ValueError(f"split {split!r} has fewer than two strictly ordered pairs")
    change = score_from_features(w, cache.feats[cache.rows(pairs.idx_b)], cache.feats[cache.rows(pairs.idx_a)])
    r = pearson_r(change, pairs.delta)

    both = sample_pairs(dataset, split, "both_directions")
    scores = score_from_features(w, cache.feats[cache.rows(both.idx_b)], cache.feats[cache.rows(both.idx_a)])
    area = auc(scores, both.label, exclude=both.tie)

    mse = None
    if method == "csr":
        pred = cache.feats @ w + model.params["csr.b"].data[0]
        mse = float(np.mean((pred - dataset.targets(cache.idx)) ** 2))

    s = dataset.samples
    records = [
        {"subject": s[a].subject_id, "time_a": s[a].time_index, "time_b": s[b].time_index,
         "gt_delta": float(d), "predicted_change": float(c), "label": 1, "score": float(c)}
        for a, b, d, c in zip(pairs.idx_a, pairs.idx_b, pairs.delta, change)
    ]
    report = EvalReport(method=method, split=split, pearson_r=r, auc=area, mse=mse, n_pairs=len(pairs),
                        pairs=records)
    if dice_thresholds is not None:
        report.dice_curve = dice_sweep(model, dataset, dice_thresholds, method, split, basis)
    if robustness:
        report.robustness = robustness_sweep(model, dataset, method=method, split=split)
    return report


def _has_masks(sample) -> bool:
    return sample.change_mask is not None or ("centre" in sample.meta and "radii" in sample.meta)


def dice_sweep(
    model: ModelState,
    dataset: LongitudinalDataset,
    thresholds: Sequence[float] = DICE_THRESHOLDS,
    method: str = "pairnet",
    split: str = "test",
    basis: str = "later",
) -> List[Tuple[float, float]]:
    """Mean Dice between binarised change maps and true change masks over all ordered pairs."""
    thresholds = [float(t) for t in thresholds]
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {t}")
    w = _head_weights(model, method)
    pairs = _ordered_pairs(dataset, split)
    if len(pairs) == 0:
        raise ValueError(f"split {split!r} has no ordered pairs")
    s = dataset.samples
    if not all(_has_masks(s[i]) for i in np.concatenate([pairs.idx_a, pairs.idx_b])):
        raise ValueError("dataset has no change masks for the evaluated pairs")
    cache = _SplitCache(model, dataset, split, activations=True)
    size = s[pairs.idx_a[0]].image.shape[-2:]
    totals = np.zeros(len(thresholds))
    for a, b in zip(pairs.idx_a, pairs.idx_b):
        ra, rb = cache.pos[int(a)], cache.pos[int(b)]
        if method == "pairnet":
            weights = np.abs(w * (cache.feats[ra] - cache.feats[rb]))
        else:
            weights = w
        amap = combine(weights, cache.acts[ra], cache.acts[rb], basis, size).normalized
        truth = pair_change_mask(s[a], s[b], frame="earlier" if basis == "earlier" else "later")
        totals += [dice(binarize(amap, t), truth) for t in thresholds]
    return [(t, float(v)) for t, v in zip(thresholds, totals / len(pairs))]


def robustness_sweep(
    model: ModelState,
    dataset: LongitudinalDataset,
    transforms: Optional[Dict[str, AugmentParams]] = None,
    method: str = "pairnet",
    split: str = "test",
) -> "OrderedDict[str, float]":
    """Pearson r with each fixed transform applied to the later image of every ordered pair."""
    transforms = ROBUSTNESS_TRANSFORMS if transforms is None else transforms
    w = _head_weights(model, method)
    cache = _SplitCache(model, dataset, split)
    pairs = _ordered_pairs(dataset, split)
    fa = cache.feats[cache.rows(pairs.idx_a)]
    rows_b = cache.rows(pairs.idx_b)
    out: "OrderedDict[str, float]" = OrderedDict()
    out["clean"] = pearson_r(score_from_features(w, cache.feats[rows_b], fa), pairs.delta)
    images = dataset.images(cache.idx)
    for name, params in transforms.items():
        moved = features(model, np.stack([augment(im, params) for im in images]))
        out[name] = pearson_r(score_from_features(w, moved[rows_b], fa), pairs.delta)
    return out


# -- files ---------------------------------------------------------------------
def write_report(report: EvalReport, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    cols = ["subject", "time_a", "time_b", "gt_delta", "predicted_change", "label", "score"]
    with open(out / "pairs.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for rec in report.pairs:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in (rec[c] for c in cols)])
    if report.dice_curve is not None:
        with open(out / "dice.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["threshold", "mean_dice"])
            for t, v in report.dice_curve:
                wr.writerow([f"{t:.2f}", repr(v)])
    if report.robustness is not None:
        with open(out / "robustness.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["transform", "pearson_r"])
            for k, v in report.robustness.items():
                wr.writerow([k, repr(v)])
    return out


def render_pair_overlays(
    model: ModelState,
    dataset: LongitudinalDataset,
    out_dir: Union[str, Path],
    pairs: Optional[Sequence[Tuple[str, int, int]]] = None,
    split: str = "test",
    basis: str = "later",
    alpha: float = 0.5,
    limit: Optional[int] = None,
) -> List[Path]:
    """One ``{subject}_{tA}_{tB}.png`` overlay per requested pair (default: all ordered pairs of the split)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lookup = {(s.subject_id, s.time_index): i for i, s in enumerate(dataset.samples)}
    if pairs is None:
        ordered = sample_pairs(dataset, split, "all_ordered")
        s = dataset.samples
        pairs = [(s[a].subject_id, s[a].time_index, s[b].time_index) for a, b in zip(ordered.idx_a, ordered.idx_b)]
    if limit is not None:
        pairs = list(pairs)[:limit]
    written = []
    for sid, ta, tb in pairs:
        missing = [t for t in (ta, tb) if (sid, t) not in lookup]
        if missing:
            raise KeyError(f"no image for subject {sid} at time index {missing[0]}")
        ia, ib = lookup[sid, ta], lookup[sid, tb]
        img_a, img_b = dataset.samples[ia].image, dataset.samples[ib].image
        cam = weighted_cam(model, img_a, img_b, basis=basis, pair=(sid, ta, tb))
        base = img_a if basis == "earlier" else img_b
        written.append(render_overlay(base, cam.normalized, out / f"{sid}_{ta}_{tb}.png", alpha=alpha))
    return written
