"""Longitudinal samples, subject-level splits and within-subject pair sampling."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass
class LongitudinalSample:
    subject_id: str
    time_index: int
    target: float  # progression t* for Starmen, disc radius for Tumor, external target otherwise
    image: np.ndarray  # 1 x H x W, values in [0, 1]
    change_mask: Optional[np.ndarray] = None  # H x W bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        if img.ndim != 3:
            raise ValueError(f"image must be C x H x W, got shape {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"image values of {self.subject_id}/{self.time_index} outside [0, 1]")
        self.image = img
        if self.change_mask is not None:
            mask = np.asarray(self.change_mask, dtype=bool)
            if mask.shape != img.shape[1:]:
                raise ValueError(f"change_mask shape {mask.shape} does not match image {img.shape[1:]}")
            self.change_mask = mask


@dataclass
class LongitudinalDataset:
    samples: List[LongitudinalSample]
    name: str = "dataset"
    config: dict = field(default_factory=dict)
    split: Dict[str, str] = field(default_factory=dict)  # subject_id -> train/val/test

    def __post_init__(self):
        self.samples = sorted(self.samples, key=lambda s: (s.subject_id, s.time_index))
        for sid, group in self.by_subject().items():
            ts = [self.samples[i].time_index for i in group]
            if len(set(ts)) != len(ts):
                raise ValueError(f"subject {sid} has duplicate time_index values {ts}")

    def __len__(self) -> int:
        return len(self.samples)

    def subjects(self) -> List[str]:
        return list(self.by_subject())

    def by_subject(self) -> "OrderedDict[str, List[int]]":
        """subject_id -> sample indices ordered by time."""
        groups: "OrderedDict[str, List[int]]" = OrderedDict()
        for i, s in enumerate(self.samples):
            groups.setdefault(s.subject_id, []).append(i)
        return groups

    def subject_indices(self, split: Optional[str] = None) -> "OrderedDict[str, List[int]]":
        groups = self.by_subject()
        if split is None:
            return groups
        if not self.split:
            raise ValueError("dataset has no split; call split_subjects first")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return OrderedDict((sid, idx) for sid, idx in groups.items() if self.split.get(sid) == split)

    def indices(self, split: Optional[str] = None) -> List[int]:
        return [i for idx in self.subject_indices(split).values() for i in idx]

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].image for i in idx])

    def targets(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.array([self.samples[i].target for i in idx], dtype=np.float64)

    def with_split(self, split: Dict[str, str]) -> "LongitudinalDataset":
        return LongitudinalDataset(self.samples, self.name, dict(self.config), dict(split))

    def subset_subjects(self, subject_ids: Sequence[str]) -> "LongitudinalDataset":
        keep = set(subject_ids)
        return LongitudinalDataset(
            [s for s in self.samples if s.subject_id in keep],
            self.name,
            dict(self.config),
            {k: v for k, v in self.split.items() if k in keep},
        )

    def summary(self) -> dict:
        t = self.targets()
        groups = self.by_subject()
        return {
            "n_subjects": len(groups),
            "n_images": len(self.samples),
            "target_mean": float(t.mean()),
            "target_std": float(t.std()),
            "timepoints_mean": float(np.mean([len(g) for g in groups.values()])),
            "split_counts": {k: sum(1 for v in self.split.values() if v == k) for k in SPLITS},
        }


def split_subjects(
    dataset: LongitudinalDataset, ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> LongitudinalDataset:
    """Assign every subject to exactly one of train/val/test."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    subjects = dataset.subjects()
    n = len(subjects)
    if n < sum(1 for r in ratios if r > 0):
        raise ValueError(f"cannot split {n} subjects into {len(ratios)} non-empty splits")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n - (ratios[1] > 0) - (ratios[2] > 0))
    n_val = min(n_val, n - n_train - (ratios[2] > 0))
    if ratios[1] > 0:
        n_val = max(n_val, 1)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5917])).permutation(n)
    tags = {}
    for rank, i in enumerate(order):
        tags[subjects[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return dataset.with_split(tags)


@dataclass
class PairBatch:
    """Within-subject image pairs as indices into a dataset.

    ``label`` is 1 when the second image is the later one; ``delta`` is
    target(second) - target(first); ``tie`` flags equal targets.
    """

    idx_a: np.ndarray
    idx_b: np.ndarray
    subject: List[str]
    label: np.ndarray
    delta: np.ndarray
    tie: np.ndarray

    def __len__(self) -> int:
        return len(self.idx_a)

    def take(self, rows) -> "PairBatch":
        rows = np.asarray(rows, dtype=int)
        return PairBatch(
            self.idx_a[rows],
            self.idx_b[rows],
            [self.subject[r] for r in rows],
            self.label[rows],
            self.delta[rows],
            self.tie[rows],
        )

    def __iter__(self) -> Iterator[Tuple[int, int, str, int, float, bool]]:
        for i in range(len(self)):
            yield (int(self.idx_a[i]), int(self.idx_b[i]), self.subject[i], int(self.label[i]),
                   float(self.delta[i]), bool(self.tie[i]))


def _make_batch(dataset: LongitudinalDataset, pairs: List[Tuple[int, int]]) -> PairBatch:
    s = dataset.samples
    ia = np.array([a for a, _ in pairs], dtype=int)
    ib = np.array([b for _, b in pairs], dtype=int)
    delta = np.array([s[b].target - s[a].target for a, b in pairs], dtype=np.float64)
    label = np.array([int(s[b].time_index > s[a].time_index) for a, b in pairs], dtype=int)
    return PairBatch(ia, ib, [s[a].subject_id for a, _ in pairs], label, delta, delta == 0.0)


PAIR_MODES = ("all_ordered", "both_directions", "random_k")


def sample_pairs(
    dataset: LongitudinalDataset,
    split: Optional[str] = None,
    mode: str = "all_ordered",
    seed: int = 0,
    k: int = 10,
) -> PairBatch:
    """Enumerate within-subject pairs of one split.

    ``all_ordered``: each earlier -> later pair once. ``both_directions``: each
    pair in both orders, the two orientations adjacent. ``random_k``: up to
    ``k`` distinct pairs per subject drawn with ``seed``, in both orders.
    """
    if mode not in PAIR_MODES:
        raise ValueError(f"unknown pair mode {mode!r}; choose from {PAIR_MODES}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1B2]))
    pairs: List[Tuple[int, int]] = []
    for sid, idx in dataset.subject_indices(split).items():
        ordered = [(idx[i], idx[j]) for i in range(len(idx)) for j in range(i + 1, len(idx))]
        if mode == "random_k" and len(ordered) > k:
            pick = np.sort(rng.choice(len(ordered), size=k, replace=False))
            ordered = [ordered[p] for p in pick]
        if mode == "all_ordered":
            pairs.extend(ordered)
        else:
            for a, b in ordered:
                pairs.append((a, b))
                pairs.append((b, a))
    return _make_batch(dataset, pairs)
