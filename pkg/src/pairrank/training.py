"""Pairwise training protocol, learning-rate grid search and data-size sweep."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import AdamState, NonFiniteError, Tensor, adam_step, bce_with_logits_loss, mse_loss
from .data.augment import AugmentRanges, augment
from .data.dataset import LongitudinalDataset, PairBatch, sample_pairs
from .model import ModelState, csr_head, feature_extract, features, freeze_backbone, rank_head

log = logging.getLogger(__name__)

TASKS = ("supervised", "self_supervised", "csr")
ABLATIONS = ("none", "frozen_backbone", "untrained")
LR_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)


@dataclass
class TrainConfig:
    task: str = "self_supervised"
    lr: float = 1e-3
    lr_grid: Tuple[float, ...] = LR_GRID
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 200
    seed: int = 0
    ablation: str = "none"
    # None: every within-subject pair (both orders) each epoch; k: k fresh random pairs per subject per epoch
    pairs_per_subject: Optional[int] = None
    augment: Optional[AugmentRanges] = None
    divergence_threshold: float = 1e6
    # epoch cap for each grid-search run; the chosen lr is then retrained with max_epochs (None: no cap)
    grid_epochs: Optional[int] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.grid_epochs is not None and self.grid_epochs < 1:
            raise ValueError("grid_epochs must be >= 1")
        if isinstance(self.augment, dict):
            self.augment = AugmentRanges(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in self.augment.items()})
        self.lr_grid = tuple(float(v) for v in self.lr_grid)


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: float = float("nan")
    best_epoch: int = 0  # 1-based; 0 when no epoch ran
    stopping_epoch: int = 0
    wall_clock: float = 0.0
    status: str = "ok"

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else float("nan")

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([e, repr(tl), repr(vl)])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


# -- losses -------------------------------------------------------------------
def pair_loss(task: str, scores: Tensor, pairs: PairBatch) -> Tensor:
    """Scores are w . (f(second) - f(first)): the predicted target change / log-odds that the second is later."""
    if task == "supervised":
        return mse_loss(scores, pairs.delta)
    return bce_with_logits_loss(scores, pairs.label)


def validation_loss(model: ModelState, dataset: LongitudinalDataset, task: str, split: str = "val") -> float:
    """Training objective over every validation pair (or image, for CSR) in infer mode."""
    if task == "csr":
        idx = dataset.indices(split)
        f = Tensor(features(model, dataset.images(idx)))
        return float(mse_loss(csr_head(model, f), dataset.targets(idx)).data)
    pairs = sample_pairs(dataset, split, "both_directions")
    if len(pairs) == 0:
        raise ValueError(f"split {split!r} has no pairs")
    uniq, inv = np.unique(np.concatenate([pairs.idx_a, pairs.idx_b]), return_inverse=True)
    f = Tensor(features(model, dataset.images(uniq)))
    n = len(pairs)
    scores = rank_head(model, f, inv[n:], inv[:n])
    return float(pair_loss(task, scores, pairs).data)


# -- training -------------------------------------------------------------------
def _epoch_units(dataset, config: TrainConfig, epoch: int) -> Tuple[PairBatch, np.ndarray]:
    """Training pairs for one epoch, grouped so both orientations of a pair share a batch."""
    seed = int(np.random.SeedSequence([config.seed, epoch, 0xE90C]).generate_state(1)[0])
    if config.pairs_per_subject is None:
        pairs = sample_pairs(dataset, "train", "both_directions")
    else:
        pairs = sample_pairs(dataset, "train", "random_k", seed=seed, k=config.pairs_per_subject)
    order = np.random.default_rng(seed).permutation(len(pairs) // 2)
    rows = np.stack([2 * order, 2 * order + 1], axis=1).reshape(-1)
    return pairs, rows


def _batch_images(dataset, idx, config: TrainConfig, rng) -> np.ndarray:
    imgs = dataset.images(idx)
    if config.augment is not None:
        imgs = np.stack([augment(im, config.augment.sample(rng)) for im in imgs])
    return imgs


def _snapshot(model: ModelState) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    return {k: v.data.copy() for k, v in model.params.items()}, {k: v.copy() for k, v in model.buffers.items()}


def _restore(model: ModelState, snap) -> None:
    params, buffers = snap
    for k, v in params.items():
        model.params[k].data[...] = v
    for k, v in buffers.items():
        model.buffers[k][...] = v


def train(
    model: ModelState,
    dataset: LongitudinalDataset,
    config: TrainConfig,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> Tuple[ModelState, TrainHistory]:
    """Fit ``model`` on the train split with early stopping on the val split.

    Returns a new model (the input is not modified) holding the weights of the
    epoch with the lowest validation loss.
    """
    start = time.perf_counter()
    history = TrainHistory(lr=float(config.lr))
    model = model.copy()
    if config.ablation == "untrained" or config.max_epochs == 0:
        history.wall_clock = time.perf_counter() - start
        return model, history
    if config.ablation == "frozen_backbone":
        model = freeze_backbone(model)

    task = config.task
    head = "csr" if task == "csr" else "rank"
    if task == "csr" and not model.has_csr_head:
        raise ValueError("csr task needs a model initialised with a CSR head")
    train_idx = dataset.indices("train")
    if not train_idx:
        raise ValueError("train split is empty")
    if task != "csr" and len(sample_pairs(dataset, "train", "all_ordered")) == 0:
        raise ValueError("train split has no within-subject pairs")
    if not dataset.indices("val"):
        raise ValueError("val split is empty")

    if task == "csr":
        # start the intercept at the mean target so the few steps per epoch go into the features
        model.params["csr.b"].data[:] = float(np.mean(dataset.targets(train_idx)))
    names = model.trainable_names(head)
    params = [model.params[k] for k in names]
    opt = AdamState()
    # frozen backbone without augmentation: features never change
    cached = None
    if model.frozen and config.augment is None:
        cached = features(model, dataset.images())

    best, best_snap, wait = np.inf, _snapshot(model), 0
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, 0xA06]))
        losses, weights = [], []
        if task == "csr":
            order = np.asarray(train_idx)[rng.permutation(len(train_idx))]
            batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        else:
            pairs, rows = _epoch_units(dataset, config, epoch)
            batches = [rows[i : i + config.batch_size] for i in range(0, len(rows), config.batch_size)]

        for batch in batches:
            try:
                if task == "csr":
                    uniq, inv = batch, np.arange(len(batch))
                else:
                    bp = pairs.take(batch)
                    uniq, inv = np.unique(np.concatenate([bp.idx_a, bp.idx_b]), return_inverse=True)
                if cached is not None:
                    feats = Tensor(cached[uniq])
                else:
                    imgs = _batch_images(dataset, uniq, config, rng)
                    feats = feature_extract(model, imgs, training=True, grad=True).feature
                if task == "csr":
                    loss = mse_loss(csr_head(model, feats), dataset.targets(uniq))
                else:
                    n = len(bp)
                    loss = pair_loss(task, rank_head(model, feats, inv[n:], inv[:n]), bp)
                value = float(loss.data)
                if not np.isfinite(value) or value > config.divergence_threshold:
                    raise NonFiniteError(f"loss {value}")
                loss.backward()
                adam_step(params, [p.grad for p in params], opt, config.lr)
            except NonFiniteError as exc:
                history.status = "diverged"
                history.stopping_epoch = epoch
                history.wall_clock = time.perf_counter() - start
                raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", history) from exc
            finally:
                for p in params:
                    p.zero_grad()
            losses.append(value)
            weights.append(len(batch))

        try:
            val = validation_loss(model, dataset, task)
        except NonFiniteError as exc:
            val = float("inf")
        train_loss = float(np.average(losses, weights=weights))
        history.train_loss.append(train_loss)
        history.val_loss.append(val)
        history.stopping_epoch = epoch
        if progress is not None:
            progress(epoch, train_loss, val)
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val)
        if not np.isfinite(val) or val > config.divergence_threshold:
            history.status = "diverged"
            history.wall_clock = time.perf_counter() - start
            raise TrainingDiverged(f"validation loss {val} in epoch {epoch}", history)
        if val < best:
            best, best_snap, wait = val, _snapshot(model), 0
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                break

    _restore(model, best_snap)
    history.wall_clock = time.perf_counter() - start
    return model, history


# -- learning-rate grid -----------------------------------------------------------
@dataclass
class GridResult:
    best_lr: float
    results: Dict[float, dict]
    model: ModelState
    history: TrainHistory

    def to_json(self) -> dict:
        return {
            "best_lr": self.best_lr,
            "final": {"best_val_loss": self.history.best_val_loss, "epochs": self.history.stopping_epoch,
                      "best_epoch": self.history.best_epoch},
            "runs": [
                {"lr": lr, "status": r["status"], "best_val_loss": r["best_val_loss"],
                 "epochs": r["epochs"], "best_epoch": r["best_epoch"]}
                for lr, r in sorted(self.results.items(), reverse=True)
            ],
        }

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))


def grid_search_lr(
    model_factory: Callable[[], ModelState],
    dataset: LongitudinalDataset,
    config: TrainConfig,
    grid: Optional[Sequence[float]] = None,
) -> GridResult:
    """Train one model per learning rate from the same initialisation; keep the lowest best-val-loss run.

    With ``config.grid_epochs`` set, every grid run stops after that many
    epochs and the winning lr is retrained from scratch for ``max_epochs``.
    """
    grid = tuple(config.lr_grid if grid is None else grid)
    if not grid:
        raise ValueError("learning-rate grid is empty")
    capped = config.grid_epochs is not None and config.grid_epochs < config.max_epochs
    results, fitted = {}, {}
    for lr in grid:
        cfg = TrainConfig(**{**asdict(config), "lr": float(lr), "augment": config.augment})
        if capped:
            cfg.max_epochs = config.grid_epochs
        try:
            model, hist = train(model_factory(), dataset, cfg)
            fitted[lr] = (model, hist)
            results[lr] = {"status": "ok", "best_val_loss": hist.best_val_loss,
                           "epochs": hist.stopping_epoch, "best_epoch": hist.best_epoch}
        except TrainingDiverged as exc:
            results[lr] = {"status": "diverged", "best_val_loss": None,
                           "epochs": exc.history.stopping_epoch, "best_epoch": exc.history.best_epoch}
        log.info("lr %g: %s", lr, results[lr])
    ok = [lr for lr in grid if results[lr]["status"] == "ok" and np.isfinite(results[lr]["best_val_loss"])]
    if not ok:
        raise RuntimeError(f"every learning rate diverged: {results}")
    best_lr = min(ok, key=lambda lr: (results[lr]["best_val_loss"], lr))
    if capped:
        model, hist = train(model_factory(), dataset, TrainConfig(**{**asdict(config), "lr": float(best_lr),
                                                                   "augment": config.augment}))
    else:
        model, hist = fitted[best_lr]
    return GridResult(best_lr=float(best_lr), results=results, model=model, history=hist)


# -- training-size sweep ----------------------------------------------------------
def subsample_train(dataset: LongitudinalDataset, fraction: float, seed: int = 0) -> LongitudinalDataset:
    """Keep a nested, seeded fraction of training subjects; val/test untouched."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    train_ids = list(dataset.subject_indices("train"))
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5C1]) ).permutation(len(train_ids))
    n_keep = int(round(fraction * len(train_ids)))
    keep = {train_ids[i] for i in order[:n_keep]}
    others = [sid for sid, tag in dataset.split.items() if tag != "train"]
    return dataset.subset_subjects(sorted(keep) + others)


def data_size_sweep(
    dataset: LongitudinalDataset,
    fractions: Sequence[float],
    config: TrainConfig,
    model_factory: Callable[[], ModelState],
    method: Optional[str] = None,
) -> Dict[float, "EvalReport"]:
    """Train and evaluate once per training-subject fraction, with fixed val/test subjects."""
    from .evaluation.report import evaluate

    method = method or ("csr" if config.task == "csr" else "pairnet")
    reports = {}
    for frac in fractions:
        sub = subsample_train(dataset, frac, config.seed) if frac < 1.0 else dataset
        if not sub.indices("train") or (config.task != "csr" and len(sample_pairs(sub, "train")) == 0):
            log.warning("fraction %g leaves no training pairs; skipped", frac)
            continue
        model, _ = train(model_factory(), sub, config)
        reports[float(frac)] = evaluate(model, sub, method=method)
    return reports


# -- end-to-end gradient check ------------------------------------------------------
def loss_gradcheck(task: str = "self_supervised", seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                   n_pairs: int = 4, preset: str = "tiny"):
    """Finite-difference check of the full training loss w.r.t. every parameter, train-mode normalisation."""
    from .autodiff import finite_difference_check
    from .model import BackboneConfig, ModelState, init_weights

    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    cfg = BackboneConfig.preset(preset)
    base = init_weights(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, (n_pairs + 1, cfg.input_channels, cfg.input_size, cfg.input_size))
    first, second = np.arange(n_pairs), np.arange(1, n_pairs + 1)
    first[1::2], second[1::2] = second[1::2].copy(), first[1::2].copy()  # mix both orientations
    label = (second > first).astype(int)
    delta = rng.standard_normal(n_pairs)
    targets = rng.standard_normal(n_pairs + 1)
    head = "csr" if task == "csr" else "rank"
    names = [k for k in base.trainable_names(head)]

    def op(*leaves):
        model = ModelState(base.config, dict(zip(names, leaves)),
                           {k: v.copy() for k, v in base.buffers.items()})
        feats = feature_extract(model, images, training=True, grad=True).feature
        if task == "csr":
            return mse_loss(csr_head(model, feats), targets)
        batch = PairBatch(first, second, ["s"] * n_pairs, label, delta, delta == 0)
        return pair_loss(task, rank_head(model, feats, second, first), batch)

    return finite_difference_check(op, [base.params[k].data for k in names], eps=eps, tol=tol, seed=seed,
                                   name=f"pairnet_loss[{task}]")
