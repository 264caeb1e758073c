"""On-disk datasets: ``manifest.csv`` + 8-bit images + ``dataset.json``.

The manifest (header ``subject_id,time_index,target,image_path[,mask_path]``)
is the only contract needed to ingest external longitudinal data.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .dataset import LongitudinalDataset, LongitudinalSample

MANIFEST_FIELDS = ["subject_id", "time_index", "target", "image_path", "mask_path"]


def _to_uint8(plane: np.ndarray) -> np.ndarray:
    return np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(dataset: LongitudinalDataset, out_dir: Union[str, Path], image_format: str = "png") -> Path:
    """Write images, masks, manifest and a JSON sidecar with config, split and per-sample metadata."""
    if image_format not in ("png", "pgm"):
        raise ValueError("image_format must be 'png' or 'pgm'")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(s.change_mask is not None for s in dataset.samples)
    if has_masks:
        (out / "masks").mkdir(exist_ok=True)
    rows, meta = [], []
    for s in dataset.samples:
        stem = f"{s.subject_id}_t{s.time_index:03d}"
        img_rel = f"images/{stem}.{image_format}"
        Image.fromarray(_to_uint8(s.image[0]), mode="L").save(out / img_rel)
        mask_rel = ""
        if s.change_mask is not None:
            mask_rel = f"masks/{stem}.png"
            Image.fromarray(s.change_mask.astype(np.uint8) * 255, mode="L").save(out / mask_rel)
        rows.append([s.subject_id, s.time_index, repr(float(s.target)), img_rel, mask_rel])
        meta.append(s.meta)
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS if has_masks else MANIFEST_FIELDS[:4])
        for r in rows:
            writer.writerow(r if has_masks else r[:4])
    sidecar = {
        "name": dataset.name,
        "config": dataset.config,
        "split": dataset.split,
        "summary": dataset.summary(),
        "sample_meta": meta,
    }
    (out / "dataset.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return out


def _read_gray(path: Path, what: str) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"{what}: file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except UnidentifiedImageError as exc:
        raise ValueError(f"{what}: {path} is not a readable PNG/PGM image") from exc
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2) if mode != "LA" else arr[..., 0]
        peak = 255.0
    elif arr.dtype == np.uint8 or mode in ("L", "P"):
        peak = 255.0
    elif arr.dtype == bool:
        peak = 1.0
    else:
        peak = 65535.0 if arr.max() > 255 else 255.0
    return arr.astype(np.float64) / peak


def _resize(plane: np.ndarray, size: int) -> np.ndarray:
    if plane.shape == (size, size):
        return plane
    im = Image.fromarray(plane.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)


def load_manifest(path: Union[str, Path], input_size: Optional[int] = None) -> LongitudinalDataset:
    """Read a manifest CSV; image paths are relative to the manifest's directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    samples, seen = [], {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "time_index", "target", "image_path"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: manifest header lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            what = f"{path.name} row {lineno}"
            try:
                sid = row["subject_id"].strip()
                t = int(row["time_index"])
                target = float(row["target"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{what}: bad subject_id/time_index/target: {exc}") from exc
            if (sid, t) in seen:
                raise ValueError(f"{what}: duplicate time_index {t} for subject {sid} (first at row {seen[sid, t]})")
            seen[sid, t] = lineno
            img = _read_gray(root / row["image_path"], what)
            mask = None
            if row.get("mask_path"):
                mask = _read_gray(root / row["mask_path"], what) > 0.5
            if input_size is not None:
                img = _resize(img, input_size)
                if mask is not None:
                    mask = _resize(mask.astype(np.float64), input_size) > 0.5
            samples.append(LongitudinalSample(sid, t, target, img[None], mask))
    if not samples:
        raise ValueError(f"{path}: manifest has no rows")
    return LongitudinalDataset(samples, name=path.parent.name)


def load_dataset(directory: Union[str, Path], input_size: Optional[int] = None) -> LongitudinalDataset:
    """Manifest plus, when present, the ``dataset.json`` sidecar (config, split, sample metadata)."""
    directory = Path(directory)
    ds = load_manifest(directory / "manifest.csv" if directory.is_dir() else directory, input_size)
    sidecar = (directory if directory.is_dir() else directory.parent) / "dataset.json"
    if sidecar.is_file():
        info = json.loads(sidecar.read_text())
        meta = info.get("sample_meta")
        if meta is not None and len(meta) == len(ds.samples) and input_size in (None, ds.samples[0].image.shape[-1]):
            for s, m in zip(ds.samples, meta):
                s.meta = m
        ds = LongitudinalDataset(ds.samples, info.get("name", ds.name), info.get("config", {}), info.get("split", {}))
    return ds
