"""Siamese ranking network and the single-image regression baseline.

Both share a residual CNN backbone ending in global average pooling. The
ranking head is a bias-free linear map on the feature difference, so
``rank_score(a, b) = w . (f(a) - f(b))``.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, channel_norm, conv2d, global_avg_pool, relu
from .autodiff.nn import conv_output_size
from .autodiff.tensor import _stable_sigmoid, permute, reshape

CHECKPOINT_MAGIC = b"PAIRNET-CKPT-v1"
HEAD_INIT_SCALE = 0.1


@dataclass
class BackboneConfig:
    input_channels: int = 1
    input_size: int = 64
    stem_width: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stage_widths: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: Tuple[int, ...] = (2, 2, 2)
    stage_strides: Tuple[int, ...] = (2, 2, 2)
    standardize_input: bool = False  # per-image zero mean, unit variance before the stem

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        if not (len(self.stage_widths) == len(self.blocks_per_stage) == len(self.stage_strides)):
            raise ValueError("stage_widths, blocks_per_stage and stage_strides must have equal length")
        if not self.stage_widths or min(self.blocks_per_stage) < 1:
            raise ValueError("need at least one stage with at least one block")
        if self.final_map_size < 1:
            raise ValueError(f"input_size {self.input_size} too small for this backbone")

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def final_map_size(self) -> int:
        s = conv_output_size(self.input_size, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        for stride in self.stage_strides:
            s = conv_output_size(s, 3, stride, 1)
        return s

    @classmethod
    def preset(cls, name: str, **overrides) -> "BackboneConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


PRESETS = {
    "lite": dict(stem_width=16, stem_kernel=3, stem_stride=1, stage_widths=(16, 32, 64),
                 blocks_per_stage=(2, 2, 2), stage_strides=(2, 2, 2), input_size=64),
    # stem stride plus four strided stages stands in for ResNet-18's stem + max-pool
    "resnet18-like": dict(stem_width=64, stem_kernel=7, stem_stride=2, stage_widths=(64, 128, 256, 512),
                          blocks_per_stage=(2, 2, 2, 2), stage_strides=(1, 2, 2, 2), input_size=224),
    # test-sized network
    "tiny": dict(stem_width=4, stem_kernel=3, stem_stride=1, stage_widths=(4, 6),
                 blocks_per_stage=(1, 1), stage_strides=(2, 2), input_size=12),
}


@dataclass
class ModelState:
    config: BackboneConfig
    params: Dict[str, Tensor]
    buffers: Dict[str, np.ndarray]
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def has_csr_head(self) -> bool:
        return "csr.w" in self.params

    def backbone_names(self) -> List[str]:
        return [k for k in self.params if k.startswith("backbone.")]

    def trainable_names(self, head: str = "rank") -> List[str]:
        names = [k for k in self.params if k.startswith(head + ".")]
        if not self.frozen:
            names = self.backbone_names() + names
        return names

    def copy(self) -> "ModelState":
        return ModelState(
            config=copy.deepcopy(self.config),
            params={k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            frozen=self.frozen,
            meta=copy.deepcopy(self.meta),
        )

    def same_as(self, other: "ModelState") -> bool:
        """Bit-exact equality of every parameter and buffer."""
        if self.params.keys() != other.params.keys() or self.buffers.keys() != other.buffers.keys():
            return False
        return all(np.array_equal(self.params[k].data, other.params[k].data) for k in self.params) and all(
            np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers
        )


@dataclass
class FeatureOutput:
    feature: Tensor  # (N, D)
    activations: Tensor  # (N, D, h, w), final conv-layer maps


# -- construction ------------------------------------------------------------
def _block_layout(config: BackboneConfig):
    """Yield (prefix, in_width, out_width, stride) per residual block."""
    width = config.stem_width
    for s, (out_w, n_blocks, stride) in enumerate(
        zip(config.stage_widths, config.blocks_per_stage, config.stage_strides)
    ):
        for b in range(n_blocks):
            st = stride if b == 0 else 1
            yield f"backbone.s{s}.b{b}", width, out_w, st
            width = out_w


def init_weights(config: BackboneConfig, seed: int = 0, csr_head: bool = True) -> ModelState:
    """He-normal convolution kernels, unit/zero norm affine, fan-in scaled heads."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}

    def conv(name, o, i, k):
        std = np.sqrt(2.0 / (i * k * k))
        params[name] = Tensor(rng.standard_normal((o, i, k, k)) * std, requires_grad=True)

    def norm(name, c):
        params[name + ".scale"] = Tensor(np.ones(c), requires_grad=True)
        params[name + ".shift"] = Tensor(np.zeros(c), requires_grad=True)
        buffers[name + ".mean"] = np.zeros(c)
        buffers[name + ".var"] = np.ones(c)

    k = config.stem_kernel
    conv("backbone.stem.conv", config.stem_width, config.input_channels, k)
    norm("backbone.stem.norm", config.stem_width)
    for prefix, cin, cout, stride in _block_layout(config):
        conv(prefix + ".conv1", cout, cin, 3)
        norm(prefix + ".norm1", cout)
        conv(prefix + ".conv2", cout, cout, 3)
        norm(prefix + ".norm2", cout)
        if cin != cout or stride != 1:
            conv(prefix + ".proj", cout, cin, 1)
            norm(prefix + ".projnorm", cout)

    d = config.feature_dim
    # small head so initial scores sit near 0 (self-supervised loss starts near ln 2)
    params["rank.w"] = Tensor(HEAD_INIT_SCALE * rng.standard_normal(d) / np.sqrt(d), requires_grad=True)
    if csr_head:
        params["csr.w"] = Tensor(HEAD_INIT_SCALE * rng.standard_normal(d) / np.sqrt(d), requires_grad=True)
        params["csr.b"] = Tensor(np.zeros(1), requires_grad=True)
    return ModelState(config=config, params=params, buffers=buffers, meta={"seed": int(seed)})


def freeze_backbone(model: ModelState) -> ModelState:
    """Same parameter arrays, but only the heads are trainable and the backbone runs in infer mode."""
    return ModelState(model.config, model.params, model.buffers, frozen=True, meta=model.meta)


# -- forward -----------------------------------------------------------------
def _as_batch(model: ModelState, images) -> Tensor:
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    cfg = model.config
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.input_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ValueError(
            f"images must be N x {cfg.input_channels} x {cfg.input_size} x {cfg.input_size}, got {x.shape}"
        )
    if cfg.standardize_input:
        x = standardize(x)
    return Tensor(x)


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-image zero mean and unit variance; a constant image maps to zeros."""
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    sd = x.std(axis=(1, 2, 3), keepdims=True)
    return (x - mu) / np.where(sd > 1e-8, sd, 1.0)


def _backbone(p, buffers, x: Tensor, config: BackboneConfig, training: bool) -> Tensor:
    """NCHW images -> final block activations in channel-major (C, N, h, w) layout."""
    cf = "CNHW"

    def norm(name, h):
        return channel_norm(
            h, p[name + ".scale"], p[name + ".shift"], training,
            buffers[name + ".mean"], buffers[name + ".var"], layout=cf,
        )

    def conv(name, h, stride, pad):
        return conv2d(h, p[name], stride, pad, layout=cf)

    h = permute(x, (1, 0, 2, 3))
    k = config.stem_kernel
    h = relu(norm("backbone.stem.norm", conv("backbone.stem.conv", h, config.stem_stride, k // 2)))
    for prefix, cin, cout, stride in _block_layout(config):
        y = relu(norm(prefix + ".norm1", conv(prefix + ".conv1", h, stride, 1)))
        y = norm(prefix + ".norm2", conv(prefix + ".conv2", y, 1, 1))
        if prefix + ".proj" in p:
            short = norm(prefix + ".projnorm", conv(prefix + ".proj", h, stride, 0))
        else:
            short = h
        h = relu(y + short)
    return h


def feature_extract(model: ModelState, images, training: bool = False, grad: bool = False) -> FeatureOutput:
    """Run the shared feature network on a batch (or a single C x H x W image).

    ``training`` selects batch statistics in the norm layers (and updates the
    running averages); ``grad`` records the graph w.r.t. backbone parameters.
    A frozen model always runs its backbone in infer mode without grad.
    """
    x = _as_batch(model, images)
    if model.frozen:
        training, grad = False, False
    if grad:
        p = model.params
    else:
        p = {k: Tensor(v.data) for k, v in model.params.items() if k.startswith("backbone.")}
    acts = _backbone(p, model.buffers, x, model.config, training)
    return FeatureOutput(
        feature=global_avg_pool(acts, layout="CNHW"),
        activations=Tensor(acts.data.transpose(1, 0, 2, 3)),
    )


def features(model: ModelState, images, batch_size: int = 64) -> np.ndarray:
    """Infer-mode feature matrix (N, D) as a plain array, computed in chunks."""
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    out = [
        feature_extract(model, imgs[i : i + batch_size]).feature.data for i in range(0, len(imgs), batch_size)
    ]
    return np.concatenate(out, axis=0)


def score_from_features(w: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    return (np.asarray(f1) - np.asarray(f2)) @ np.asarray(w)


def rank_score(model: ModelState, image1, image2) -> float:
    """R(I1, I2) = w . (f(I1) - f(I2)); positive means I1 is ranked above I2."""
    # one pass per image: identical inputs then give bit-identical features
    f1, f2 = (features(model, _single(model, im)[None])[0] for im in (image1, image2))
    return float(score_from_features(model.params["rank.w"].data, f1, f2))


def rank_prob(model: ModelState, image1, image2) -> float:
    return float(sigmoid_value(rank_score(model, image1, image2)))


def sigmoid_value(z):
    out = _stable_sigmoid(np.asarray(z, dtype=np.float64))
    return out if out.ndim else float(out)


def csr_predict(model: ModelState, image) -> float:
    if not model.has_csr_head:
        raise ValueError("model has no CSR head")
    f = features(model, _single(model, image)[None])
    return float(f[0] @ model.params["csr.w"].data + model.params["csr.b"].data[0])


def csr_change(model: ModelState, image1, image2) -> float:
    """Difference of two independent single-image predictions, y(I1) - y(I2)."""
    return csr_predict(model, image1) - csr_predict(model, image2)


def _single(model: ModelState, image) -> np.ndarray:
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return x


def rank_head(model: ModelState, feats: Tensor, idx_first, idx_second) -> Tensor:
    """Graph-recording scores w . (f[first] - f[second]) for index arrays into ``feats``."""
    diff = feats[np.asarray(idx_first)] - feats[np.asarray(idx_second)]
    w = reshape(model.params["rank.w"], (-1, 1))
    return reshape(diff @ w, (-1,))


def csr_head(model: ModelState, feats: Tensor) -> Tensor:
    w = reshape(model.params["csr.w"], (-1, 1))
    return reshape(feats @ w, (-1,)) + model.params["csr.b"]


# -- checkpoint ----------------------------------------------------------------
def save_checkpoint(model: ModelState, path: Union[str, Path]) -> None:
    """Write magic line, one JSON header line, then raw little-endian float64 arrays."""
    entries, blobs, offset = [], [], 0
    for kind, store in (("param", {k: v.data for k, v in model.params.items()}), ("buffer", model.buffers)):
        for name, arr in store.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
            blobs.append(raw)
            offset += len(raw)
    cfg = asdict(model.config)
    header = {"config": cfg, "frozen": model.frozen, "meta": model.meta, "arrays": entries}
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for raw in blobs:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    blob = Path(path).read_bytes()
    magic, _, rest = blob.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PAIRNET-CKPT-v1 checkpoint")
    head, _, payload = rest.partition(b"\n")
    header = json.loads(head)
    params, buffers = {}, {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=e["offset"]).astype(np.float64)
        arr = arr.reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = Tensor(arr, requires_grad=True)
        else:
            buffers[e["name"]] = arr
    return ModelState(
        config=BackboneConfig(**header["config"]),
        params=params,
        buffers=buffers,
        frozen=header["frozen"],
        meta=header["meta"],
    )


def parameter_vector(model: ModelState, names: Optional[Sequence[str]] = None) -> np.ndarray:
    names = list(model.params) if names is None else names
    return np.concatenate([model.params[k].data.ravel() for k in names])
