"""Modality encoders with single or dual (noun/verb) prediction heads.

Grid modalities (appearance, flow, spectro, rasterised layout) share one
topology: three 3x3 stride-2 conv+ReLU blocks (16, 32, 64 channels) applied
per frame, spatial then temporal mean pooling, a 64->128 dense+ReLU layer and
the heads. The box-native layout encoder embeds every box, mean-pools boxes
within a frame and frames within the window.

Models return raw logits; softmax lives in :mod:`mmkd.distill`.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .rng import derive_seed
from .synthdata import (
    Box,
    DatasetConfig,
    MultimodalExample,
    ViewParams,
    apply_view,
    rasterize_layout,
    sample_view,
)
from .tensor import Tensor

GRID_CHANNELS = {"appearance": 3, "flow": 2, "spectro": 1, "layout_raster": 3, "omnivore": 3}
CONV_CHANNELS = (16, 32, 64)
HIDDEN = 128
TASKS = ("verb", "action", "dual")
INPUT_GAIN = 4.0
LAYOUT_CATEGORIES = 2  # hand, object
INPUT_SHIFT = ("appearance", "spectro", "layout_raster")
INPUT_KINDS = ("appearance", "flow", "layout", "spectro", "layout_raster")


def head_dims(task: str, cfg: DatasetConfig) -> tuple[int, ...]:
    """Class counts per head: ``(C,)`` for single-head tasks, ``(C_n, C_v)`` for dual."""
    if task == "verb":
        return (cfg.num_verbs,)
    if task == "action":
        return (cfg.num_actions,)
    if task == "dual":
        return (cfg.num_nouns, cfg.num_verbs)
    raise ConfigError("task", f"must be one of {TASKS}, got {task!r}")


def task_labels(task: str, examples: Sequence[MultimodalExample]) -> tuple[np.ndarray, ...]:
    """Integer targets per head, in the same order as :func:`head_dims`."""
    if task == "verb":
        return (np.array([e.verb_label for e in examples], dtype=np.int64),)
    if task == "action":
        return (np.array([e.action_label for e in examples], dtype=np.int64),)
    if task == "dual":
        return (
            np.array([e.noun_label for e in examples], dtype=np.int64),
            np.array([e.verb_label for e in examples], dtype=np.int64),
        )
    raise ConfigError("task", f"must be one of {TASKS}, got {task!r}")


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class ModalityBatch:
    """Model input for one modality.

    ``data`` is ``[B, T', C, H, W]`` for grid inputs. For the box layout it is
    a ``[B*T'*N, 4 + K]`` box-feature matrix and ``pool`` the constant
    ``[B*T', B*T'*N]`` matrix that averages the valid boxes of each frame.
    """

    modality: str
    data: np.ndarray
    pool: np.ndarray | None = None
    batch_size: int = 0
    frames: int = 0


def encode_layout(layouts: Sequence[list[list[Box]]], H: int, W: int, num_categories: int,
                  agnostic: bool = True) -> ModalityBatch:
    """Box features: normalised centre and size plus a category one-hot.

    With ``agnostic`` the one-hot only separates the hand (0) from objects (1),
    so the encoder never sees noun identity and transfers to unseen nouns.
    """
    B = len(layouts)
    Tn = len(layouts[0]) if B else 0
    nmax = max([1] + [len(fr) for lay in layouts for fr in lay])
    width = LAYOUT_CATEGORIES if agnostic else num_categories
    feat = np.zeros((B, Tn, nmax, 4 + width), dtype=np.float32)
    pool = np.zeros((B * Tn, B * Tn * nmax), dtype=np.float32)
    for b, lay in enumerate(layouts):
        if len(lay) != Tn:
            raise ContractError("all layouts in a batch need the same frame count")
        for t, boxes in enumerate(lay):
            row = b * Tn + t
            for i, box in enumerate(boxes):
                if not 0 <= box.category < num_categories:
                    raise ContractError(f"box category {box.category} outside [0, {num_categories})")
                feat[b, t, i, 0] = (box.x + box.w / 2) / W
                feat[b, t, i, 1] = (box.y + box.h / 2) / H
                feat[b, t, i, 2] = box.w / W
                feat[b, t, i, 3] = box.h / H
                feat[b, t, i, 4 + (min(box.category, 1) if agnostic else box.category)] = 1.0
            if boxes:
                pool[row, row * nmax:row * nmax + len(boxes)] = 1.0 / len(boxes)
    return ModalityBatch("layout", feat.reshape(B * Tn * nmax, -1), pool, B, Tn)


def to_three_channels(modality: str, grid: np.ndarray) -> np.ndarray:
    """Map a ``[B, T, C, H, W]`` grid to 3 channels for the shared-weight model."""
    c = grid.shape[2]
    if c == 3:
        return grid
    if c == 2:
        pad = np.zeros(grid.shape[:2] + (1,) + grid.shape[3:], dtype=grid.dtype)
        return np.concatenate([grid, pad], axis=2)
    if c == 1:
        return np.repeat(grid, 3, axis=2)
    raise ContractError(f"cannot map {c}-channel {modality} input to 3 channels")


def make_batch(examples: Sequence[MultimodalExample], kind: str, cfg: DatasetConfig,
               omnivore: bool = False) -> ModalityBatch:
    """Stack already-viewed examples into the input of a model for ``kind``."""
    if kind in ("appearance", "flow", "spectro"):
        data = np.stack([getattr(e, kind) for e in examples])
    elif kind == "layout_raster":
        data = np.stack([rasterize_layout(e.layout, cfg.height, cfg.width) for e in examples])
    else:
        data = None
    if kind in INPUT_SHIFT:
        # [0, 1] intensities are centred to [-1, 1]
        data = (data - np.float32(0.5)) * np.float32(INPUT_GAIN)
    if kind == "layout":
        if omnivore:
            raise ContractError("the shared-weight model takes the rasterised layout")
        return encode_layout([e.layout for e in examples], cfg.height, cfg.width, 1 + cfg.num_nouns)
    elif data is None:
        raise ContractError(f"unknown input kind {kind!r}")
    if omnivore:
        return ModalityBatch("omnivore", to_three_channels(kind, data), batch_size=len(examples), frames=data.shape[1])
    return ModalityBatch(kind, data, batch_size=len(examples), frames=data.shape[1])


def view_modalities(kind: str) -> tuple[str, ...]:
    return ("layout",) if kind == "layout_raster" else (kind,)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class ModalityModel:
    """Encoder plus heads for one modality. ``params`` keeps insertion order."""

    def __init__(self, modality: str, task: str, dims: tuple[int, ...], params: dict[str, Tensor],
                 meta: dict):
        self.modality = modality
        self.task = task
        self.dims = tuple(dims)
        self.params = params
        self.meta = meta
        self.frozen = False

    # -- bookkeeping ------------------------------------------------------
    @property
    def dual(self) -> bool:
        return len(self.dims) == 2

    @property
    def kind(self) -> str:
        return self.meta["kind"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ContractError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ContractError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.asarray(state[k], dtype=np.float32).copy()

    def freeze(self) -> "ModalityModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def clone(self, trainable: bool = True) -> "ModalityModel":
        params = {k: Tensor(p.data.copy(), requires_grad=trainable) for k, p in self.params.items()}
        m = ModalityModel(self.modality, self.task, self.dims, params, copy.deepcopy(self.meta))
        if not trainable:
            m.frozen = True
        return m

    def manifest(self) -> dict:
        return {"modality": self.modality, "task": self.task, "dims": list(self.dims), **self.meta}

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = self.manifest()
        if extra:
            meta["extra"] = extra
        T.save_checkpoint(path, self.state_dict(), meta)

    # -- forward ----------------------------------------------------------
    def __call__(self, batch: ModalityBatch):
        return forward(self, batch)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _heads(rng, params: dict, dims: tuple[int, ...]) -> None:
    names = ("head",) if len(dims) == 1 else ("noun", "verb")
    for name, c in zip(names, dims):
        params[f"{name}.w"] = _uniform(rng, (HIDDEN, c), HIDDEN)
        params[f"{name}.b"] = _zeros((c,))


def model_init(modality: str, task: str, cfg: DatasetConfig, init_seed: int) -> ModalityModel:
    """Fresh model for ``modality``. Weights are U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero."""
    dims = head_dims(task, cfg)
    # the shared-weight model starts from the appearance model's draw
    init_key = "appearance" if modality == "omnivore" else modality
    rng = np.random.Generator(np.random.Philox(key=derive_seed(init_seed, "init", init_key)))
    params: dict[str, Tensor] = {}
    if modality == "layout":
        k = LAYOUT_CATEGORIES
        params["box.w"] = _uniform(rng, (4 + k, 32), 4 + k)
        params["box.b"] = _zeros((32,))
        params["frame.w"] = _uniform(rng, (32, 64), 32)
        params["frame.b"] = _zeros((64,))
        params["time.b"] = _zeros((cfg.window, 64))
        meta = {"kind": "layout", "num_categories": k, "window": cfg.window}
    elif modality in GRID_CHANNELS:
        cin = GRID_CHANNELS[modality]
        for i, cout in enumerate(CONV_CHANNELS, start=1):
            params[f"conv{i}.w"] = _uniform(rng, (cout, cin, 3, 3), cin * 9)
            params[f"conv{i}.b"] = _zeros((cout,))
            cin = cout
        meta = {"kind": "grid", "in_channels": GRID_CHANNELS[modality]}
    else:
        raise ContractError(f"unknown modality {modality!r}")
    params["fc.w"] = _uniform(rng, (64, HIDDEN), 64)
    params["fc.b"] = _zeros((HIDDEN,))
    _heads(rng, params, dims)
    return ModalityModel(modality, task, dims, params, meta)


def _grid_features(model: ModalityModel, x: np.ndarray) -> Tensor:
    B, Tn, C, H, W = x.shape
    p = model.params
    h = Tensor(np.ascontiguousarray(x.reshape(B * Tn, C, H, W), dtype=np.float32))
    for i in range(1, len(CONV_CHANNELS) + 1):
        h = T.relu(T.conv2d(h, p[f"conv{i}.w"], stride=2, bias=p[f"conv{i}.b"]))
    n, c, ho, wo = h.shape
    h = T.mean(T.reshape(h, (n, c, ho * wo)), axis=2)
    return T.mean(T.reshape(h, (B, Tn, c)), axis=1)


def _layout_features(model: ModalityModel, batch: ModalityBatch) -> Tensor:
    p = model.params
    if batch.frames != p["time.b"].shape[0]:
        raise ContractError(f"layout model expects {p['time.b'].shape[0]} frames, got {batch.frames}")
    if batch.data.shape[1] != p["box.w"].shape[0]:
        raise ContractError("layout feature width does not match the model's category count")
    boxes = T.relu(T.linear(Tensor(batch.data), p["box.w"], p["box.b"]))
    frames = T.matmul(Tensor(batch.pool), boxes)
    frames = T.linear(frames, p["frame.w"], p["frame.b"])
    frames = T.relu(T.add_bias(T.reshape(frames, (batch.batch_size, batch.frames, 64)), p["time.b"]))
    return T.mean(frames, axis=1)


def forward(model: ModalityModel, batch: ModalityBatch):
    """Raw logits ``[B, C]``, or ``(noun [B, C_n], verb [B, C_v])`` for dual heads."""
    if batch.modality != model.modality:
        raise ContractError(f"{model.modality} model got a {batch.modality} batch")
    p = model.params
    if model.kind == "layout":
        feat = _layout_features(model, batch)
    else:
        if batch.data.ndim != 5 or batch.data.shape[2] != model.meta["in_channels"]:
            raise ContractError(f"{model.modality} model expects [B,T,{model.meta['in_channels']},H,W], "
                                f"got {batch.data.shape}")
        feat = _grid_features(model, batch.data)
    hidden = T.relu(T.linear(feat, p["fc.w"], p["fc.b"]))
    if model.dual:
        return T.linear(hidden, p["noun.w"], p["noun.b"]), T.linear(hidden, p["verb.w"], p["verb.b"])
    return T.linear(hidden, p["head.w"], p["head.b"])


def as_tuple(out) -> tuple[Tensor, ...]:
    return out if isinstance(out, tuple) else (out,)


def load_model(path: str | Path) -> ModalityModel:
    params, meta = T.load_checkpoint(path)
    meta = dict(meta)
    modality, task, dims = meta.pop("modality"), meta.pop("task"), tuple(meta.pop("dims"))
    meta.pop("extra", None)
    tensors = {k: Tensor(v, requires_grad=False) for k, v in params.items()}
    model = ModalityModel(modality, task, dims, tensors, meta)
    model.frozen = True
    return model


def model_input_kind(model: ModalityModel, requested: str | None = None) -> str:
    """Which data modality feeds ``model`` (the omnivore model eats any grid)."""
    if model.modality == "omnivore":
        return requested or "appearance"
    return model.modality


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_logits(model: ModalityModel, examples: Sequence[MultimodalExample], cfg: DatasetConfig,
                   views: Sequence[ViewParams] | None = None, batch_size: int = 64,
                   kind: str | None = None) -> tuple[np.ndarray, ...]:
    """Gradient-free logits per head over ``examples`` (eval view unless ``views`` given)."""
    kind = model_input_kind(model, kind)
    eval_view = sample_view(0, "eval", cfg)
    outs: list[list[np.ndarray]] = [[] for _ in model.dims]
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        vs = views[lo:lo + batch_size] if views is not None else [eval_view] * len(chunk)
        viewed = [apply_view(e, v, view_modalities(kind)) for e, v in zip(chunk, vs)]
        batch = make_batch(viewed, kind, cfg, omnivore=model.modality == "omnivore")
        for i, t in enumerate(as_tuple(_inference(model, batch))):
            outs[i].append(t.data)
    return tuple(np.concatenate(o, axis=0) if o else np.zeros((0, d), np.float32) for o, d in zip(outs, model.dims))


def _inference(model: ModalityModel, batch: ModalityBatch):
    # forward without recording a graph even when the model is still trainable
    saved = [(p, p.requires_grad) for p in model.params.values()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        return forward(model, batch)
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def tta_views(cfg: DatasetConfig, num_clips: int, num_crops: int) -> list[ViewParams]:
    """Evenly spaced temporal windows times centre/left/right crops."""
    Tn, L = cfg.frames, cfg.window
    if num_clips < 1 or num_crops < 1:
        raise ContractError("clip and crop counts must be >= 1")
    if num_clips > Tn - L + 1:
        raise ContractError(f"{num_clips} clips do not fit: only {Tn - L + 1} distinct windows of {L} in {Tn} frames")
    if num_crops > 3:
        raise ContractError(f"at most 3 spatial crops are defined, got {num_crops}")
    if num_clips == 1:
        starts = [(Tn - L) // 2]
    else:
        starts = [int(round(i * (Tn - L) / (num_clips - 1))) for i in range(num_clips)]
    H, W = cfg.height, cfg.width
    side = min(H, W)
    small = math.ceil(0.75 * side)
    centre = ((W - side) // 2, (H - side) // 2, side)
    crops = [centre, (0, (H - small) // 2, small), (W - small, (H - small) // 2, small)][:num_crops]
    return [
        ViewParams(cx, cy, s, False, st, tuple(range(st, st + L)))
        for st in starts
        for cx, cy, s in crops
    ]


def tta_forward(model: ModalityModel, examples: Sequence[MultimodalExample], cfg: DatasetConfig,
                num_clips: int = 1, num_crops: int = 1, kind: str | None = None) -> tuple[np.ndarray, ...]:
    """Logits averaged arithmetically over ``num_clips x num_crops`` views."""
    views = tta_views(cfg, num_clips, num_crops)
    acc = None
    for v in views:
        out = predict_logits(model, examples, cfg, views=[v] * len(examples), kind=kind)
        acc = [o.astype(np.float64) for o in out] if acc is None else [a + o for a, o in zip(acc, out)]
    return tuple((a / len(views)).astype(np.float32) for a in acc)
