"""Synthetic multimodal action clips ("shape-actions").

Each clip shows a hand pushing one textured shape. The shape identity is the
noun, the motion program is the verb. Four aligned modalities are rendered:

* appearance: RGB frames with a noun-correlated background texture that shows
  up mostly on the training side (a shortcut that does not transfer);
* flow: the exact per-pixel velocity of every rendered box;
* layout: per-frame boxes with a category id (0 = hand, 1 + noun = object);
* spectro: a per-frame frequency/time patch encoding the verb as a sweep and
  the noun as a faint tone, plus seeded noise.

Everything is a pure function of integer seeds (see :mod:`mmkd.rng`).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .rng import derive_seed

VERBS = ("move-left", "move-right", "move-up", "grow", "move-down", "shrink")
SHAPES = ("square", "disc", "triangle", "diamond", "cross", "ring", "bar", "hourglass")
NOUN_COLORS = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.35, 0.90],
        [0.15, 0.75, 0.20],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.50, 0.25, 0.70],
    ],
    dtype=np.float32,
)
HAND_COLOR = np.array([0.92, 0.72, 0.58], dtype=np.float32)
HAND_SIZE = 4
DISTRACTOR_AMP = 0.15
MODALITIES = ("appearance", "flow", "layout", "spectro")
SPLIT_MODES = ("iid", "compositional")


@dataclass(frozen=True)
class DatasetConfig:
    num_nouns: int = 6
    num_verbs: int = 4
    frames: int = 12
    height: int = 32
    width: int = 32
    spectro_bins: int = 16
    window: int = 8
    num_train: int = 768
    num_val: int = 384
    holdout_size: int = 256
    appearance_bias_strength: float = 0.9
    verb_cooccurrence: float = 0.8
    split_mode: str = "iid"
    holdout_nouns: tuple[int, ...] = (4, 5)
    spectro_noise: float = 0.15
    spectro_noun_strength: float = 0.35
    label_noise: float = 0.0
    label_bias: float = 0.0
    hflip: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "holdout_nouns", tuple(int(n) for n in self.holdout_nouns))
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.num_nouns <= len(SHAPES):
            raise ConfigError("num_nouns", f"must be in [2, {len(SHAPES)}], got {self.num_nouns}")
        if not 2 <= self.num_verbs <= len(VERBS):
            raise ConfigError("num_verbs", f"must be in [2, {len(VERBS)}], got {self.num_verbs}")
        if self.frames < 4:
            raise ConfigError("frames", f"must be >= 4, got {self.frames}")
        if not 1 <= self.window <= self.frames:
            raise ConfigError("window", f"must be in [1, frames], got {self.window}")
        if self.height < 15 or self.width < 15:
            raise ConfigError("height", "grid must be at least 15x15 for the conv encoder")
        if self.spectro_bins < 15:
            raise ConfigError("spectro_bins", f"must be >= 15, got {self.spectro_bins}")
        for name in ("appearance_bias_strength", "verb_cooccurrence", "label_noise", "label_bias"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"must be in [0, 1], got {v}")
        if self.spectro_noise < 0 or self.spectro_noun_strength < 0:
            raise ConfigError("spectro_noise", "noise and tone strength must be non-negative")
        if self.split_mode not in SPLIT_MODES:
            raise ConfigError("split_mode", f"must be one of {SPLIT_MODES}, got {self.split_mode!r}")
        for n in self.holdout_nouns:
            if not 0 <= n < self.num_nouns:
                raise ConfigError("holdout_nouns", f"noun {n} out of range")
        if self.split_mode == "compositional" and len(set(self.holdout_nouns)) >= self.num_nouns:
            raise ConfigError("holdout_nouns", "at least one noun must remain for training")
        if min(self.num_train, self.num_val) < 1:
            raise ConfigError("num_train", "split sizes must be positive")
        if self.holdout_size < 1:
            raise ConfigError("holdout_size", "must be positive")
        if self.holdout_size >= self.num_train:
            raise ConfigError("holdout_size", f"Z={self.holdout_size} must be smaller than num_train={self.num_train}")

    @property
    def num_actions(self) -> int:
        return self.num_nouns * self.num_verbs

    @property
    def train_nouns(self) -> tuple[int, ...]:
        if self.split_mode == "compositional" and self.holdout_nouns:
            return tuple(n for n in range(self.num_nouns) if n not in self.holdout_nouns)
        return tuple(range(self.num_nouns))

    @property
    def val_nouns(self) -> tuple[int, ...]:
        if self.split_mode == "compositional" and self.holdout_nouns:
            return tuple(sorted(set(self.holdout_nouns)))
        return tuple(range(self.num_nouns))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["holdout_nouns"] = list(self.holdout_nouns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"dataset.{key}", "unknown key")
        return cls(**d)


class Box(NamedTuple):
    x: float
    y: float
    w: float
    h: float
    category: int


@dataclass
class MultimodalExample:
    example_id: int
    appearance: np.ndarray  # [T, 3, H, W] in [0, 1]
    flow: np.ndarray  # [T, 2, H, W] pixels/frame
    layout: list[list[Box]]
    spectro: np.ndarray  # [T, 1, F, F] in [0, 1]
    noun_label: int
    verb_label: int
    action_label: int

    @property
    def num_frames(self) -> int:
        return self.appearance.shape[0]


@dataclass
class Shard:
    header: dict
    examples: list[MultimodalExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def config(self) -> DatasetConfig:
        return DatasetConfig.from_dict(self.header["config"])

    @property
    def ids(self) -> list[int]:
        return [e.example_id for e in self.examples]


@dataclass(frozen=True)
class ViewParams:
    crop_x: int
    crop_y: int
    crop_size: int
    hflip: bool
    temporal_start: int
    frame_indices: tuple[int, ...]


# ---------------------------------------------------------------------------
# scene construction
# ---------------------------------------------------------------------------

def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass
class _Track:
    """Per-frame geometry of one rendered box."""

    boxes: list[tuple[float, float, float, float]]  # unclipped x, y, w, h
    velocity: list[tuple[float, float]] | None  # uniform translation per frame
    scale_rate: float = 0.0  # half-size change per frame for grow/shrink
    centers: list[tuple[float, float]] | None = None


def _translation_scene(rng, cfg: DatasetConfig, verb: str):
    """A square-bounded shape pushed by a hand touching its trailing side."""
    T, H, W = cfg.frames, cfg.height, cfg.width
    size = int(rng.integers(5, 8))
    speed = int(rng.integers(1, 3))
    travel = speed * (T - 1)
    hs = HAND_SIZE
    jitter = int(rng.integers(-1, 2))

    def start(lead_room: int, trail_room: int, extent: int) -> int:
        # shape must fit with the hand behind it; it may run off the leading edge
        lo = trail_room
        hi = max(lo, extent - size - lead_room)
        return int(rng.integers(lo, hi + 1))

    if verb in ("move-left", "move-right"):
        if verb == "move-right":
            x0 = start(travel, hs, W)
            vx, hand_dx = speed, -hs
        else:
            x0 = W - size - start(travel, hs, W)
            vx, hand_dx = -speed, size
        y0 = int(rng.integers(1, H - size))
        vy = 0
        hand_off = (hand_dx, (size - hs) // 2 + jitter)
    else:
        if verb == "move-down":
            y0 = start(travel, hs, H)
            vy, hand_dy = speed, -hs
        else:
            y0 = H - size - start(travel, hs, H)
            vy, hand_dy = -speed, size
        x0 = int(rng.integers(1, W - size))
        vx = 0
        hand_off = ((size - hs) // 2 + jitter, hand_dy)
    obj_boxes = [(x0 + vx * t, y0 + vy * t, size, size) for t in range(T)]
    hand_boxes = [(b[0] + hand_off[0], b[1] + hand_off[1], hs, hs) for b in obj_boxes]
    vel = [(float(vx), float(vy))] * T
    return _Track(obj_boxes, vel), _Track(hand_boxes, vel), speed


def _scaling_scene(rng, cfg: DatasetConfig, verb: str):
    """A shape growing (or shrinking) about a fixed centre; the hand holds a corner."""
    T, H, W = cfg.frames, cfg.height, cfg.width
    rate = 0.5
    r_small = 2.5
    r_big = r_small + rate * (T - 1)
    hs = HAND_SIZE
    reach = int(math.ceil(r_big))
    sx = 1 if rng.random() < 0.5 else -1
    sy = 1 if rng.random() < 0.5 else -1
    cx = int(rng.integers(min(reach + hs, W // 2), max(W - reach - hs, W // 2) + 1))
    cy = int(rng.integers(min(reach + hs, H // 2), max(H - reach - hs, H // 2) + 1))
    hand = (cx + reach if sx > 0 else cx - reach - hs, cy + reach if sy > 0 else cy - reach - hs)
    sign = 1.0 if verb == "grow" else -1.0
    radii = [r_small + rate * t if sign > 0 else r_big - rate * t for t in range(T)]
    obj_boxes = [(cx - r, cy - r, 2 * r, 2 * r) for r in radii]
    obj = _Track(obj_boxes, None, sign * rate, [(float(cx), float(cy))] * T)
    hand_track = _Track([(hand[0], hand[1], hs, hs)] * T, [(0.0, 0.0)] * T)
    return obj, hand_track, 1


def _pixel_range(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Indices of pixels whose centres fall in ``[lo, hi)``, clipped to the grid."""
    a = max(0, math.ceil(lo - 0.5))
    b = min(n, math.ceil(hi - 0.5))
    return a, max(a, b)


def _clip_box(b, W, H) -> tuple[float, float, float, float] | None:
    x, y, w, h = b
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(W), x + w), min(float(H), y + h)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if shape == "square":
        return (au <= 1) & (av <= 1)
    if shape == "disc":
        return u * u + v * v <= 1.0001
    if shape == "triangle":
        return (v <= 1) & (v >= 2 * au - 1)
    if shape == "diamond":
        return au + av <= 1.0001
    if shape == "cross":
        return ((au <= 1) & (av <= 1)) & (np.minimum(au, av) <= 0.4)
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0001) & (r2 >= 0.3)
    if shape == "bar":
        return (au <= 1) & (av <= 1) & ((av <= 0.45) | (au >= 0.7))
    if shape == "hourglass":
        return (au <= 1) & (av <= 1) & (au <= av + 0.25)
    raise ValueError(shape)


def object_masks(track: _Track, shape: str, H: int, W: int) -> np.ndarray:
    """Boolean ``[T, H, W]`` masks of the rendered shape."""
    T = len(track.boxes)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32) + 0.5
    out = np.zeros((T, H, W), dtype=bool)
    for t, (x, y, w, h) in enumerate(track.boxes):
        cx, cy = x + w / 2, y + h / 2
        u = (xx - cx) / (w / 2)
        v = (yy - cy) / (h / 2)
        inside = (xx >= x) & (xx < x + w) & (yy >= y) & (yy < y + h)
        out[t] = _shape_mask(shape, u, v) & inside
    return out


def _draw_scene(rng, cfg: DatasetConfig, noun: int, verb: int, train_side: bool):
    verb_name = VERBS[verb]
    if verb_name in ("grow", "shrink"):
        obj, hand, speed = _scaling_scene(rng, cfg, verb_name)
    else:
        obj, hand, speed = _translation_scene(rng, cfg, verb_name)
    distractor = train_side or cfg.split_mode == "iid"
    distractor = distractor and bool(rng.random() < cfg.appearance_bias_strength)
    return obj, hand, speed, distractor


def _render_appearance(rng, cfg, noun, obj: _Track, hand: _Track, distractor: bool,
                       masks: np.ndarray) -> np.ndarray:
    T, H, W = cfg.frames, cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32) + 0.5
    base = 0.45 + 0.05 * rng.standard_normal((1, H, W)).astype(np.float32)
    bg = np.repeat(base, 3, axis=0)
    if distractor:
        theta = math.pi * noun / cfg.num_nouns
        period = 3.0 + 1.5 * (noun % 3)
        wave = 0.5 + 0.5 * np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period)
        tint = 0.5 * NOUN_COLORS[noun] + 0.25
        bg = bg * (1 - DISTRACTOR_AMP * wave) + DISTRACTOR_AMP * wave * tint[:, None, None]
    frames = np.empty((T, 3, H, W), dtype=np.float32)
    # object colour is drawn per clip, so a noun is defined by its shape alone
    color = NOUN_COLORS[int(rng.integers(0, len(NOUN_COLORS)))]
    stripe = 0.85 + 0.15 * np.cos(2 * math.pi * (xx + yy) / (2.0 + noun % 3))
    for t in range(T):
        img = bg + 0.03 * rng.standard_normal((3, H, W)).astype(np.float32)
        m = masks[t]
        img[:, m] = (color[:, None] * stripe[m][None, :]).astype(np.float32)
        hx, hy, hw, hh = hand.boxes[t]
        xa, xb = _pixel_range(hx, hx + hw, W)
        ya, yb = _pixel_range(hy, hy + hh, H)
        img[:, ya:yb, xa:xb] = HAND_COLOR[:, None, None]
        frames[t] = img
    return np.clip(frames, 0.0, 1.0)


def _render_flow(cfg, obj: _Track, hand: _Track) -> np.ndarray:
    """Analytic per-pixel velocity inside the hand and object boxes, zero elsewhere."""
    T, H, W = cfg.frames, cfg.height, cfg.width
    flow = np.zeros((T, 2, H, W), dtype=np.float32)
    for t in range(T):
        for track in (hand, obj):
            x, y, w, h = track.boxes[t]
            xa, xb = _pixel_range(x, x + w, W)
            ya, yb = _pixel_range(y, y + h, H)
            if xa >= xb or ya >= yb:
                continue
            if track.velocity is not None:
                vx, vy = track.velocity[t]
                flow[t, 0, ya:yb, xa:xb] = vx
                flow[t, 1, ya:yb, xa:xb] = vy
            else:
                # radial field of a box scaling about its centre
                cx, cy = track.centers[t]
                r = w / 2
                px = np.arange(xa, xb, dtype=np.float32) + 0.5
                py = np.arange(ya, yb, dtype=np.float32) + 0.5
                flow[t, 0, ya:yb, xa:xb] = ((px - cx) * track.scale_rate / r)[None, :]
                flow[t, 1, ya:yb, xa:xb] = ((py - cy) * track.scale_rate / r)[:, None]
    return flow


_SWEEPS = ((0.8, 0.2), (0.2, 0.8), (0.75, 0.75), (0.3, 0.3), (0.55, 0.1), (0.1, 0.55))


def _render_spectro(rng, cfg, noun: int, verb: int, speed: int) -> np.ndarray:
    T, F = cfg.frames, cfg.spectro_bins
    rows = np.arange(F, dtype=np.float32)[:, None]
    cols = np.arange(F, dtype=np.float32)[None, :]
    start, end = _SWEEPS[verb]
    shift = float(rng.integers(-1, 2))
    centre = (start + (end - start) * cols / (F - 1)) * (F - 1) + shift
    sweep = np.exp(-0.5 * ((rows - centre) / 0.8) ** 2) * (0.55 + 0.2 * speed)
    tone_row = (noun + 0.5) * (F - 1) / cfg.num_nouns
    tone = cfg.spectro_noun_strength * np.exp(-0.5 * ((rows - tone_row) / 0.5) ** 2) * np.ones_like(cols)
    out = np.empty((T, 1, F, F), dtype=np.float32)
    for t in range(T):
        env = 0.8 + 0.2 * math.sin(math.pi * (t + 0.5) / T)
        noise = cfg.spectro_noise * rng.standard_normal((F, F)).astype(np.float32)
        out[t, 0] = np.clip(env * sweep + tone + noise, 0.0, 1.0)
    return out


def _layout(cfg, noun: int, obj: _Track, hand: _Track) -> list[list[Box]]:
    frames = []
    for t in range(cfg.frames):
        boxes = []
        for track, cat in ((hand, 0), (obj, 1 + noun)):
            c = _clip_box(track.boxes[t], cfg.width, cfg.height)
            if c is not None:
                boxes.append(Box(_f32(c[0]), _f32(c[1]), _f32(c[2]), _f32(c[3]), cat))
        frames.append(boxes)
    return frames


def _draw_labels(rng, cfg: DatasetConfig, train_side: bool, nouns: Sequence[int]) -> tuple[int, int]:
    noun = int(nouns[int(rng.integers(0, len(nouns)))])
    if train_side and cfg.split_mode == "compositional" and rng.random() < cfg.verb_cooccurrence:
        verb = noun % cfg.num_verbs
    else:
        verb = int(rng.integers(0, cfg.num_verbs))
    return noun, verb


def generate_example(
    example_seed: int,
    config: DatasetConfig,
    train_side: bool = True,
    nouns: Sequence[int] | None = None,
    example_id: int = 0,
    noun: int | None = None,
    verb: int | None = None,
) -> MultimodalExample:
    """Render one clip. Deterministic in ``(example_seed, config, train_side, nouns)``.

    ``noun``/``verb`` force the labels (used by tests and fixtures).
    """
    rng = np.random.Generator(np.random.Philox(key=example_seed))
    pool = tuple(range(config.num_nouns)) if nouns is None else tuple(nouns)
    n, v = _draw_labels(rng, config, train_side, pool)
    n = n if noun is None else int(noun)
    v = v if verb is None else int(verb)
    ex, _ = _render(rng, config, n, v, train_side, example_id)
    _annotate(rng, config, ex, train_side)
    return ex


def _annotate(rng, cfg: DatasetConfig, ex: MultimodalExample, train_side: bool) -> None:
    """Annotation errors; the rendered clip keeps its true verb.

    Random label noise hits every split alike. The noun-typical verb bias only
    affects the training side.
    """
    verb = ex.verb_label
    if train_side and cfg.label_bias > 0 and rng.random() < cfg.label_bias:
        # annotator falls back on the verb typical for this object
        verb = ex.noun_label % cfg.num_verbs
    if cfg.label_noise > 0 and rng.random() < cfg.label_noise:
        verb = int(rng.integers(0, cfg.num_verbs))
    ex.verb_label = verb
    ex.action_label = ex.noun_label * cfg.num_verbs + verb


def _render(rng, cfg, noun, verb, train_side, example_id):
    obj, hand, speed, distractor = _draw_scene(rng, cfg, noun, verb, train_side)
    masks = object_masks(obj, SHAPES[noun], cfg.height, cfg.width)
    appearance = _render_appearance(rng, cfg, noun, obj, hand, distractor, masks)
    flow = _render_flow(cfg, obj, hand)
    spectro = _render_spectro(rng, cfg, noun, verb, speed)
    layout = _layout(cfg, noun, obj, hand)
    ex = MultimodalExample(
        example_id=example_id,
        appearance=appearance,
        flow=flow,
        layout=layout,
        spectro=spectro,
        noun_label=noun,
        verb_label=verb,
        action_label=noun * cfg.num_verbs + verb,
    )
    return ex, obj


def example_object_track(example_seed: int, config: DatasetConfig, train_side: bool = True,
                         nouns: Sequence[int] | None = None, noun: int | None = None,
                         verb: int | None = None):
    """Re-derive the object geometry of a generated example (for invariant checks)."""
    rng = np.random.Generator(np.random.Philox(key=example_seed))
    pool = tuple(range(config.num_nouns)) if nouns is None else tuple(nouns)
    n, v = _draw_labels(rng, config, train_side, pool)
    n = n if noun is None else int(noun)
    v = v if verb is None else int(verb)
    _, obj = _render(rng, config, n, v, train_side, 0)
    return obj, n, v


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_layout(config: DatasetConfig) -> dict[str, tuple[int, int, bool, tuple[int, ...]]]:
    """Example-id ranges, train-side flag and noun pool of each split."""
    n_fit = config.num_train - config.holdout_size
    train_nouns = config.train_nouns
    return {
        "train": (0, n_fit, True, train_nouns),
        "holdout": (n_fit, config.num_train, True, train_nouns),
        "val": (config.num_train, config.num_train + config.num_val, False, config.val_nouns),
    }


def build_split(config: DatasetConfig, name: str) -> Shard:
    lo, hi, train_side, nouns = split_layout(config)[name]
    examples = [
        generate_example(derive_seed(config.seed, i), config, train_side, nouns, example_id=i)
        for i in range(lo, hi)
    ]
    header = {
        "format_version": SHARD_VERSION,
        "split": name,
        "config": config.to_dict(),
        "count": len(examples),
        "train_side": train_side,
        "nouns": list(nouns),
    }
    return Shard(header, examples)


def build_splits(config: DatasetConfig) -> tuple[Shard, Shard, Shard]:
    """Train, holdout and validation shards.

    The holdout (``Z = holdout_size`` clips) is carved out of the
    ``num_train`` training-distribution clips and is never trained on.
    """
    return build_split(config, "train"), build_split(config, "holdout"), build_split(config, "val")


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------

def sample_view(step_seed: int, mode: str, config: DatasetConfig) -> ViewParams:
    H, W, T, L = config.height, config.width, config.frames, config.window
    side = min(H, W)
    if mode == "eval":
        start = (T - L) // 2
        return ViewParams((W - side) // 2, (H - side) // 2, side, False, start, tuple(range(start, start + L)))
    if mode != "train":
        raise ContractError(f"view mode must be 'train' or 'eval', got {mode!r}")
    rng = np.random.Generator(np.random.Philox(key=step_seed))
    size = int(rng.integers(math.ceil(0.75 * side), side + 1))
    cx = int(rng.integers(0, W - size + 1))
    cy = int(rng.integers(0, H - size + 1))
    flip = bool(rng.random() < 0.5)
    start = int(rng.integers(0, T - L + 1))
    return ViewParams(cx, cy, size, flip and config.hflip, start, tuple(range(start, start + L)))


def identity_view(config: DatasetConfig) -> ViewParams:
    side = min(config.height, config.width)
    return ViewParams(0, 0, side, False, 0, tuple(range(config.frames)))


def _resample_index(offset: int, size: int, out: int) -> np.ndarray:
    return offset + ((np.arange(out) + 0.5) * size / out).astype(np.int64)


def _spatial(arr: np.ndarray, view: ViewParams, H: int, W: int) -> np.ndarray:
    iy = _resample_index(view.crop_y, view.crop_size, H)
    ix = _resample_index(view.crop_x, view.crop_size, W)
    out = arr[..., iy, :][..., ix]
    if view.hflip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def view_layout(layout: list[list[Box]], view: ViewParams, H: int, W: int) -> list[list[Box]]:
    sx = W / view.crop_size
    sy = H / view.crop_size
    out = []
    for t in view.frame_indices:
        boxes = []
        for b in layout[t]:
            x = (b.x - view.crop_x) * sx
            y = (b.y - view.crop_y) * sy
            w, h = b.w * sx, b.h * sy
            if view.hflip:
                x = W - x - w
            c = _clip_box((x, y, w, h), W, H)
            if c is not None:
                boxes.append(Box(_f32(c[0]), _f32(c[1]), _f32(c[2]), _f32(c[3]), b.category))
        out.append(boxes)
    return out


def apply_view(example: MultimodalExample, view: ViewParams,
               modalities: Iterable[str] = MODALITIES) -> MultimodalExample:
    """Apply one view to every requested modality of ``example``.

    Appearance and flow share the crop, nearest-neighbour resize and flip;
    flow values are rescaled to output pixels and the x component changes
    sign under a flip. Spectro only gets the temporal window. Modalities not
    requested are returned as ``None``.
    """
    wanted = set(modalities)
    T, _, H, W = example.appearance.shape
    fi = np.asarray(view.frame_indices)
    if fi.size == 0 or fi.min() < 0 or fi.max() >= T or np.any(np.diff(fi) <= 0):
        raise ContractError(f"frame indices {view.frame_indices} invalid for {T} frames")
    if view.crop_size < 1 or view.crop_x + view.crop_size > W or view.crop_y + view.crop_size > H:
        raise ContractError(f"crop {view} does not fit a {H}x{W} grid")
    appearance = flow = spectro = layout = None
    if "appearance" in wanted:
        appearance = _spatial(example.appearance[fi], view, H, W)
    if "flow" in wanted:
        flow = _spatial(example.flow[fi], view, H, W)
        scale = np.array([W / view.crop_size, H / view.crop_size], dtype=np.float32)
        if view.hflip:
            scale[0] = -scale[0]
        if scale[0] != 1 or scale[1] != 1:
            flow = flow * scale[None, :, None, None]
    if "spectro" in wanted:
        spectro = np.ascontiguousarray(example.spectro[fi])
    if "layout" in wanted or "layout_raster" in wanted:
        layout = view_layout(example.layout, view, H, W)
    return MultimodalExample(
        example.example_id, appearance, flow, layout, spectro,
        example.noun_label, example.verb_label, example.action_label,
    )


# ---------------------------------------------------------------------------
# layout rasterisation
# ---------------------------------------------------------------------------

CATEGORY_COLORS = np.concatenate([np.array([[0.0, 0.0, 1.0]], dtype=np.float32), NOUN_COLORS * 0.8], axis=0)


def category_color(category: int) -> np.ndarray:
    return CATEGORY_COLORS[category % len(CATEGORY_COLORS)]


def rasterize_layout(layout: list[list[Box]], height: int, width: int, thickness: int = 2) -> np.ndarray:
    """Draw every box as a ``thickness``-pixel outline on a white ``[T, 3, H, W]`` canvas."""
    T = len(layout)
    canvas = np.ones((T, 3, height, width), dtype=np.float32)
    for t, boxes in enumerate(layout):
        for b in boxes:
            xa, xb = _pixel_range(b.x, b.x + b.w, width)
            ya, yb = _pixel_range(b.y, b.y + b.h, height)
            if xa >= xb or ya >= yb:
                continue
            region = np.zeros((height, width), dtype=bool)
            region[ya:yb, xa:xb] = True
            inner = np.zeros_like(region)
            if xb - xa > 2 * thickness and yb - ya > 2 * thickness:
                inner[ya + thickness:yb - thickness, xa + thickness:xb - thickness] = True
            outline = region & ~inner
            canvas[t][:, outline] = category_color(b.category)[:, None]
    return canvas


# ---------------------------------------------------------------------------
# shard files
# ---------------------------------------------------------------------------

SHARD_MAGIC = b"MMKDSHRD"
SHARD_VERSION = 1
_TAGS = {"appearance": 0, "flow": 1, "layout": 2, "spectro": 3}
_DTYPE_F32 = 0


def _tensor_block(tag: int, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<BBB", tag, _DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def encode_example(ex: MultimodalExample) -> bytes:
    parts = [struct.pack("<QHHH", ex.example_id, ex.noun_label, ex.verb_label, ex.action_label)]
    parts.append(_tensor_block(_TAGS["appearance"], ex.appearance))
    parts.append(_tensor_block(_TAGS["flow"], ex.flow))
    parts.append(_tensor_block(_TAGS["spectro"], ex.spectro))
    lay = [struct.pack("<BH", _TAGS["layout"], len(ex.layout))]
    for boxes in ex.layout:
        lay.append(struct.pack("<B", len(boxes)))
        for b in boxes:
            lay.append(struct.pack("<ffffB", b.x, b.y, b.w, b.h, b.category))
    parts.append(b"".join(lay))
    return b"".join(parts)


def encode_shard(shard: Shard) -> bytes:
    header = dict(shard.header)
    header["count"] = len(shard.examples)
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [SHARD_MAGIC, struct.pack("<I", SHARD_VERSION), struct.pack("<I", len(hjson)), hjson]
    out.extend(encode_example(ex) for ex in shard.examples)
    return b"".join(out)


def write_shard(shard: Shard, path: str | Path) -> str:
    """Write ``shard`` and return the SHA-256 of the file contents."""
    data = encode_shard(shard)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def decode_shard(raw: bytes) -> Shard:
    if raw[:8] != SHARD_MAGIC:
        raise ContractError("not a shard file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != SHARD_VERSION:
        raise ContractError(f"unsupported shard version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 12)
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    examples = []
    for _ in range(header["count"]):
        eid, noun, verb, action = struct.unpack_from("<QHHH", raw, pos)
        pos += 14
        tensors = {}
        layout = None
        while layout is None:
            (tag,) = struct.unpack_from("<B", raw, pos)
            if tag == _TAGS["layout"]:
                (nframes,) = struct.unpack_from("<H", raw, pos + 1)
                pos += 3
                layout = []
                for _ in range(nframes):
                    (nb,) = struct.unpack_from("<B", raw, pos)
                    pos += 1
                    boxes = []
                    for _ in range(nb):
                        x, y, w, h, cat = struct.unpack_from("<ffffB", raw, pos)
                        pos += 17
                        boxes.append(Box(x, y, w, h, cat))
                    layout.append(boxes)
                continue
            _, dtype, ndim = struct.unpack_from("<BBB", raw, pos)
            if dtype != _DTYPE_F32:
                raise ContractError(f"unsupported tensor dtype code {dtype}")
            dims = struct.unpack_from(f"<{ndim}I", raw, pos + 3)
            pos += 3 + 4 * ndim
            count = int(np.prod(dims))
            tensors[tag] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
        examples.append(MultimodalExample(
            eid, tensors[_TAGS["appearance"]], tensors[_TAGS["flow"]], layout, tensors[_TAGS["spectro"]],
            noun, verb, action,
        ))
    return Shard(header, examples)


def read_shard(path: str | Path) -> Shard:
    return decode_shard(Path(path).read_bytes())


PRESETS = {
    "default": {},
    "compositional": {"split_mode": "compositional", "label_noise": 0.3, "verb_cooccurrence": 1.0},
    "weak-spectro": {"label_noise": 0.3, "spectro_noise": 3.0, "spectro_noun_strength": 0.2},
}


def preset(name: str, **overrides) -> DatasetConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown dataset preset {name!r}")
    return replace(DatasetConfig(**PRESETS[name]), **overrides)
