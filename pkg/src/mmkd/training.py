"""AdamW, the warmup/decay schedule, gradient clipping and the training loops.

Teacher training, the appearance baseline and student distillation share one
loop (:func:`fit`), so a distillation run with ``lam = 0`` reproduces teacher
training on appearance bit for bit. Omnivore-style training reuses the same
loop with one modality drawn per batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .distill import (
    DistillConfig,
    TeacherEnsemble,
    combined_loss,
    cross_entropy,
    dual_head_loss,
    kd_kl_loss,
    softmax_np,
)
from .errors import ConfigError, ContractError
from .metrics import MetricsReport, report_dual, report_single
from .models import (
    ModalityModel,
    _inference,
    as_tuple,
    make_batch,
    model_init,
    task_labels,
    tta_forward,
    view_modalities,
)
from .rng import derive_seed, generator
from .synthdata import DatasetConfig, MultimodalExample, ViewParams, apply_view, sample_view

OMNIVORE_KINDS = ("appearance", "flow", "layout_raster", "spectro")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    peak_lr: float = 2e-3
    warmup_frac: float = 0.05
    clip_norm: float = 5.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac", f"must be in (0, 1), got {self.warmup_frac}")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm", f"must be > 0, got {self.clip_norm}")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr", f"must be > 0, got {self.peak_lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")

    def total_steps(self, num_examples: int) -> int:
        return self.epochs * (num_examples // self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"train.{key}", "unknown key")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimisation primitives
# ---------------------------------------------------------------------------

def warmup_steps(total_steps: int, warmup_frac: float = 0.05) -> int:
    return max(1, math.ceil(warmup_frac * total_steps))


def lr_at_step(step: int, total_steps: int, peak: float, warmup_frac: float = 0.05) -> float:
    """Linear 0 -> peak over the first ceil(warmup_frac * total) steps, then linear peak -> 0."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    w = warmup_steps(total_steps, warmup_frac)
    if step <= w:
        return peak * step / w
    return peak * (total_steps - step) / (total_steps - w)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64))) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 5.0) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        return [g * g.dtype.type(s) for g in grads], norm
    return list(grads), norm


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    peak_lr: float = 1e-4

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "OptimizerState":
        return cls([np.zeros(p.shape, np.float64) for p in params], [np.zeros(p.shape, np.float64) for p in params], **kw)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState, lr: float) -> list[np.ndarray]:
    """Decoupled weight decay, then a bias-corrected Adam update. Returns new arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer moments differ in count")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ContractError(f"param {p.shape} and grad {g.shape} differ")
        p64 = p.astype(np.float64)
        g64 = g.astype(np.float64)
        p64 = p64 - lr * state.weight_decay * p64
        state.m[i] = b1 * state.m[i] + (1 - b1) * g64
        state.v[i] = b2 * state.v[i] + (1 - b2) * g64 * g64
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p64 = p64 - lr * mhat / (np.sqrt(vhat) + state.eps)
        out.append(p64.astype(p.dtype))
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def report_from_logits(task: str, logits: tuple[np.ndarray, ...], examples: Sequence[MultimodalExample],
                       cfg: DatasetConfig) -> MetricsReport:
    labels = task_labels(task, examples)
    if task == "dual":
        return report_dual(softmax_np(logits[0]), softmax_np(logits[1]), labels[0], labels[1], cfg.num_verbs)
    probs = softmax_np(logits[0])
    rep = report_single(probs, labels[0])
    if task == "verb":
        rep.verb_top1 = rep.top1
    elif task == "action":
        pred = np.argmax(probs, axis=1)
        nouns = np.array([e.noun_label for e in examples])
        verbs = np.array([e.verb_label for e in examples])
        rep.noun_top1 = float(np.mean(pred // cfg.num_verbs == nouns)) if len(nouns) else 0.0
        rep.verb_top1 = float(np.mean(pred % cfg.num_verbs == verbs)) if len(verbs) else 0.0
        rep.action_top1 = rep.top1
    rep.check()
    return rep


def evaluate_model(model: ModalityModel, examples: Sequence[MultimodalExample], cfg: DatasetConfig,
                   num_clips: int = 1, num_crops: int = 1, kind: str | None = None) -> MetricsReport:
    logits = tta_forward(model, examples, cfg, num_clips, num_crops, kind=kind)
    return report_from_logits(model.task, logits, examples, cfg)


# ---------------------------------------------------------------------------
# the shared loop
# ---------------------------------------------------------------------------

@dataclass
class StepLosses:
    loss: T.Tensor
    ce: list[float]
    kl: list[float]


def view_seed(run_seed: int, epoch: int, step: int, position: int) -> int:
    return derive_seed(run_seed, "view", epoch, step, position)


def batch_losses(student: ModalityModel, examples: Sequence[MultimodalExample], views: Sequence[ViewParams],
                 cfg: DatasetConfig, student_kind: str = "appearance", teacher: TeacherEnsemble | None = None,
                 dist: DistillConfig | None = None, view_hook: Callable | None = None,
                 step: int = 0) -> StepLosses:
    """Loss for one batch. Every modality of an example is cut with the same view."""
    need = set(view_modalities(student_kind))
    if teacher is not None:
        for m in teacher.members:
            need.update(view_modalities(m.modality))
    viewed = [apply_view(e, v, sorted(need)) for e, v in zip(examples, views)]
    if view_hook is not None:
        ids = {k: [id(v) for v in views] for k in sorted(need | {student_kind})}
        view_hook(step, ids)
    omni = student.modality == "omnivore"
    batch = make_batch(viewed, student_kind, cfg, omnivore=omni)
    logits = as_tuple(student(batch))
    labels = task_labels(student.task, examples)
    ces = [cross_entropy(lg, lb) for lg, lb in zip(logits, labels)]
    if teacher is None:
        loss = ces[0] if len(ces) == 1 else T.add(ces[0], ces[1])
        return StepLosses(loss, [c.item() for c in ces], [])
    if dist is None:
        raise ContractError("distillation needs a DistillConfig")
    member_out = []
    for m in teacher.members:
        tb = make_batch(viewed, m.modality, cfg)
        member_out.append(tuple(t.data for t in as_tuple(_inference(m, tb))))
    t_logits = teacher.combine(member_out)
    kls = [kd_kl_loss(tl, sl, dist.tau) for tl, sl in zip(t_logits, logits)]
    if len(ces) == 1:
        loss = combined_loss(ces[0], kls[0], dist.lam)
    else:
        loss = dual_head_loss((ces[0], kls[0]), (ces[1], kls[1]), dist.lam)
    return StepLosses(loss, [c.item() for c in ces], [k.item() for k in kls])


@dataclass
class TrainResult:
    model: ModalityModel
    log: list[dict]
    modality_draws: list[str]

    @property
    def final(self) -> MetricsReport | None:
        return MetricsReport.from_dict(self.log[-1]["val"]) if self.log and self.log[-1].get("val") else None


def fit(model: ModalityModel, train: Sequence[MultimodalExample], val: Sequence[MultimodalExample],
        cfg: DatasetConfig, tcfg: TrainConfig, *, kinds: Sequence[str] = ("appearance",),
        teacher: TeacherEnsemble | None = None, dist: DistillConfig | None = None,
        epoch_multiplier: int = 1, view_hook: Callable | None = None,
        log_path: str | Path | None = None) -> TrainResult:
    """Train ``model`` in place and return it frozen with its JSON-lines log records.

    ``kinds`` lists the input modalities of the model. With more than one, a
    modality is drawn uniformly per batch from its own seeded stream.
    """
    if teacher is not None:
        for m in teacher.members:
            if not m.frozen:
                raise ContractError(f"teacher {m.modality} is not frozen")
    for kind in kinds:
        for v in view_modalities(kind):
            if train and getattr(train[0], v, None) is None:
                raise ContractError(f"training examples have no {v} modality")
    epochs = tcfg.epochs * epoch_multiplier
    B = tcfg.batch_size
    per_epoch = len(train) // B
    total = epochs * per_epoch
    if epochs > 0 and per_epoch == 0:
        raise ContractError(f"batch size {B} exceeds the {len(train)} training examples")
    params = model.parameters()
    state = OptimizerState.for_params([p.data for p in params], beta1=tcfg.beta1, beta2=tcfg.beta2,
                                      eps=tcfg.eps, weight_decay=tcfg.weight_decay, peak_lr=tcfg.peak_lr)
    draw_rng = generator(tcfg.seed, "modality-draw")
    draws: list[str] = []
    log: list[dict] = []
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    fh = open(log_path, "w") if log_path else None
    step = 0
    lr = 0.0
    try:
        for epoch in range(epochs):
            order = generator(tcfg.seed, "shuffle", epoch).permutation(len(train))
            losses = []
            for s in range(per_epoch):
                idx = order[s * B:(s + 1) * B]
                batch = [train[i] for i in idx]
                views = [sample_view(view_seed(tcfg.seed, epoch, s, j), "train", cfg) for j in range(B)]
                kind = kinds[0] if len(kinds) == 1 else kinds[int(draw_rng.integers(len(kinds)))]
                draws.append(kind)
                out = batch_losses(model, batch, views, cfg, kind, teacher, dist, view_hook, step)
                for p in params:
                    p.grad = None
                T.backward(out.loss)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                grads, _ = clip_grad_norm(grads, tcfg.clip_norm)
                lr = lr_at_step(step, total, tcfg.peak_lr, tcfg.warmup_frac)
                new = adamw_step([p.data for p in params], grads, state, lr)
                for p, d in zip(params, new):
                    p.data = d
                    p.grad = None
                losses.append(out.loss.item())
                step += 1
            last = epoch == epochs - 1
            rec = {"epoch": epoch, "step": step, "lr": lr, "train_loss": math.fsum(losses) / max(1, len(losses))}
            if last or (tcfg.eval_every and (epoch + 1) % tcfg.eval_every == 0):
                rec["val"] = evaluate_model(model, val, cfg).to_dict() if val else None
            else:
                rec["val"] = None
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    model.freeze()
    return TrainResult(model, log, draws)


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def train_teacher(modality: str, train, val, cfg: DatasetConfig, tcfg: TrainConfig, task: str,
                  log_path=None, view_hook=None) -> TrainResult:
    """CE-only training of one modality model."""
    model = model_init(modality, task, cfg, tcfg.seed)
    return fit(model, train, val, cfg, tcfg, kinds=(modality,), log_path=log_path, view_hook=view_hook)


def train_baseline(train, val, cfg: DatasetConfig, tcfg: TrainConfig, task: str, log_path=None) -> TrainResult:
    """The appearance model trained with cross-entropy alone."""
    return train_teacher("appearance", train, val, cfg, tcfg, task, log_path=log_path)


def train_omnivore(train, val, cfg: DatasetConfig, tcfg: TrainConfig, task: str,
                   kinds: Sequence[str] = OMNIVORE_KINDS, log_path=None) -> TrainResult:
    """One shared-weight model on homogeneous single-modality batches; ``M`` times the epochs."""
    kinds = tuple(kinds)
    if not kinds:
        raise ContractError("omnivore training needs at least one modality")
    model = model_init("omnivore", task, cfg, tcfg.seed)
    return fit(model, train, val, cfg, tcfg, kinds=kinds, epoch_multiplier=len(kinds), log_path=log_path)


def distill_student(teacher: TeacherEnsemble, train, val, cfg: DatasetConfig, dist: DistillConfig,
                    tcfg: TrainConfig, task: str | None = None, student: ModalityModel | None = None,
                    log_path=None, view_hook=None) -> TrainResult:
    """Appearance student trained on ``lam * KL(teacher || student) + (1 - lam) * CE``."""
    for m in teacher.members:
        if not m.frozen:
            raise ContractError(f"teacher {m.modality} is not frozen")
    task = task or teacher.members[0].task
    if student is None:
        student = model_init("appearance", task, cfg, tcfg.seed)
    if student.dims != teacher.dims:
        raise ContractError(f"student heads {student.dims} differ from teacher heads {teacher.dims}")
    return fit(student, train, val, cfg, tcfg, kinds=("appearance",), teacher=teacher, dist=dist,
               log_path=log_path, view_hook=view_hook)
