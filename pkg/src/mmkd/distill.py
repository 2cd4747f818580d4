"""Distillation maths: cross-entropy, softened KL, loss blending, teacher weighting.

Loss functions take autodiff tensors and return scalar tensors. Teacher-side
quantities (ensemble logits, weights) are plain numpy because teachers are
frozen and never receive gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .models import ModalityModel, predict_logits, task_labels
from .synthdata import DatasetConfig, MultimodalExample
from .tensor import Tensor

DEFAULT_TAU = 10.0
UNIFORM_GAMMA = 30.0


@dataclass(frozen=True)
class DistillConfig:
    tau: float = DEFAULT_TAU
    lam: float = 0.8
    gamma: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau", f"must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda", f"must be in [0, 1], got {self.lam}")
        if not self.gamma > 0:
            raise ConfigError("gamma", f"must be > 0, got {self.gamma}")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper-best": DistillConfig(lam=0.8, gamma=1.0),
    "table5-row-KL-only": DistillConfig(lam=1.0, gamma=UNIFORM_GAMMA),
    "ce-only": DistillConfig(lam=0.0, gamma=UNIFORM_GAMMA),
    "uniform": DistillConfig(lam=0.8, gamma=UNIFORM_GAMMA),
}


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    picked = T.take_last(T.log_softmax_lastdim(logits), labels)
    return T.scale(T.tensor_sum(picked), -1.0 / B)


def kd_kl_loss(teacher_logits, student_logits: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """``tau^2 * mean_B sum_c p (log p - log q)`` with p, q the tau-softened softmaxes.

    The teacher side is detached; its entropy term is added as a constant so
    the value equals the KL divergence itself.
    """
    if not tau > 0:
        raise ConfigError("tau", f"must be > 0, got {tau}")
    tl = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if tl.shape != student_logits.shape:
        raise ContractError(f"teacher {tl.shape} and student {student_logits.shape} logits differ in shape")
    B = tl.shape[0]
    dt = student_logits.dtype
    zt = tl.astype(np.float64) / tau
    zt = zt - zt.max(axis=-1, keepdims=True)
    log_p = zt - np.log(np.exp(zt).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    neg_entropy = float((p * log_p).sum()) / B
    log_q = T.log_softmax_lastdim(T.scale(student_logits, 1.0 / tau))
    cross = T.tensor_sum(T.mul(Tensor(p.astype(dt), dtype=dt), log_q))
    kl = T.add_scalar(T.scale(cross, -1.0 / B), neg_entropy)
    return T.scale(kl, tau * tau)


def combined_loss(ce, kl, lam: float):
    """``lam * kl + (1 - lam) * ce``; the endpoints return an input unchanged."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda", f"must be in [0, 1], got {lam}")
    if lam == 0.0:
        return ce
    if lam == 1.0:
        return kl
    if isinstance(ce, Tensor) or isinstance(kl, Tensor):
        return T.add(T.scale(kl, lam), T.scale(ce, 1.0 - lam))
    return lam * kl + (1.0 - lam) * ce


def dual_head_loss(noun_terms: tuple, verb_terms: tuple | None, lam: float):
    """Sum of the blended noun and verb losses; each ``terms`` is ``(ce, kl)``."""
    if verb_terms is None or noun_terms is None:
        raise ContractError("dual_head_loss needs both noun and verb terms (dual-head task)")
    n = combined_loss(noun_terms[0], noun_terms[1], lam)
    v = combined_loss(verb_terms[0], verb_terms[1], lam)
    if isinstance(n, Tensor) or isinstance(v, Tensor):
        return T.add(n, v)
    return n + v


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_np(logits: np.ndarray, labels: np.ndarray) -> float:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def compute_teacher_weights(errors: Sequence[float], gamma: float) -> np.ndarray:
    """``w_m = exp(-e_m / gamma) / sum_j exp(-e_j / gamma)`` in float64."""
    if not gamma > 0:
        raise ConfigError("gamma", f"must be > 0, got {gamma}")
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise ContractError("errors must be a non-empty vector")
    return softmax_np(-e / gamma)


def ensemble_logits(member_logits: Sequence[np.ndarray], weights: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Weighted logit sum over members (fixed order) and its softmax."""
    if len(member_logits) != len(weights) or not member_logits:
        raise ContractError(f"{len(member_logits)} member outputs but {len(weights)} weights")
    shape = np.shape(member_logits[0])
    for m in member_logits:
        if np.shape(m) != shape:
            raise ContractError(f"member logits shapes differ: {shape} vs {np.shape(m)}")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ContractError(f"weights must lie on the simplex, got {w.tolist()}")
    acc = np.zeros(shape, dtype=np.float64)
    for wm, m in zip(w, member_logits):
        acc += wm * np.asarray(m, dtype=np.float64)
    return acc, softmax_np(acc)


class TeacherEnsemble:
    """Frozen modality models with simplex weights, in modality enumeration order."""

    def __init__(self, members: Sequence[ModalityModel], weights: Sequence[float] | None = None,
                 errors: Sequence[float] | None = None, tau: float = DEFAULT_TAU):
        if not members:
            raise ContractError("an ensemble needs at least one member")
        for m in members:
            if not m.frozen:
                raise ContractError(f"teacher {m.modality} is not frozen")
        dims = {m.dims for m in members}
        if len(dims) != 1:
            raise ContractError(f"members disagree on head dims: {sorted(dims)}")
        self.members = list(members)
        M = len(self.members)
        w = np.full(M, 1.0 / M) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (M,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ContractError(f"weights {w.tolist()} are not a length-{M} simplex vector")
        self.weights = w
        self.errors = None if errors is None else np.asarray(errors, dtype=np.float64)
        self.tau = tau

    @property
    def modalities(self) -> list[str]:
        return [m.modality for m in self.members]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.members[0].dims

    def combine(self, member_outputs: Sequence[tuple[np.ndarray, ...]]) -> tuple[np.ndarray, ...]:
        """Per-head ensemble logits from per-member per-head logits."""
        heads = len(self.dims)
        return tuple(
            ensemble_logits([out[h] for out in member_outputs], self.weights)[0] for h in range(heads)
        )


def estimate_teacher_errors(members: Sequence[ModalityModel], holdout: Sequence[MultimodalExample],
                            cfg: DatasetConfig) -> np.ndarray:
    """Mean eval-view cross-entropy of every member on the holdout (summed over heads)."""
    if len(holdout) == 0:
        raise ContractError("holdout set is empty")
    errs = []
    for m in members:
        if not m.frozen:
            raise ContractError(f"teacher {m.modality} is not frozen")
        logits = predict_logits(m, holdout, cfg)
        labels = task_labels(m.task, holdout)
        errs.append(math.fsum(cross_entropy_np(lg, lb) for lg, lb in zip(logits, labels)))
    return np.asarray(errs, dtype=np.float64)
