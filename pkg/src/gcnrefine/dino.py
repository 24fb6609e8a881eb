"""Temperature softmax, cross-entropy, multi-crop distillation loss and EMA updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


def temperature_softmax(logits, tau: float) -> np.ndarray:
    """Softmax of ``logits / tau`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def cross_entropy(p_t, p_s) -> float:
    """``-sum(p_t * log p_s)``, the student probabilities floored at 1e-12."""
    p_t = np.asarray(p_t, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_t.shape != p_s.shape:
        raise ValueError(f"length mismatch: {p_t.shape} vs {p_s.shape}")
    for name, p in (("teacher", p_t), ("student", p_s)):
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} distribution sums to {p.sum()}")
    return float(-np.sum(p_t * np.log(np.maximum(p_s, PROB_FLOOR))))


def dino_loss(teacher_probs, student_probs, normalize: bool = True) -> float:
    """Cross-entropy summed over every (global crop, other crop) pair.

    ``teacher_probs[g]`` is the teacher output on global crop ``g`` and
    ``student_probs[c]`` the student output on crop ``c``; the first
    ``len(teacher_probs)`` student crops are those same global crops. With
    ``normalize`` the sum is divided by the number of pairs.
    """
    teacher_probs = list(teacher_probs)
    student_probs = list(student_probs)
    if not teacher_probs:
        raise ValueError("need at least one global crop")
    if len(student_probs) < len(teacher_probs):
        raise ValueError("student crops must include every global crop")
    total, pairs = 0.0, 0
    for g, p_t in enumerate(teacher_probs):
        for c, p_s in enumerate(student_probs):
            if c == g:
                continue
            total += cross_entropy(p_t, p_s)
            pairs += 1
    if pairs == 0:
        return 0.0
    return total / pairs if normalize else total


def ema_update(teacher_params, student_params, momentum: float) -> np.ndarray:
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    teacher_params = np.asarray(teacher_params, dtype=np.float64)
    student_params = np.asarray(student_params, dtype=np.float64)
    if teacher_params.shape != student_params.shape:
        raise ValueError(f"shape mismatch: {teacher_params.shape} vs {student_params.shape}")
    return momentum * teacher_params + (1.0 - momentum) * student_params


@dataclass
class ProjectionHead:
    """Linear map from features to ``K`` logits."""

    weight: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[1] < 2:
            raise ValueError("weight must be (feature_dim, K) with K >= 2")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("non-finite projection weights")

    def logits(self, x) -> np.ndarray:
        return np.asarray(x) @ self.weight


@dataclass(frozen=True)
class CropBatch:
    global_crops: np.ndarray
    local_crops: np.ndarray

    @property
    def all_crops(self) -> np.ndarray:
        return np.concatenate([self.global_crops, self.local_crops], axis=0)


def _make_crops(rng, x, n_global, n_local, global_noise, local_noise) -> CropBatch:
    # crops: (n_crops, batch, dim); local views are noisier
    g = x[None] + global_noise * rng.standard_normal((n_global,) + x.shape)
    l = x[None] + local_noise * rng.standard_normal((n_local,) + x.shape)
    return CropBatch(g, l)


def _batch_loss_and_grad(student, teacher, crops, tau_s, tau_t):
    views = crops.all_crops
    n_global = crops.global_crops.shape[0]
    p_t = temperature_softmax(teacher.logits(crops.global_crops), tau_t)
    p_s = temperature_softmax(student.logits(views), tau_s)
    batch = views.shape[1]
    loss = 0.0
    dlogits = np.zeros_like(p_s)
    pairs = 0
    for g in range(n_global):
        for c in range(views.shape[0]):
            if c == g:
                continue
            loss += -np.sum(p_t[g] * np.log(np.maximum(p_s[c], PROB_FLOOR))) / batch
            dlogits[c] += (p_s[c] - p_t[g]) / tau_s
            pairs += 1
    dlogits /= pairs * batch
    grad = np.einsum("cbd,cbk->dk", views, dlogits)
    return loss / pairs, grad


def run_dino_toy(steps=100, learning_rate=0.5, momentum=0.9, tau_student=0.1, tau_teacher=0.04,
                 dim=8, k=4, batch=32, n_global=2, n_local=4, seed=0) -> list:
    """Distill a linear head on two-cluster vectors; returns the loss after each step.

    The trace starts with the loss before any update and is measured on a
    fixed evaluation batch, so it has ``steps + 1`` entries.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((2, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(size):
        cls = rng.integers(0, 2, size)
        return centers[cls] + 0.1 * rng.standard_normal((size, dim))

    student = ProjectionHead(rng.standard_normal((dim, k)) * 0.1)
    teacher = ProjectionHead(student.weight.copy())
    eval_crops = _make_crops(rng, draw(256), n_global, n_local, 0.05, 0.3)
    trace = [_batch_loss_and_grad(student, teacher, eval_crops, tau_student, tau_teacher)[0]]
    for step in range(steps):
        crops = _make_crops(rng, draw(batch), n_global, n_local, 0.05, 0.3)
        _, grad = _batch_loss_and_grad(student, teacher, crops, tau_student, tau_teacher)
        student = ProjectionHead(student.weight - learning_rate * grad)
        teacher = ProjectionHead(ema_update(teacher.weight, student.weight, momentum))
        loss = _batch_loss_and_grad(student, teacher, eval_crops, tau_student, tau_teacher)[0]
        if not np.isfinite(loss):
            raise FloatingPointError(f"dino toy loss diverged at step {step}")
        trace.append(float(loss))
    return [float(v) for v in trace]
