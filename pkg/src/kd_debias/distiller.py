"""Distance-aware soft labels and the lightweight MF student distilled from them."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._rng import stream
from .data import Batch, InteractionTable
from .teacher import (TeacherModel, bce, bce_grad, epoch_batches, invariant_score, phi, sigmoid,
                      variant_score)

logger = logging.getLogger(__name__)

MODES = ("full", "no-variant", "equal-weight", "no-kd")


@dataclass(frozen=True)
class DistillConfig:
    gamma: float = 0.17
    lr: float = 0.005
    dim: int = 40
    epochs: int = 10
    batch_size: int = 1024
    l2: float = 0.0
    seed: int = 0
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.lr > 0 or self.dim < 1 or self.epochs < 0 or self.batch_size < 1 or self.l2 < 0:
            raise ValueError("invalid optimizer settings")


@dataclass(frozen=True, eq=False)
class StudentModel:
    user_emb: np.ndarray
    item_emb: np.ndarray

    def __post_init__(self):
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2 or self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("student tables must be 2-d with a shared dim")
        if not (np.all(np.isfinite(self.user_emb)) and np.all(np.isfinite(self.item_emb))):
            raise ValueError("non-finite student parameters")

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    def tables(self) -> dict[str, np.ndarray]:
        return {"user_emb": self.user_emb, "item_emb": self.item_emb}

    def score(self, users, items):
        return student_score(self, users, items)


@dataclass(frozen=True, eq=False)
class SoftLabelSet:
    """Fused teacher targets, one per training record, plus their ingredients."""

    users: np.ndarray
    items: np.ndarray
    envs: np.ndarray
    y_star: np.ndarray
    p_inv: np.ndarray
    p_var: np.ndarray
    distance: np.ndarray
    w_inv: np.ndarray

    def __len__(self) -> int:
        return len(self.y_star)

    @property
    def w_var(self) -> np.ndarray:
        return 1.0 - self.w_inv

    def lookup(self) -> dict[tuple[int, int, int], float]:
        return dict(zip(zip(self.users.tolist(), self.items.tolist(), self.envs.tolist()),
                        self.y_star.tolist()))


def soft_label(p_inv, p_var, gamma: float):
    """Return ``(y_star, d, w_inv, w_var)`` for one pair or for arrays.

    ``w_inv = (1 - d) ** gamma`` with ``d = |p_inv - p_var|``; the larger the
    disagreement, the more the variant branch contributes.
    """
    d = np.abs(np.asarray(p_inv, dtype=np.float64) - p_var)
    w_inv = np.power(1.0 - d, gamma)
    w_var = 1.0 - w_inv
    y_star = w_inv * p_inv + w_var * p_var
    if np.ndim(y_star) == 0:
        return float(y_star), float(d), float(w_inv), float(w_var)
    return y_star, d, w_inv, w_var


def build_soft_labels(teacher: TeacherModel, data: InteractionTable, gamma: float,
                      mode: str = "full") -> SoftLabelSet:
    """Soft targets from a frozen teacher using each record's own environment label.

    ``mode`` picks the fusion: ``full`` is distance-aware, ``no-variant``
    keeps only the invariant prediction, ``equal-weight`` averages both.
    """
    if (data.num_users, data.num_items) != (teacher.num_users, teacher.num_items) \
            or data.num_envs != teacher.num_envs:
        raise ValueError("teacher and data are not index-compatible")
    u, i, e = data.users, data.items, data.envs
    p_inv = invariant_score(teacher, u, i)
    p_var = variant_score(teacher, u, i, e)
    y_star, d, w_inv, _ = soft_label(p_inv, p_var, gamma)
    if mode == "no-variant":
        w_inv = np.ones_like(p_inv)
        y_star = p_inv.copy()
    elif mode == "equal-weight":
        w_inv = np.full_like(p_inv, 0.5)
        y_star = 0.5 * p_inv + 0.5 * p_var
    elif mode not in ("full", "no-kd"):
        raise ValueError(f"unknown mode {mode!r}")
    return SoftLabelSet(u, i, e, y_star, p_inv, p_var, d, w_inv)


def student_score(student: StudentModel, u, i):
    u = np.asarray(u)
    i = np.asarray(i)
    if np.any(u < 0) or np.any(u >= student.num_users) or np.any(i < 0) or np.any(i >= student.num_items):
        raise IndexError("student index out of range")
    return phi(student.user_emb[u] * student.item_emb[i])


def _targets(batch, soft_labels) -> np.ndarray:
    if isinstance(soft_labels, SoftLabelSet):
        if len(soft_labels) != len(batch.users) or not (
                np.array_equal(soft_labels.users, batch.users) and np.array_equal(soft_labels.items, batch.items)):
            raise ValueError("soft labels are not aligned with the batch")
        return soft_labels.y_star
    t = np.asarray(soft_labels, dtype=np.float64)
    if t.shape != (len(batch.users),):
        raise ValueError("soft labels are not aligned with the batch")
    return t


def _as_batch(batch) -> Batch:
    if isinstance(batch, InteractionTable):
        batch = batch.batch()
    if len(batch.users) == 0:
        raise ValueError("empty batch")
    return batch


def kd_loss(student: StudentModel, batch, soft_labels) -> float:
    """Mean soft-target BCE of the student against the teacher's fused labels."""
    b = _as_batch(batch)
    return float(np.mean(bce(student_score(student, b.users, b.items), _targets(b, soft_labels))))


def kd_loss_and_grads(student: StudentModel, batch, soft_labels) -> tuple[float, dict[str, np.ndarray]]:
    b = _as_batch(batch)
    t = _targets(b, soft_labels)
    su, ti = student.user_emb[b.users], student.item_emb[b.items]
    p = sigmoid((su * ti).sum(axis=1))
    loss = float(np.mean(bce(p, t)))
    g = (bce_grad(p, t) * p * (1.0 - p) / len(t))[:, None]
    gu = np.zeros_like(student.user_emb)
    gi = np.zeros_like(student.item_emb)
    np.add.at(gu, b.users, g * ti)
    np.add.at(gi, b.items, g * su)
    return loss, {"user_emb": gu, "item_emb": gi}


def init_student(dim: int, num_users: int, num_items: int, seed: int) -> StudentModel:
    rng = stream(seed, "student-init")
    return StudentModel(rng.normal(0.0, 0.1, size=(num_users, dim)),
                        rng.normal(0.0, 0.1, size=(num_items, dim)))


def fit_student(data: InteractionTable, targets: np.ndarray, cfg: DistillConfig,
                init: StudentModel | None = None, shuffle: np.random.Generator | None = None) -> StudentModel:
    """Mini-batch SGD of an MF student on per-record targets aligned with ``data``."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty table")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (len(data),):
        raise ValueError("targets must align with data")
    student = init if init is not None else init_student(cfg.dim, data.num_users, data.num_items, cfg.seed)
    shuffle = shuffle if shuffle is not None else stream(cfg.seed, "student-shuffle")
    users, items = student.user_emb.copy(), student.item_emb.copy()
    decay = 1.0 - cfg.lr * cfg.l2
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in epoch_batches(len(data), cfg.batch_size, shuffle):
            loss, g = kd_loss_and_grads(StudentModel(users, items), data.batch(idx), targets[idx])
            if cfg.l2:
                users *= decay
                items *= decay
            users -= cfg.lr * g["user_emb"]
            items -= cfg.lr * g["item_emb"]
            total += loss * len(idx)
        logger.debug("student epoch %d: loss=%.5f", epoch, total / len(data))
    return StudentModel(users, items)


def distill(teacher: TeacherModel, data: InteractionTable, cfg: DistillConfig) -> StudentModel | None:
    """Distill ``teacher`` into a fresh student; ``no-kd`` mode returns ``None``.

    ``data`` must carry the teacher's final environment labels.
    """
    if cfg.mode not in MODES:
        raise ValueError(f"unknown mode {cfg.mode!r}")
    if len(data) == 0:
        raise ValueError("cannot distill on an empty table")
    if cfg.mode == "no-kd":
        return None
    labels = build_soft_labels(teacher, data, cfg.gamma, cfg.mode)
    return fit_student(data, labels.y_star, cfg)


def train_mf_baseline(data: InteractionTable, cfg: DistillConfig) -> StudentModel:
    """The student architecture and trainer fit directly to the observed labels."""
    return fit_student(data, data.labels, cfg)


class TeacherFusionScorer:
    """Scores pairs with the teacher's distance-aware fusion, no student involved.

    A test pair has no environment label of its own, so the variant branch
    uses the environment the user was most often assigned during training
    (lowest index on ties; env 0 for users absent from training).
    """

    def __init__(self, teacher: TeacherModel, train: InteractionTable, gamma: float):
        counts = np.zeros((teacher.num_users, teacher.num_envs), dtype=np.int64)
        np.add.at(counts, (train.users, train.envs), 1)
        self.teacher = teacher
        self.gamma = gamma
        self.user_env = counts.argmax(axis=1)

    def score(self, users, items):
        users = np.asarray(users)
        p_inv = invariant_score(self.teacher, users, items)
        p_var = variant_score(self.teacher, users, items, self.user_env[users])
        return soft_label(p_inv, p_var, self.gamma)[0]

