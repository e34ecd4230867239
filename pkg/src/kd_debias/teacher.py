"""Disentangled invariant/variant preference model trained against an environment classifier.

Scores are ``sigmoid(sum(x))`` of Hadamard products: the invariant preference
is ``user_inv * item_inv`` and the variant preference is
``user_var * item_var * env_emb[e]``. A linear softmax classifier tries to
recover the environment from the invariant preference while the embeddings
are trained on ``L_inv - alpha * L_env + beta * L_var``.

All gradients are written out by hand; ``loss_and_grads`` is the single
place they are computed.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from ._rng import stream
from .data import Batch, InteractionTable

logger = logging.getLogger(__name__)

EPS = 1e-7
_TINY = np.finfo(np.float64).tiny
_EPSNEG = np.finfo(np.float64).epsneg

EMBEDDING_TABLES = ("user_inv", "item_inv", "user_var", "item_var", "env_emb")
CLASSIFIER_TABLES = ("clf_weight", "clf_bias")


@dataclass(frozen=True, eq=False)
class TeacherConfig:
    dim: int = 40
    num_envs: int = 2
    alpha: float = 1.9
    beta: float = 9.9
    lr: float = 0.003
    epochs: int = 10
    batch_size: int = 1024
    warmup_epochs: int = 3
    l2: float = 0.0
    seed: int = 0
    detach_inv_in_var: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.num_envs < 1:
            raise ValueError("dim and num_envs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs/warmup_epochs must be >= 0 and batch_size >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


@dataclass(frozen=True, eq=False)
class TeacherModel:
    user_inv: np.ndarray
    item_inv: np.ndarray
    user_var: np.ndarray
    item_var: np.ndarray
    env_emb: np.ndarray
    clf_weight: np.ndarray  # (dim, num_envs)
    clf_bias: np.ndarray  # (num_envs,)

    def __post_init__(self):
        dim = self.user_inv.shape[1]
        for name in EMBEDDING_TABLES:
            t = getattr(self, name)
            if t.ndim != 2 or t.shape[1] != dim:
                raise ValueError(f"{name} must have shape (n, {dim}), got {t.shape}")
        if self.user_var.shape[0] != self.num_users or self.item_var.shape[0] != self.num_items:
            raise ValueError("invariant and variant tables disagree on entity counts")
        if self.clf_weight.shape != (dim, self.num_envs) or self.clf_bias.shape != (self.num_envs,):
            raise ValueError("classifier shape does not match dim/num_envs")
        for name in EMBEDDING_TABLES + CLASSIFIER_TABLES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def dim(self) -> int:
        return self.user_inv.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_inv.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_inv.shape[0]

    @property
    def num_envs(self) -> int:
        return self.env_emb.shape[0]

    def tables(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in EMBEDDING_TABLES + CLASSIFIER_TABLES}

    def replace(self, **tables) -> "TeacherModel":
        return dataclasses.replace(self, **tables)

    def score(self, users, items):
        """Invariant-branch prediction, the unbiased score of the teacher."""
        return invariant_score(self, users, items)


# ------------------------------------------------------------------ scalar pieces

def sigmoid(x):
    # split by sign to avoid overflow in exp
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep scores strictly inside (0, 1) even where float64 would round to an end
    np.clip(out, _TINY, 1.0 - _EPSNEG, out=out)
    return out if out.ndim else float(out)


def phi(x) -> float | np.ndarray:
    """sigmoid of the component sum along the last axis."""
    return sigmoid(np.sum(np.asarray(x, dtype=np.float64), axis=-1))


def fuse_f(p_var, p_inv):
    return p_var * p_inv


def bce(p, y):
    """Binary cross entropy with p clamped to [EPS, 1 - EPS]; soft targets allowed."""
    p = np.clip(p, EPS, 1.0 - EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def bce_grad(p, y):
    """d bce / d p, zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    inside = (p > EPS) & (p < 1.0 - EPS)
    pc = np.clip(p, EPS, 1.0 - EPS)
    return np.where(inside, -y / pc + (1.0 - y) / (1.0 - pc), 0.0)


def _check_index(model: TeacherModel, users, items, envs=None):
    users = np.asarray(users)
    items = np.asarray(items)
    if np.any(users < 0) or np.any(users >= model.num_users):
        raise IndexError("user index out of range")
    if np.any(items < 0) or np.any(items >= model.num_items):
        raise IndexError("item index out of range")
    if envs is not None:
        envs = np.asarray(envs)
        if np.any(envs < 0) or np.any(envs >= model.num_envs):
            raise IndexError("environment index out of range")


def invariant_score(model: TeacherModel, u, i):
    _check_index(model, u, i)
    return phi(model.user_inv[u] * model.item_inv[i])


def variant_score(model: TeacherModel, u, i, e):
    _check_index(model, u, i, e)
    return phi(model.user_var[u] * model.item_var[i] * model.env_emb[e])


# ------------------------------------------------------------------ losses

def _as_batch(batch) -> Batch:
    if isinstance(batch, InteractionTable):
        batch = batch.batch()
    if len(batch.users) == 0:
        raise ValueError("empty batch")
    return batch


def _classifier_logits(model: TeacherModel, m: np.ndarray) -> np.ndarray:
    return m @ model.clf_weight + model.clf_bias


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


def loss_inv(model: TeacherModel, batch) -> float:
    b = _as_batch(batch)
    return float(np.mean(bce(invariant_score(model, b.users, b.items), b.labels)))


def loss_env(model: TeacherModel, batch) -> float:
    b = _as_batch(batch)
    _check_index(model, b.users, b.items, b.envs)
    m = model.user_inv[b.users] * model.item_inv[b.items]
    logp = _log_softmax(_classifier_logits(model, m))
    return float(-np.mean(logp[np.arange(len(b)), b.envs]))


def loss_var(model: TeacherModel, batch) -> float:
    b = _as_batch(batch)
    p = fuse_f(variant_score(model, b.users, b.items, b.envs), invariant_score(model, b.users, b.items))
    return float(np.mean(bce(p, b.labels)))


def loss_major(model: TeacherModel, batch, alpha: float, beta: float) -> float:
    b = _as_batch(batch)
    return loss_inv(model, b) - alpha * loss_env(model, b) + beta * loss_var(model, b)


def _scatter(table: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    g = np.zeros_like(table)
    np.add.at(g, idx, rows)
    return g


def loss_and_grads(model: TeacherModel, batch, alpha: float, beta: float,
                   detach_inv_in_var: bool = False) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Component losses and gradients of every table.

    Returned gradients: ``inv``, ``env``, ``var`` map to the per-table
    gradients of the matching loss; ``major`` combines them with
    ``alpha``/``beta``. The classifier gradients of ``major`` are not used
    for training (the classifier minimizes ``L_env`` on its own).
    """
    b = _as_batch(batch)
    _check_index(model, b.users, b.items, b.envs)
    n = len(b)
    u, i, e, y = b.users, b.items, b.envs, b.labels
    ui, ii = model.user_inv[u], model.item_inv[i]
    uv, iv, q = model.user_var[u], model.item_var[i], model.env_emb[e]

    m = ui * ii
    p_inv = sigmoid(m.sum(axis=1))
    vq = uv * iv * q
    p_var = sigmoid(vq.sum(axis=1))
    p_fused = p_var * p_inv

    z = _classifier_logits(model, m)
    logp = _log_softmax(z)
    rows = np.arange(n)

    losses = {
        "inv": float(np.mean(bce(p_inv, y))),
        "env": float(-np.mean(logp[rows, e])),
        "var": float(np.mean(bce(p_fused, y))),
    }
    losses["major"] = losses["inv"] - alpha * losses["env"] + beta * losses["var"]

    # d/d(sum m) of L_inv
    g_sm_inv = bce_grad(p_inv, y) * p_inv * (1.0 - p_inv) / n
    # L_env through the classifier
    dz = np.exp(logp)
    dz[rows, e] -= 1.0
    dz /= n
    g_m_env = dz @ model.clf_weight.T
    # L_var through the product of the two branches
    g_fused = bce_grad(p_fused, y) / n
    g_sn_var = g_fused * p_inv * p_var * (1.0 - p_var)
    g_sm_var = np.zeros(n) if detach_inv_in_var else g_fused * p_var * p_inv * (1.0 - p_inv)

    def m_grads(g_m):
        return {"user_inv": _scatter(model.user_inv, u, g_m * ii),
                "item_inv": _scatter(model.item_inv, i, g_m * ui)}

    zeros = {name: np.zeros_like(t) for name, t in model.tables().items()}

    g_inv = dict(zeros)
    g_inv.update(m_grads(g_sm_inv[:, None] * np.ones_like(m)))

    g_env = dict(zeros)
    g_env.update(m_grads(g_m_env))
    g_env["clf_weight"] = m.T @ dz
    g_env["clf_bias"] = dz.sum(axis=0)

    g_var = dict(zeros)
    g_var.update(m_grads(g_sm_var[:, None] * np.ones_like(m)))
    gn = g_sn_var[:, None]
    g_var["user_var"] = _scatter(model.user_var, u, gn * iv * q)
    g_var["item_var"] = _scatter(model.item_var, i, gn * uv * q)
    g_var["env_emb"] = _scatter(model.env_emb, e, gn * uv * iv)

    g_major = {name: g_inv[name] - alpha * g_env[name] + beta * g_var[name] for name in zeros}
    return losses, {"inv": g_inv, "env": g_env, "var": g_var, "major": g_major}


# ------------------------------------------------------------------ optimization

def classifier_step(model: TeacherModel, batch, lr: float, l2: float = 0.0) -> TeacherModel:
    """One SGD step on the classifier minimizing ``L_env``; embeddings untouched.

    ``l2`` decays the classifier weight (not the bias) like the embedding step does.
    """
    _, grads = loss_and_grads(model, batch, 0.0, 0.0)
    g = grads["env"]
    w = model.clf_weight * (1.0 - lr * l2) if l2 else model.clf_weight
    return model.replace(clf_weight=w - lr * g["clf_weight"],
                         clf_bias=model.clf_bias - lr * g["clf_bias"])


def embedding_step(model: TeacherModel, batch, lr: float, alpha: float, beta: float,
                   l2: float = 0.0, detach_inv_in_var: bool = False) -> TeacherModel:
    """One SGD step on the five embedding tables minimizing ``L_major``.

    The ``-alpha * L_env`` term makes the invariant tables ascend the
    classifier loss. ``l2`` applies decoupled weight decay to every embedding table.
    """
    _, grads = loss_and_grads(model, batch, alpha, beta, detach_inv_in_var)
    g = grads["major"]
    decay = 1.0 - lr * l2
    new = {}
    for name in EMBEDDING_TABLES:
        t = getattr(model, name)
        new[name] = (t * decay if l2 else t) - lr * g[name]
    return model.replace(**new)


def reassign_environments(model: TeacherModel, table: InteractionTable) -> InteractionTable:
    """Move each record to the environment whose fused prediction fits its label best.

    ``np.argmin`` returns the first minimum, so ties go to the lowest index.
    """
    if table.num_envs != model.num_envs:
        raise ValueError("table and model disagree on num_envs")
    if model.num_envs == 1 or len(table) == 0:
        return table
    _check_index(model, table.users, table.items)
    p_inv = invariant_score(model, table.users, table.items)
    base = model.user_var[table.users] * model.item_var[table.items]
    per_env = np.stack([bce(fuse_f(phi(base * model.env_emb[k]), p_inv), table.labels)
                        for k in range(model.num_envs)], axis=1)
    return table.with_envs(np.argmin(per_env, axis=1))


def init_teacher(cfg: TeacherConfig, num_users: int, num_items: int) -> TeacherModel:
    """Embeddings ~ Normal(0, 0.1^2), classifier zero."""
    rng = stream(cfg.seed, "teacher-init")
    d, k = cfg.dim, cfg.num_envs
    return TeacherModel(
        user_inv=rng.normal(0.0, 0.1, size=(num_users, d)),
        item_inv=rng.normal(0.0, 0.1, size=(num_items, d)),
        user_var=rng.normal(0.0, 0.1, size=(num_users, d)),
        item_var=rng.normal(0.0, 0.1, size=(num_items, d)),
        env_emb=rng.normal(0.0, 0.1, size=(k, d)),
        clf_weight=np.zeros((d, k)),
        clf_bias=np.zeros(k),
    )


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def fit_teacher(cfg: TeacherConfig, data: InteractionTable) -> tuple[TeacherModel, InteractionTable]:
    """Train a teacher; returns the model and the table with its final environment labels.

    Environment labels of ``data`` are taken as the starting assignment when
    ``data.num_envs`` matches the config, otherwise they are redrawn uniformly.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty table")
    if data.num_envs != cfg.num_envs:
        envs = stream(cfg.seed, "env-init").integers(0, cfg.num_envs, size=len(data))
        data = data.with_envs(envs, cfg.num_envs)
    model = init_teacher(cfg, data.num_users, data.num_items)
    shuffle = stream(cfg.seed, "teacher-shuffle")
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(len(data), cfg.batch_size, shuffle):
            batch = data.batch(idx)
            model = classifier_step(model, batch, cfg.lr, cfg.l2)
            model = embedding_step(model, batch, cfg.lr, cfg.alpha, cfg.beta, cfg.l2,
                                   cfg.detach_inv_in_var)
        if epoch + 1 > cfg.warmup_epochs:
            data = reassign_environments(model, data)
        if logger.isEnabledFor(logging.DEBUG):
            all_ = data.batch()
            logger.debug("teacher epoch %d: L_inv=%.5f L_env=%.5f L_var=%.5f", epoch,
                         loss_inv(model, all_), loss_env(model, all_), loss_var(model, all_))
    return model, data


def train_teacher(cfg: TeacherConfig, data: InteractionTable) -> TeacherModel:
    return fit_teacher(cfg, data)[0]
