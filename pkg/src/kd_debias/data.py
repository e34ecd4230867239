"""Interaction tables: TSV I/O, binarization, unbiased splits and a synthetic generator.

The on-disk format is one ``user<TAB>item<TAB>rating`` record per line, no header.
Empty lines and lines starting with ``#`` are skipped.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from ._rng import stream


class DataFormatError(ValueError):
    """Raised for unreadable interaction files; ``line`` is 1-based when known."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where += f"{os.fspath(path)}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    label: float
    env: int


class Batch(NamedTuple):
    """Column view of a set of interactions; duplicates are allowed."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    envs: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class InteractionTable:
    """Immutable set of (user, item, label, env) records.

    Stored column-wise. Index bounds and pair uniqueness are checked on
    construction. ``label`` holds raw ratings until :func:`binarize` is applied.
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    envs: np.ndarray
    num_users: int
    num_items: int
    num_envs: int

    def __post_init__(self):
        users = _frozen(self.users, np.int64)
        items = _frozen(self.items, np.int64)
        labels = _frozen(self.labels, np.float64)
        envs = _frozen(self.envs, np.int64)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "envs", envs)
        for name in ("num_users", "num_items", "num_envs"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        n = len(users)
        if not (len(items) == len(labels) == len(envs) == n):
            raise ValueError("column lengths differ")
        if n:
            if users.min() < 0 or users.max() >= self.num_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= self.num_items:
                raise ValueError("item index out of range")
            if envs.min() < 0 or envs.max() >= self.num_envs:
                raise ValueError("env index out of range")
            if not np.all(np.isfinite(labels)):
                raise ValueError("labels must be finite")
            keys = users * self.num_items + items
            if len(np.unique(keys)) != n:
                raise ValueError("duplicate (user, item) pair")

    @classmethod
    def from_records(cls, records: Sequence[Interaction | tuple], num_users: int, num_items: int,
                     num_envs: int = 1) -> "InteractionTable":
        if len(records):
            u, i, y, e = zip(*records)
        else:
            u = i = y = e = ()
        return cls(np.asarray(u, dtype=np.int64), np.asarray(i, dtype=np.int64),
                   np.asarray(y, dtype=np.float64), np.asarray(e, dtype=np.int64),
                   num_users, num_items, num_envs)

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, y, e in zip(self.users.tolist(), self.items.tolist(),
                              self.labels.tolist(), self.envs.tolist()):
            yield Interaction(u, i, y, e)

    @property
    def interactions(self) -> list[Interaction]:
        return list(self)

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.users, self.items, self.labels, self.envs)
        return Batch(self.users[idx], self.items[idx], self.labels[idx], self.envs[idx])

    def subset(self, idx) -> "InteractionTable":
        idx = np.asarray(idx, dtype=np.int64)
        return InteractionTable(self.users[idx], self.items[idx], self.labels[idx], self.envs[idx],
                                self.num_users, self.num_items, self.num_envs)

    def with_labels(self, labels) -> "InteractionTable":
        return InteractionTable(self.users, self.items, labels, self.envs,
                                self.num_users, self.num_items, self.num_envs)

    def with_envs(self, envs, num_envs: int | None = None) -> "InteractionTable":
        return InteractionTable(self.users, self.items, self.labels, envs, self.num_users,
                                self.num_items, self.num_envs if num_envs is None else num_envs)

    def equals(self, other: "InteractionTable") -> bool:
        return (
            (self.num_users, self.num_items, self.num_envs)
            == (other.num_users, other.num_items, other.num_envs)
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.envs, other.envs)
        )


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Partition of an unbiased log.

    ``train_biased`` holds the ``f_train`` slice, reserved for methods that
    train on unbiased supervision; nothing in this package trains on it.
    """

    train_biased: InteractionTable
    validation: InteractionTable
    test_unbiased: InteractionTable


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 200
    num_items: int = 200
    latent_dim: int = 8
    num_envs: int = 2
    bias_strength: float = 2.0
    exposure_skew: float = 1.0
    positives_per_user: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("num_users", "num_items", "latent_dim", "num_envs", "positives_per_user"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.bias_strength < 0 or self.exposure_skew < 0:
            raise ValueError("bias_strength and exposure_skew must be non-negative")
        if self.positives_per_user > self.num_items:
            raise ValueError("positives_per_user cannot exceed num_items")


# --------------------------------------------------------------------------- I/O

def read_tsv(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw (user, item, rating) columns, ids exactly as written in the file."""
    users: list[int] = []
    items: list[int] = []
    ratings: list[float] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"expected 3 tab-separated fields, got {len(parts)}", path, lineno)
            try:
                u, i = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataFormatError("user and item ids must be integers", path, lineno) from None
            try:
                r = float(parts[2])
            except ValueError:
                raise DataFormatError(f"rating is not a number: {parts[2]!r}", path, lineno) from None
            if not math.isfinite(r):
                raise DataFormatError("rating must be finite", path, lineno)
            users.append(u)
            items.append(i)
            ratings.append(r)
    if not users:
        raise DataFormatError("no interactions in file", path)
    return (np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64),
            np.asarray(ratings, dtype=np.float64))


def random_envs(n: int, num_envs: int, seed: int) -> np.ndarray:
    return stream(seed, "env-init").integers(0, num_envs, size=n)


def load_interactions(path: str | os.PathLike, num_envs: int, seed: int, *, reindex: bool = True,
                      num_users: int | None = None, num_items: int | None = None) -> InteractionTable:
    """Read a TSV interaction file.

    With ``reindex`` the raw ids are mapped to contiguous 0-based indices in
    ascending raw-id order. Without it the raw ids are used as indices and the
    table sizes default to ``max id + 1``. Ratings are kept raw; environments
    are drawn uniformly with ``seed``.
    """
    if num_envs < 1:
        raise ValueError("num_envs must be >= 1")
    u, i, r = read_tsv(path)
    if reindex:
        _, u = np.unique(u, return_inverse=True)
        _, i = np.unique(i, return_inverse=True)
    elif u.min() < 0 or i.min() < 0:
        raise DataFormatError("negative id with reindex disabled", path)
    nu = int(u.max()) + 1 if num_users is None else num_users
    ni = int(i.max()) + 1 if num_items is None else num_items
    try:
        return InteractionTable(u, i, r, random_envs(len(u), num_envs, seed), nu, ni, num_envs)
    except ValueError as exc:
        raise DataFormatError(str(exc), path) from None


def load_pair(biased_path, unbiased_path, num_envs: int, seed: int) -> tuple[InteractionTable, InteractionTable]:
    """Load a biased log and its unbiased counterpart under one shared id mapping."""
    bu, bi, br = read_tsv(biased_path)
    uu, ui, ur = read_tsv(unbiased_path)
    users, inv_u = np.unique(np.concatenate([bu, uu]), return_inverse=True)
    items, inv_i = np.unique(np.concatenate([bi, ui]), return_inverse=True)
    n = len(bu)
    biased = InteractionTable(inv_u[:n], inv_i[:n], br, random_envs(n, num_envs, seed),
                              len(users), len(items), num_envs)
    unbiased = InteractionTable(inv_u[n:], inv_i[n:], ur, np.zeros(len(uu), dtype=np.int64),
                                len(users), len(items), num_envs)
    return biased, unbiased


def write_interactions(table: InteractionTable, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, y in zip(table.users.tolist(), table.items.tolist(), table.labels.tolist()):
            fh.write(f"{u}\t{i}\t{y!r}\n")


# ------------------------------------------------------------------ transforms

def binarize(table: InteractionTable, threshold: float = 3) -> InteractionTable:
    """label = 1 if rating > threshold else 0 (strict)."""
    return table.with_labels((table.labels > threshold).astype(np.float64))


def split_unbiased(unbiased: InteractionTable, fractions=(0.05, 0.05, 0.90), seed: int = 0) -> DatasetSplit:
    f = [float(x) for x in fractions]
    if len(f) != 3:
        raise ValueError("fractions must have three entries")
    if any(x < 0 for x in f):
        raise ValueError(f"fractions must be non-negative, got {fractions}")
    if abs(sum(f) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(f)}")
    n = len(unbiased)
    n_train = min(n, int(round(f[0] * n)))
    n_val = min(n - n_train, int(round(f[1] * n)))
    perm = stream(seed, "split").permutation(n)
    # each part keeps source order so the split is independent of permutation layout
    parts = np.split(perm, [n_train, n_train + n_val])
    return DatasetSplit(*(unbiased.subset(np.sort(p)) for p in parts))


# ------------------------------------------------------------------ synthetic

def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def _ground_truth(cfg: SyntheticConfig, rng: np.random.Generator):
    scale = (4.0 / cfg.latent_dim) ** 0.25  # dot products have std ~2
    user_vec = rng.normal(0.0, scale, size=(cfg.num_users, cfg.latent_dim))
    item_vec = rng.normal(0.0, scale, size=(cfg.num_items, cfg.latent_dim))
    return _logistic(user_vec @ item_vec.T)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[InteractionTable, InteractionTable]:
    """Draw a biased log and a uniformly-exposed unbiased log from one ground truth.

    True relevance is ``logistic(<u, i>)``. Every biased record happens in a
    latent context ``c`` drawn uniformly per record, with confounder score
    ``h = exposure_skew * popularity[i] + bias_strength * shift[c, i]``
    (popularity and shift ~ Normal(0, 0.5^2)). The record's item is drawn,
    without repeating the user's earlier items, with probability proportional
    to ``exp(h)``. The observed label is positive with probability
    ``relevance * min(1, exp(bias_strength * shift[c, i]))``: the user only
    acts on a relevant item if the context does not suppress it. The unbiased
    log exposes items uniformly and labels them from pure relevance. Each user gets
    ``positives_per_user`` records in each log.

    The biased table's env column holds the true context, for diagnostics
    only; training redraws environments itself.
    """
    rng = stream(cfg.seed, "synthetic")
    nu, ni, k, per = cfg.num_users, cfg.num_items, cfg.num_envs, cfg.positives_per_user
    relevance = _ground_truth(cfg, rng)
    popularity = rng.normal(0.0, 0.5, size=ni)
    shift = rng.normal(0.0, 0.5, size=(k, ni))
    confounder = cfg.exposure_skew * popularity + cfg.bias_strength * shift  # (k, ni)
    weights = np.exp(confounder - confounder.max(axis=1, keepdims=True))

    b_users = np.repeat(np.arange(nu), per)
    b_ctx = rng.integers(0, k, size=nu * per)
    b_items = np.empty(nu * per, dtype=np.int64)
    for u in range(nu):
        taken = np.zeros(ni, dtype=bool)
        for r in range(u * per, (u + 1) * per):
            w = np.where(taken, 0.0, weights[b_ctx[r]])
            item = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
            item = min(item, ni - 1)
            b_items[r] = item
            taken[item] = True
    # popularity only decides exposure; the context shift also suppresses feedback
    accept = np.exp(np.minimum(cfg.bias_strength * shift[b_ctx, b_items], 0.0))
    b_labels = (rng.random(nu * per) < relevance[b_users, b_items] * accept).astype(np.float64)

    u_users = np.repeat(np.arange(nu), per)
    u_items = np.concatenate([rng.choice(ni, size=per, replace=False) for _ in range(nu)])
    u_labels = (rng.random(nu * per) < relevance[u_users, u_items]).astype(np.float64)

    biased = InteractionTable(b_users, b_items, b_labels, b_ctx, nu, ni, k)
    unbiased = InteractionTable(u_users, u_items, u_labels, np.zeros(nu * per, dtype=np.int64), nu, ni, k)
    return biased, unbiased


def true_relevance(cfg: SyntheticConfig) -> np.ndarray:
    """Ground-truth relevance matrix the generator draws labels from (diagnostic)."""
    return _ground_truth(cfg, stream(cfg.seed, "synthetic"))
