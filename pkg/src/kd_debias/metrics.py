"""Ranking metrics, parameter counts, prediction-distance diagnostics and seed stability."""
from __future__ import annotations

import csv
import hashlib
import io
import math
import statistics
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import InteractionTable
from .distiller import StudentModel
from .teacher import TeacherModel

METRICS = ("ndcg", "recall")
CSV_HEADER = ("run_id", "seed", "metric", "k", "value")


@dataclass(frozen=True, eq=False)
class RankedList:
    user: int
    items: np.ndarray
    relevance: np.ndarray
    scores: np.ndarray

    @property
    def num_relevant(self) -> int:
        return int(np.count_nonzero(self.relevance))


@dataclass
class MetricReport:
    values: dict[tuple[str, int], float]
    num_users: int = 0
    num_parameters: int | None = None
    seed: int | None = None
    config_fingerprint: str = ""
    run_id: str = "run"
    extra: dict = field(default_factory=dict)

    def __getitem__(self, key: tuple[str, int]) -> float:
        return self.values[key]

    def rows(self) -> list[tuple]:
        seed = "" if self.seed is None else self.seed
        out = [(self.run_id, seed, m, k, repr(float(v))) for (m, k), v in sorted(self.values.items())]
        if self.num_parameters is not None:
            out.append((self.run_id, seed, "num_parameters", "", str(self.num_parameters)))
        return out


def config_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def reports_to_csv(reports: Iterable[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerows(r.rows())
    return buf.getvalue()


def write_metrics_csv(reports: Iterable[MetricReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(reports_to_csv(reports))


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ ranking

def rank_items(scorer, user: int, candidates: Sequence[int], relevant: Iterable[int] = ()) -> RankedList:
    """Sort ``candidates`` for ``user`` by descending score, ascending item id on ties.

    ``scorer`` is anything with ``score(users, items)`` or a plain callable.
    """
    items = np.asarray(sorted(set(int(c) for c in candidates)), dtype=np.int64)
    if len(items) == 0:
        raise ValueError("no candidate items")
    fn = scorer.score if hasattr(scorer, "score") else scorer
    scores = np.asarray(fn(np.full(len(items), user, dtype=np.int64), items), dtype=np.float64).reshape(-1)
    order = np.lexsort((items, -scores))
    rel = set(int(r) for r in relevant)
    ranked = items[order]
    return RankedList(int(user), ranked, np.array([it in rel for it in ranked.tolist()], dtype=bool),
                      scores[order])


def _discount(rank: np.ndarray) -> np.ndarray:
    return 1.0 / np.log2(rank + 1.0)


def ndcg_at_k(ranked: RankedList, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    n_rel = ranked.num_relevant
    if n_rel == 0:
        return 0.0
    ranks = np.flatnonzero(ranked.relevance) + 1
    dcg = math.fsum(_discount(ranks[ranks <= k]).tolist())
    idcg = math.fsum(_discount(np.arange(1, min(k, n_rel) + 1)).tolist())
    return dcg / idcg


def recall_at_k(ranked: RankedList, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    n_rel = ranked.num_relevant
    if n_rel == 0:
        raise ValueError("recall is undefined for a user without relevant items")
    return int(np.count_nonzero(ranked.relevance[:k])) / n_rel


def evaluate(model, test: InteractionTable, ks: Sequence[int] = (5,), *, full_catalog: bool = False,
             exclude: InteractionTable | None = None, seed: int | None = None, config_text: str = "",
             run_id: str = "run") -> MetricReport:
    """Mean NDCG@k / Recall@k over users with at least one positive test item.

    By default each user's candidates are that user's own test items. With
    ``full_catalog`` every item is a candidate and pairs in ``exclude``
    (typically the training log) are ranked last.
    """
    if len(test) == 0:
        raise ValueError("empty test table")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive")
    order = np.lexsort((test.items, test.users))
    users, items, labels = test.users[order], test.items[order], test.labels[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    excluded: dict[int, set[int]] = {}
    if exclude is not None:
        for u, i in zip(exclude.users.tolist(), exclude.items.tolist()):
            excluded.setdefault(u, set()).add(i)
    fn = model.score if hasattr(model, "score") else model
    per: dict[tuple[str, int], list[float]] = {(m, k): [] for m in METRICS for k in ks}
    for u_items, u_labels, u in zip(np.split(items, bounds), np.split(labels, bounds),
                                    users[np.concatenate([[0], bounds])].tolist()):
        positives = u_items[u_labels >= 0.5]
        if len(positives) == 0:
            continue
        if full_catalog:
            cand = np.arange(test.num_items)
            skip = excluded.get(u, set()) - set(positives.tolist())

            def scorer(us, its, _skip=skip):
                s = np.asarray(fn(us, its), dtype=np.float64).copy()
                if _skip:
                    s[np.isin(its, list(_skip))] = -np.inf
                return s

            ranked = rank_items(scorer, u, cand, positives)
        else:
            ranked = rank_items(fn, u, u_items, positives)
        for k in ks:
            per[("ndcg", k)].append(ndcg_at_k(ranked, k))
            per[("recall", k)].append(recall_at_k(ranked, k))
    n_users = len(per[("ndcg", ks[0])])
    if n_users == 0:
        raise ValueError("no user has a positive test item")
    values = {key: math.fsum(v) / n_users for key, v in per.items()}
    params = count_parameters(model) if isinstance(model, (StudentModel, TeacherModel)) else None
    return MetricReport(values, n_users, params, seed, config_fingerprint(config_text), run_id)


# ------------------------------------------------------------------ diagnostics

def student_parameter_count(num_users: int, num_items: int, dim: int) -> int:
    return (num_users + num_items) * dim


def teacher_parameter_count(num_users: int, num_items: int, dim: int, num_envs: int) -> int:
    return 2 * (num_users + num_items) * dim + num_envs * dim + dim * num_envs + num_envs


def count_parameters(model) -> int:
    if isinstance(model, StudentModel):
        return student_parameter_count(model.num_users, model.num_items, model.dim)
    if isinstance(model, TeacherModel):
        return teacher_parameter_count(model.num_users, model.num_items, model.dim, model.num_envs)
    if hasattr(model, "tables"):
        return sum(int(t.size) for t in model.tables().values())
    raise TypeError(f"cannot count parameters of {type(model).__name__}")


def prediction_distance(p, y):
    """|p - y|: how far a prediction sits from the true unbiased label."""
    return np.abs(np.asarray(p, dtype=np.float64) - y) if np.ndim(p) or np.ndim(y) else abs(float(p) - float(y))


def stability_report(run: Callable[[int], Mapping | MetricReport], seeds: Sequence[int],
                     k: int | None = None) -> dict[str, tuple[float, float]]:
    """Run ``run(seed)`` for every seed; sample mean and std (n - 1) per metric.

    ``run`` returns a :class:`MetricReport` or a mapping from metric name to
    value. With ``k`` given, only ``(metric, k)`` entries of reports are kept
    and keyed by ``"ndcg@k"`` style names.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("stability_report needs at least two seeds")
    collected: dict[str, list[float]] = {}
    for s in seeds:
        out = run(s)
        if isinstance(out, MetricReport):
            out = {f"{m}@{kk}": v for (m, kk), v in out.values.items() if k is None or kk == k}
        for name, v in out.items():
            collected.setdefault(name, []).append(float(v))
    if any(len(v) != len(seeds) for v in collected.values()):
        raise ValueError("runs returned inconsistent metric sets")
    # statistics works in exact arithmetic, so seed order cannot change the result
    return {name: (float(statistics.mean(v)), float(statistics.stdev(v)))
            for name, v in sorted(collected.items())}
