"""Slow reference implementations, written straight from the metric definitions."""
import itertools
import math


def brute_force_ranking(scores: dict[int, float]) -> tuple[int, ...]:
    # the unique permutation that is non-increasing in score, ties by ascending id
    for perm in itertools.permutations(scores):
        ok = True
        for a, b in zip(perm, perm[1:]):
            if scores[a] < scores[b] or (scores[a] == scores[b] and a > b):
                ok = False
                break
        if ok:
            return perm
    raise AssertionError("no consistent ordering")


def dcg(ranking, relevant, k):
    return sum(1.0 / math.log2(pos + 1) for pos, item in enumerate(ranking, start=1)
               if pos <= k and item in relevant)


def ndcg(ranking, relevant, k):
    if not relevant:
        return 0.0
    ideal = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(k, len(relevant)) + 1))
    return dcg(ranking, relevant, k) / ideal


def recall(ranking, relevant, k):
    return sum(1 for item in ranking[:k] if item in relevant) / len(relevant)
