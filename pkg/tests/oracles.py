"""Independent brute-force reference implementations used only by tests.

These deliberately avoid the library's code paths: set arithmetic and
subset enumeration for utility, counting formulas for ranks, recursive
memoized LCS. Agreement between the two routes is what the tests assert.
"""

from __future__ import annotations

import math
from functools import lru_cache
from itertools import combinations
from typing import Sequence


def oracle_exam_score(
    covered: frozenset[str], question_kws: Sequence[str], known: frozenset[str] = frozenset()
) -> float:
    correct = sum(1 for kw in question_kws if kw in covered or kw in known)
    return correct / len(question_kws)


def oracle_subset_scores(
    pair_kws: Sequence[frozenset[str]],
    question_kws: Sequence[str],
    known: frozenset[str] = frozenset(),
) -> dict[frozenset[int], float]:
    """Exam score for every subset of pairs, by direct enumeration."""
    n = len(pair_kws)
    scores: dict[frozenset[int], float] = {}
    for size in range(n + 1):
        for subset in combinations(range(n), size):
            covered = frozenset().union(*(pair_kws[i] for i in subset)) if subset else frozenset()
            scores[frozenset(subset)] = oracle_exam_score(covered, question_kws, known)
    return scores


def oracle_utilities(
    pair_kws: Sequence[frozenset[str]],
    question_kws: Sequence[str],
    known: frozenset[str] = frozenset(),
) -> list[tuple[float, float, float, float, float]]:
    """(s_empty, s_full, s_single, s_all_but_one, utility) per pair."""
    n = len(pair_kws)
    scores = oracle_subset_scores(pair_kws, question_kws, known)
    empty = frozenset()
    full = frozenset(range(n))
    out = []
    for i in range(n):
        s_empty = scores[empty]
        s_full = scores[full]
        s_single = scores[frozenset({i})]
        s_abo = scores[full - {i}]
        utility = ((s_single - s_empty) + (s_full - s_abo)) / 2
        out.append((s_empty, s_full, s_single, s_abo, utility))
    return out


def oracle_ranks(values: Sequence[float]) -> list[float]:
    """Average ranks via the counting formula, no sorting."""
    ranks = []
    for v in values:
        less = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(less + (equal + 1) / 2.0)
    return ranks


def oracle_pearson(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def oracle_spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    return oracle_pearson(oracle_ranks(x), oracle_ranks(y))


def oracle_lcs(a: Sequence[str], b: Sequence[str]) -> int:
    a = tuple(a)
    b = tuple(b)

    @lru_cache(maxsize=None)
    def rec(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))

    return rec(0, 0)


def oracle_rouge_l_f1(a_tokens: Sequence[str], b_tokens: Sequence[str]) -> float:
    if tuple(a_tokens) == tuple(b_tokens):
        return 1.0
    if not a_tokens or not b_tokens:
        return 0.0
    lcs = oracle_lcs(a_tokens, b_tokens)
    if lcs == 0:
        return 0.0
    p = lcs / len(a_tokens)
    r = lcs / len(b_tokens)
    return 2.0 * p * r / (p + r)


def oracle_cosine(u: Sequence[float], v: Sequence[float]) -> float:
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return dot / (nu * nv)
