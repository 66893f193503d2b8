"""Ranking metrics: Top-K hits, Mann-Whitney AUC, per-category recall@K."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata


class EvaluationError(ValueError):
    pass


def _ranked_users(ranking) -> list[str]:
    return [r[0] if isinstance(r, (tuple, list)) else r for r in ranking]


def top_k_hits(ranking: Sequence, anomalous: Iterable[str], k: int) -> int:
    """Anomalous users among the first ``k`` of ``ranking`` (clamped to its length)."""
    if k < 1:
        raise EvaluationError("k must be >= 1")
    positives = set(anomalous)
    return sum(1 for u in _ranked_users(ranking)[:k] if u in positives)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score of a random positive > score of a random negative), ties 1/2.

    Computed from mid-ranks, which equals counting concordant plus half the
    tied positive/negative pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def recall_at_k_by_category(ranking: Sequence, categories: Mapping[str, tuple[str, str]],
                            k: int) -> dict[tuple[str, str], float]:
    """Share of each (kind, intensity) category found in the top ``k``.

    ``categories`` maps anomalous users to their category; others are ignored.
    """
    if k < 1:
        raise EvaluationError("k must be >= 1")
    top = set(_ranked_users(ranking)[:k])
    members = defaultdict(list)
    for u, cat in categories.items():
        members[tuple(cat)].append(u)
    return {cat: sum(u in top for u in us) / len(us) for cat, us in sorted(members.items())}


@dataclass
class EvalResult:
    top_k_hits: dict[int, int]
    auc: float | None
    recall_by_category: dict[tuple[str, str], float]
    n_users: int
    n_anomalous: int
    recall_k: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "top_k_hits": {str(k): v for k, v in sorted(self.top_k_hits.items())},
            "auc": self.auc,
            "recall_k": self.recall_k,
            "recall_by_category": {f"{kind}/{inten}": v
                                   for (kind, inten), v in sorted(self.recall_by_category.items())},
            "n_users": self.n_users,
            "n_anomalous": self.n_anomalous,
            **self.extra,
        }


def evaluate(ranking: Sequence[tuple[str, float, int]], labels: Mapping, ks: Sequence[int],
             recall_k: int | None = None) -> EvalResult:
    """All metrics for one ranking. ``labels`` maps user -> object with
    ``kind``/``intensity``/``anomalous`` (see synthgen.Label)."""
    users = _ranked_users(ranking)
    anomalous = {u for u in users if u in labels and labels[u].anomalous}
    scores = [r[1] for r in ranking]
    y = [u in anomalous for u in users]
    value = auc(scores, y) if 0 < len(anomalous) < len(users) else None
    rk = recall_k or max(ks)
    cats = {u: (labels[u].kind, labels[u].intensity) for u in anomalous}
    return EvalResult({int(k): top_k_hits(ranking, anomalous, int(k)) for k in ks}, value,
                      recall_at_k_by_category(ranking, cats, rk), len(users), len(anomalous), rk)
