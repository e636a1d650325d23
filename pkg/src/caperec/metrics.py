"""Classification and ranking metrics.

AUC counts tied (positive, negative) pairs as one half. Ranking metrics use a
pessimistic tie rule: candidates scoring exactly the positive's score are
ranked ahead of it, so a constant scorer never looks perfect.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .autodiff import BCE_EPS
from .errors import ConfigError, MetricError


def auc(scores, labels):
    """Probability that a random positive outscores a random negative (ties count 0.5)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined unless both classes are present")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(scores, labels, user_ids):
    """Impression-weighted mean of per-user AUC over users that have both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    user_ids = np.asarray(user_ids)
    order = np.argsort(user_ids, kind="stable")
    uniq, starts = np.unique(user_ids[order], return_index=True)
    bounds = list(starts[1:]) + [len(order)]
    values, weights = [], []
    for start, stop in zip(starts, bounds):
        idx = order[start:stop]
        lab = labels[idx]
        if lab.min() == lab.max():
            continue
        values.append(auc(scores[idx], lab))
        weights.append(len(idx))
    if not weights:
        raise MetricError("gAUC is undefined: no user has both positive and negative examples")
    # normalize first so a single user reproduces its AUC exactly
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(w / w.sum(), values))


def logloss(probs, labels):
    """Mean binary cross-entropy with the same clamp as the training loss."""
    p = np.clip(np.asarray(probs, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)) / max(y.size, 1))


def positive_ranks(scores, positive_index):
    """1-based rank of the positive in each candidate list (ties ranked ahead of it)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    pos_idx = np.broadcast_to(np.asarray(positive_index, dtype=np.int64), (scores.shape[0],))
    pos_score = scores[np.arange(scores.shape[0]), pos_idx]
    ahead = scores >= pos_score[:, None]
    return ahead.sum(axis=1)  # counts the positive itself, so rank >= 1


def _check_k(k, n_candidates):
    if not 1 <= k <= n_candidates:
        raise ConfigError(f"k={k} must lie in [1, {n_candidates}]")


def recall_at_k(scores, positive_index, k):
    scores = np.atleast_2d(scores)
    _check_k(k, scores.shape[1])
    return float(np.mean(positive_ranks(scores, positive_index) <= k))


def ndcg_at_k(scores, positive_index, k):
    scores = np.atleast_2d(scores)
    _check_k(k, scores.shape[1])
    ranks = positive_ranks(scores, positive_index)
    gain = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gain))


@dataclass
class MetricsReport:
    auc: float
    gauc: float
    logloss: float
    recall_at_k: dict = field(default_factory=dict)
    ndcg_at_k: dict = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["recall_at_k"] = {str(k): v for k, v in self.recall_at_k.items()}
        d["ndcg_at_k"] = {str(k): v for k, v in self.ndcg_at_k.items()}
        return d

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        raw["recall_at_k"] = {int(k): v for k, v in raw.get("recall_at_k", {}).items()}
        raw["ndcg_at_k"] = {int(k): v for k, v in raw.get("ndcg_at_k", {}).items()}
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__ if k in raw})
