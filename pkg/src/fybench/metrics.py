"""Ranking metrics, the tie-block expected-DCG bound and the WOP alignment gap."""

from dataclasses import dataclass, field

import numpy as np

from .fy_losses import as_labels
from .simplex_maps import as_scores, predict, softmax_map


def dcg_weights(n):
    """Position weights ``1 / log2(i + 1)`` for positions ``1..n``."""
    return 1.0 / np.log2(np.arange(2, n + 2))


def ranking(s):
    """Descending order of ``s``; ties go to the smaller class index."""
    return np.argsort(-np.asarray(s), kind="stable")


@dataclass
class MetricsReport:
    precision: dict = field(default_factory=dict)
    recall: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    topk_error: dict = field(default_factory=dict)

    def rows(self):
        """Long-format ``(cutoff, metric, value)`` tuples."""
        out = []
        for k in sorted(self.ndcg):
            out += [(k, "precision", self.precision[k]), (k, "recall", self.recall[k]),
                    (k, "ndcg", self.ndcg[k]), (k, "topk_error", self.topk_error[k])]
        return out


def evaluate(s, y, cutoffs):
    """P@k, R@k, N@k and the top-k error of a single score vector.

    The top-k error refers to the first relevant class of ``y``.
    """
    s = as_scores(s)
    y = as_labels(y, s.size)
    hits = y[ranking(s)]
    n_rel = int(y.sum())
    w = dcg_weights(s.size)
    rep = MetricsReport()
    cum = np.cumsum(hits)
    dcg = np.cumsum(hits * w)
    idcg = np.cumsum(w[:n_rel])
    first = int(np.flatnonzero(y)[0])
    rank_first = int(np.flatnonzero(ranking(s) == first)[0])
    for k in cutoffs:
        k = int(k)
        if not 1 <= k <= s.size:
            raise ValueError(f"cutoff {k} outside [1, {s.size}]")
        rep.precision[k] = float(cum[k - 1] / k)
        rep.recall[k] = float(cum[k - 1] / n_rel)
        rep.ndcg[k] = float(dcg[k - 1] / idcg[min(k, n_rel) - 1])
        rep.topk_error[k] = float(rank_first >= k)
    return rep


def _head(row, k):
    """Top ``k`` indices of ``row`` with ties broken by index, without a full sort."""
    if k < row.size:
        kth = -np.partition(-row, k - 1)[k - 1]
        above = np.flatnonzero(row > kth)
        tied = np.flatnonzero(row == kth)[: k - above.size]
        idx = np.concatenate([above, tied])
    else:
        idx = np.arange(row.size)
    return idx[np.lexsort((idx, -row[idx]))]


def evaluate_users(S, relevant, cutoffs, exclude=None):
    """Average metrics over users.

    Args:
      S: score matrix (n_users, C).
      relevant: list of index arrays of held-out items per user.
      cutoffs: iterable of k.
      exclude: optional list of index arrays (training items) removed from
        each user's ranking.

    Users without relevant items are skipped. Returns a :class:`MetricsReport`
    of means.
    """
    S = np.array(S, dtype=np.float64)
    C = S.shape[1]
    cutoffs = [int(k) for k in cutoffs]
    kmax = max(cutoffs)
    if exclude is not None:
        for u, items in enumerate(exclude):
            if len(items):
                S[u, items] = -np.inf
    w = dcg_weights(C)
    sums = {name: np.zeros(len(cutoffs)) for name in ("p", "r", "n", "e")}
    n = 0
    for u, rel in enumerate(relevant):
        rel = np.asarray(rel, dtype=np.int64)
        if rel.size == 0:
            continue
        n += 1
        head = _head(S[u], kmax)
        hit = np.isin(head, rel).astype(float)
        cum = np.cumsum(hit)
        dcg = np.cumsum(hit * w[: hit.size])
        idcg = np.cumsum(w[: rel.size])
        for t, k in enumerate(cutoffs):
            sums["p"][t] += cum[k - 1] / k
            sums["r"][t] += cum[k - 1] / rel.size
            sums["n"][t] += dcg[k - 1] / idcg[min(k, rel.size) - 1]
            sums["e"][t] += float(cum[k - 1] == 0)
    rep = MetricsReport()
    for t, k in enumerate(cutoffs):
        denom = max(n, 1)
        rep.precision[k] = float(sums["p"][t] / denom)
        rep.recall[k] = float(sums["r"][t] / denom)
        rep.ndcg[k] = float(sums["n"][t] / denom)
        rep.topk_error[k] = float(sums["e"][t] / denom)
    return rep


@dataclass(frozen=True)
class TieBlockSpec:
    z: int
    m: int
    r: int

    def __post_init__(self):
        if self.m < 1 or not 0 <= self.r <= self.m or self.z < 0:
            raise ValueError(f"invalid tie block {self}")


def expected_tie_dcg(block):
    """Expected DCG of a block of ``m`` tied items (``r`` relevant) after
    ``z`` positions under uniformly random tie-breaking, the block-optimal DCG,
    and their gap.

    Returns:
      ``(expected, optimal, gap)``.
    """
    w = dcg_weights(block.z + block.m)[block.z:]
    expected = block.r / block.m * float(w.sum())
    optimal = float(w[: block.r].sum())
    return expected, optimal, optimal - expected


def wop_alignment_gap(s, y, mapping):
    """Alignment of the Fenchel-Young residual with a pairwise DCG direction.

    The direction is ``sum_{pos i, neg j} w_{pi(i)} (e_j - e_i)`` over ranked
    positions. The comparator gradient replaces the zeroed negatives of the
    sparse mapping by their softmax probabilities.

    Returns:
      ``(inner, comparator_inner, gap)`` with ``gap = comparator - inner``.
    """
    s = as_scores(s)
    y = as_labels(y, s.size)
    if mapping.name == "rankmax":
        mapping = mapping.with_true_class(np.flatnonzero(y)[0])
    p = predict(s, mapping)
    grad = p - y / y.sum()
    order = ranking(s)
    w = dcg_weights(s.size)
    pos_w = w[np.flatnonzero(y[order] == 1)]
    d = np.zeros(s.size)
    # each negative collects the weights of all positives; each positive
    # loses its own weight once per negative.
    neg = y == 0
    d[neg] = pos_w.sum()
    pos_rank_weight = np.zeros(s.size)
    pos_rank_weight[order] = w * (y[order] == 1)
    d[~neg] = -pos_rank_weight[~neg] * neg.sum()
    zeroed = (p == 0) & neg
    plus = grad.copy()
    plus[zeroed] = softmax_map(s)[zeroed]
    inner = float(grad @ d)
    comp = float(plus @ d)
    return inner, comp, comp - inner
