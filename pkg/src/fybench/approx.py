"""Approximations of the softmax log-partition.

Sampled softmax (plain and proposal-corrected), NCE, hierarchical softmax on
a Huffman tree, and the quadratic Taylor surrogate (RG).
"""

import heapq
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .errors import DomainError
from .fy_losses import LossEval, as_labels
from .simplex_maps import as_scores, softmax_rows


@dataclass(frozen=True)
class ProposalDist:
    """Negative-sampling distribution.

    ``kind`` is ``uniform``, ``loguniform``, ``empirical`` or ``dns``. The
    first three carry explicit probabilities ``q``. DNS (dynamic negative
    sampling) draws ``pool`` uniform candidates and keeps the ``top``
    highest-scoring ones under the current model.
    """

    kind: str
    q: Optional[np.ndarray] = None
    pool: int = 500
    top: int = 100

    def __post_init__(self):
        if self.kind == "dns":
            if not self.pool >= self.top >= 1:
                raise DomainError("DNS requires pool >= top >= 1")
            return
        if self.kind not in ("uniform", "loguniform", "empirical"):
            raise DomainError(f"unknown proposal {self.kind!r}")
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 1 or np.any(q < 0) or not np.all(np.isfinite(q)):
            raise DomainError("proposal probabilities must be a finite non-negative vector")
        if abs(q.sum() - 1.0) > 1e-9:
            raise DomainError("proposal probabilities must sum to 1")
        if self.kind != "empirical" and np.any(q <= 0):
            raise DomainError(f"{self.kind} proposal must be strictly positive")

    @classmethod
    def uniform(cls, C):
        return cls("uniform", np.full(C, 1.0 / C))

    @classmethod
    def log_uniform(cls, C):
        # q_j proportional to 1 / (j + 2) over the class order.
        w = 1.0 / (np.arange(C) + 2.0)
        return cls("loguniform", w / w.sum())

    @classmethod
    def empirical(cls, freq):
        """Normalized frequencies. Zero entries are allowed and are never drawn."""
        f = np.asarray(freq, dtype=np.float64)
        if np.any(f < 0) or f.sum() <= 0:
            raise DomainError("frequencies must be non-negative with positive total")
        return cls("empirical", f / f.sum())

    @classmethod
    def dns(cls, pool=500, top=100):
        return cls("dns", None, int(pool), int(top))

    def probs(self, C=None):
        """Explicit probabilities; DNS falls back to uniform over ``C`` classes."""
        if self.kind == "dns":
            return np.full(C, 1.0 / C)
        return self.q

    def sample(self, rng, size, C=None, scores=None):
        """Draw negatives i.i.d. (with replacement).

        ``size`` is ``k`` or a shape ``(..., k)``. For DNS, ``scores`` must be
        given with shape ``(..., C)`` and the trailing size is ``top``.
        """
        if self.kind == "dns":
            scores = np.asarray(scores)
            C = scores.shape[-1]
            lead = scores.shape[:-1]
            cand = rng.integers(0, C, size=lead + (self.pool,))
            cs = np.take_along_axis(scores, cand, axis=-1)
            keep = np.argsort(-cs, axis=-1, kind="stable")[..., : self.top]
            return np.take_along_axis(cand, keep, axis=-1)
        return rng.choice(self.q.size, size=size, p=self.q)


@dataclass(frozen=True)
class SampleDraw:
    negatives: np.ndarray

    @property
    def k(self):
        return int(self.negatives.size)


def sample_stream(seed, index=0):
    """Per-call random stream derived from ``(seed, index)``."""
    return np.random.default_rng([int(seed), int(index)])


def draw_negatives(Q, k, seed, index=0, scores=None):
    """Draw ``k`` negatives from ``Q`` using the ``(seed, index)`` stream."""
    if k < 1:
        raise DomainError("k must be >= 1")
    rng = sample_stream(seed, index)
    if Q.kind == "dns":
        neg = Q.sample(rng, None, scores=np.asarray(scores))
    else:
        neg = Q.sample(rng, k)
    return SampleDraw(np.asarray(neg, dtype=np.int64))


def _sampled_softmax(s, y, negatives, shift):
    idx = np.concatenate(([y], negatives))
    logits = s[idx] - shift
    value = float(logsumexp(logits) - logits[0])
    w = softmax_rows(logits)
    grad = np.zeros_like(s)
    np.add.at(grad, idx, w)
    grad[y] -= 1.0
    return LossEval(value, grad)


def _check(s, y, draw):
    s = as_scores(s)
    y = int(y)
    if not 0 <= y < s.size:
        raise DomainError(f"class index {y} outside [0, {s.size})")
    if draw.k < 1:
        raise DomainError("sample draw must hold at least one negative")
    return s, y, draw.negatives


def ssm_simple_loss(s, y, draw):
    """Softmax restricted to the true class and the sampled negatives."""
    s, y, neg = _check(s, y, draw)
    return _sampled_softmax(s, y, neg, 0.0)


def ssm_corrected_loss(s, y, draw, Q):
    """Sampled softmax on logits corrected by ``-log q`` (true class included)."""
    s, y, neg = _check(s, y, draw)
    q = Q.probs(s.size)
    idx = np.concatenate(([y], neg))
    if np.any(q[idx] <= 0):
        raise DomainError("proposal assigns zero probability to a used class")
    shift = np.log(q[idx])
    return _sampled_softmax(s, y, neg, shift)


def nce_loss(s, y, draw, Q):
    """Noise-contrastive estimation with ``k`` noise samples from ``Q``.

    ``-[log sig(s_y - log(k q_y)) + sum_j log sig(-s_j + log(k q_j))]``
    """
    s, y, neg = _check(s, y, draw)
    k = neg.size
    q = Q.probs(s.size)
    if np.any(q[np.concatenate(([y], neg))] <= 0):
        raise DomainError("proposal assigns zero probability to a used class")
    x_pos = s[y] - np.log(k * q[y])
    x_neg = s[neg] - np.log(k * q[neg])
    value = float(-log_expit(x_pos) - log_expit(-x_neg).sum())
    grad = np.zeros_like(s)
    grad[y] += expit(x_pos) - 1.0
    np.add.at(grad, neg, expit(x_neg))
    return LossEval(value, grad)


@dataclass
class HuffmanTree:
    """Binary code tree over ``C`` classes.

    Internal nodes are numbered ``0 .. C-2`` in merge order (root last).
    Children are stored as ints: ``>= 0`` is an internal node, ``-(c + 1)``
    is the leaf of class ``c``. The left child takes branch sign ``+1``.
    """

    left: np.ndarray
    right: np.ndarray
    path_nodes: np.ndarray  # (C, max_depth), padded with -1
    path_signs: np.ndarray  # (C, max_depth), padded with 0
    depth: np.ndarray

    @property
    def n_classes(self):
        return int(self.depth.size)

    @property
    def n_nodes(self):
        return int(self.left.size)

    @property
    def root(self):
        return self.n_nodes - 1

    def path(self, j):
        d = self.depth[j]
        return list(zip(self.path_nodes[j, :d].tolist(), self.path_signs[j, :d].tolist()))

    def to_json(self):
        nodes = [
            {"id": u, "left": int(self.left[u]), "right": int(self.right[u])}
            for u in range(self.n_nodes)
        ]
        return json.dumps({"n_classes": self.n_classes, "nodes": nodes}, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        left = np.array([n["left"] for n in doc["nodes"]], dtype=np.int64)
        right = np.array([n["right"] for n in doc["nodes"]], dtype=np.int64)
        return _assemble(left, right, int(doc["n_classes"]))


def _assemble(left, right, C):
    paths = [None] * C
    stack = [(left.size - 1, [], [])]
    while stack:
        u, nodes, signs = stack.pop()
        for child, b in ((left[u], 1), (right[u], -1)):
            if child >= 0:
                stack.append((int(child), nodes + [u], signs + [b]))
            else:
                paths[-child - 1] = (nodes + [u], signs + [b])
    depth = np.array([len(p[0]) for p in paths], dtype=np.int64)
    D = int(depth.max())
    pn = np.full((C, D), -1, dtype=np.int64)
    ps = np.zeros((C, D), dtype=np.int64)
    for j, (nodes, signs) in enumerate(paths):
        pn[j, : len(nodes)] = nodes
        ps[j, : len(signs)] = signs
    return HuffmanTree(left, right, pn, ps, depth)


def build_huffman(freq, seed=0):
    """Huffman tree by repeatedly merging the two least frequent subtrees.

    Ties are broken by (frequency, smallest class index in the subtree), so
    the tree is fully deterministic; ``seed`` is accepted for interface
    symmetry and does not influence the result.
    """
    freq = np.asarray(freq, dtype=np.float64)
    C = freq.size
    if C < 2:
        raise DomainError("need at least two classes")
    if np.any(freq < 0) or not np.any(freq > 0):
        raise DomainError("frequencies must be non-negative and not all zero")
    heap = [(float(f), j, -(j + 1)) for j, f in enumerate(freq)]
    heapq.heapify(heap)
    left = np.empty(C - 1, dtype=np.int64)
    right = np.empty(C - 1, dtype=np.int64)
    for u in range(C - 1):
        f1, m1, a = heapq.heappop(heap)
        f2, m2, b = heapq.heappop(heap)
        left[u], right[u] = a, b
        heapq.heappush(heap, (f1 + f2, min(m1, m2), u))
    return _assemble(left, right, C)


def hsm_log_probs(node_logits, tree):
    """``log P_HSM(j)`` for every class; ``node_logits`` may be (C-1,) or (n, C-1)."""
    a = np.asarray(node_logits, dtype=np.float64)
    mask = tree.path_signs != 0
    z = a[..., np.where(mask, tree.path_nodes, 0)] * tree.path_signs
    return np.where(mask, log_expit(z), 0.0).sum(axis=-1)


def hsm_loss(node_logits, y, tree):
    """Negative log-probability of class ``y`` under the tree factorization.

    Only the nodes on the path of ``y`` receive gradient.
    """
    a = np.asarray(node_logits, dtype=np.float64)
    if a.shape != (tree.n_nodes,) or not np.all(np.isfinite(a)):
        raise DomainError(f"expected {tree.n_nodes} finite node logits")
    d = tree.depth[y]
    nodes = tree.path_nodes[y, :d]
    b = tree.path_signs[y, :d]
    z = b * a[nodes]
    grad = np.zeros_like(a)
    grad[nodes] = -b * expit(-z)
    return LossEval(float(-log_expit(z).sum()), grad)


def hsm_implicit_scores(node_logits, tree):
    """Flat scores ``s_j`` as the sum of child logits along each path.

    A node with binary logit ``a`` gives its left child the logit ``a`` and its
    right child 0, so the local softmax is ``sigmoid(+-a)``.
    """
    a = np.asarray(node_logits, dtype=np.float64)
    mask = tree.path_signs == 1
    return np.where(mask, a[..., np.where(mask, tree.path_nodes, 0)], 0.0).sum(axis=-1)


def rg_matrix(C):
    return np.eye(C) / C - 1.0 / C ** 2


def rg_partition(s):
    """Second-order Taylor expansion of ``log sum exp(s)`` around 0."""
    s = as_scores(s)
    C = s.size
    tot = s.sum()
    quad = (s @ s) / C - tot * tot / C ** 2
    return float(np.log(C) + tot / C + 0.5 * quad)


def rg_loss(s, y):
    """``-sum_{i in y} (s_i - Z_RG(s))`` and its exact gradient."""
    s = as_scores(s)
    y = as_labels(y, s.size)
    C = s.size
    n_pos = y.sum()
    value = float(n_pos * rg_partition(s) - s @ y)
    Ms = s / C - s.sum() / C ** 2
    return LossEval(value, n_pos * (1.0 / C + Ms) - y)
