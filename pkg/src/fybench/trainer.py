"""Matrix-factorization training for every loss in the package.

Scores are ``s_u = V u`` per user. Exact losses evaluate all ``C`` scores
per example, sampled losses only the true item and its negatives, and
hierarchical softmax the internal nodes on the true item's path.
"""

import csv
import json
import math
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .approx import HuffmanTree, ProposalDist, build_huffman, hsm_log_probs
from .errors import ConfigError, DataError, DomainError
from .metrics import MetricsReport, evaluate_users
from .simplex_maps import entmax_rows, rankmax_rows, softmax_rows, sparsemax_rows

EXACT_LOSSES = ("softmax", "sparsemax", "entmax", "rankmax", "rg")
SAMPLED_LOSSES = ("ssm-simple", "ssm", "nce")
LOSSES = EXACT_LOSSES + SAMPLED_LOSSES + ("hsm",)
PROPOSALS = ("uniform", "loguniform", "empirical", "dns")
DIVERGENCE_LIMIT = 1e10

# Upper bounds on the spectral norm of the loss Hessian w.r.t. the scores.
JACOBIAN_BOUND = {
    "softmax": 0.5, "ssm-simple": 0.5, "ssm": 0.5, "hsm": 0.5,
    "nce": 0.25, "sparsemax": 1.0, "entmax": 1.0,
}


@dataclass
class MFModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    node_factors: Optional[np.ndarray] = None
    tree: Optional[HuffmanTree] = None

    def __post_init__(self):
        if self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise DomainError("user and item factors must share the embedding dim")
        if self.d < 1:
            raise DomainError("d must be >= 1")

    @property
    def d(self):
        return int(self.user_factors.shape[1])

    @property
    def n_users(self):
        return int(self.user_factors.shape[0])

    @property
    def n_items(self):
        return int(self.item_factors.shape[0])

    @classmethod
    def init(cls, n_users, n_items, d, seed=0, scale=0.1, tree=None):
        rng = np.random.default_rng([1, seed])
        U = scale * rng.standard_normal((n_users, d))
        V = scale * rng.standard_normal((n_items, d))
        nodes = None
        if tree is not None:
            nodes = scale * rng.standard_normal((tree.n_nodes, d))
        return cls(U, V, nodes, tree)

    def copy(self):
        return replace(
            self,
            user_factors=self.user_factors.copy(),
            item_factors=self.item_factors.copy(),
            node_factors=None if self.node_factors is None else self.node_factors.copy(),
        )

    def scores(self, users=None):
        """Full score matrix; log-probabilities under the tree for HSM models."""
        U = self.user_factors if users is None else self.user_factors[users]
        if self.tree is not None and self.node_factors is not None:
            return hsm_log_probs(U @ self.node_factors.T, self.tree)
        return U @ self.item_factors.T

    def is_finite(self):
        arrays = [self.user_factors, self.item_factors]
        if self.node_factors is not None:
            arrays.append(self.node_factors)
        return all(np.all(np.isfinite(a)) for a in arrays)


@dataclass
class TrainConfig:
    loss: str = "softmax"
    learning_rate: float = 1.0
    l2: float = 0.0
    epochs: int = 10
    batch_size: int = 2048
    k: int = 10
    proposal: str = "uniform"
    seed: int = 0
    cutoffs: tuple = (20,)
    alpha: float = 1.5
    optimizer: str = "gd"
    dns_pool: int = 500
    validate: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.l2 >= 0:
            raise ConfigError("l2 must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.k < 1:
            raise ConfigError("epochs, batch_size and k must be >= 1")
        if self.proposal not in PROPOSALS:
            raise ConfigError(f"unknown proposal {self.proposal!r}")
        if self.proposal == "dns" and self.dns_pool < self.k:
            raise ConfigError("dns_pool must be >= k")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss == "entmax" and not 1.0 < self.alpha <= 2.0:
            raise ConfigError("entmax alpha must lie in (1, 2]")
        self.cutoffs = tuple(int(c) for c in self.cutoffs)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    wall_time_s: float
    score_evals: int
    metrics: Optional[MetricsReport] = None
    diverged: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class ConvergenceEstimate:
    rho_hat: float
    kappa_bound: float
    L_head_bound: float
    rho_bound: float
    eta: float
    iterations: int
    converged: bool
    objective: list = field(default_factory=list)


# Per-batch loss values and score gradients.

def _one_hot(y, C):
    Y = np.zeros((y.size, C))
    Y[np.arange(y.size), y] = 1.0
    return Y


def exact_batch(S, y, loss, alpha=1.5):
    """Loss values ``(B,)`` and gradients ``(B, C)`` for a full score block."""
    B, C = S.shape
    rows = np.arange(B)
    sy = S[rows, y]
    if loss == "softmax":
        return logsumexp(S, axis=1) - sy, softmax_rows(S) - _one_hot(y, C)
    if loss == "sparsemax":
        P = sparsemax_rows(S)[0]
        vals = (S * P).sum(1) - 0.5 * (P * P).sum(1) + 0.5 - sy
        return vals, P - _one_hot(y, C)
    if loss == "entmax":
        P = entmax_rows(S, alpha)[0]
        omega = ((P ** alpha).sum(1) - 1.0) / (alpha * (alpha - 1.0))
        return (S * P).sum(1) - omega - sy, P - _one_hot(y, C)
    if loss == "rankmax":
        G = rankmax_rows(S, y)[0] - _one_hot(y, C)
        return 0.5 * (G * G).sum(1), G
    if loss == "rg":
        tot = S.sum(1)
        z = math.log(C) + tot / C + 0.5 * ((S * S).sum(1) / C - tot * tot / C ** 2)
        G = 1.0 / C + S / C - tot[:, None] / C ** 2 - _one_hot(y, C)
        return z - sy, G
    raise ConfigError(f"{loss!r} is not an exact loss")


def sampled_batch(S_idx, log_q, loss):
    """Values and gradients on ``[y, negatives]`` score blocks ``(B, k + 1)``."""
    k = S_idx.shape[1] - 1
    if loss == "nce":
        x = S_idx - (math.log(k) + log_q)
        vals = -log_expit(x[:, 0]) - log_expit(-x[:, 1:]).sum(1)
        G = expit(x)
        G[:, 0] -= 1.0
        return vals, G
    logits = S_idx if loss == "ssm-simple" else S_idx - log_q
    vals = logsumexp(logits, axis=1) - logits[:, 0]
    G = softmax_rows(logits)
    G[:, 0] -= 1.0
    return vals, G


def _scatter(rows, grads, d):
    """Sum gradient rows that hit the same parameter row."""
    uniq, inv = np.unique(rows, return_inverse=True)
    # one flat bincount over (row, column) cells; far faster than np.add.at
    cells = (inv.reshape(-1, 1) * d + np.arange(d)).ravel()
    out = np.bincount(cells, weights=grads.ravel(), minlength=uniq.size * d)
    return uniq, out.reshape(uniq.size, d)


class _Optimizer:
    """Row-sparse update ``x -= eta * (g + l2 * x)``; ``adam`` rescales the
    step per coordinate with lazily updated moments."""

    def __init__(self, cfg, params):
        self.eta = cfg.learning_rate
        self.l2 = cfg.l2
        self.adam = cfg.optimizer == "adam"
        self.t = 0
        if self.adam:
            self.m = {name: np.zeros_like(p) for name, p in params.items() if p is not None}
            self.v = {name: np.zeros_like(p) for name, p in params.items() if p is not None}

    def step(self, name, param, rows, grad):
        g = grad + self.l2 * param[rows] if self.l2 else grad
        if not self.adam:
            param[rows] -= self.eta * g
            return
        m, v = self.m[name], self.v[name]
        m[rows] = 0.9 * m[rows] + 0.1 * g
        v[rows] = 0.999 * v[rows] + 0.001 * g * g
        mh = m[rows] / (1 - 0.9 ** self.t)
        vh = v[rows] / (1 - 0.999 ** self.t)
        param[rows] -= self.eta * mh / (np.sqrt(vh) + 1e-8)


def make_proposal(cfg, item_counts):
    C = item_counts.size
    if cfg.proposal == "uniform":
        return ProposalDist.uniform(C)
    if cfg.proposal == "empirical":
        return ProposalDist.empirical(item_counts)
    if cfg.proposal == "loguniform":
        # log-uniform over popularity rank, most popular first
        rank = np.empty(C, dtype=np.int64)
        rank[np.argsort(-item_counts, kind="stable")] = np.arange(C)
        q = ProposalDist.log_uniform(C).q[rank]
        return ProposalDist("loguniform", q / q.sum())
    return ProposalDist.dns(cfg.dns_pool, cfg.k)


class _Sampler:
    def __init__(self, Q, k, C):
        self.Q, self.k, self.C = Q, k, C
        q = Q.probs(C)
        self.log_q = np.log(np.where(q > 0, q, 1.0))
        self.cdf = None if Q.kind in ("uniform", "dns") else np.cumsum(q)

    def draw(self, rng, B):
        if self.cdf is None:
            return rng.integers(0, self.C, size=(B, self.k))
        u = rng.random((B, self.k)) * self.cdf[-1]
        return np.minimum(np.searchsorted(self.cdf, u, side="right"), self.C - 1)


def _pair_scores(U_b, V, idx):
    return np.einsum("bd,bkd->bk", U_b, V[idx])


def _batch_step(model, opt, users, y, cfg, sampler, rng):
    """One minibatch update. Returns (summed loss, score evaluations)."""
    U, V = model.user_factors, model.item_factors
    d = model.d
    B = users.size
    U_b = U[users]

    if cfg.loss in EXACT_LOSSES:
        S = U_b @ V.T
        vals, G = exact_batch(S, y, cfg.loss, cfg.alpha)
        G /= B
        dU_b = G @ V
        dV = G.T @ U_b
        evals = S.size
        uu, dU = _scatter(users, dU_b, d)
        opt.t += 1
        opt.step("U", U, uu, dU)
        opt.step("V", V, np.arange(V.shape[0]), dV)
        return float(vals.sum()), evals

    if cfg.loss == "hsm":
        tree, Nf = model.tree, model.node_factors
        nodes = tree.path_nodes[y]
        signs = tree.path_signs[y]
        mask = signs != 0
        safe = np.where(mask, nodes, 0)
        z = signs * _pair_scores(U_b, Nf, safe)
        vals = -np.where(mask, log_expit(z), 0.0).sum(1)
        ga = np.where(mask, -signs * expit(-z), 0.0) / B
        dU_b = np.einsum("bk,bkd->bd", ga, Nf[safe])
        un, dN = _scatter(nodes[mask], ga[mask][:, None] * np.repeat(U_b, mask.sum(1), axis=0), d)
        uu, dU = _scatter(users, dU_b, d)
        opt.t += 1
        opt.step("U", U, uu, dU)
        opt.step("N", Nf, un, dN)
        return float(vals.sum()), int(mask.sum())

    if sampler.Q.kind == "dns":
        cand = rng.integers(0, V.shape[0], size=(B, sampler.Q.pool))
        cs = _pair_scores(U_b, V, cand)
        keep = np.argsort(-cs, axis=1, kind="stable")[:, : sampler.Q.top]
        neg = np.take_along_axis(cand, keep, axis=1)
        idx = np.concatenate([y[:, None], neg], axis=1)
        S_idx = np.concatenate([(U_b * V[y]).sum(1)[:, None],
                                np.take_along_axis(cs, keep, axis=1)], axis=1)
        evals = B * (sampler.Q.pool + 1)
    else:
        idx = np.concatenate([y[:, None], sampler.draw(rng, B)], axis=1)
        V_idx = V[idx]
        S_idx = np.einsum("bd,bkd->bk", U_b, V_idx)
        evals = idx.size
    vals, G = sampled_batch(S_idx, sampler.log_q[idx], cfg.loss)
    G /= B
    if sampler.Q.kind == "dns":
        V_idx = V[idx]
    dU_b = np.einsum("bk,bkd->bd", G, V_idx)
    iv, dV = _scatter(idx, G[:, :, None] * U_b[:, None, :], d)
    uu, dU = _scatter(users, dU_b, d)
    opt.t += 1
    opt.step("U", U, uu, dU)
    opt.step("V", V, iv, dV)
    return float(vals.sum()), evals


def _validate(model, data, cutoffs):
    valid = data.items_by_user("valid")
    users = np.array([u for u, v in enumerate(valid) if len(v)], dtype=np.int64)
    if users.size == 0:
        return None
    train = data.items_by_user("train")
    return evaluate_users(model.scores(users), [valid[u] for u in users], cutoffs,
                          exclude=[train[u] for u in users])


def train(model, data, cfg):
    """Minibatch gradient descent on ``cfg.loss``.

    The data loss is averaged over each minibatch; the penalty
    ``l2 * (|U|^2 + |V|^2) / 2`` is applied to the rows a minibatch touches,
    so sampled losses never pay for untouched items. Each epoch shuffles the
    training pairs with the ``(seed, epoch)`` stream and records the mean
    training loss, its exact score-evaluation count and validation metrics
    (training items removed from the ranking). A loss above ``1e10`` or a
    non-finite parameter aborts the run with a ``diverged`` record.

    Returns:
      ``(model, records)``; the input model is left untouched.
    """
    if model.n_users != data.n_users or model.n_items != data.n_items:
        raise DataError("model shape does not match the data")
    model = model.copy()
    users, items = data.select("train")
    if users.size == 0:
        raise DataError("no training interactions")
    C = data.n_items
    if cfg.loss == "hsm" and model.tree is None:
        tree = build_huffman(np.maximum(data.item_counts("train"), 1))
        rng = np.random.default_rng([3, cfg.seed])
        model = replace(model, tree=tree,
                        node_factors=0.1 * rng.standard_normal((tree.n_nodes, model.d)))
    sampler = None
    if cfg.loss in SAMPLED_LOSSES:
        sampler = _Sampler(make_proposal(cfg, data.item_counts("train")), cfg.k, C)
    params = {"U": model.user_factors, "V": model.item_factors, "N": model.node_factors}
    opt = _Optimizer(cfg, params)
    records = []
    N = users.size
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([2, cfg.seed, epoch])
        order = rng.permutation(N)
        total, evals = 0.0, 0
        diverged = False
        start = time.perf_counter()
        for b in range(0, N, cfg.batch_size):
            sel = order[b: b + cfg.batch_size]
            loss_sum, n_eval = _batch_step(model, opt, users[sel], items[sel], cfg, sampler, rng)
            total += loss_sum
            evals += n_eval
            if not math.isfinite(loss_sum) or loss_sum / sel.size > DIVERGENCE_LIMIT:
                diverged = True
                break
        wall = time.perf_counter() - start
        if diverged or not model.is_finite():
            records.append(EpochRecord(epoch, float("nan") if not math.isfinite(total) else total / N,
                                       wall, max(evals, 1), None, True,
                                       {"reason": "loss exceeded 1e10 or became non-finite"}))
            break
        metrics = _validate(model, data, cfg.cutoffs) if cfg.validate else None
        records.append(EpochRecord(epoch, total / N, wall, evals, metrics))
    return model, records


# RG alternating least squares.

def rg_objective(model, user_items, l2):
    """``sum_u [n_u Z_RG(V u) - sum_{i in I_u} v_i . u] + l2 (|U|^2 + |V|^2) / 2``."""
    U, V = model.user_factors, model.item_factors
    C = V.shape[0]
    n = np.array([len(i) for i in user_items], dtype=np.float64)
    tot = U @ V.sum(0)
    G = V.T @ V
    quad = np.einsum("ud,de,ue->u", U, G, U) / C - tot * tot / C ** 2
    z = math.log(C) + tot / C + 0.5 * quad
    pos = sum(float(V[i].sum(0) @ U[u]) for u, i in enumerate(user_items) if len(i))
    return float(n @ z - pos + 0.5 * l2 * ((U * U).sum() + (V * V).sum()))


def _user_half_step(U, V, user_items, l2):
    C, d = V.shape
    vs = V.sum(0)
    VMV = V.T @ V / C - np.outer(vs, vs) / C ** 2
    for u, items in enumerate(user_items):
        n_u = len(items)
        rhs = V[items].sum(0) - n_u * vs / C
        U[u] = np.linalg.solve(n_u * VMV + l2 * np.eye(d), rhs)


def _item_half_step(U, V, user_items, l2):
    C, d = V.shape
    n = np.array([len(i) for i in user_items], dtype=np.float64)
    A = (U * n[:, None]).T @ U
    b = n @ U
    R = np.zeros((C, d))
    for u, items in enumerate(user_items):
        R[items] += U[u]
    # The stationarity condition is V(A/C + l2 I) - 1 (1^T V A)/C^2 = R - 1 b^T/C;
    # its solution has 1^T V = 0 because 1^T R = b, so the rank-one term drops.
    V[:] = np.linalg.solve((A / C + l2 * np.eye(d)).T, (R - b[None, :] / C).T).T


def train_rg_als(model, data, cfg):
    """Alternating exact minimization of the RG objective.

    Every user row solves ``(n_u V^T M V + l2 I) u = sum_{i in I_u} v_i - n_u V^T 1 / C``
    with ``M = I/C - 1 1^T / C^2``; the item step solves one shared ``d x d``
    system. One epoch is a user half-sweep followed by an item half-sweep;
    the objective after each half-sweep is kept in ``extra``.
    """
    if cfg.loss != "rg":
        raise ConfigError("ALS applies to the rg loss only")
    if not cfg.l2 > 0:
        raise ConfigError("ALS requires l2 > 0")
    model = model.copy()
    user_items = data.items_by_user("train")
    N = sum(len(i) for i in user_items)
    if N == 0:
        raise DataError("no training interactions")
    records = []
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        _user_half_step(model.user_factors, model.item_factors, user_items, cfg.l2)
        obj_user = rg_objective(model, user_items, cfg.l2)
        _item_half_step(model.user_factors, model.item_factors, user_items, cfg.l2)
        obj_item = rg_objective(model, user_items, cfg.l2)
        wall = time.perf_counter() - start
        if not (math.isfinite(obj_item) and model.is_finite()):
            records.append(EpochRecord(epoch, float("nan"), wall, N, None, True,
                                       {"reason": "non-finite objective"}))
            break
        metrics = _validate(model, data, cfg.cutoffs) if cfg.validate else None
        records.append(EpochRecord(epoch, obj_item / N, wall, N, metrics, False,
                                   {"objective_user_step": obj_user,
                                    "objective_item_step": obj_item}))
    return model, records


# Convergence of the convex last layer.

def head_bound(loss, C):
    if loss == "rg":
        return 1.0 / C
    if loss not in JACOBIAN_BOUND:
        raise ConfigError(f"no Hessian bound for {loss!r}")
    return JACOBIAN_BOUND[loss]


def kappa_bound(loss, L_G, l2, C=None):
    """``1 + sup |J|_2 L_G / l2`` for the l2-regularized last layer."""
    if not l2 > 0:
        raise DomainError("kappa is finite only for l2 > 0")
    return 1.0 + head_bound(loss, C) * L_G / l2


def _head_objective(W, X, y, loss, l2, alpha):
    vals, G = exact_batch(X @ W.T, y, loss, alpha)
    n = X.shape[0]
    obj = float(vals.mean() + 0.5 * l2 * (W * W).sum())
    return obj, G.T @ X / n + l2 * W


def estimate_convergence_factor(loss, features, labels, l2, eta=None, n_classes=None,
                                alpha=1.5, max_iter=20000, floor=1e-10):
    """Empirical linear rate of full-batch GD on the regularized last layer.

    The features stay fixed and only ``W`` (C x d) is trained from zero.
    ``eta`` defaults to ``2 / (L + l2)`` with ``L = bound * L_G + l2``. A
    first run to a gradient norm of ``1e-14`` gives the reference optimum;
    ``rho_hat`` is the exponential of the least-squares slope of
    ``log |W_t - W*|`` over the final half of the iterations before the
    distance reaches ``floor``. Sampled and tree losses only get the analytic
    bound (``rho_hat`` is NaN and the estimate is flagged).
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    C = int(n_classes or y.max() + 1)
    L_G = float((X * X).sum(1).max())
    bound = head_bound(loss, C)
    kappa = kappa_bound(loss, L_G, l2, C)
    rho_bound = (kappa - 1.0) / (kappa + 1.0)
    L = bound * L_G + l2
    eta = 2.0 / (L + l2) if eta is None else float(eta)
    if loss not in ("softmax", "sparsemax", "entmax", "rg"):
        return ConvergenceEstimate(float("nan"), kappa, bound, rho_bound, eta, 0, False)

    W = np.zeros((C, X.shape[1]))
    converged = False
    objective = []
    for it in range(max_iter):
        obj, g = _head_objective(W, X, y, loss, l2, alpha)
        objective.append(obj)
        if np.abs(g).max() < 1e-14:
            converged = True
            break
        W -= eta * g
    W_star = W
    iters = it + 1

    W = np.zeros_like(W_star)
    dist = []
    for _ in range(iters):
        dt = float(np.linalg.norm(W - W_star))
        if dt <= floor:
            break
        dist.append(dt)
        W -= eta * _head_objective(W, X, y, loss, l2, alpha)[1]
    dist = np.array(dist)
    # Final half of the trace, but never fewer than three points.
    window = dist[min(dist.size // 2, max(dist.size - 3, 0)):]
    if window.size < 2:
        return ConvergenceEstimate(float("nan"), kappa, bound, rho_bound, eta, iters, False, objective)
    t = np.arange(window.size)
    slope = np.polyfit(t, np.log(window), 1)[0]
    return ConvergenceEstimate(float(np.exp(slope)), kappa, bound, rho_bound, eta, iters,
                               converged, objective)


# Per-epoch cost.

@dataclass
class ComplexityProfile:
    loss: str
    C_values: list
    median_time_s: list
    score_evals: list
    slope_time: float
    slope_evals: float


def _loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def complexity_profile(loss, C_values, N, k, d=16, batch_size=512, repeats=3, seed=0,
                       n_users=256):
    """Median single-epoch training time and exact score count per ``C``.

    Training pairs are drawn uniformly; HSM uses the balanced tree built from
    equal item frequencies. Validation is off so only training is timed.
    """
    from .datasets import InteractionSet

    C_values = [int(c) for c in C_values]
    if min(C_values) < 2 or repeats < 3:
        raise DomainError("need C >= 2 and at least 3 repeats per point")
    times, evals = [], []
    for C in C_values:
        rng = np.random.default_rng([6, seed, C])
        data = InteractionSet(rng.integers(0, n_users, N), rng.integers(0, C, N),
                              np.ones(N), n_users, C)
        tree = build_huffman(np.ones(C)) if loss == "hsm" else None
        cfg = TrainConfig(loss=loss, learning_rate=0.01, epochs=1, batch_size=batch_size,
                          k=k, seed=seed, validate=False)
        run_t = []
        for _ in range(repeats):
            model = MFModel.init(n_users, C, d, seed, tree=tree)
            _, rec = train(model, data, cfg)
            run_t.append(rec[0].wall_time_s)
        times.append(float(np.median(run_t)))
        evals.append(rec[0].score_evals)
    return ComplexityProfile(loss, C_values, times, evals,
                             _loglog_slope(C_values, times), _loglog_slope(C_values, evals))


# Output.

def _metric_columns(records):
    for r in records:
        if r.metrics is not None:
            return [f"{name}@{c}" for c in sorted(r.metrics.ndcg)
                    for name in ("precision", "recall", "ndcg", "topk_error")]
    return []


def write_epoch_csv(records, path):
    """Deterministic per-epoch CSV; wall times go to ``<stem>_timing.csv``."""
    cols = _metric_columns(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "score_evals", "status"] + cols)
        for r in records:
            row = [r.epoch, repr(r.train_loss), r.score_evals,
                   "DIVERGED" if r.diverged else "ok"]
            if r.metrics is not None:
                row += [repr(v) for _, _, v in r.metrics.rows()]
            else:
                row += [""] * len(cols)
            w.writerow(row)
    timing = str(path)[:-4] + "_timing.csv" if str(path).endswith(".csv") else f"{path}_timing"
    with open(timing, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_time_s", "cumulative_time_s"])
        cum = 0.0
        for r in records:
            cum += r.wall_time_s
            w.writerow([r.epoch, repr(r.wall_time_s), repr(cum)])
    return timing


_CKPT_MAGIC = b"FYBM"


def save_checkpoint(model, path, seed=0):
    """Magic, u32 header length, JSON header, then little-endian f8 U, V
    (and node factors)."""
    header = {"n_users": model.n_users, "n_items": model.n_items, "d": model.d,
              "dtype": "<f8", "seed": int(seed),
              "tree": None if model.tree is None else json.loads(model.tree.to_json())}
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for a in (model.user_factors, model.item_factors, model.node_factors):
            if a is not None:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    h = json.loads(raw[8: 8 + hlen])
    off = 8 + hlen
    shapes = [(h["n_users"], h["d"]), (h["n_items"], h["d"])]
    tree = None
    if h["tree"] is not None:
        tree = HuffmanTree.from_json(json.dumps(h["tree"]))
        shapes.append((tree.n_nodes, h["d"]))
    arrays = []
    for shape in shapes:
        n = shape[0] * shape[1]
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy())
        off += 8 * n
    return MFModel(arrays[0], arrays[1], arrays[2] if tree else None, tree), h["seed"]
