"""Brute-force oracles for calibration claims and gradient checking."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .metrics import ranking
from .simplex_maps import MappingKind, predict


def bayes_optimal_scores(p, mapping):
    """A score vector ``s*`` with ``mapping(s*) = p``.

    Softmax uses centered ``log p``. The sparse mappings use the threshold
    form with ``tau = 0`` and put off-support classes at ``tau - 1``; rankmax
    pins ``s_y = 0`` so its normalizer is ``1 / p_y``.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("p must be a probability vector")
    on = p > 0
    if mapping.name == "softmax":
        if not np.all(on):
            raise DomainError("softmax cannot reach a posterior with zero entries")
        s = np.log(p)
        return s - s.mean()
    s = np.full(p.size, -1.0)
    if mapping.name == "sparsemax":
        s[on] = p[on]
    elif mapping.name == "entmax":
        a = mapping.alpha
        s[on] = p[on] ** (a - 1.0) / (a - 1.0)
    else:
        y = mapping.true_class
        if p[y] <= 0:
            raise DomainError("rankmax needs positive mass on its true class")
        s[on] = p[on] / p[y] - 1.0
        s[~on] = -2.0
    return s


def _top(v, k):
    return set(ranking(v)[:k].tolist())


@dataclass
class CalibrationVerdict:
    mapping: MappingKind
    trials: int
    topk_matches: dict = field(default_factory=dict)
    support_separation_ok: bool = True
    order_within_support_ok: bool = True
    counterexamples: list = field(default_factory=list)

    @property
    def violations(self):
        return sum(self.trials - m for m in self.topk_matches.values())

    @property
    def ok(self):
        return self.violations == 0 and self.support_separation_ok and self.order_within_support_ok

    def to_dict(self):
        return {
            "mapping": str(self.mapping),
            "trials": self.trials,
            "topk_matches": {str(k): v for k, v in self.topk_matches.items()},
            "support_separation_ok": self.support_separation_ok,
            "order_within_support_ok": self.order_within_support_ok,
            "violations": self.violations,
            "counterexamples": [
                {"p": c["p"].tolist(), "k": c["k"], "reason": c["reason"]}
                for c in self.counterexamples[:10]
            ],
        }


def _posteriors(C, trials, rng, dense_only):
    for t in range(trials):
        p = rng.dirichlet(np.ones(C))
        if not dense_only and t % 2 == 1:
            # Zero out a random block so the k > |support| branch is exercised.
            n_zero = rng.integers(1, C - 1)
            p[rng.permutation(C)[:n_zero]] = 0.0
            p /= p.sum()
        yield p


def check_topk_calibration(mapping, C, k_values, trials, seed):
    """Check that Bayes-optimal scores induce Bayes-optimal top-k sets.

    For ``k <= |support|`` the top-k sets of ``s*`` and ``p`` must coincide;
    for larger ``k`` the top-k of ``s*`` must contain the whole support (the
    completion is free). Support separation and within-support order are
    checked on every posterior. Softmax only sees dense Dirichlet draws;
    rankmax uses the most probable class as its true class.
    """
    if C > 12:
        raise DomainError("calibration enumeration is limited to C <= 12")
    rng = np.random.default_rng(seed)
    verdict = CalibrationVerdict(mapping, trials, {int(k): 0 for k in k_values})
    for p in _posteriors(C, trials, rng, mapping.name == "softmax"):
        m = mapping
        if m.name == "rankmax":
            m = m.with_true_class(int(np.argmax(p)))
        s = bayes_optimal_scores(p, m)
        P = np.flatnonzero(p > 0)
        off = np.flatnonzero(p == 0)
        if off.size and not s[P].min() > s[off].max():
            verdict.support_separation_ok = False
            verdict.counterexamples.append({"p": p, "k": None, "reason": "support separation"})
        ds = np.sign(s[P, None] - s[None, P])
        dp = np.sign(p[P, None] - p[None, P])
        if np.any(ds != dp):
            verdict.order_within_support_ok = False
            verdict.counterexamples.append({"p": p, "k": None, "reason": "order within support"})
        for k in verdict.topk_matches:
            top_s = _top(s, k)
            if k <= P.size:
                ok = top_s == _top(p, k)
            else:
                ok = set(P.tolist()) <= top_s
            if ok:
                verdict.topk_matches[k] += 1
            else:
                verdict.counterexamples.append({"p": p, "k": k, "reason": "top-k mismatch"})
    return verdict


def minimize_expected_loss(p, steps=5000, lr=1.0, tol=1e-12):
    """Gradient descent on the expected softmax loss ``E_{y~p} L(y, s)``;
    the gradient is ``softmax(s) - p``. Returns the final scores."""
    s = np.zeros(len(p))
    mapping = MappingKind.softmax()
    for _ in range(steps):
        g = predict(s, mapping) - p
        s -= lr * g
        if np.abs(g).max() < tol:
            break
    return s


def near_boundary(s, threshold, h):
    """True when some logit lies within ``10 h`` of the support threshold."""
    if threshold is None:
        return False
    t = threshold(s)
    return bool(np.any(np.abs(np.asarray(s) - t) < 10 * h))


def resample_off_boundary(s, threshold, h, rng, scale=1e-2, max_tries=1000):
    """Jitter ``s`` until no logit is within ``10 h`` of the threshold."""
    s = np.asarray(s, dtype=np.float64)
    tries = 0
    while near_boundary(s, threshold, h):
        if tries >= max_tries:
            raise DomainError("could not move the point away from the support boundary")
        s = s + scale * rng.standard_normal(s.size)
        tries += 1
    return s, tries


def grad_check(fun, s, h=1e-5, threshold=None, rng=None):
    """Largest relative error between ``fun``'s derivative and central
    differences of its value.

    ``fun(s)`` returns ``(value, derivative)``; a scalar value pairs with a
    gradient vector, a vector value with a Jacobian (columns are compared to
    the per-coordinate differences). The error is measured in the max norm,
    ``||fd - analytic||_inf / max(||analytic||_inf, 1e-8)``, so coordinates
    sitting at the round-off floor do not dominate. If ``threshold`` (a
    callable ``s -> tau``) is given, points within ``10 h`` of the support
    boundary are resampled first.
    """
    if not 1e-8 <= h <= 1e-3:
        raise DomainError("h must lie in [1e-8, 1e-3]")
    s = np.asarray(s, dtype=np.float64)
    if threshold is not None:
        s, _ = resample_off_boundary(s, threshold, h, rng or np.random.default_rng(0))
    _, analytic = fun(s)
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.zeros_like(analytic)
    for j in range(s.size):
        e = np.zeros_like(s)
        e[j] = h
        diff = (np.asarray(fun(s + e)[0]) - np.asarray(fun(s - e)[0])) / (2 * h)
        if analytic.ndim == 1:
            fd[j] = diff
        else:
            fd[:, j] = diff
    return float(np.abs(fd - analytic).max() / max(np.abs(analytic).max(), 1e-8))
