"""Divergences and bias-variance calculators for log-partition surrogates.

``delta_report`` evaluates the second-order Delta-method expressions in closed
form; ``empirical_report`` measures the same quantities by Monte Carlo.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .approx import hsm_log_probs, rg_partition, sample_stream
from .errors import DomainError, UsageError
from .simplex_maps import as_scores, softmax_map

SCHEMES = ("ssm-simple", "ssm", "nce", "hsm", "rg")


def _dist(P, name):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 1 or np.any(P < 0) or not np.all(np.isfinite(P)):
        raise DomainError(f"{name} must be a finite non-negative vector")
    return P


def chi2(P, Q):
    """Chi-square divergence ``sum_j (P_j - Q_j)^2 / Q_j``."""
    P, Q = _dist(P, "P"), _dist(Q, "Q")
    if np.any((Q == 0) & (P > 0)):
        raise DomainError("chi2 requires Q > 0 wherever P > 0")
    nz = Q > 0
    return float(np.sum((P[nz] - Q[nz]) ** 2 / Q[nz]))


def kl(P, Q):
    """``KL(P || Q)`` with ``0 log 0 = 0``.

    Returns ``inf`` (and warns) when ``P`` is not absolutely continuous
    with respect to ``Q``.
    """
    P, Q = _dist(P, "P"), _dist(Q, "Q")
    nz = P > 0
    if np.any(Q[nz] == 0):
        warnings.warn("KL support violation: P > 0 where Q = 0", RuntimeWarning, stacklevel=2)
        return math.inf
    return float(max(np.sum(P[nz] * (np.log(P[nz]) - np.log(Q[nz]))), 0.0))


def js_tau(P, Q, tau):
    """Skewed Jensen-Shannon divergence with mixture ``M = tau P + (1 - tau) Q``:
    ``tau KL(P || M) + (1 - tau) KL(Q || M)``."""
    if not 0.0 <= tau <= 1.0:
        raise DomainError("tau must lie in [0, 1]")
    P, Q = _dist(P, "P"), _dist(Q, "Q")
    M = tau * P + (1.0 - tau) * Q
    return tau * kl(P, M) + (1.0 - tau) * kl(Q, M)


@dataclass
class DeltaReport:
    scheme: str
    bias_asymptotic: float
    bias_curvature: float
    variance: float
    k: int
    aux: dict = field(default_factory=dict)

    @property
    def bias(self):
        return self.bias_asymptotic + self.bias_curvature


@dataclass
class EmpiricalReport:
    scheme: str
    mean_conjugate: float
    reference: float
    bias_hat: float
    variance_hat: float
    trials: int
    std_error: float


def _q_vector(Q, C):
    if Q is None:
        raise UsageError("a proposal distribution is required for sampling schemes")
    if Q.kind == "dns":
        raise UsageError("DNS has no closed-form proposal probabilities")
    q = Q.probs(C)
    if q.size != C:
        raise UsageError(f"proposal has {q.size} classes, scores have {C}")
    return q


def _hsm_inputs(tree, node_logits, C):
    if tree is None or node_logits is None:
        raise UsageError("hsm requires a tree and node logits")
    if tree.n_classes != C:
        raise UsageError("tree size does not match the score vector")
    return hsm_log_probs(node_logits, tree)


def delta_report(scheme, s, y, Q=None, k=1, tree=None, node_logits=None):
    """Closed-form bias/variance of a surrogate conjugate against log-sum-exp.

    Args:
      scheme: one of ``ssm-simple``, ``ssm``, ``nce``, ``hsm``, ``rg``.
      s: logits (the flat softmax target is ``P_s = softmax(s)``).
      y: true class.
      Q: proposal for the sampling schemes.
      k: number of negatives.
      tree, node_logits: the HSM factorization.
    """
    if scheme not in SCHEMES:
        raise UsageError(f"unknown scheme {scheme!r}")
    s = as_scores(s)
    C = s.size
    y = int(y)
    P = softmax_map(s)
    lse = float(logsumexp(s))
    aux = {"log_partition": lse}

    if scheme == "ssm-simple":
        q = _q_vector(Q, C)
        smax = s.max()
        e = np.exp(s - smax)
        mu = float(q @ e)
        var = max(float(q @ e ** 2) - mu * mu, 0.0)
        omega = math.exp(s[y] - smax) + k * mu
        aux.update(mean_exp=mu * math.exp(smax), var_exp=var * math.exp(2 * smax))
        variance = k * var / omega ** 2
        return DeltaReport(scheme, math.log(omega) + smax - lse, -0.5 * variance,
                           variance, k, aux)

    if scheme == "ssm":
        c2 = chi2(P, _q_vector(Q, C))
        aux["chi2"] = c2
        variance = c2 / k
        return DeltaReport(scheme, 0.0, -0.5 * variance, variance, k, aux)

    if scheme == "nce":
        q = _q_vector(Q, C)
        c2 = chi2(P, q)
        tau = 1.0 / (1.0 + k)
        js = js_tau(P, q, tau)
        aux.update(chi2=c2, js_tau=js, tau=tau)
        return DeltaReport(scheme, (1.0 + k) * js, 0.0, k / (1.0 + k) ** 2 * c2, k, aux)

    if scheme == "hsm":
        log_h = _hsm_inputs(tree, node_logits, C)
        div = kl(P, np.exp(log_h))
        aux.update(kl=div, pointwise_bias=float(-log_h[y] + s[y] - lse))
        return DeltaReport(scheme, div, 0.0, 0.0, k, aux)

    z = rg_partition(s)
    aux["rg_partition"] = z
    return DeltaReport(scheme, z - lse, 0.0, 0.0, k, aux)


def _sampled_conjugates(scheme, s, y, q, k, rng, n):
    neg = rng.choice(s.size, size=(n, k), p=q)
    if scheme == "ssm-simple":
        logits = np.concatenate([np.full((n, 1), s[y]), s[neg]], axis=1)
        return logsumexp(logits, axis=1)
    if scheme == "ssm":
        return logsumexp(s[neg] - np.log(q[neg]), axis=1) - math.log(k)
    # NCE noise term on self-normalized logits: sum_j log(1 + t_j / k),
    # t = P_s / Q; this is the only stochastic part of the objective.
    t = softmax_map(s)[neg] / q[neg]
    return np.log1p(t / k).sum(axis=1)


def empirical_report(scheme, s, y, Q=None, k=1, trials=100_000, seed=0,
                     tree=None, node_logits=None, partitions=8):
    """Monte-Carlo bias and variance of a surrogate conjugate.

    Trials are split into ``partitions`` independent streams seeded by
    ``(seed, partition)``, so results are deterministic. The reference is the
    exact log-partition, except for NCE whose conjugate is computed on
    self-normalized logits and is referenced to 0.
    """
    if trials < 100:
        raise DomainError("trials must be >= 100")
    if scheme not in SCHEMES:
        raise UsageError(f"unknown scheme {scheme!r}")
    s = as_scores(s)
    lse = float(logsumexp(s))
    if scheme in ("hsm", "rg"):
        rep = delta_report(scheme, s, y, Q, k, tree, node_logits)
        return EmpiricalReport(scheme, lse + rep.bias_asymptotic, lse,
                               rep.bias_asymptotic, 0.0, trials, 0.0)

    q = _q_vector(Q, s.size)
    parts = max(1, min(int(partitions), trials))
    sizes = np.full(parts, trials // parts)
    sizes[: trials % parts] += 1
    vals = np.concatenate([
        _sampled_conjugates(scheme, s, int(y), q, k, sample_stream(seed, i), int(m))
        for i, m in enumerate(sizes)
    ])
    reference = 0.0 if scheme == "nce" else lse
    mean = float(vals.mean())
    var = float(vals.var(ddof=1))
    return EmpiricalReport(scheme, mean, reference, mean - reference, var, trials,
                           math.sqrt(var / trials))
