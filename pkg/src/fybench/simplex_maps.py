"""Prediction mappings from logits to the probability simplex.

Softmax, sparsemax, alpha-entmax and rankmax, together with their support
structure, closed-form Jacobians and a power-iteration spectral norm.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError

# Probabilities below this are treated as exact zeros.
PROB_FLOOR = 1e-300
BOUNDARY_TOL = 1e-8


@dataclass(frozen=True)
class MappingKind:
    """Which prediction mapping is in play.

    ``name`` is one of ``softmax``, ``sparsemax``, ``entmax`` or ``rankmax``.
    ``alpha`` is used by entmax only, ``true_class`` by rankmax only.
    """

    name: str
    alpha: Optional[float] = None
    true_class: Optional[int] = None

    def __post_init__(self):
        if self.name not in ("softmax", "sparsemax", "entmax", "rankmax"):
            raise DomainError(f"unknown mapping {self.name!r}")
        if self.name == "entmax":
            if self.alpha is None or not (1.0 < self.alpha <= 2.0):
                raise DomainError(f"entmax requires 1 < alpha <= 2, got {self.alpha}")
        if self.name == "rankmax" and self.true_class is None:
            raise DomainError("rankmax requires a true class")

    @classmethod
    def softmax(cls):
        return cls("softmax")

    @classmethod
    def sparsemax(cls):
        return cls("sparsemax")

    @classmethod
    def entmax(cls, alpha=1.5):
        return cls("entmax", alpha=float(alpha))

    @classmethod
    def rankmax(cls, true_class):
        return cls("rankmax", true_class=int(true_class))

    @property
    def is_sparse(self):
        return self.name != "softmax"

    def with_true_class(self, y):
        return MappingKind(self.name, self.alpha, int(y) if self.name == "rankmax" else None)

    def __str__(self):
        if self.name == "entmax":
            return f"entmax({self.alpha:g})"
        if self.name == "rankmax":
            return f"rankmax(y={self.true_class})"
        return self.name


@dataclass(frozen=True)
class SupportInfo:
    """Active support of a sparse mapping and its threshold."""

    support: np.ndarray
    threshold: float

    @property
    def support_size(self):
        return int(self.support.size)


@dataclass(frozen=True)
class JacobianMatrix:
    entries: np.ndarray
    mapping: MappingKind
    support: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    near_boundary: bool = False


class PowerIteration(NamedTuple):
    norm: float
    converged: bool
    iterations: int


def as_scores(s):
    """Validate and return logits as a float64 vector."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise DomainError(f"score vector must be 1-d with C >= 2, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise DomainError("score vector contains non-finite entries")
    return s


def _check_rows(S):
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise DomainError("scores contain non-finite entries")
    return S


def softmax_rows(S):
    S = _check_rows(S)
    Z = np.exp(S - S.max(axis=-1, keepdims=True))
    return Z / Z.sum(axis=-1, keepdims=True)


def sparsemax_rows(S):
    """Sparsemax along the last axis. Returns ``(P, tau)``."""
    S = _check_rows(S)
    C = S.shape[-1]
    # Stable descending order: ties keep ascending index.
    order = np.argsort(-S, axis=-1, kind="stable")
    u = np.take_along_axis(S, order, axis=-1)
    cssv = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, C + 1)
    cond = u * ind > cssv
    rho = C - 1 - np.argmax(cond[..., ::-1], axis=-1)
    tau = np.take_along_axis(cssv, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    P = np.maximum(S - tau, 0.0)
    P[P < PROB_FLOOR] = 0.0
    return P, tau[..., 0]


def entmax_rows(S, alpha, tol=1e-12, max_iter=200):
    """Alpha-entmax along the last axis by bisection on the threshold.

    Returns ``(P, tau)`` with ``tau`` expressed on the logit scale.
    """
    if not (1.0 < alpha <= 2.0):
        raise DomainError(f"entmax requires 1 < alpha <= 2, got {alpha}")
    S = _check_rows(S)
    C = S.shape[-1]
    am1 = alpha - 1.0
    # Work with z = (alpha - 1) s so p = (z - t)_+^(1 / (alpha - 1)).
    Z = am1 * S
    zmax = Z.max(axis=-1, keepdims=True)
    lo = zmax - 1.0
    hi = zmax - (1.0 / C) ** am1
    expo = 1.0 / am1

    def mass(t):
        return (np.maximum(Z - t, 0.0) ** expo).sum(axis=-1, keepdims=True)

    t = 0.5 * (lo + hi)
    for _ in range(max_iter):
        t = 0.5 * (lo + hi)
        f = mass(t) - 1.0
        if np.all(np.abs(f) <= tol):
            break
        above = f > 0
        lo = np.where(above, t, lo)
        hi = np.where(above, hi, t)
    # Two Newton steps polish t to round-off; the mass is convex and
    # decreasing in t, so steps from a near-root cannot diverge.
    for _ in range(2):
        gap = np.maximum(Z - t, 0.0)
        slope = expo * (gap ** (expo - 1.0)).sum(axis=-1, keepdims=True)
        t = t + (mass(t) - 1.0) / slope
    P = np.maximum(Z - t, 0.0) ** expo
    P /= P.sum(axis=-1, keepdims=True)
    P[P < PROB_FLOOR] = 0.0
    return P, t[..., 0] / am1


def rankmax_rows(S, y):
    """Rankmax (simplest form) along the last axis; ``y`` holds one class per row."""
    S = _check_rows(S)
    y = np.asarray(y)
    s_y = np.take_along_axis(S, y[..., None], axis=-1)
    U = np.maximum(S - s_y + 1.0, 0.0)
    np.put_along_axis(U, y[..., None], 1.0, axis=-1)
    return U / U.sum(axis=-1, keepdims=True), s_y[..., 0] - 1.0


def _support(p, threshold):
    return SupportInfo(np.flatnonzero(p > 0.0), float(threshold))


def softmax_map(s):
    """Softmax with max-shift stabilization."""
    return softmax_rows(as_scores(s))


def sparsemax_map(s):
    """Euclidean projection of ``s`` onto the simplex.

    Returns:
      ``(p, SupportInfo)`` where ``p_i = max(s_i - tau, 0)``.
    """
    P, tau = sparsemax_rows(as_scores(s))
    return P, _support(P, tau)


def entmax_map(s, alpha):
    P, tau = entmax_rows(as_scores(s), alpha)
    return P, _support(P, tau)


def rankmax_map(s, y):
    s = as_scores(s)
    y = _check_class(y, s.size)
    P, tau = rankmax_rows(s, np.int64(y))
    return P, _support(P, tau)


def _check_class(y, C):
    if isinstance(y, (bool, np.bool_)) or int(y) != y or not 0 <= int(y) < C:
        raise DomainError(f"class index {y!r} outside [0, {C})")
    return int(y)


def predict(s, mapping):
    """Forward map for any :class:`MappingKind`; returns probabilities only."""
    if mapping.name == "softmax":
        return softmax_map(s)
    if mapping.name == "sparsemax":
        return sparsemax_map(s)[0]
    if mapping.name == "entmax":
        return entmax_map(s, mapping.alpha)[0]
    return rankmax_map(s, mapping.true_class)[0]


def predict_rows(S, mapping, y=None):
    """Row-wise forward map. ``y`` supplies per-row true classes for rankmax."""
    if mapping.name == "softmax":
        return softmax_rows(S)
    if mapping.name == "sparsemax":
        return sparsemax_rows(S)[0]
    if mapping.name == "entmax":
        return entmax_rows(S, mapping.alpha)[0]
    if y is None:
        y = np.full(np.shape(S)[:-1], mapping.true_class)
    return rankmax_rows(S, y)[0]


def jacobian(s, mapping):
    """Closed-form Jacobian ``d p / d s`` of the mapping at ``s``.

    For sparse mappings the Jacobian is the one of the active region found by
    the forward map; rows and columns outside the support are exactly zero.
    ``near_boundary`` is set when some logit is within 1e-8 of the threshold,
    where the Jacobian is only one-sided.
    """
    s = as_scores(s)
    C = s.size
    J = np.zeros((C, C))
    if mapping.name == "softmax":
        p = softmax_map(s)
        J = np.diag(p) - np.outer(p, p)
        return JacobianMatrix(J, mapping, np.arange(C), False)

    if mapping.name == "sparsemax":
        p, info = sparsemax_map(s)
        P = info.support
        m = P.size
        J[np.ix_(P, P)] = np.eye(m) - 1.0 / m
    elif mapping.name == "entmax":
        p, info = entmax_map(s, mapping.alpha)
        P = info.support
        a = p[P] ** (2.0 - mapping.alpha)
        J[np.ix_(P, P)] = np.diag(a) - np.outer(a, a) / a.sum()
    else:
        y = mapping.true_class
        p, info = rankmax_map(s, y)
        P = info.support
        m = P.size
        S = np.maximum(s[P] - s[y] + 1.0, 0.0)
        S[P == y] = 1.0
        S = S.sum()
        pP = p[P]
        ey = (P == y).astype(float)
        block = (np.eye(m) - np.outer(pP, np.ones(m))) - np.outer(1.0 - m * pP, ey)
        J[np.ix_(P, P)] = block / S

    gap = np.abs(s - info.threshold)
    if mapping.name == "rankmax":
        gap[mapping.true_class] = np.inf
    near = bool(np.any(gap < BOUNDARY_TOL))
    return JacobianMatrix(J, mapping, info.support, near)


def _start_vectors(n, C):
    v = np.ones((n, C)) / np.sqrt(C)
    return v


def _perturbed(C):
    # Deterministic index-seeded perturbation of the all-ones direction.
    idx = np.arange(C)
    v = 1.0 + 0.5 * np.sin(1.0 + 2.399963229728653 * idx)
    return v / np.linalg.norm(v)


def power_iteration(M, tol=1e-10, max_iter=1000):
    """Largest singular value of ``M`` (or a stack of matrices) via power
    iteration on ``M^T M``.

    Returns a :class:`PowerIteration` (arrays of norms/flags for stacks).
    """
    M = np.asarray(M, dtype=np.float64)
    single = M.ndim == 2
    if single:
        M = M[None]
    if not np.all(np.isfinite(M)):
        raise DomainError("matrix contains non-finite entries")
    n, _, C = M.shape
    v = _start_vectors(n, C)
    w = np.einsum("nij,nj->ni", M, v)
    scale = np.sqrt((M ** 2).sum(axis=(1, 2)))
    dead = np.linalg.norm(w, axis=1) <= 1e-12 * np.maximum(scale, 1e-300)
    if np.any(dead & (scale > 0)):
        v[dead] = _perturbed(C)
        w = np.einsum("nij,nj->ni", M, v)

    sigma = np.linalg.norm(w, axis=1)
    converged = scale == 0
    iters = np.zeros(n, dtype=int)
    active = ~converged
    for it in range(1, max_iter + 1):
        if not np.any(active):
            break
        Ma = M[active]
        wa = w[active]
        x = np.einsum("nji,nj->ni", Ma, wa)  # M^T M v
        xn = np.linalg.norm(x, axis=1)
        ok = xn > 0
        x[ok] /= xn[ok, None]
        wa = np.einsum("nij,nj->ni", Ma, x)
        new_sigma = np.linalg.norm(wa, axis=1)
        done = np.abs(new_sigma - sigma[active]) <= tol * np.maximum(new_sigma, 1.0)
        idx = np.flatnonzero(active)
        sigma[idx] = new_sigma
        w[idx] = wa
        iters[idx] = it
        converged[idx[done]] = True
        active[idx[done]] = False
    if single:
        return PowerIteration(float(sigma[0]), bool(converged[0]), int(iters[0]))
    return PowerIteration(sigma, converged, iters)


def spectral_norm(J, tol=1e-10, max_iter=1000):
    """Spectral norm of a Jacobian (or matrix, or stack of matrices)."""
    if isinstance(J, JacobianMatrix):
        J = J.entries
    return power_iteration(J, tol=tol, max_iter=max_iter).norm


@dataclass
class OrderReport:
    """Outcome of an order-preservation probe.

    ``verdict`` is ``"SOP-consistent"``, ``"WOP-witnessed"`` or
    ``"inversion-found"``. Witnesses are ``(s, i, j)`` triples.
    """

    mapping: MappingKind
    trials: int
    verdict: str
    tie_witness: Optional[tuple] = None
    inversion_witness: Optional[tuple] = None


def classify_order_preservation(mapping, trials, seed, n_classes=5,
                                scales=(0.1, 1.0, 10.0)):
    """Search random logits for order inversions and strict-tie witnesses.

    A pair ``s_i > s_j + 1e-6`` is a tie witness when its probabilities agree
    to 1e-12 relative to the larger of the two (so two exact zeros always
    tie, while tiny-but-distinct softmax tails do not).
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    C = n_classes
    tie = inversion = None
    for t in range(trials):
        s = rng.standard_normal(C) * scales[t % len(scales)]
        p = predict(s, mapping)
        ds = s[:, None] - s[None, :]
        dp = p[:, None] - p[None, :]
        bigger = np.maximum(p[:, None], p[None, :])
        inv = np.argwhere((ds > 0) & (dp < 0))
        if inversion is None and inv.size:
            i, j = inv[0]
            inversion = (s.copy(), int(i), int(j))
        ties = np.argwhere((ds > 1e-6) & (np.abs(dp) <= 1e-12 * bigger))
        if tie is None and ties.size:
            i, j = ties[0]
            tie = (s.copy(), int(i), int(j))
        if tie is not None and inversion is not None:
            break
    if inversion is not None:
        verdict = "inversion-found"
    elif tie is not None:
        verdict = "WOP-witnessed"
    else:
        verdict = "SOP-consistent"
    return OrderReport(mapping, trials, verdict, tie, inversion)
