"""Fenchel-Young losses for the exact prediction mappings.

Every loss here has the form ``Omega*(s) + Omega(y) - <s, y>`` with the
conjugate evaluated as ``<s, p> - Omega(p)`` at ``p = mapping(s)``, so the
gradient is the residual ``p - y`` by construction.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, UsageError
from .simplex_maps import (
    MappingKind,
    as_scores,
    entmax_map,
    rankmax_map,
    softmax_map,
    sparsemax_map,
)


@dataclass(frozen=True)
class LossEval:
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class RegularizerKind:
    """Convex potential on the simplex: ``shannon``, ``l2`` or ``tsallis``."""

    name: str
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.name not in ("shannon", "l2", "tsallis"):
            raise DomainError(f"unknown regularizer {self.name!r}")
        if self.name == "tsallis" and (self.alpha is None or not 1.0 < self.alpha <= 2.0):
            raise DomainError(f"Tsallis potential requires 1 < alpha <= 2, got {self.alpha}")

    @classmethod
    def shannon(cls):
        return cls("shannon")

    @classmethod
    def half_squared_l2(cls):
        return cls("l2")

    @classmethod
    def tsallis(cls, alpha):
        return cls("tsallis", float(alpha))

    @classmethod
    def for_mapping(cls, mapping):
        if mapping.name == "softmax":
            return cls.shannon()
        if mapping.name == "sparsemax":
            return cls.half_squared_l2()
        if mapping.name == "entmax":
            return cls.tsallis(mapping.alpha)
        raise UsageError("rankmax has no Fenchel-Young potential")

    @property
    def mapping(self):
        if self.name == "shannon":
            return MappingKind.softmax()
        if self.name == "l2":
            return MappingKind.sparsemax()
        return MappingKind.entmax(self.alpha)

    def __call__(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self.name == "shannon":
            nz = p > 0
            return float(np.sum(p[nz] * np.log(p[nz])))
        if self.name == "l2":
            return 0.5 * float(p @ p)
        a = self.alpha
        return float((np.sum(p ** a) - 1.0) / (a * (a - 1.0)))

    def predict(self, s):
        if self.name == "shannon":
            return softmax_map(s)
        if self.name == "l2":
            return sparsemax_map(s)[0]
        return entmax_map(s, self.alpha)[0]


def as_labels(y, C):
    """Binary label vector from a class index or a 0/1 array of length ``C``."""
    if np.ndim(y) == 0:
        if int(y) != y or not 0 <= int(y) < C:
            raise DomainError(f"class index {y!r} outside [0, {C})")
        out = np.zeros(C)
        out[int(y)] = 1.0
        return out
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (C,):
        raise DomainError(f"label vector must have shape ({C},), got {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("label entries must be 0 or 1")
    if y.sum() < 1:
        raise DomainError("label vector has no positive entry")
    return y


def fy_loss(s, y, reg, mapping=None):
    """Fenchel-Young loss ``Omega*(s) + Omega(y_n) - <s, y_n>``.

    Multi-hot labels are normalized, ``y_n = y / |y|``. For the Shannon
    potential the value equals ``-(1/|y|) sum_{i in y} log p_i + Omega(y_n)``,
    i.e. the averaged cross-entropy shifted by the (non-positive) entropy term
    of the normalized label; for one-hot labels the shift is zero.

    Args:
      s: logits, shape (C,).
      y: class index or binary label vector.
      reg: the :class:`RegularizerKind`.
      mapping: optional mapping to check against ``reg``.
    """
    s = as_scores(s)
    y = as_labels(y, s.size)
    if mapping is not None and mapping != reg.mapping:
        raise UsageError(f"mapping {mapping} does not correspond to regularizer {reg.name}")
    y_n = y / y.sum()
    p = reg.predict(s)
    conj = float(s @ p) - reg(p)
    value = conj + reg(y_n) - float(s @ y_n)
    return LossEval(value, p - y_n)


def softmax_loss(s, y):
    """Cross-entropy summed over the positives of ``y``.

    The gradient is ``|y| * softmax(s) - y``, which is ``|y|`` times the
    normalized Fenchel-Young residual.
    """
    s = as_scores(s)
    y = as_labels(y, s.size)
    n_pos = y.sum()
    lse = logsumexp(s)
    value = float(n_pos * lse - s @ y)
    return LossEval(value, n_pos * softmax_map(s) - y)


def sparsemax_loss(s, y):
    return fy_loss(s, y, RegularizerKind.half_squared_l2())


def entmax_loss(s, y, alpha):
    return fy_loss(s, y, RegularizerKind.tsallis(alpha))


def rankmax_grad(s, y):
    """Residual ``rankmax(s; y) - e_y``; vanishes once ``s_y`` beats every
    other logit by at least 1."""
    p, _ = rankmax_map(s, y)
    p = p.copy()
    p[int(y)] -= 1.0
    return p


def rankmax_loss(s, y):
    """Rankmax residual with the proxy value ``0.5 * ||p - e_y||^2``.

    The residual is not the gradient of the proxy (the rankmax Jacobian is
    not symmetric, so no scalar potential exists); the value only tracks
    optimization progress.
    """
    g = rankmax_grad(s, y)
    return LossEval(0.5 * float(g @ g), g)


def exact_loss(s, y, mapping):
    """Dispatch to the loss belonging to ``mapping`` (one-hot ``y``)."""
    if mapping.name == "softmax":
        return softmax_loss(s, y)
    if mapping.name == "rankmax":
        return rankmax_loss(s, y)
    return fy_loss(s, y, RegularizerKind.for_mapping(mapping))
