import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import brentq

from fybench.errors import DomainError
from fybench.simplex_maps import (MappingKind, classify_order_preservation, entmax_map,
                                  jacobian, power_iteration, predict, predict_rows,
                                  rankmax_map, softmax_map, sparsemax_map, spectral_norm)

MAPPINGS = [MappingKind.softmax(), MappingKind.sparsemax(), MappingKind.entmax(1.5),
            MappingKind.entmax(1.25), MappingKind.rankmax(0)]

scores = arrays(np.float64, st.integers(2, 12),
                elements=st.floats(-20, 20, allow_nan=False, allow_infinity=False))


def entmax_oracle(s, alpha):
    # Root of sum_i [(alpha - 1) s_i - t]_+^(1/(alpha-1)) = 1 found by brentq.
    z = (alpha - 1.0) * np.asarray(s, dtype=float)
    f = lambda t: np.sum(np.maximum(z - t, 0.0) ** (1.0 / (alpha - 1.0))) - 1.0
    t = brentq(f, z.max() - 1.0, z.max(), xtol=1e-15)
    return np.maximum(z - t, 0.0) ** (1.0 / (alpha - 1.0))


def fd_jacobian(s, mapping, h=1e-6):
    C = s.size
    J = np.zeros((C, C))
    for j in range(C):
        e = np.zeros(C)
        e[j] = h
        J[:, j] = (predict(s + e, mapping) - predict(s - e, mapping)) / (2 * h)
    return J


def test_softmax_examples():
    np.testing.assert_allclose(softmax_map([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax_map([0, np.log(2), np.log(3)]), [1 / 6, 2 / 6, 3 / 6],
                               atol=1e-15)
    p = softmax_map([1000, 1000, 999])
    assert np.all(np.isfinite(p)) and p[0] == p[1]
    np.testing.assert_allclose(p, softmax_map([1, 1, 0]), atol=1e-15)


def test_sparsemax_examples():
    p, info = sparsemax_map([0, 0])
    np.testing.assert_allclose(p, [0.5, 0.5])
    assert info.threshold == -0.5 and info.support_size == 2
    p, info = sparsemax_map([1, 0])
    np.testing.assert_allclose(p, [1, 0])
    assert info.threshold == 0.0 and info.support_size == 1
    p, info = sparsemax_map([1.5, 0.3, -2.0])
    np.testing.assert_allclose(p, [1, 0, 0])
    assert info.support_size == 1


def test_sparsemax_matches_projection_oracle():
    # Projection onto the simplex via bisection on tau (independent of the sort scan).
    rng = np.random.default_rng(1)
    for _ in range(200):
        s = rng.standard_normal(rng.integers(2, 30)) * rng.choice([0.1, 1, 5])
        tau = brentq(lambda t: np.maximum(s - t, 0).sum() - 1.0, s.min() - 1, s.max(), xtol=1e-15)
        p, info = sparsemax_map(s)
        np.testing.assert_allclose(p, np.maximum(s - tau, 0), atol=1e-12)
        np.testing.assert_allclose(np.maximum(s - info.threshold, 0), p, atol=1e-12)


def test_sparsemax_is_identity_on_interior_simplex():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.dirichlet(np.ones(7))
        np.testing.assert_allclose(sparsemax_map(p)[0], p, atol=1e-12)


def test_entmax_examples():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = rng.standard_normal(6) * 3
        np.testing.assert_allclose(entmax_map(s, 2.0)[0], sparsemax_map(s)[0], atol=1e-9)
    np.testing.assert_allclose(entmax_map([0, 0, 0, 0], 1.5)[0], [0.25] * 4, atol=1e-12)
    np.testing.assert_allclose(entmax_map([1, 2, 3], 1.0001)[0], softmax_map([1, 2, 3]), atol=1e-3)


@pytest.mark.parametrize("alpha", [1.25, 1.5, 1.75])
def test_entmax_matches_root_oracle(alpha):
    rng = np.random.default_rng(4)
    for _ in range(100):
        s = rng.standard_normal(rng.integers(2, 20)) * 2
        np.testing.assert_allclose(entmax_map(s, alpha)[0], entmax_oracle(s, alpha), atol=1e-9)


def test_rankmax_examples():
    np.testing.assert_allclose(rankmax_map([0, 0, 0], 0)[0], [1 / 3] * 3)
    np.testing.assert_allclose(rankmax_map([2, 0, 0], 0)[0], [1, 0, 0])
    np.testing.assert_allclose(rankmax_map([0, 0.5, 0], 0)[0], [2 / 7, 3 / 7, 2 / 7])


def test_domain_errors():
    with pytest.raises(DomainError):
        softmax_map([1.0])
    with pytest.raises(DomainError):
        softmax_map([0.0, np.nan])
    with pytest.raises(DomainError):
        MappingKind.entmax(2.5)
    with pytest.raises(DomainError):
        MappingKind.entmax(1.0)
    with pytest.raises(DomainError):
        rankmax_map([0, 0], 2)


@settings(max_examples=200, deadline=None)
@given(scores)
def test_outputs_on_simplex(s):
    for m in MAPPINGS:
        p = predict(s, m)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(scores)
def test_softmax_strict_order(s):
    # Strict logit order is never inverted; ties only appear in underflowed tails.
    p = softmax_map(s)
    gt = (s[:, None] - s[None, :]) > 1e-6
    assert np.all((p[:, None] - p[None, :])[gt] >= 0)


def test_batched_rows_match_single():
    rng = np.random.default_rng(5)
    S = rng.standard_normal((20, 9)) * 2
    y = rng.integers(0, 9, 20)
    for m in MAPPINGS[:4]:
        P = predict_rows(S, m)
        for i in range(20):
            np.testing.assert_allclose(P[i], predict(S[i], m), atol=1e-12)
    P = predict_rows(S, MappingKind.rankmax(0), y)
    for i in range(20):
        np.testing.assert_allclose(P[i], rankmax_map(S[i], y[i])[0], atol=1e-15)


def test_jacobian_examples():
    J = jacobian([0, 0], MappingKind.softmax()).entries
    np.testing.assert_allclose(J, [[0.25, -0.25], [-0.25, 0.25]])
    s = np.array([0.5, 0.4, 0.3, -3.0])
    jm = jacobian(s, MappingKind.sparsemax())
    assert jm.support.tolist() == [0, 1, 2]
    np.testing.assert_allclose(jm.entries[:3, :3], np.eye(3) - 1 / 3, atol=1e-15)
    assert np.all(jm.entries[3] == 0) and np.all(jm.entries[:, 3] == 0)


@pytest.mark.parametrize("m", MAPPINGS, ids=str)
@pytest.mark.parametrize("C", [2, 5, 16, 64])
def test_jacobian_matches_finite_differences(m, C):
    rng = np.random.default_rng(C)
    checked = 0
    while checked < 100:
        s = rng.standard_normal(C) * rng.choice([0.3, 1.0, 3.0])
        jm = jacobian(s, m)
        _, info = (sparsemax_map(s) if m.name == "sparsemax" else
                   entmax_map(s, m.alpha) if m.name == "entmax" else
                   rankmax_map(s, m.true_class) if m.name == "rankmax" else (None, None))
        if info is not None:
            gap = np.abs(s - info.threshold)
            if m.name == "rankmax":
                gap[m.true_class] = np.inf
            if gap.min() < 1e-4:
                continue
        fd = fd_jacobian(s, m)
        # Denominator floor: a single-point support has J = 0 exactly, and
        # central differences at h = 1e-6 carry ~1e-10 round-off.
        err = np.abs(fd - jm.entries).max() / max(np.abs(jm.entries).max(), 1e-3)
        assert err <= 1e-4
        checked += 1


def test_jacobian_structure():
    rng = np.random.default_rng(6)
    for _ in range(100):
        s = rng.standard_normal(8) * 2
        J = jacobian(s, MappingKind.softmax()).entries
        assert np.abs(J @ np.ones(8)).max() <= 1e-12
        np.testing.assert_allclose(J, J.T, atol=1e-10)
        for m in (MappingKind.sparsemax(), MappingKind.entmax(1.5)):
            jm = jacobian(s, m)
            np.testing.assert_allclose(jm.entries, jm.entries.T, atol=1e-10)
            off = np.setdiff1d(np.arange(8), jm.support)
            assert np.all(jm.entries[off] == 0) and np.all(jm.entries[:, off] == 0)
            sv = np.linalg.svd(jm.entries, compute_uv=False)
            assert (sv > 1e-10).sum() <= jm.support.size - 1


def test_rankmax_jacobian_not_symmetric():
    J = jacobian([0, 0.5, 0.2], MappingKind.rankmax(0)).entries
    assert np.abs(J - J.T).max() > 1e-3


def test_spectral_norm_examples():
    assert spectral_norm(np.eye(2)) == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(7)
    for _ in range(200):
        A = rng.standard_normal((6, 6))
        pi = power_iteration(A, tol=1e-13, max_iter=20000)
        assert pi.norm == pytest.approx(np.linalg.norm(A, 2), rel=1e-5)


def test_power_iteration_batched_and_zero():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((10, 4, 4))
    A[3] = 0
    res = power_iteration(A, tol=1e-13, max_iter=20000)
    np.testing.assert_allclose(res.norm, [np.linalg.norm(a, 2) for a in A], rtol=1e-5)
    assert res.norm[3] == 0 and res.converged[3]


def test_power_iteration_start_vector_in_kernel():
    # The all-ones start is in the kernel of a softmax Jacobian.
    J = jacobian([0.3, -0.1, 0.2], MappingKind.softmax()).entries
    assert spectral_norm(J) == pytest.approx(np.linalg.norm(J, 2), rel=1e-8)


def test_rankmax_norm_approaches_m_over_S():
    # As s_y dominates the other support logits, p -> e_y and the norm -> m / S.
    ratios = []
    for d in [0.0, 0.5, 0.9, 0.99]:
        s = np.array([0.0, -d, -d])
        jm = jacobian(s, MappingKind.rankmax(0))
        S = 1 + 2 * (1 - d)
        ratios.append(spectral_norm(jm) / (3 / S))
    assert all(r <= 1 + 1e-6 for r in ratios)
    assert ratios[-1] > 0.98


def test_order_probes():
    soft = classify_order_preservation(MappingKind.softmax(), 2000, 0)
    assert soft.verdict == "SOP-consistent" and soft.tie_witness is None
    for m in (MappingKind.sparsemax(), MappingKind.entmax(1.5), MappingKind.rankmax(0)):
        rep = classify_order_preservation(m, 2000, 0)
        assert rep.verdict == "WOP-witnessed" and rep.inversion_witness is None
        s, i, j = rep.tie_witness
        p = predict(s, m)
        assert s[i] > s[j] and p[i] == p[j]
