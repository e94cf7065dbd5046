import numpy as np
import pytest

from fybench.approx import (ProposalDist, build_huffman, draw_negatives, hsm_loss, nce_loss,
                            rg_loss, ssm_corrected_loss, ssm_simple_loss)
from fybench.errors import DomainError
from fybench.fy_losses import entmax_loss, rankmax_loss, softmax_loss, sparsemax_loss
from fybench.oracles import (bayes_optimal_scores, check_topk_calibration, grad_check,
                             minimize_expected_loss, near_boundary)
from fybench.simplex_maps import MappingKind, jacobian, predict, rankmax_map, sparsemax_map

MAPPINGS = [MappingKind.softmax(), MappingKind.sparsemax(), MappingKind.entmax(1.5),
            MappingKind.rankmax(0)]


def test_bayes_optimal_examples():
    s = bayes_optimal_scores(np.full(5, 0.2), MappingKind.softmax())
    np.testing.assert_allclose(s - s.mean(), 0, atol=1e-15)
    p = np.random.default_rng(0).dirichlet(np.ones(6))
    np.testing.assert_allclose(sparsemax_map(p)[0], p, atol=1e-12)
    with pytest.raises(DomainError):
        bayes_optimal_scores([0.5, 0.5, 0.0], MappingKind.softmax())
    with pytest.raises(DomainError):
        bayes_optimal_scores([0.5, 0.6], MappingKind.sparsemax())


@pytest.mark.parametrize("m", MAPPINGS + [MappingKind.entmax(1.25)], ids=str)
def test_round_trip(m):
    rng = np.random.default_rng(1)
    for t in range(1000):
        p = rng.dirichlet(np.ones(6))
        if m.name != "softmax" and t % 2:
            p[rng.permutation(6)[:2]] = 0
            p /= p.sum()
        mm = m.with_true_class(int(np.argmax(p))) if m.name == "rankmax" else m
        np.testing.assert_allclose(predict(bayes_optimal_scores(p, mm), mm), p, atol=1e-9)


@pytest.mark.parametrize("m", MAPPINGS, ids=str)
def test_calibration_all_mappings(m):
    v = check_topk_calibration(m, 6, range(1, 7), 1000, seed=0)
    assert v.ok and v.violations == 0
    assert all(c == 1000 for c in v.topk_matches.values())
    d = v.to_dict()
    assert d["violations"] == 0 and d["counterexamples"] == []


def test_support_separation_strict():
    p = np.array([0.5, 0.3, 0.2, 0.0, 0.0])
    s = bayes_optimal_scores(p, MappingKind.sparsemax())
    assert s[:3].min() > 0 >= s[3:].max()


def test_degenerate_posterior():
    p = np.eye(4)[0]
    for m in MAPPINGS[1:]:
        s = bayes_optimal_scores(p, m)
        assert int(np.argmax(s)) == 0 and (s[0] > s[1:]).all()


def test_calibration_rejects_large_C():
    with pytest.raises(DomainError):
        check_topk_calibration(MappingKind.softmax(), 13, [1], 10, 0)


def test_softmax_posterior_matching():
    rng = np.random.default_rng(2)
    for C in (2, 4, 6):
        p = rng.dirichlet(np.ones(C))
        s = minimize_expected_loss(p, steps=100_000, lr=1.0, tol=1e-10)
        np.testing.assert_allclose(predict(s, MappingKind.softmax()), p, atol=1e-6)


def test_grad_check_examples():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = rng.standard_normal(8)
        f = lambda t: (softmax_loss(t, 2).value, softmax_loss(t, 2).gradient)
        assert grad_check(f, s, h=1e-5) <= 1e-5
        g = lambda t: (rg_loss(t, 2).value, rg_loss(t, 2).gradient)
        assert grad_check(g, s, h=1e-5) <= 1e-7
    with pytest.raises(DomainError):
        grad_check(f, s, h=1e-2)


def test_grad_check_resamples_boundary_points():
    s = np.array([1.0, 0.0, -1.0, -2.0])  # threshold is 0, s_1 sits on it
    thr = lambda t: sparsemax_map(t)[1].threshold
    assert near_boundary(s, thr, 1e-5)
    f = lambda t: (sparsemax_loss(t, 0).value, sparsemax_loss(t, 0).gradient)
    assert grad_check(f, s, h=1e-5, threshold=thr) <= 1e-5


def test_grad_check_every_loss():
    rng = np.random.default_rng(4)
    C = 10
    Q = ProposalDist.log_uniform(C)
    tree = build_huffman(rng.integers(1, 9, C))
    for _ in range(10):
        s = rng.standard_normal(C)
        a = rng.standard_normal(C - 1)
        d = draw_negatives(Q, 4, int(rng.integers(100)))
        cases = [
            (lambda t: softmax_loss(t, 1), None),
            (lambda t: sparsemax_loss(t, 1), lambda t: sparsemax_map(t)[1].threshold),
            (lambda t: entmax_loss(t, 1, 1.5), None),
            (lambda t: ssm_simple_loss(t, 1, d), None),
            (lambda t: ssm_corrected_loss(t, 1, d, Q), None),
            (lambda t: nce_loss(t, 1, d, Q), None),
            (lambda t: rg_loss(t, 1), None),
        ]
        for fn, thr in cases:
            f = lambda t, fn=fn: (fn(t).value, fn(t).gradient)
            assert grad_check(f, s, threshold=thr) <= 1e-4
        f = lambda t: (hsm_loss(t, 3, tree).value, hsm_loss(t, 3, tree).gradient)
        assert grad_check(f, a) <= 1e-6
    # Rankmax: the gradient is checked through its Jacobian against the mapping.
    m = MappingKind.rankmax(0)
    for _ in range(10):
        s = rng.standard_normal(6)
        f = lambda t: (rankmax_map(t, 0)[0], jacobian(t, m).entries)
        thr = lambda t: rankmax_map(t, 0)[1].threshold
        assert grad_check(f, s, threshold=thr) <= 1e-4
    assert rankmax_loss(np.array([2.0, 0, 0]), 0).value == 0.0
