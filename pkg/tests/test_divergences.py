import math
import warnings

import numpy as np
import pytest
from scipy.special import logsumexp

from fybench.approx import ProposalDist, build_huffman, hsm_log_probs
from fybench.divergences import chi2, delta_report, empirical_report, js_tau, kl
from fybench.errors import DomainError, UsageError
from fybench.simplex_maps import softmax_map


def rand_simplex(rng, C):
    return rng.dirichlet(np.ones(C))


def test_chi2_examples():
    P = np.array([0.2, 0.3, 0.5])
    assert chi2(P, P) == 0.0
    assert chi2([1, 0], [0.5, 0.5]) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        P, Q = rand_simplex(rng, 6), rand_simplex(rng, 6)
        assert chi2(P, Q) == pytest.approx(Q @ (P / Q) ** 2 - 1, abs=1e-12)
    with pytest.raises(DomainError):
        chi2([0.5, 0.5], [1.0, 0.0])


def classical_js(P, Q):
    M = (P + Q) / 2
    f = lambda a, b: sum(x * math.log(x / z) for x, z in zip(a, b) if x > 0)
    return 0.5 * f(P, M) + 0.5 * f(Q, M)


def test_kl_and_js_examples():
    rng = np.random.default_rng(1)
    P = rand_simplex(rng, 5)
    assert kl(P, P) == 0.0
    for tau in (0.0, 0.3, 1.0):
        assert js_tau(P, P, tau) == pytest.approx(0.0, abs=1e-15)
    for _ in range(20):
        P, Q = rand_simplex(rng, 7), rand_simplex(rng, 7)
        assert js_tau(P, Q, 0.5) == pytest.approx(classical_js(P, Q), abs=1e-12)
        for k in (1, 5, 20):
            M = (P + k * Q) / (1 + k)
            lhs = (1 + k) * js_tau(P, Q, 1 / (1 + k))
            assert lhs == pytest.approx(kl(P, M) + k * kl(Q, M), abs=1e-12)


def test_kl_support_violation_sentinel():
    with pytest.warns(RuntimeWarning):
        assert kl([0.5, 0.5], [1.0, 0.0]) == math.inf
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(DomainError):
        js_tau([1, 0], [0, 1], 1.5)


def test_ssm_with_perfect_proposal():
    s = np.random.default_rng(2).standard_normal(8)
    rep = delta_report("ssm", s, 0, ProposalDist("empirical", softmax_map(s)), k=5)
    assert rep.aux["chi2"] == pytest.approx(0.0, abs=1e-15)
    assert rep.variance == pytest.approx(0.0, abs=1e-15) and rep.bias_curvature == pytest.approx(0.0, abs=1e-15)


def test_ssm_simple_full_coverage():
    rng = np.random.default_rng(3)
    C, y = 9, 4
    q = np.full(C, 1 / (C - 1))
    q[y] = 0
    rep = delta_report("ssm-simple", rng.standard_normal(C), y, ProposalDist("empirical", q), k=C - 1)
    assert rep.bias_asymptotic == pytest.approx(0.0, abs=1e-12)


def test_ssm_simple_against_direct_formula():
    rng = np.random.default_rng(4)
    s = rng.standard_normal(10)
    Q = ProposalDist.log_uniform(10)
    q = Q.q
    k, y = 7, 2
    mu = q @ np.exp(s)
    var = q @ np.exp(2 * s) - mu ** 2
    om = np.exp(s[y]) + k * mu
    rep = delta_report("ssm-simple", s, y, Q, k)
    assert rep.bias_asymptotic == pytest.approx(math.log(om / np.exp(s).sum()), abs=1e-12)
    assert rep.variance == pytest.approx(k * var / om ** 2, rel=1e-10)
    assert rep.bias_curvature == pytest.approx(-k * var / (2 * om ** 2), rel=1e-10)


def test_structural_zeros_and_ratios():
    rng = np.random.default_rng(5)
    s = rng.standard_normal(16)
    Q = ProposalDist.uniform(16)
    tree = build_huffman(rng.integers(1, 10, 16))
    a = rng.standard_normal(15)
    ssm = delta_report("ssm", s, 0, Q, k=4)
    assert ssm.bias_asymptotic == 0.0
    assert ssm.bias_curvature == -ssm.variance / 2
    nce = delta_report("nce", s, 0, Q, k=4)
    assert nce.bias_curvature == 0.0
    assert nce.variance == pytest.approx(4 / 25 * chi2(softmax_map(s), Q.q))
    for rep in (delta_report("hsm", s, 0, tree=tree, node_logits=a), delta_report("rg", s, 0)):
        assert rep.variance == 0.0 and rep.bias_curvature == 0.0


def test_hsm_bias_matches_enumeration():
    rng = np.random.default_rng(6)
    s = rng.standard_normal(32)
    tree = build_huffman(rng.integers(1, 50, 32))
    a = rng.standard_normal(31)
    P = softmax_map(s)
    H = np.exp(hsm_log_probs(a, tree))
    enum = sum(P[y] * math.log(P[y] / H[y]) for y in range(32))
    assert delta_report("hsm", s, 0, tree=tree, node_logits=a).bias_asymptotic == pytest.approx(enum, abs=1e-10)


def test_rg_bias():
    s = np.array([0.3, -0.2, 0.1, 0.0])
    rep = delta_report("rg", s, 1)
    assert rep.bias_asymptotic == pytest.approx(rep.aux["rg_partition"] - logsumexp(s), abs=1e-15)


def test_proposal_quality_monotone():
    rng = np.random.default_rng(7)
    s = rng.standard_normal(12) * 1.5
    P = softmax_map(s)
    U = np.full(12, 1 / 12)
    vals = [delta_report("ssm", s, 0, ProposalDist("empirical", (1 - t) * U + t * P), 10).variance
            for t in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_usage_errors():
    with pytest.raises(UsageError):
        delta_report("ssm", np.zeros(3), 0)
    with pytest.raises(UsageError):
        delta_report("hsm", np.zeros(3), 0)
    with pytest.raises(UsageError):
        delta_report("nope", np.zeros(3), 0)
    with pytest.raises(DomainError):
        empirical_report("ssm", np.zeros(3), 0, ProposalDist.uniform(3), trials=50)


def test_deterministic_schemes_empirical():
    rng = np.random.default_rng(8)
    s = rng.standard_normal(8)
    tree = build_huffman(np.ones(8))
    a = rng.standard_normal(7)
    for scheme, kw in (("hsm", dict(tree=tree, node_logits=a)), ("rg", {})):
        emp = empirical_report(scheme, s, 0, trials=1000, **kw)
        assert emp.variance_hat == 0.0
        assert emp.bias_hat == delta_report(scheme, s, 0, **kw).bias_asymptotic


def ball_point(rng, C, radius):
    s = rng.standard_normal(C)
    return s / np.linalg.norm(s) * radius


def test_ssm_empirical_bias_in_delta_regime():
    rng = np.random.default_rng(9)
    s = ball_point(rng, 20, 1.0)
    Q = ProposalDist.uniform(20)
    emp = empirical_report("ssm", s, 0, Q, k=10, trials=100_000, seed=1)
    rep = delta_report("ssm", s, 0, Q, 10)
    assert emp.std_error == pytest.approx(math.sqrt(emp.variance_hat / emp.trials))
    assert abs(emp.bias_hat - rep.bias) <= max(3 * emp.std_error, 0.1 * abs(rep.bias))


def test_ssm_variance_follows_one_over_k():
    rng = np.random.default_rng(10)
    s = ball_point(rng, 20, 1.0)
    Q = ProposalDist.uniform(20)
    v10 = empirical_report("ssm", s, 0, Q, k=10, trials=100_000, seed=2).variance_hat
    v100 = empirical_report("ssm", s, 0, Q, k=100, trials=100_000, seed=3).variance_hat
    assert v100 == pytest.approx(v10 / 10, rel=0.2)


def test_nce_variance_first_order():
    rng = np.random.default_rng(11)
    s = ball_point(rng, 20, 0.1)
    Q = ProposalDist.uniform(20)
    for k in (5, 20):
        emp = empirical_report("nce", s, 0, Q, k=k, trials=100_000, seed=k)
        assert emp.variance_hat == pytest.approx(delta_report("nce", s, 0, Q, k).variance, rel=0.25)


def test_empirical_reproducible():
    s = np.linspace(-1, 1, 10)
    Q = ProposalDist.log_uniform(10)
    a = empirical_report("ssm-simple", s, 3, Q, k=5, trials=2000, seed=4)
    b = empirical_report("ssm-simple", s, 3, Q, k=5, trials=2000, seed=4)
    assert a == b
