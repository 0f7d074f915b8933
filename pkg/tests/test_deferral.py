import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speccascade.deferral import (
    DeferralRule,
    RuleKind,
    TargetKind,
    TargetSpec,
    TokenRule,
    acceptance,
    beta_condition,
    decide,
    delta,
    discrepancy,
    lossy_cases,
    lossy_recipe,
    lossy_target,
    target,
    token_r,
    tune_beta,
)
from speccascade.distributions import apply_temperature, residual, validate

PROB_RULES = [RuleKind.CHOW, RuleKind.DIFF, RuleKind.OPT]
LOG_RULES = [RuleKind.CHOW_LOG, RuleKind.DIFF_LOG, RuleKind.OPT_LOG]


def pairs(seed, n, size=None):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        v = size or int(rng.integers(2, 7))
        # sharpen half the draws so thresholds near 1 get exercised
        conc = 1.0 if rng.random() < 0.5 else 0.2
        yield rng.dirichlet(np.full(v, conc)), rng.dirichlet(np.full(v, conc))


class TestDelta:
    def test_opt_examples(self):
        q, p = (0.6, 0.4), (0.9, 0.1)
        assert delta(DeferralRule("opt", 1.0), q, p) == 0
        assert delta(DeferralRule("opt", 0.5), q, p) == 1

    def test_chow_example(self):
        assert delta(DeferralRule("chow", 0.2), (0.9, 0.1), (0.5, 0.5)) == 0
        assert delta(DeferralRule("chow", 0.0), (0.9, 0.1), (0.5, 0.5)) == 1

    def test_diff_equal_never_defers(self):
        for q, _ in pairs(0, 200):
            for a in (0.0, 0.3, 1.0):
                assert delta(DeferralRule("diff", a), q, q) == 0
                assert delta(DeferralRule("diff_log", a), q, q) == 0

    def test_opt_identical_never_defers(self):
        for q, _ in pairs(1, 200):
            for a in (0.0, 0.5, 1.0):
                assert delta(DeferralRule("opt", a), q, q) == 0
                assert delta(DeferralRule("opt_log", a), q, q) == 0

    def test_log_rules(self):
        q, p = (0.5, 0.5), (0.9, 0.1)
        assert delta(DeferralRule("chow_log", 0.5), q, p) == 1
        assert delta(DeferralRule("chow_log", 0.7), q, p) == 0
        # H(q) - H(p) = log 2 - 0.325 ~ 0.368
        assert delta(DeferralRule("diff_log", 0.3), q, p) == 1
        assert delta(DeferralRule("diff_log", 0.4), q, p) == 0

    def test_boundary_is_keep(self):
        # 0.5 < 1 - 0.5 is false
        assert delta(DeferralRule("chow", 0.5), (0.5, 0.5), (0.5, 0.5)) == 0

    def test_alpha_ranges(self):
        with pytest.raises(ValueError):
            DeferralRule("opt", 1.5)
        with pytest.raises(ValueError):
            DeferralRule("bild", 11.0)
        with pytest.raises(ValueError):
            TokenRule("v3", -0.1)
        DeferralRule("bild", 10.0)

    def test_monotone_in_alpha(self):
        grids = {k: np.linspace(0, 1, 11) for k in PROB_RULES}
        grids.update({k: np.linspace(0, 2, 11) for k in LOG_RULES})
        grids[RuleKind.BILD] = np.linspace(0, 10, 11)
        for q, p in pairs(2, 1000):
            for kind, grid in grids.items():
                ds = [delta(DeferralRule(kind, a), q, p) for a in grid]
                assert all(a >= b for a, b in zip(ds, ds[1:])), (kind, q, p, ds)

    def test_greedy_opt_equals_diff(self):
        for q, p in pairs(3, 500):
            qt, pt = apply_temperature(q, 0), apply_temperature(p, 0)
            for a in np.linspace(0, 1, 7):
                assert delta(DeferralRule("opt", a), qt, pt) == delta(DeferralRule("diff", a), qt, pt)


class TestBiLD:
    def test_greedy_discrepancy(self):
        assert discrepancy((0.7, 0.3), (0.2, 0.8), greedy=True) == pytest.approx(-math.log(0.2))

    def test_zero_mass_is_infinite(self):
        assert discrepancy((0.7, 0.3), (0.0, 1.0), greedy=True) == math.inf
        assert delta(DeferralRule("bild", 10.0), (0.7, 0.3), (0.0, 1.0), greedy=True) == 1

    def test_sampling_discrepancy_is_cross_entropy(self):
        q, p = (0.5, 0.5), (0.25, 0.75)
        expected = -(0.5 * math.log(0.25) + 0.5 * math.log(0.75))
        assert discrepancy(q, p) == pytest.approx(expected, abs=1e-15)

    def test_decide_greedy_uses_raw(self):
        rule = DeferralRule("bild", 1.0)
        # -log 0.45 ~ 0.80 keeps; on one-hots it would be inf
        assert decide(rule, (0.55, 0.45), (0.45, 0.55), 0.0) == 0

    def test_decide_tempered(self):
        rule = DeferralRule("chow", 0.1)
        # raw max 0.8 defers, tempered at T=0.5 it is 0.94 and keeps
        assert decide(rule, (0.8, 0.2), (0.5, 0.5), 1.0) == 1
        assert decide(rule, (0.8, 0.2), (0.5, 0.5), 0.5) == 0


class TestTokenRule:
    def test_v3_example(self):
        np.testing.assert_array_equal(token_r(TokenRule("v3", 0.5), (0.3, 0.3, 0.4), (0.5, 0.3, 0.2)), (0, 0, 1))

    def test_v3_alpha_one(self):
        for q, p in pairs(4, 100):
            assert not token_r(TokenRule("v3", 1.0), q, p).any()

    def test_v1_example(self):
        rule = TokenRule("v1", 0.0)
        assert token_r(rule, (0.2, 0.8), (0.6, 0.4), 0) == 1
        assert token_r(rule, (0.2, 0.8), (0.6, 0.4), 1) == 0

    def test_v2(self):
        np.testing.assert_array_equal(token_r(TokenRule("v2", 0.2), (0.5, 0.5), (0.55, 0.45)), (0, 0))
        np.testing.assert_array_equal(token_r(TokenRule("v2", 0.05), (0.5, 0.5), (0.55, 0.45)), (0, 1))


class TestTargets:
    def test_lossy_example(self):
        pi = lossy_target((0.5, 0.5), (0.3, 0.7), 0.4, 1.0)
        assert pi[0] == pytest.approx(0.5, abs=1e-15)

    def test_lossy_alpha_zero_is_p(self):
        for q, p in pairs(5, 200):
            np.testing.assert_allclose(lossy_target(q, p, 0.0, 1.0), p, atol=1e-15)

    def test_lossy_bad_beta(self):
        with pytest.raises(ValueError):
            TargetSpec.lossy(0.3, 0.5)
        with pytest.raises(ValueError):
            TargetSpec.lossy(1.0, 1.0)

    def test_token_cascade_example(self):
        spec = TargetSpec.token_cascade("v3", 0.5)
        pi = target(spec, (0.2, 0.2, 0.6), (0.5, 0.3, 0.2))
        np.testing.assert_allclose(pi, (0.5, 0.38, 0.12), atol=1e-15)

    def test_token_cascade_sums_to_one(self):
        rng = np.random.default_rng(6)
        for kind in ("v1", "v2", "v3"):
            for q, p in pairs(7, 1000):
                pi = target(TargetSpec.token_cascade(kind, rng.random()), q, p)
                assert abs(pi.sum() - 1) <= 1e-9

    def test_cascade_is_q_or_p(self):
        for q, p in pairs(8, 300):
            for kind in RuleKind:
                pi = target(TargetSpec.cascade(kind, 0.3), q, p)
                assert np.array_equal(pi, q) or np.array_equal(pi, p)

    def test_bild_star(self):
        q, p = (0.7, 0.3), (0.2, 0.8)
        np.testing.assert_array_equal(target(TargetSpec.bild_star(2.0), q, p, greedy=True), q)
        np.testing.assert_array_equal(target(TargetSpec.bild_star(1.0), q, p, greedy=True), p)

    def test_verifier(self):
        np.testing.assert_array_equal(target(TargetSpec.verifier(), (0.1, 0.9), (0.4, 0.6)), (0.4, 0.6))

    def test_spec_needs_rule(self):
        with pytest.raises(ValueError):
            TargetSpec(TargetKind.CASCADE)

    @given(st.integers(0, 2**32 - 1), st.sampled_from(list(TargetKind)))
    @settings(max_examples=100)
    def test_valid_targets(self, seed, kind):
        rng = np.random.default_rng(seed)
        v = int(rng.integers(2, 6))
        q, p = rng.dirichlet(np.ones(v)), rng.dirichlet(np.ones(v))
        spec = {
            TargetKind.VERIFIER: TargetSpec.verifier(),
            TargetKind.LOSSY: TargetSpec.lossy(0.3, None),
            TargetKind.BILD_STAR: TargetSpec.bild_star(1.0),
            TargetKind.CASCADE: TargetSpec.cascade("opt", 0.5),
            TargetKind.TOKEN_CASCADE: TargetSpec.token_cascade("v2", 0.2),
        }[kind]
        pi = target(spec, q, p)
        tol = 1e-9 if kind is not TargetKind.LOSSY else tune_beta(q, p, 0.3)[1] + 1e-12
        assert np.all(pi >= 0) and abs(pi.sum() - 1) <= tol


class TestLossyEquivalence:
    def test_recipe_matches_generic(self):
        rng = np.random.default_rng(9)
        for q, p in pairs(10, 1000):
            alpha = rng.uniform(0, 1)
            beta = rng.uniform(1 - alpha, 3)
            pi = lossy_target(q, p, alpha, beta)
            acc, res = lossy_recipe(q, p, alpha, beta)
            np.testing.assert_allclose(acceptance(pi, q), acc, atol=1e-12, rtol=0)
            gen = residual(pi, q)
            assert (gen is None) == (res is None)
            if res is not None:
                np.testing.assert_allclose(gen, res, atol=1e-12, rtol=0)

    def test_cases_partition(self):
        rng = np.random.default_rng(11)
        for q, p in pairs(12, 1000):
            alpha = rng.uniform(0, 1)
            beta = rng.uniform(1 - alpha, 3)
            labels = lossy_cases(q, p, alpha, beta)
            assert set(labels.tolist()) <= {1, 2, 3}


def dense_scan(q, p, alpha, n):
    lo = max(1 - alpha, 1e-6)
    grid = np.linspace(lo, 10.0, n)
    return np.abs(beta_condition(q, p, alpha, grid))


class TestTuneBeta:
    def test_equal_dists(self):
        q = np.array([0.2, 0.3, 0.5])
        beta, res = tune_beta(q, q, 0.0)
        assert beta == pytest.approx(1.0) and res == 0.0

    def test_zero_lhs_gives_zero_rhs(self):
        q, p = np.array([0.5, 0.5]), np.array([0.6, 0.4])
        alpha = 0.5  # q <= p / 0.5 everywhere
        beta, res = tune_beta(q, p, alpha)
        assert res == 0.0 and np.all(p / beta <= q + 1e-15)
        # first grid point clearing p/beta <= q, i.e. beta >= 1.2
        assert 1.2 <= beta < 1.2 + 9.5 / 999

    def test_random_against_dense_scan(self):
        # independent 1e5-point scan of the balance condition
        rng = np.random.default_rng(13)
        for _ in range(30):
            v = int(rng.integers(2, 7))
            q, p = rng.dirichlet(np.ones(v)), rng.dirichlet(np.ones(v))
            beta, res = tune_beta(q, p, 0.3)
            assert beta >= 0.7
            assert res <= dense_scan(q, p, 0.3, 100_000).min() + 1e-9

    def test_balanced_beta_normalizes_target(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            q, p = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
            beta, res = tune_beta(q, p, 0.2)
            if res < 1e-12:
                pi = lossy_target(q, p, 0.2, beta)
                assert validate(pi) is None
