import numpy as np
import pytest

from speccascade.deferral import TargetSpec, target
from speccascade.models import TabularLM, build_partitioned_task, build_random_truth, derive_model
from speccascade.oracle import (
    EnumerationBudget,
    brute_force_r,
    deferral_risk,
    exact_autoregressive_law,
    exact_block_law,
    exact_decode_law,
    optimal_r,
    regret_check,
    rejection_rate,
    unconstrained_equivalence_check,
)


def order0(*probs):
    return TabularLM(len(probs), 0, {(): probs})


def dirichlet_triples(seed, n, size=None, positive=False):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        v = size or int(rng.integers(2, 7))
        conc = 1.0 if positive or rng.random() < 0.5 else 0.3
        yield tuple(rng.dirichlet(np.full(v, conc)) for _ in range(3))


class TestBlockLaw:
    def test_verifier_equal_models_is_product(self):
        q = order0(0.3, 0.7)
        law = exact_block_law(q, q, TargetSpec.verifier(), [], 1)
        assert set(law) == {(a, b) for a in (0, 1) for b in (0, 1)}
        for (a, b), pr in law.items():
            assert pr == pytest.approx((0.3, 0.7)[a] * (0.3, 0.7)[b], abs=1e-15)

    def test_hand_example(self):
        # accept token 0 w.p. 5/9 from mass 0.9; rejections route to token 1
        law = exact_block_law(order0(0.9, 0.1), order0(0.5, 0.5), TargetSpec.verifier(), [], 1)
        assert law[(1,)] == pytest.approx(0.4, abs=1e-15)
        np.testing.assert_allclose(law.marginal(0, 2), (0.5, 0.5), atol=1e-15)
        assert law.total() == pytest.approx(1.0, abs=1e-12)

    def test_first_token_marginal_is_target(self):
        rng = np.random.default_rng(0)
        specs = [TargetSpec.verifier(), TargetSpec.cascade("diff", 0.1), TargetSpec.token_cascade("v1", 0.2),
                 TargetSpec.bild_star(0.8)]
        for _ in range(50):
            truth = build_random_truth(int(rng.integers(2, 7)), 1, seed=int(rng.integers(1 << 30)))
            q = derive_model(truth, 0.6, 0.0, seed=1)
            spec = specs[int(rng.integers(len(specs)))]
            gamma = int(rng.integers(1, 4))
            law = exact_block_law(q, truth, spec, [1], gamma)
            pi = target(spec, q.next_dist([1]), truth.next_dist([1]))
            np.testing.assert_allclose(law.marginal(0, truth.vocab_size), pi, atol=1e-9)

    def test_zero_residual_routes_to_pi(self):
        # lossy alpha=0.5 beta=2 gives pi = (0.4, 0.4) <= q, an empty residual
        q, p = order0(0.6, 0.4), order0(0.2, 0.8)
        law = exact_block_law(q, p, TargetSpec.lossy(0.5, 2.0), [], 2)
        # rejection at position 0 has probability 0.6 * (1 - 0.4/0.6) = 0.2, split evenly
        assert law[(0,)] == pytest.approx(0.1, abs=1e-15)
        assert law[(1,)] == pytest.approx(0.1, abs=1e-15)

    def test_budget(self):
        big = build_random_truth(9, 0, seed=0)
        with pytest.raises(EnumerationBudget):
            exact_block_law(big, big, TargetSpec.verifier(), [], 1)
        small = order0(0.5, 0.5)
        with pytest.raises(EnumerationBudget):
            exact_block_law(small, small, TargetSpec.verifier(), [], 4)
        with pytest.raises(EnumerationBudget):
            exact_autoregressive_law(small, small, TargetSpec.verifier(), [], 5)


class TestAutoregressiveLaw:
    def test_single_step_is_target(self):
        q, p = order0(0.6, 0.4), order0(0.2, 0.8)
        law = exact_autoregressive_law(q, p, TargetSpec.verifier(), [], 1)
        assert law == {(0,): 0.2, (1,): 0.8}

    def test_chow_two_step_product(self):
        # max q = 0.6 < 1 - 0.2, so the cascade defers to p at every step
        q, p = order0(0.6, 0.4), order0(0.2, 0.8)
        law = exact_autoregressive_law(q, p, TargetSpec.cascade("chow", 0.2), [], 2)
        expected = {(0, 0): 0.04, (0, 1): 0.16, (1, 0): 0.16, (1, 1): 0.64}
        for k, v in expected.items():
            assert law[k] == pytest.approx(v, abs=1e-15)
        kept = exact_autoregressive_law(q, p, TargetSpec.cascade("chow", 0.5), [], 2)
        assert kept[(0, 0)] == pytest.approx(0.36, abs=1e-15)

    def test_eos_stops_trajectories(self):
        truth = build_random_truth(3, 1, seed=4, eos=2)
        law = exact_autoregressive_law(truth, truth, TargetSpec.verifier(), [], 3)
        assert all(2 not in seq[:-1] for seq in law)
        assert law.total() == pytest.approx(1.0, abs=1e-12)


class TestDecodeLaw:
    @pytest.mark.parametrize("temperature", [1.0, 0.5, 0.0])
    def test_matches_autoregressive(self, temperature):
        task = build_partitioned_task(4, 1, 0.5, 0.5, 0.5, seed=2, eos=3)
        for spec in (TargetSpec.verifier(), TargetSpec.cascade("opt", 0.2), TargetSpec.token_cascade("v3", 0.3),
                     TargetSpec.bild_star(1.0)):
            a = exact_decode_law(task.small, task.large, spec, [0], 3, 4, temperature)
            b = exact_autoregressive_law(task.small, task.large, spec, [0], 4, temperature)
            assert a.max_abs_diff(b) <= 1e-12
            assert a.total() == pytest.approx(1.0, abs=1e-9)

    def test_heuristic_lossy_follows_effective_law(self):
        task = build_partitioned_task(3, 1, 0.5, 0.5, 0.5, seed=6)
        spec = TargetSpec.lossy(0.4, 1.0)
        a = exact_decode_law(task.small, task.large, spec, [], 2, 3)
        b = exact_autoregressive_law(task.small, task.large, spec, [], 3, effective=True)
        assert a.max_abs_diff(b) <= 1e-12


class TestRejectionRate:
    def test_examples(self):
        assert rejection_rate((0.4, 0.6), (0.7, 0.3), 0).direct == 0
        rep = rejection_rate((0.4, 0.6), (0.7, 0.3), 1)
        assert rep.direct == pytest.approx(0.3, abs=1e-15) and rep.gap <= 1e-12
        assert rejection_rate((0.4, 0.6), (0.4, 0.6), 1).direct == 0

    def test_lemma(self):
        rng = np.random.default_rng(1)
        for _, q, p in dirichlet_triples(2, 500):
            assert rejection_rate(q, p, int(rng.integers(2))).gap <= 1e-12


class TestRisk:
    TRUTH, Q, P = (0.7, 0.3), (0.6, 0.4), (0.2, 0.8)

    def test_sequential_example(self):
        assert deferral_risk(self.TRUTH, self.Q, self.P, 0, "0-1", 0.1, "sequential") == pytest.approx(0.3)
        assert deferral_risk(self.TRUTH, self.Q, self.P, 1, "0-1", 0.1, "sequential") == pytest.approx(0.8)
        assert optimal_r(self.TRUTH, self.Q, self.P, "0-1", 0.1, "sequential") == 0

    def test_speculative_adds_tv(self):
        base = deferral_risk(self.TRUTH, self.Q, self.P, 1, "0-1", 0.0, "speculative")
        full = deferral_risk(self.TRUTH, self.Q, self.P, 1, "0-1", 1.0, "speculative")
        assert full - base == pytest.approx(0.4, abs=1e-15)

    def test_equal_models(self):
        for loss in ("0-1", "log"):
            r0 = deferral_risk(self.TRUTH, self.Q, self.Q, 0, loss, 0.0, "sequential")
            r1 = deferral_risk(self.TRUTH, self.Q, self.Q, 1, loss, 0.0, "sequential")
            assert r0 == r1
            assert optimal_r(self.TRUTH, self.Q, self.Q, loss, 0.3, "speculative") == 0

    def test_speculative_example(self):
        # E loss(q) - E loss(p) = 0.75 - 0.25 = 0.5 > 1 * D_TV = 0.3
        truth, q, p = (0.75, 0.25), (0.45, 0.55), (0.75, 0.25)
        assert optimal_r(truth, q, p, "0-1", 1.0, "speculative") == 1

    @pytest.mark.parametrize("mode", ["sequential", "speculative"])
    @pytest.mark.parametrize("loss", ["0-1", "log"])
    def test_closed_form_is_argmin(self, mode, loss):
        rng = np.random.default_rng(3)
        for truth, q, p in dirichlet_triples(4, 300, positive=loss == "log"):
            alpha = rng.uniform(0, 1)
            r0 = deferral_risk(truth, q, p, 0, loss, alpha, mode)
            r1 = deferral_risk(truth, q, p, 1, loss, alpha, mode)
            if abs(r0 - r1) > 1e-9:
                assert optimal_r(truth, q, p, loss, alpha, mode) == brute_force_r(truth, q, p, loss, alpha, mode)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            deferral_risk(self.TRUTH, self.Q, self.P, 1, "0-1", 0.1, "parallel")


class TestRegret:
    def test_perfect_models(self):
        rep = regret_check((0.7, 0.3), (0.7, 0.3), (0.7, 0.3), 0.2, "0-1")
        assert rep.regret == 0 and rep.bound == 0 and rep.within_bound

    def test_hand_example(self):
        # plug-in defers (0.7 < 0.8), costing 0.7 against 0.3 for keeping q
        rep = regret_check((0.7, 0.3), (0.7, 0.3), (0.2, 0.8), 0.0, "0-1")
        assert rep.bound == pytest.approx(0.5, abs=1e-15)
        assert rep.regret == pytest.approx(0.4, abs=1e-15)

    @pytest.mark.parametrize("loss", ["0-1", "log"])
    def test_bound_holds(self, loss):
        rng = np.random.default_rng(5)
        for truth, q, p in dirichlet_triples(6, 300, positive=True):
            assert regret_check(truth, q, p, rng.uniform(0, 1), loss).within_bound

    def test_log_needs_positive(self):
        with pytest.raises(ValueError):
            regret_check((0.5, 0.5), (1.0, 0.0), (0.5, 0.5), 0.1, "log")


class TestEquivalence:
    def test_within_budget(self):
        rep = unconstrained_equivalence_check(0.5, 0.3, 0.2, 0.4)
        assert rep.alpha == 0 and rep.r_constrained == rep.r_unconstrained == 1

    def test_over_budget(self):
        rep = unconstrained_equivalence_check(0.5, 0.3, 0.6, 0.4)
        assert rep.alpha > (0.5 - 0.3) / 0.6
        assert rep.r_constrained == rep.r_unconstrained == 0

    def test_tie(self):
        rep = unconstrained_equivalence_check(0.4, 0.4, 0.2, 0.5)
        assert rep.r_constrained == rep.r_unconstrained == 0

    def test_random(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            c0, c1, c2, b = rng.uniform(0.01, 1, 4)
            assert unconstrained_equivalence_check(c0, c1, c2, b).ok
