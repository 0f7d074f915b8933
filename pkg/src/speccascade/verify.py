"""Self-checks run by ``speccascade verify`` and the acceptance tests.

Each check draws its own seeded random instances, compares the package
against an exact oracle or an independent direct formula, and returns a
:class:`CheckResult`.  Instance counts and tolerances are fixed here so
that the CLI and the test suite exercise exactly the same thing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .deferral import (
    RuleKind,
    TargetSpec,
    TokenRuleKind,
    acceptance,
    lossy_target,
    target,
    tempered_target,
    tune_beta,
)
from .distributions import residual
from .engine import Rng, SiteCache, Strategy, StrategyKind, gen_spec_sample
from .harness import (
    GridPoint,
    MethodConfig,
    RunSection,
    compare_frontiers,
    default_alphas,
    draw_prompts,
    evaluate_point,
    exact_expected_loss,
)
from .models import build_partitioned_task, build_random_truth, derive_model
from .oracle import (
    brute_force_r,
    deferral_risk,
    exact_autoregressive_law,
    exact_block_law,
    exact_decode_law,
    optimal_r,
    regret_check,
    rejection_rate,
)

IDENTITY_TOL = 1e-12
ASSERT_TOL = 1e-9


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:>2} {self.name}: {self.detail} ({self.seconds:.2f} s)"


def _timed(number: int, name: str, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn()
    return CheckResult(number, name, bool(passed), detail, time.perf_counter() - t0)


def random_dist(rng: np.random.Generator, v: int, allow_zeros: bool = True) -> np.ndarray:
    """Dirichlet draw; sometimes sparse, sometimes with exact zeros."""
    d = rng.dirichlet(np.full(v, 0.3 if rng.random() < 0.5 else 1.0))
    if allow_zeros and v > 2 and rng.random() < 0.2:
        keep = rng.permutation(v)[: int(rng.integers(1, v))]
        mask = np.zeros(v, dtype=bool)
        mask[keep] = True
        d = np.where(mask, d, 0.0)
        d = d / d.sum()
    return d


def random_valid_spec(rng: np.random.Generator) -> TargetSpec:
    """A target whose output is a proper distribution."""
    which = int(rng.integers(5))
    if which == 0:
        return TargetSpec.verifier()
    if which == 1:
        return TargetSpec.bild_star(float(rng.uniform(0, 10)))
    if which == 2:
        kind = RuleKind(rng.choice([k.value for k in RuleKind]))
        hi = 10.0 if kind is RuleKind.BILD else (2.0 if kind.log_domain else 1.0)
        return TargetSpec.cascade(kind.value, float(rng.uniform(0, hi)))
    if which == 3:
        kind = TokenRuleKind(rng.choice([k.value for k in TokenRuleKind]))
        return TargetSpec.token_cascade(kind.value, float(rng.uniform(0, 1)))
    return TargetSpec.lossy(float(rng.uniform(0, 0.9)), None)


# -- criteria -----------------------------------------------------------------


def check_speculation_correctness(instances: int = 200, seed: int = 101) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            v = int(rng.integers(2, 5))
            order = int(rng.integers(0, 2))
            eos = v - 1 if rng.random() < 0.3 else None
            truth = build_random_truth(v, order, int(rng.integers(1 << 31)), eos=eos)
            q = derive_model(truth, float(rng.uniform(0.2, 1.0)), 0.0, int(rng.integers(1 << 31)))
            spec = random_valid_spec(rng)
            gamma = int(rng.integers(1, 4))
            horizon = int(rng.integers(2, 5))
            temperature = float(rng.choice([1.0, 0.5, 0.0]))
            prefix = [int(rng.integers(v - (eos is not None)))] if rng.random() < 0.5 else []
            a = exact_decode_law(q, truth, spec, prefix, gamma, horizon, temperature)
            b = exact_autoregressive_law(q, truth, spec, prefix, horizon, temperature)
            worst = max(worst, a.max_abs_diff(b), abs(a.total() - 1.0))
        return worst <= ASSERT_TOL, f"max |decode law - autoregressive law| = {worst:.3g} over {instances} instances"

    res = _timed(1, "speculation correctness", body)
    if res.seconds > 60:
        res.passed = False
        res.detail += "; exceeded 60 s"
    return res


def check_rejection_rate(instances: int = 1000, seed: int = 102) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            v = int(rng.integers(2, 9))
            rep = rejection_rate(random_dist(rng, v), random_dist(rng, v), int(rng.integers(2)))
            worst = max(worst, rep.gap)
        return worst <= IDENTITY_TOL, f"max |direct - r*TV| = {worst:.3g} over {instances} instances"

    res = _timed(2, "rejection rate identity", body)
    if res.seconds > 1:
        res.passed = False
        res.detail += "; exceeded 1 s"
    return res


def check_lossy_equivalence(instances: int = 1000, seed: int = 103) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        mismatched_none = 0
        for _ in range(instances):
            v = int(rng.integers(2, 9))
            q, p = random_dist(rng, v), random_dist(rng, v)
            alpha = float(rng.uniform(0, 1))
            beta = float(rng.uniform(1 - alpha, 3))
            pi = lossy_target(q, p, alpha, beta)
            # direct recipe, written out independently of the package
            with np.errstate(divide="ignore", invalid="ignore"):
                direct_acc = np.where(q > 0, np.minimum(1.0, p / ((1 - alpha) * q)), 1.0)
            gap = np.maximum(0.0, p / beta - q)
            direct_res = gap / gap.sum() if gap.sum() > 0 else None
            worst = max(worst, float(np.max(np.abs(acceptance(pi, q) - direct_acc))))
            res = residual(pi, q)
            if (res is None) != (direct_res is None):
                mismatched_none += 1
            elif res is not None:
                worst = max(worst, float(np.max(np.abs(res - direct_res))))
        ok = worst <= IDENTITY_TOL and mismatched_none == 0
        return ok, f"max entrywise gap {worst:.3g}, {mismatched_none} empty-residual mismatches over {instances}"

    res = _timed(3, "lossy target equivalence", body)
    if res.seconds > 1:
        res.passed = False
        res.detail += "; exceeded 1 s"
    return res


def check_optimal_deferral(instances: int = 1000, seed: int = 104) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        wrong = compared = 0
        for mode in ("sequential", "speculative"):
            for _ in range(instances):
                loss = "0-1" if rng.random() < 0.5 else "log"
                v = int(rng.integers(2, 9))
                truth = random_dist(rng, v)
                q = random_dist(rng, v, allow_zeros=loss == "0-1")
                p = random_dist(rng, v, allow_zeros=loss == "0-1")
                alpha = float(rng.uniform(0, 1))
                r0 = deferral_risk(truth, q, p, 0, loss, alpha, mode)
                r1 = deferral_risk(truth, q, p, 1, loss, alpha, mode)
                if abs(r0 - r1) > ASSERT_TOL:
                    compared += 1
                    wrong += optimal_r(truth, q, p, loss, alpha, mode) != brute_force_r(truth, q, p, loss, alpha, mode)
        return wrong == 0, f"{wrong} disagreements in {compared} decisive instances ({instances} per mode)"

    return _timed(4, "optimal deferral", body)


def check_regret(instances: int = 1000, seed: int = 105) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        slack = np.inf
        failures = 0
        for loss in ("0-1", "log"):
            for _ in range(instances):
                v = int(rng.integers(2, 9))
                truth = random_dist(rng, v)
                q, p = random_dist(rng, v, allow_zeros=False), random_dist(rng, v, allow_zeros=False)
                rep = regret_check(truth, q, p, float(rng.uniform(0, 1)), loss)
                failures += not rep.within_bound
                slack = min(slack, rep.bound - rep.regret)
        return failures == 0, f"{failures} violations, min(bound - regret) = {slack:.3g} ({instances} per loss)"

    return _timed(5, "regret bounds", body)


def check_greedy_equivalence(instances: int = 500, seed: int = 106) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        alphas = (0.0, 0.1, 0.25, 0.5, 0.9)
        differing = 0
        for _ in range(instances):
            v = int(rng.integers(2, 9))
            q, p = random_dist(rng, v), random_dist(rng, v)
            for a in alphas:
                out = []
                for kind in ("opt", "diff"):
                    qt, _, pi = tempered_target(TargetSpec.cascade(kind, a), q, p, 0.0)
                    out.append((acceptance(pi, qt), residual(pi, qt)))
                (ka, ra), (kb, rb) = out
                same = np.array_equal(ka, kb) and (
                    (ra is None and rb is None) or (ra is not None and rb is not None and np.array_equal(ra, rb))
                )
                differing += not same
        return differing == 0, f"{differing} of {instances * len(alphas)} (instance, alpha) pairs differ"

    return _timed(6, "greedy equivalence", body)


def check_token_normalization(instances: int = 1000, seed: int = 107) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for kind in TokenRuleKind:
            for _ in range(instances):
                v = int(rng.integers(2, 9))
                pi = target(TargetSpec.token_cascade(kind.value, float(rng.uniform(0, 1))),
                            random_dist(rng, v), random_dist(rng, v))
                worst = max(worst, abs(float(pi.sum()) - 1.0))
        return worst <= ASSERT_TOL, f"max |sum - 1| = {worst:.3g} ({instances} per rule)"

    return _timed(7, "token cascade normalization", body)


def check_monte_carlo(instances: int = 20, draws: int = 100_000, seed: int = 108) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        failures = 0
        worst_p = 1.0
        for i in range(instances):
            v = int(rng.integers(2, 7))
            truth = build_random_truth(v, 1, int(rng.integers(1 << 31)))
            q = derive_model(truth, float(rng.uniform(0.3, 1.0)), 0.0, int(rng.integers(1 << 31)))
            spec = random_valid_spec(rng)
            gamma = int(rng.integers(1, 4))
            prefix = [int(rng.integers(v))]
            expected = exact_block_law(q, truth, spec, prefix, gamma).marginal(0, v)
            sites = SiteCache(q, truth, 1.0, spec)
            draw_rng = Rng([seed, i])
            first = [gen_spec_sample(q, truth, spec, prefix, gamma, draw_rng, sites=sites)[0][0] for _ in range(draws)]
            counts = np.bincount(first, minlength=v).astype(float)
            # pool cells below 1e-3 so the chi-squared approximation holds
            big = expected >= 1e-3
            obs, exp = list(counts[big]), list(expected[big] * draws)
            if (~big).any() and expected[~big].sum() > 0:
                obs.append(counts[~big].sum())
                exp.append(expected[~big].sum() * draws)
            if counts[expected == 0].sum() > 0:
                failures += 1
                continue
            if len(obs) < 2:
                continue
            exp = np.asarray(exp) * (sum(obs) / sum(exp))
            pval = stats.chisquare(obs, exp).pvalue
            worst_p = min(worst_p, pval)
            failures += pval < 1e-3
        return failures <= 1, f"{failures} of {instances} fits rejected at 1e-3 (min p-value {worst_p:.3g})"

    return _timed(8, "Monte Carlo first-token law", body)


HEADROOM_TASK = dict(vocab_size=6, order=1, eos=5, frac_small_favored=0.5, noise_small=0.6, noise_large=0.6,
                     smoothing=0.0)
HEADROOM_RUN = RunSection(num_prompts=16, prompt_len=1, max_len=16, trials=2, seed=0)


def headroom_task(seed: int, calibrated: bool = True):
    t = HEADROOM_TASK
    return build_partitioned_task(t["vocab_size"], t["order"], t["frac_small_favored"], t["noise_small"],
                                  t["noise_large"], seed, smoothing=t["smoothing"], eos=t["eos"],
                                  calibrated=calibrated)


def headroom_case(seed: int, calibrated: bool = True) -> tuple:
    """(oracle <= both single models, OPT beats SpecDecode at some budget)."""
    task = headroom_task(seed, calibrated)
    run = HEADROOM_RUN
    prompts = draw_prompts(task, run)

    def loss(strategy):
        return exact_expected_loss(task, strategy, 1.0, prompts, run.max_len, ("0-1",))["0-1"]

    oracle = loss(Strategy("oracle_cascade", "diff", 0.0))
    headroom = oracle <= min(loss(Strategy("small")), loss(Strategy("large"))) + ASSERT_TOL

    sd = MethodConfig("spec_decode", StrategyKind.SPEC_DECODE, alphas=(None,), gammas=(5,), temperatures=(1.0,))
    opt = MethodConfig("spec_cascade_opt", StrategyKind.SPEC_CASCADE, "opt",
                       default_alphas(StrategyKind.SPEC_CASCADE, "opt", task.vocab_size), (5,), (1.0,))
    rows_sd = [evaluate_point(task, prompts, run, GridPoint(sd, None, 5, 1.0))]
    rows_opt = [evaluate_point(task, prompts, run, GridPoint(opt, a, 5, 1.0)) for a in opt.alphas]
    report = compare_frontiers(rows_sd, rows_opt)
    return headroom, any(r.winner == "b" for r in report.results)


def check_headroom(tasks: int = 50, seed: int = 0) -> CheckResult:
    def body():
        cases = [headroom_case(seed + i) for i in range(tasks)]
        oracle_ok = sum(c[0] for c in cases)
        opt_wins = sum(c[1] for c in cases)
        ok = oracle_ok == tasks and opt_wins >= 40 * tasks / 50
        return ok, (f"oracle cascade <= both single models on {oracle_ok}/{tasks}; "
                    f"OPT beats SpecDecode at a matched budget on {opt_wins}/{tasks}")

    return _timed(9, "cascade headroom trend", body)


def check_beta_tuning(instances: int = 200, seed: int = 110) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = -np.inf
        for _ in range(instances):
            v = int(rng.integers(2, 7))
            q, p = random_dist(rng, v), random_dist(rng, v)
            alpha = float(rng.uniform(0, 0.5))
            beta, _ = tune_beta(q, p, alpha)
            lo = max(1 - alpha, 1e-6)

            # the condition written out directly, independent of the package
            def resid(b):
                b = np.atleast_1d(b)[:, None]
                lhs = np.maximum(0.0, q - p / (1 - alpha)).sum()
                return np.abs(lhs - np.maximum(0.0, p / b - q).sum(axis=1))

            dense = resid(np.linspace(lo, 10.0, 10_000))
            worst = max(worst, float(resid(beta)[0] - dense.min()))
        return worst <= ASSERT_TOL, f"max(residual(beta) - dense scan minimum) = {worst:.3g} over {instances}"

    return _timed(10, "beta tuning", body)


CHECKS = (
    check_speculation_correctness,
    check_rejection_rate,
    check_lossy_equivalence,
    check_optimal_deferral,
    check_regret,
    check_greedy_equivalence,
    check_token_normalization,
    check_monte_carlo,
    check_headroom,
    check_beta_tuning,
)


def run_all(echo: Callable[[str], None] = print) -> list:
    results = []
    for check in CHECKS:
        res = check()
        echo(res.line())
        results.append(res)
    return results
