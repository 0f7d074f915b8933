"""Exact, brute-force counterparts of the engine and of the deferral lemmas.

Nothing here samples.  Block and trajectory laws are enumerated outright,
which is why vocabulary, block size and horizon are capped.  Acceptance
probabilities, residuals and the bonus-position law are recomputed here
entry by entry rather than borrowed from the engine's tables.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .deferral import DeferralRule, TargetSpec, delta, tempered_target
from .distributions import tv_distance
from .models import Context, TabularLM, extend_context, step_loss

MAX_VOCAB = 8
MAX_GAMMA = 3
MAX_HORIZON = 4
MODES = ("sequential", "speculative")


class EnumerationBudget(ValueError):
    pass


class ExactLaw(dict):
    """Map from token tuple to exact probability."""

    def total(self) -> float:
        return math.fsum(self.values())

    def marginal(self, position: int, vocab_size: int) -> np.ndarray:
        out = np.zeros(vocab_size)
        for seq, pr in self.items():
            if len(seq) > position:
                out[seq[position]] += pr
        return out

    def max_abs_diff(self, other: "ExactLaw") -> float:
        keys = set(self) | set(other)
        return max((abs(self.get(k, 0.0) - other.get(k, 0.0)) for k in keys), default=0.0)


def _check_budget(vocab_size: int, gamma: Optional[int] = None, horizon: Optional[int] = None) -> None:
    if vocab_size > MAX_VOCAB:
        raise EnumerationBudget(f"vocab size {vocab_size} > {MAX_VOCAB}")
    if gamma is not None and not 1 <= gamma <= MAX_GAMMA:
        raise EnumerationBudget(f"gamma {gamma} outside [1, {MAX_GAMMA}]")
    if horizon is not None and not 1 <= horizon <= MAX_HORIZON:
        raise EnumerationBudget(f"horizon {horizon} outside [1, {MAX_HORIZON}]")


@dataclass
class _Position:
    q: list
    pi: list
    kappa: list
    route: list  # residual, or norm(pi) when the residual is empty
    bonus: list


class _Tables:
    """Per-context quantities of the generic speculative step, by hand."""

    def __init__(self, small: TabularLM, large: TabularLM, spec: TargetSpec, temperature: float):
        self.small, self.large, self.spec, self.temperature = small, large, spec, temperature
        self.vocab_size = small.vocab_size
        self._memo: dict[Context, _Position] = {}

    def __call__(self, ctx: Context) -> _Position:
        if ctx not in self._memo:
            self._memo[ctx] = self._build(ctx)
        return self._memo[ctx]

    def _build(self, ctx: Context) -> _Position:
        qt, _, pi = tempered_target(self.spec, self.small.dist_at(ctx), self.large.dist_at(ctx), self.temperature)
        q = [float(x) for x in qt]
        pi = [float(x) for x in pi]
        kappa = [min(1.0, b / a) if a > 0 else 1.0 for a, b in zip(q, pi)]
        gap = [max(0.0, b - a) for a, b in zip(q, pi)]
        z = math.fsum(gap)
        route = [g / z for g in gap] if z > 0 else [b / math.fsum(pi) for b in pi]
        if self.spec.always_valid:
            bonus = pi
        else:
            # one draft-then-accept-or-replace step, marginalised over the draft
            reject = math.fsum(a * (1 - k) for a, k in zip(q, kappa))
            bonus = [a * k + reject * r for a, k, r in zip(q, kappa, route)]
        return _Position(q, pi, kappa, route, bonus)

    def step_law(self, ctx: Context, effective: bool) -> list:
        pos = self(ctx)
        return pos.bonus if effective else pos.pi


def _block_law_ctx(tables: _Tables, ctx: Context, gamma: int, eos: Optional[int]) -> ExactLaw:
    law: dict = defaultdict(float)
    V = tables.vocab_size

    def walk(c: Context, drafted: tuple, mass: float) -> None:
        if drafted and drafted[-1] == eos:
            law[drafted] += mass  # every draft accepted, block ends on eos
            return
        pos = tables(c)
        if len(drafted) == gamma:
            for v in range(V):
                if pos.bonus[v] > 0:
                    law[drafted + (v,)] += mass * pos.bonus[v]
            return
        for x in range(V):
            if pos.q[x] == 0:
                continue
            k = pos.kappa[x]
            rej = mass * pos.q[x] * (1 - k)
            if rej > 0:
                for v in range(V):
                    if pos.route[v] > 0:
                        law[drafted + (v,)] += rej * pos.route[v]
            acc = mass * pos.q[x] * k
            if acc > 0:
                walk(extend_context(c, x), drafted + (x,), acc)

    walk(ctx, (), 1.0)
    return ExactLaw(law)


def exact_block_law(
    q: TabularLM,
    p: TabularLM,
    spec: TargetSpec,
    prefix: Sequence[int],
    gamma: int,
    temperature: float = 1.0,
) -> ExactLaw:
    """Exact law of the block one speculative round emits after `prefix`."""
    _check_budget(q.vocab_size, gamma=gamma)
    tables = _Tables(q, p, spec, temperature)
    return _block_law_ctx(tables, q.context(prefix), gamma, q.eos)


def exact_decode_law(
    q: TabularLM,
    p: TabularLM,
    spec: TargetSpec,
    prefix: Sequence[int],
    gamma: int,
    horizon: int,
    temperature: float = 1.0,
) -> ExactLaw:
    """Law of the first `horizon` tokens from repeated rounds, as the engine runs them.

    Each round drafts ``min(gamma, max(1, remaining - 1))`` tokens and its
    block is cut to what is still needed; decoding stops at eos.
    """
    _check_budget(q.vocab_size, gamma=gamma, horizon=horizon)
    tables = _Tables(q, p, spec, temperature)
    eos = q.eos
    memo: dict = {}

    def law_from(ctx: Context, remaining: int) -> dict:
        key = (ctx, remaining)
        if key in memo:
            return memo[key]
        g = min(gamma, max(1, remaining - 1))
        out: dict = defaultdict(float)
        for block, pr in _block_law_ctx(tables, ctx, g, eos).items():
            block = block[:remaining]
            if eos in block:
                block = block[: block.index(eos) + 1]
            left = remaining - len(block)
            if left == 0 or block[-1] == eos:
                out[block] += pr
                continue
            c = ctx
            for t in block:
                c = extend_context(c, t)
            for tail, pt in law_from(c, left).items():
                out[block + tail] += pr * pt
        memo[key] = out
        return out

    return ExactLaw(law_from(q.context(prefix), horizon))


def exact_autoregressive_law(
    q: TabularLM,
    p: TabularLM,
    spec: TargetSpec,
    prefix: Sequence[int],
    horizon: int,
    temperature: float = 1.0,
    effective: bool = False,
) -> ExactLaw:
    """Law of `horizon` tokens drawn one at a time from the target pi.

    With ``effective=True`` each position uses the accept-or-replace law
    instead, which only differs from pi when pi is not normalised.
    """
    _check_budget(q.vocab_size, horizon=horizon)
    tables = _Tables(q, p, spec, temperature)
    eos = q.eos
    law: dict = defaultdict(float)

    def walk(c: Context, seq: tuple, mass: float) -> None:
        if len(seq) == horizon or (seq and seq[-1] == eos):
            law[seq] += mass
            return
        for v, pv in enumerate(tables.step_law(c, effective)):
            if pv > 0:
                walk(extend_context(c, v), seq + (v,), mass * pv)

    walk(q.context(prefix), (), 1.0)
    return ExactLaw(law)


# -- lemma checks -------------------------------------------------------------


def distributions_at(truth: TabularLM, q: TabularLM, p: TabularLM, prefix: Sequence[int]):
    """``(Pr, q, p)`` next-token distributions at `prefix`."""
    return truth.next_dist(prefix), q.next_dist(prefix), p.next_dist(prefix)


@dataclass(frozen=True)
class RejectionReport:
    direct: float  # sum_v q(v) (1 - min(1, pi(v)/q(v)))
    closed_form: float  # r * D_TV(p, q)

    @property
    def gap(self) -> float:
        return abs(self.direct - self.closed_form)


def rejection_rate(q, p, r: int) -> RejectionReport:
    """Draft rejection probability under the cascade target ``(1-r) q + r p``."""
    if r not in (0, 1):
        raise ValueError("r must be 0 or 1")
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    pi = (1 - r) * q + r * p
    direct = 0.0
    for qv, pv in zip(q, pi):
        if qv > 0:
            direct += qv * (1.0 - min(1.0, pv / qv))
    return RejectionReport(direct, r * tv_distance(p, q))


def deferral_cost(q, p, alpha: float, mode: str) -> float:
    if mode == "sequential":
        return alpha
    if mode == "speculative":
        return alpha * tv_distance(p, q)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def deferral_risk(truth, q, p, r: int, loss: str, alpha: float, mode: str) -> float:
    """Expected loss at one prefix of deferring (r=1) or not (r=0), plus the deferral cost."""
    if r == 0:
        return step_loss(q, truth, loss)
    if r == 1:
        return step_loss(p, truth, loss) + deferral_cost(q, p, alpha, mode)
    raise ValueError("r must be 0 or 1")


def optimal_r(truth, q, p, loss: str, alpha: float, mode: str) -> int:
    """Closed-form minimiser: defer iff E loss(q) > E loss(p) + cost."""
    return int(step_loss(q, truth, loss) > step_loss(p, truth, loss) + deferral_cost(q, p, alpha, mode))


def brute_force_r(truth, q, p, loss: str, alpha: float, mode: str) -> int:
    r0 = deferral_risk(truth, q, p, 0, loss, alpha, mode)
    r1 = deferral_risk(truth, q, p, 1, loss, alpha, mode)
    return int(r1 < r0)


@dataclass(frozen=True)
class RiskReport:
    risk: tuple  # (risk at r=0, risk at r=1)
    r_star: int  # closed form
    r_brute: int  # argmin of the two risks
    r_plugin: int  # the OPT / OPTLog plug-in decision
    regret: float  # risk of the plug-in minus the minimum risk
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.regret <= self.bound + 1e-9


def regret_check(truth, q, p, alpha: float, loss: str) -> RiskReport:
    """Speculative-mode regret of the plug-in OPT rule against its bound.

    The log-loss bound needs q and p strictly positive.
    """
    truth = np.asarray(truth, dtype=float)
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    risks = tuple(deferral_risk(truth, q, p, r, loss, alpha, "speculative") for r in (0, 1))
    if loss == "0-1":
        r_hat = delta(DeferralRule("opt", alpha), q, p)
        bound = float(np.max(np.abs(truth - q)) + np.max(np.abs(truth - p)))
    elif loss == "log":
        if np.any(q <= 0) or np.any(p <= 0):
            raise ValueError("log-loss regret bound needs strictly positive q and p")
        r_hat = delta(DeferralRule("opt_log", alpha), q, p)
        b_q = float(np.max(np.abs(np.log(q))))
        b_p = float(np.max(np.abs(np.log(p))))
        bound = b_q * float(np.abs(truth - q).sum()) + b_p * float(np.abs(truth - p).sum())
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return RiskReport(
        risk=risks,
        r_star=optimal_r(truth, q, p, loss, alpha, "speculative"),
        r_brute=int(risks[1] < risks[0]),
        r_plugin=r_hat,
        regret=risks[r_hat] - min(risks),
        bound=bound,
    )


@dataclass(frozen=True)
class EquivalenceReport:
    alpha: float
    r_constrained: int
    r_unconstrained: int

    @property
    def ok(self) -> bool:
        return self.r_constrained == self.r_unconstrained


def unconstrained_equivalence_check(c0: float, c1: float, c2: float, budget: float,
                                    margin: float = 1e-3) -> EquivalenceReport:
    """Budget-constrained binary choice versus its penalised counterpart.

    The penalty is 0 when deferring fits the budget, and otherwise exceeds
    ``(c0 - c1) / c2`` by `margin` (floored at `margin`, so it stays positive).
    """
    if min(c0, c1, c2, budget) <= 0:
        raise ValueError("coefficients and budget must be positive")
    feasible = [0] + ([1] if c2 <= budget else [])
    costs = {0: c0, 1: c1}
    # ties go to r = 0 since 0 comes first
    r_con = min(feasible, key=lambda r: costs[r])
    alpha = 0.0 if c2 <= budget else max(0.0, (c0 - c1) / c2) + margin
    r_unc = int(c1 + alpha * c2 < c0)
    return EquivalenceReport(alpha, r_con, r_unc)
