"""Deferral decisions, token-specific rules and target-distribution recipes.

Everything here is a pure function of one position's drafter distribution
``q`` and verifier distribution ``p``.  Comparisons are strict, so a tie at
the threshold means "keep the drafter".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .distributions import (
    apply_temperature,
    cross_entropy,
    entropy,
    max_prob,
    mode,
    tv_distance,
)

BILD_ALPHA_MAX = 10.0
BETA_MAX = 10.0
BETA_GRID = 1000


class RuleKind(str, Enum):
    CHOW = "chow"
    CHOW_LOG = "chow_log"
    DIFF = "diff"
    DIFF_LOG = "diff_log"
    OPT = "opt"
    OPT_LOG = "opt_log"
    BILD = "bild"

    @property
    def uses_p(self) -> bool:
        return self not in (RuleKind.CHOW, RuleKind.CHOW_LOG)

    @property
    def log_domain(self) -> bool:
        return self in (RuleKind.CHOW_LOG, RuleKind.DIFF_LOG, RuleKind.OPT_LOG, RuleKind.BILD)


class TokenRuleKind(str, Enum):
    V1 = "v1"
    V2 = "v2"
    V3 = "v3"


class TargetKind(str, Enum):
    VERIFIER = "verifier"
    LOSSY = "lossy"
    BILD_STAR = "bild_star"
    CASCADE = "cascade"
    TOKEN_CASCADE = "token_cascade"


def _check_alpha(alpha: float, lo: float, hi: float, what: str) -> None:
    if not (lo <= alpha <= hi):
        raise ValueError(f"{what} alpha must be in [{lo}, {hi}], got {alpha}")


@dataclass(frozen=True)
class DeferralRule:
    kind: RuleKind
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if self.kind is RuleKind.BILD:
            _check_alpha(self.alpha, 0.0, BILD_ALPHA_MAX, "BiLD")
        elif self.kind.log_domain:
            # entropies are unbounded in principle; only the sign is constrained
            _check_alpha(self.alpha, 0.0, math.inf, self.kind.value)
        else:
            _check_alpha(self.alpha, 0.0, 1.0, self.kind.value)


@dataclass(frozen=True)
class TokenRule:
    kind: TokenRuleKind
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "kind", TokenRuleKind(self.kind))
        _check_alpha(self.alpha, 0.0, 1.0, self.kind.value)

    @property
    def uses_p(self) -> bool:
        # every token rule thresholds against max p
        return True


@dataclass(frozen=True)
class TargetSpec:
    """Which target distribution T(q, p) the speculative loop should sample.

    ``rule`` is a :class:`DeferralRule` for ``cascade``, a :class:`TokenRule`
    for ``token_cascade``.  ``alpha`` parameterises ``lossy`` and
    ``bild_star``; ``beta=None`` on ``lossy`` means tune it per position.
    """

    kind: TargetKind
    rule: object = None
    alpha: Optional[float] = None
    beta: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TargetKind(self.kind))
        k = self.kind
        if k is TargetKind.CASCADE and not isinstance(self.rule, DeferralRule):
            raise ValueError("cascade target needs a DeferralRule")
        if k is TargetKind.TOKEN_CASCADE and not isinstance(self.rule, TokenRule):
            raise ValueError("token_cascade target needs a TokenRule")
        if k is TargetKind.LOSSY:
            if self.alpha is None or not 0 <= self.alpha < 1:
                raise ValueError(f"lossy alpha must be in [0, 1), got {self.alpha}")
            if self.beta is not None and self.beta < 1 - self.alpha:
                raise ValueError(f"lossy beta {self.beta} < 1 - alpha = {1 - self.alpha}")
        if k is TargetKind.BILD_STAR:
            if self.alpha is None:
                raise ValueError("bild_star target needs alpha")
            _check_alpha(self.alpha, 0.0, BILD_ALPHA_MAX, "BiLD*")

    @classmethod
    def verifier(cls) -> "TargetSpec":
        return cls(TargetKind.VERIFIER)

    @classmethod
    def lossy(cls, alpha: float, beta: Optional[float] = 1.0) -> "TargetSpec":
        return cls(TargetKind.LOSSY, alpha=alpha, beta=beta)

    @classmethod
    def bild_star(cls, alpha: float) -> "TargetSpec":
        return cls(TargetKind.BILD_STAR, alpha=alpha)

    @classmethod
    def cascade(cls, kind, alpha: float) -> "TargetSpec":
        return cls(TargetKind.CASCADE, rule=DeferralRule(kind, alpha))

    @classmethod
    def token_cascade(cls, kind, alpha: float) -> "TargetSpec":
        return cls(TargetKind.TOKEN_CASCADE, rule=TokenRule(kind, alpha))

    @property
    def always_valid(self) -> bool:
        """True when the target is a proper distribution for every (q, p)."""
        return not (self.kind is TargetKind.LOSSY and self.beta is not None)


# -- deferral decisions -------------------------------------------------------


def discrepancy(q: Sequence[float], p: Sequence[float], greedy: bool = False) -> float:
    """BiLD's disagreement score; ``inf`` when p gives q's choice no mass.

    Greedy mode scores the drafter's top token under p; otherwise the
    cross-entropy of p against q is used.
    """
    if greedy:
        pv = float(np.asarray(p)[mode(q)[0]])
        return math.inf if pv <= 0 else -math.log(pv)
    return cross_entropy(q, p)


def delta(
    rule: DeferralRule,
    q: Sequence[float],
    p: Sequence[float],
    greedy: bool = False,
    tv: Optional[float] = None,
) -> int:
    """1 to defer this position to the verifier, 0 to keep the drafter.

    `greedy` only matters for BiLD, selecting its greedy discrepancy.  `tv`
    overrides the TV distance used by the OPT rules.
    """
    a = rule.alpha
    k = rule.kind
    if k in (RuleKind.OPT, RuleKind.OPT_LOG) and tv is None:
        tv = tv_distance(p, q)
    if k is RuleKind.CHOW:
        out = max_prob(q) < 1.0 - a
    elif k is RuleKind.CHOW_LOG:
        out = entropy(q) > a
    elif k is RuleKind.DIFF:
        out = max_prob(q) < max_prob(p) - a
    elif k is RuleKind.DIFF_LOG:
        out = entropy(p) < entropy(q) - a
    elif k is RuleKind.OPT:
        out = max_prob(q) < max_prob(p) - a * tv
    elif k is RuleKind.OPT_LOG:
        out = entropy(p) < entropy(q) - a * tv
    elif k is RuleKind.BILD:
        out = discrepancy(q, p, greedy) > a
    else:  # pragma: no cover
        raise ValueError(f"unknown rule {k}")
    return int(out)


def decide(rule: DeferralRule, q_raw, p_raw, temperature: float) -> int:
    """:func:`delta` as seen by a sampler running at `temperature`.

    For T > 0 the rule reads the tempered distributions.  At T = 0 those are
    one-hots whose max probability and entropy carry no information, so the
    confidence statistics come from the raw distributions while the TV
    distance (the actual rejection rate) comes from the one-hots.
    """
    if p_raw is None and rule.kind.uses_p:
        raise ValueError(f"rule {rule.kind.value} needs the verifier distribution")
    if temperature == 0:
        tv = None
        if p_raw is not None:
            tv = tv_distance(apply_temperature(p_raw, 0), apply_temperature(q_raw, 0))
        return delta(rule, q_raw, p_raw, greedy=True, tv=tv)
    pt = None if p_raw is None else apply_temperature(p_raw, temperature)
    return delta(rule, apply_temperature(q_raw, temperature), pt)


def token_r(rule: TokenRule, q: Sequence[float], p: Sequence[float], v: Optional[int] = None):
    """Token-level deferral indicator; the whole vector when `v` is None."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    top = p.max()
    a = rule.alpha
    if rule.kind is TokenRuleKind.V1:
        r = q < top - a
    elif rule.kind is TokenRuleKind.V2:
        r = p < top - a
    else:
        r = p < top * (1.0 - a)
    r = r.astype(int)
    return r if v is None else int(r[v])


# -- targets ------------------------------------------------------------------


def lossy_target(q, p, alpha: float, beta: float) -> np.ndarray:
    """``max(min(q, p/(1-alpha)), p/beta)``; sums to 1 only for a tuned beta."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    return np.maximum(np.minimum(q, p / (1.0 - alpha)), p / beta)


def lossy_recipe(q, p, alpha: float, beta: float):
    """Acceptance probabilities and residual of the direct lossy procedure.

    Returns ``(accept, residual)``; residual is None when it has no mass.
    Tokens with ``q == 0`` are never drafted, and get acceptance 1.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(q > 0, p / ((1.0 - alpha) * np.where(q > 0, q, 1.0)), np.inf)
    accept = np.minimum(1.0, ratio)
    gap = np.maximum(0.0, p / beta - q)
    z = gap.sum()
    return accept, (gap / z if z > 0 else None)


def lossy_cases(q, p, alpha: float, beta: float) -> np.ndarray:
    """Case label (1, 2 or 3) per token in the max-min target's case split.

    1: q above p/(1-alpha); 2: p/beta above q; 3: neither.  Raises if a
    token lands in more or fewer than one case.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    c1 = q > p / (1.0 - alpha)
    c2 = p / beta > q
    c3 = (p / beta <= q) & (q <= p / (1.0 - alpha))
    hits = c1.astype(int) + c2 + c3
    if np.any(hits != 1):
        raise AssertionError(f"lossy cases overlap or miss tokens: {hits}")
    return np.where(c1, 1, np.where(c2, 2, 3))


def token_cascade_target(rule: TokenRule, q, p) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    r = token_r(rule, q, p)
    eta = float((r * q).sum())
    return q * (1 - r) + p * eta


def target(spec: TargetSpec, q, p, greedy: bool = False) -> np.ndarray:
    """The per-position target distribution pi = T(q, p)."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    k = spec.kind
    if k is TargetKind.VERIFIER:
        return p.copy()
    if k is TargetKind.LOSSY:
        beta = spec.beta if spec.beta is not None else tune_beta(q, p, spec.alpha)[0]
        return lossy_target(q, p, spec.alpha, beta)
    if k is TargetKind.BILD_STAR:
        d = discrepancy(q, p, greedy) > spec.alpha
        return (p if d else q).copy()
    if k is TargetKind.CASCADE:
        return (p if delta(spec.rule, q, p, greedy) else q).copy()
    if k is TargetKind.TOKEN_CASCADE:
        return token_cascade_target(spec.rule, q, p)
    raise ValueError(f"unknown target {k}")  # pragma: no cover


def acceptance(pi, q) -> np.ndarray:
    """Per-token acceptance probability ``min(1, pi/q)`` (1 where q is 0)."""
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    safe = np.where(q > 0, q, 1.0)
    return np.where(q > 0, np.minimum(1.0, pi / safe), 1.0)


# -- beta tuning --------------------------------------------------------------


def beta_condition(q, p, alpha: float, beta) -> np.ndarray:
    """Signed gap between the two sides of the beta balance condition.

    Zero exactly when the lossy target sums to one.  Nondecreasing in beta.
    Vectorised over `beta`.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    lhs = np.maximum(0.0, q - p / (1.0 - alpha)).sum()
    b = np.atleast_1d(np.asarray(beta, dtype=float))
    rhs = np.maximum(0.0, p[None, :] / b[:, None] - q[None, :]).sum(axis=1)
    out = lhs - rhs
    return out if np.ndim(beta) else out[0]


def tune_beta(q, p, alpha: float, grid_size: int = BETA_GRID, hi: float = BETA_MAX):
    """Pick beta >= 1 - alpha balancing the lossy condition.

    Grid search over ``grid_size`` points of ``[max(1-alpha, 1e-6), hi]``,
    followed by a root solve inside the grid cell where the condition
    changes sign, if there is one.  Returns ``(beta, |residual|)``.
    """
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    lo = max(1.0 - alpha, 1e-6)
    grid = np.linspace(lo, hi, grid_size)
    f = beta_condition(q, p, alpha, grid)
    i = int(np.argmin(np.abs(f)))
    beta, res = float(grid[i]), float(abs(f[i]))
    if res == 0.0:
        return beta, res
    for j in (i - 1, i):
        if 0 <= j < grid_size - 1 and f[j] * f[j + 1] < 0:
            b = brentq(lambda x: beta_condition(q, p, alpha, x), grid[j], grid[j + 1],
                       xtol=1e-15, rtol=4 * np.finfo(float).eps)
            r = abs(float(beta_condition(q, p, alpha, b)))
            if r < res:
                beta, res = float(b), r
    return beta, res


# -- helpers shared by the engine and the oracle ------------------------------


def tempered_target(spec: TargetSpec, q_raw, p_raw, temperature: float):
    """``(q~, p~, pi)`` at one position for a given sampling temperature.

    Decisions follow :func:`decide` (raw confidence statistics at T = 0);
    whatever gets mixed into pi is always tempered.
    """
    qt = apply_temperature(q_raw, temperature)
    pt = apply_temperature(p_raw, temperature)
    k = spec.kind
    if temperature != 0 or k in (TargetKind.VERIFIER, TargetKind.LOSSY):
        return qt, pt, target(spec, qt, pt)
    if k is TargetKind.TOKEN_CASCADE:
        r = token_r(spec.rule, q_raw, p_raw)
        return qt, pt, qt * (1 - r) + pt * float((r * qt).sum())
    if k is TargetKind.BILD_STAR:
        d = discrepancy(q_raw, p_raw, greedy=True) > spec.alpha
    else:
        d = decide(spec.rule, q_raw, p_raw, 0.0)
    return qt, pt, (pt if d else qt).copy()


def effective_law(pi, q) -> np.ndarray:
    """Law of one draft-accept-or-replace step against a possibly unnormalized pi.

    ``min(q, pi)`` from accepted drafts plus the rejected mass routed through
    the residual (or through norm(pi) when the residual is empty).  Equals pi
    whenever pi is a distribution.
    """
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    kept = np.minimum(q, pi)
    rejected = max(0.0, 1.0 - float(kept.sum()))
    gap = np.maximum(pi - q, 0.0)
    z = gap.sum()
    route = gap / z if z > 0 else pi / pi.sum()
    return kept + rejected * route
