"""Speculative sampling loop and the decoding strategies built on it.

Models are order-k Markov, so every per-position quantity (tempered
distributions, targets, acceptance probabilities, residuals) depends only on
the context tuple.  :class:`SiteCache` memoises those per context, which is
what makes Monte Carlo runs of millions of rounds affordable.
"""

from __future__ import annotations

import bisect
import itertools
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from .deferral import (
    DeferralRule,
    RuleKind,
    TargetKind,
    TargetSpec,
    TokenRule,
    acceptance,
    decide,
    effective_law,
    tempered_target,
)
from .distributions import apply_temperature, mode, residual
from .models import Context, TabularLM, extend_context

DEFAULT_SMALL_RUN_CAP = 10


class Rng:
    """Seeded uniform source with a draw counter.

    Uniforms are pulled from numpy in blocks; the block size is fixed, so a
    given seed always yields the same sequence.
    """

    BLOCK = 4096

    def __init__(self, seed: Union[int, Sequence[int], np.random.SeedSequence]):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self._buf: list[float] = []
        self._pos = 0
        self.draws = 0

    @classmethod
    def stream(cls, run_seed: int, prompt: int, trial: int) -> "Rng":
        return cls(np.random.SeedSequence([run_seed, prompt, trial]))

    def random(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._gen.random(self.BLOCK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        self.draws += 1
        return u

    def categorical(self, cdf: Sequence[float]) -> int:
        # bisect_right never lands on a zero-mass token
        return bisect.bisect_right(cdf, self.random() * cdf[-1])


def _cdf(d) -> list[float]:
    return list(itertools.accumulate(np.asarray(d, dtype=float).tolist()))


# -- strategies ---------------------------------------------------------------


class StrategyKind(str, Enum):
    SPEC_DECODE = "spec_decode"
    LOSSY = "lossy"
    BILD_STAR = "bild_star"
    SPEC_CASCADE = "spec_cascade"
    TOKEN_SPEC_CASCADE = "token_spec_cascade"
    TOKEN_CASCADE = "token_cascade"
    ORACLE_CASCADE = "oracle_cascade"
    SEQ_CASCADE = "seq_cascade"
    SMALL = "small"
    LARGE = "large"


SPECULATIVE = frozenset(
    {
        StrategyKind.SPEC_DECODE,
        StrategyKind.LOSSY,
        StrategyKind.BILD_STAR,
        StrategyKind.SPEC_CASCADE,
        StrategyKind.TOKEN_SPEC_CASCADE,
    }
)


@dataclass(frozen=True)
class Strategy:
    """A decoding method plus its rule and lenience.

    `beta` only applies to ``lossy``: a number fixes it, None tunes it per
    position.
    """

    kind: StrategyKind
    rule: Optional[str] = None
    alpha: Optional[float] = None
    beta: Optional[float] = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        k = self.kind
        needs_rule = {
            StrategyKind.SPEC_CASCADE,
            StrategyKind.TOKEN_SPEC_CASCADE,
            StrategyKind.TOKEN_CASCADE,
            StrategyKind.ORACLE_CASCADE,
        }
        if k in needs_rule and (self.rule is None or self.alpha is None):
            raise ValueError(f"{k.value} needs a rule and an alpha")
        if k in (StrategyKind.LOSSY, StrategyKind.BILD_STAR, StrategyKind.SEQ_CASCADE) and self.alpha is None:
            raise ValueError(f"{k.value} needs an alpha")
        if k is StrategyKind.SEQ_CASCADE and not 0 <= self.alpha <= 1:
            raise ValueError("seq_cascade alpha must be in [0, 1]")
        if k is StrategyKind.TOKEN_CASCADE and self.deferral_rule().kind.uses_p:
            raise ValueError(
                f"token_cascade decides before calling the large model; rule {self.rule} needs p"
            )
        # build eagerly so bad parameters fail here rather than mid-decode
        if self.speculative:
            self.target_spec()

    @property
    def speculative(self) -> bool:
        return self.kind in SPECULATIVE

    def deferral_rule(self) -> DeferralRule:
        return DeferralRule(self.rule, self.alpha)

    def target_spec(self) -> TargetSpec:
        k = self.kind
        if k is StrategyKind.SPEC_DECODE:
            return TargetSpec.verifier()
        if k is StrategyKind.LOSSY:
            return TargetSpec.lossy(self.alpha, self.beta)
        if k is StrategyKind.BILD_STAR:
            return TargetSpec.bild_star(self.alpha)
        if k is StrategyKind.SPEC_CASCADE:
            return TargetSpec(TargetKind.CASCADE, rule=self.deferral_rule())
        if k is StrategyKind.TOKEN_SPEC_CASCADE:
            return TargetSpec(TargetKind.TOKEN_CASCADE, rule=TokenRule(self.rule, self.alpha))
        raise ValueError(f"{k.value} is not a speculative strategy")


# -- traces -------------------------------------------------------------------


@dataclass
class RoundRecord:
    drafted: list[int]
    kappa: list[float]
    accepted: list[bool]  # acceptance draws up to and including the first rejection
    j_star: int
    final_token: Optional[int]  # residual or bonus token; None when the block ended on eos
    empty_residual: bool = False

    @property
    def rejected(self) -> int:
        return len(self.drafted) - self.j_star

    @property
    def emitted(self) -> int:
        return self.j_star + (self.final_token is not None)


@dataclass
class DecodeTrace:
    rounds: list[RoundRecord] = field(default_factory=list)
    small_calls: int = 0
    large_rounds: int = 0  # large-model invocations (one per verification round)
    large_scorings: int = 0  # prefixes scored by the large model
    deferrals: int = 0  # large-model calls charged as deferrals
    forced_large: int = 0  # deferrals forced by the small-model run cap
    tokens: int = 0
    drafted: int = 0
    rejected: int = 0
    empty_residuals: int = 0
    large_mode_matches: int = 0
    seq_deferred: Optional[bool] = None

    def add(self, other: "DecodeTrace") -> None:
        """Accumulate counters (not round records) from another trace."""
        for name in (
            "small_calls",
            "large_rounds",
            "large_scorings",
            "deferrals",
            "forced_large",
            "tokens",
            "drafted",
            "rejected",
            "empty_residuals",
            "large_mode_matches",
        ):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def counters(self) -> dict:
        d = asdict(self)
        d.pop("rounds")
        return d

    def to_jsonl(self) -> str:
        lines = [json.dumps({"round": i, **asdict(r)}, sort_keys=True) for i, r in enumerate(self.rounds)]
        lines.append(json.dumps({"counters": self.counters()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "DecodeTrace":
        trace = DecodeTrace()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "counters" in rec:
                for k, v in rec["counters"].items():
                    setattr(trace, k, v)
            else:
                rec.pop("round")
                trace.rounds.append(RoundRecord(**rec))
        return trace


@dataclass
class DecodeOutput:
    tokens: list[int]
    trace: DecodeTrace


# -- per-context caches -------------------------------------------------------


@dataclass
class _Site:
    q: np.ndarray
    p: np.ndarray
    q_cdf: list
    p_cdf: list
    p_mode: int
    pi: Optional[np.ndarray] = None
    accept: Optional[list] = None
    res_cdf: Optional[list] = None
    fallback_cdf: Optional[list] = None  # norm(pi), used when the residual is empty
    bonus_cdf: Optional[list] = None


class SiteCache:
    """Tempered distributions and target tables per context.

    Shared by every decode with the same models, spec and temperature.
    """

    def __init__(self, small: TabularLM, large: TabularLM, temperature: float = 1.0,
                 spec: Optional[TargetSpec] = None):
        if small.vocab_size != large.vocab_size or small.order != large.order:
            raise ValueError("small and large models must share vocab and order")
        if not np.isfinite(temperature) or temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {temperature}")
        self.small = small
        self.large = large
        self.temperature = temperature
        self.spec = spec
        self._sites: dict[Context, _Site] = {}

    def __call__(self, ctx: Context) -> _Site:
        site = self._sites.get(ctx)
        if site is None:
            site = self._sites[ctx] = self._build(ctx)
        return site

    def _build(self, ctx: Context) -> _Site:
        q_raw, p_raw = self.small.dist_at(ctx), self.large.dist_at(ctx)
        if self.spec is None:
            qt = apply_temperature(q_raw, self.temperature)
            pt = apply_temperature(p_raw, self.temperature)
            return _Site(qt, pt, _cdf(qt), _cdf(pt), mode(p_raw)[0])
        qt, pt, pi = tempered_target(self.spec, q_raw, p_raw, self.temperature)
        res = residual(pi, qt)
        if self.spec.always_valid:
            bonus = pi
        else:
            # unnormalized lossy target: the bonus position uses the same
            # accept-or-replace law as every other position
            bonus = effective_law(pi, qt)
        return _Site(
            qt,
            pt,
            _cdf(qt),
            _cdf(pt),
            mode(p_raw)[0],
            pi=pi,
            accept=acceptance(pi, qt).tolist(),
            res_cdf=None if res is None else _cdf(res),
            fallback_cdf=_cdf(pi),
            bonus_cdf=_cdf(bonus),
        )


# -- the speculative round ----------------------------------------------------


def _round(sites: SiteCache, ctx: Context, gamma: int, rng: Rng, eos: Optional[int]):
    drafted: list[int] = []
    visited = []
    c = ctx
    for _ in range(gamma):
        s = sites(c)
        x = rng.categorical(s.q_cdf)
        drafted.append(x)
        visited.append((c, s))
        c = extend_context(c, x)
        if x == eos:
            break
    eos_stop = eos is not None and drafted[-1] == eos

    kappa = [s.accept[x] for (_, s), x in zip(visited, drafted)]
    accepted: list[bool] = []
    j_star = len(drafted)
    for j, k in enumerate(kappa):
        assert visited[j][1].q[drafted[j]] > 0, "drafted a token q gives no mass"
        a = rng.random() < k
        accepted.append(a)
        if not a:
            j_star = j
            break

    empty = False
    if j_star < len(drafted):
        s = visited[j_star][1]
        if s.res_cdf is None:
            empty = True
            final = rng.categorical(s.fallback_cdf)
        else:
            final = rng.categorical(s.res_cdf)
        block = drafted[:j_star] + [final]
        positions = [cc for cc, _ in visited[: j_star + 1]]
    elif eos_stop:
        final = None
        block = drafted
        positions = [cc for cc, _ in visited]
    else:
        final = rng.categorical(sites(c).bonus_cdf)
        block = drafted + [final]
        positions = [cc for cc, _ in visited] + [c]
    rec = RoundRecord(drafted, kappa, accepted, j_star, final, empty)
    return block, positions, rec


def gen_spec_sample(
    q: TabularLM,
    p: TabularLM,
    spec: TargetSpec,
    prefix: Sequence[int],
    gamma: int,
    rng: Rng,
    temperature: float = 1.0,
    sites: Optional[SiteCache] = None,
):
    """One round of generic speculative sampling after `prefix`.

    Returns ``(block, record)`` where `block` holds between 1 and
    ``gamma + 1`` tokens.  Pass a `sites` cache built for the same models,
    spec and temperature to amortise per-context work across calls.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if sites is None:
        sites = SiteCache(q, p, temperature, spec)
    block, _, rec = _round(sites, q.context(prefix), gamma, rng, q.eos)
    return block, rec


# -- full decodes -------------------------------------------------------------


@dataclass(frozen=True)
class DecodeConfig:
    max_len: int = 32
    gamma: int = 5
    temperature: float = 1.0
    small_run_cap: Optional[int] = DEFAULT_SMALL_RUN_CAP
    record_rounds: bool = True

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.small_run_cap is not None and self.small_run_cap < 1:
            raise ValueError("small_run_cap must be >= 1 or None")


class Decoder:
    """Runs one strategy over a fixed pair of models, caching per context."""

    def __init__(self, small: TabularLM, large: TabularLM, strategy: Strategy, config: DecodeConfig):
        self.small = small
        self.large = large
        self.strategy = strategy
        self.config = config
        spec = strategy.target_spec() if strategy.speculative else None
        self.sites = SiteCache(small, large, config.temperature, spec)
        self._decisions: dict[Context, int] = {}
        self.eos = small.eos if small.eos is not None else large.eos

    def decode(self, prompt: Sequence[int], rng: Rng) -> DecodeOutput:
        k = self.strategy.kind
        ctx = self.small.context(prompt)
        if self.strategy.speculative:
            return self._speculative(ctx, rng)
        if k in (StrategyKind.TOKEN_CASCADE, StrategyKind.ORACLE_CASCADE):
            return self._sequential(ctx, rng)
        if k is StrategyKind.SEQ_CASCADE:
            return self._seq_cascade(ctx, rng)
        if k in (StrategyKind.SMALL, StrategyKind.LARGE):
            return self._single(ctx, rng, large=k is StrategyKind.LARGE)
        raise ValueError(f"unknown strategy {k}")  # pragma: no cover

    def _emit(self, trace: DecodeTrace, out: list, ctx: Context, tok: int) -> Context:
        out.append(tok)
        trace.tokens += 1
        trace.large_mode_matches += tok == self.sites(ctx).p_mode
        return extend_context(ctx, tok)

    def _speculative(self, ctx: Context, rng: Rng) -> DecodeOutput:
        cfg = self.config
        trace = DecodeTrace()
        out: list[int] = []
        while len(out) < cfg.max_len:
            remaining = cfg.max_len - len(out)
            gamma = min(cfg.gamma, max(1, remaining - 1))
            block, positions, rec = _round(self.sites, ctx, gamma, rng, self.eos)
            m = len(rec.drafted)
            eos_stop = rec.final_token is None
            trace.small_calls += m
            trace.large_rounds += 1
            trace.deferrals += 1
            trace.large_scorings += m if eos_stop else m + 1
            trace.drafted += m
            trace.rejected += rec.rejected
            trace.empty_residuals += rec.empty_residual
            if cfg.record_rounds:
                trace.rounds.append(rec)
            done = False
            for pos, tok in zip(positions, block[:remaining]):
                ctx = self._emit(trace, out, pos, tok)
                if tok == self.eos:
                    done = True
                    break
            if done:
                break
        return DecodeOutput(out, trace)

    def _decision(self, ctx: Context) -> int:
        d = self._decisions.get(ctx)
        if d is None:
            rule = self.strategy.deferral_rule()
            p_raw = self.large.dist_at(ctx) if rule.kind.uses_p else None
            d = self._decisions[ctx] = decide(rule, self.small.dist_at(ctx), p_raw, self.config.temperature)
        return d

    def _sequential(self, ctx: Context, rng: Rng) -> DecodeOutput:
        cfg = self.config
        oracle = self.strategy.kind is StrategyKind.ORACLE_CASCADE
        cap = None if oracle else cfg.small_run_cap
        trace = DecodeTrace()
        out: list[int] = []
        run = 0
        while len(out) < cfg.max_len:
            s = self.sites(ctx)
            if cap is not None and run >= cap:
                # run cap reached: consult the large model without asking q
                use_large = True
                trace.forced_large += 1
            else:
                trace.small_calls += 1
                use_large = bool(self._decision(ctx))
            if oracle:
                # the oracle needs p at every step to decide
                trace.large_rounds += 1
                trace.large_scorings += 1
            elif use_large:
                trace.large_rounds += 1
                trace.large_scorings += 1
            if use_large:
                trace.deferrals += 1
                run = 0
                tok = rng.categorical(s.p_cdf)
            else:
                run += 1
                tok = rng.categorical(s.q_cdf)
            ctx = self._emit(trace, out, ctx, tok)
            if tok == self.eos:
                break
        return DecodeOutput(out, trace)

    def _generate(self, ctx: Context, rng: Rng, large: bool):
        """Autoregressive sample; returns (tokens, contexts, raw-or-tempered prob)."""
        toks, ctxs = [], []
        prob = 1.0
        model = self.large if large else self.small
        while len(toks) < self.config.max_len:
            s = self.sites(ctx)
            tok = rng.categorical(s.p_cdf if large else s.q_cdf)
            d = model.dist_at(ctx) if self.config.temperature == 0 else (s.p if large else s.q)
            prob *= float(d[tok])
            toks.append(tok)
            ctxs.append(ctx)
            ctx = extend_context(ctx, tok)
            if tok == self.eos:
                break
        return toks, ctxs, prob

    def _single(self, ctx: Context, rng: Rng, large: bool) -> DecodeOutput:
        trace = DecodeTrace()
        toks, ctxs, _ = self._generate(ctx, rng, large)
        out: list[int] = []
        for c, t in zip(ctxs, toks):
            self._emit(trace, out, c, t)
        if large:
            trace.large_rounds = trace.large_scorings = trace.deferrals = len(toks)
        else:
            trace.small_calls = len(toks)
        return DecodeOutput(out, trace)

    def _seq_cascade(self, ctx: Context, rng: Rng) -> DecodeOutput:
        trace = DecodeTrace()
        toks, ctxs, prob = self._generate(ctx, rng, large=False)
        trace.small_calls = len(toks)
        deferred = prob < 1.0 - self.strategy.alpha
        trace.seq_deferred = deferred
        if deferred:
            toks, ctxs, _ = self._generate(ctx, rng, large=True)
            trace.large_rounds = trace.large_scorings = trace.deferrals = len(toks)
        out: list[int] = []
        for c, t in zip(ctxs, toks):
            self._emit(trace, out, c, t)
        return DecodeOutput(out, trace)


def decode(
    strategy: Strategy,
    small: TabularLM,
    large: TabularLM,
    prompt: Sequence[int],
    rng: Rng,
    config: DecodeConfig = DecodeConfig(),
) -> DecodeOutput:
    """Decode one continuation of `prompt` with `strategy`.

    For repeated decodes build a :class:`Decoder` once and reuse it.
    """
    return Decoder(small, large, strategy, config).decode(prompt, rng)
