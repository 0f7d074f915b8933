"""Config-driven sweeps over decoding methods on a synthetic cascade task.

A run builds one partitioned task, draws a fixed set of prompts from the
truth model, and for every (method, temperature, gamma, alpha) grid point
decodes ``num_prompts x trials`` continuations.  Cost-side metrics come from
the decode traces.  Quality is exact: the expected per-token loss of the
method's next-token law against the truth, averaged over prefixes drawn
from the truth itself (see :func:`exact_expected_loss`).
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .deferral import BILD_ALPHA_MAX, RuleKind, TokenRuleKind, decide, effective_law, tempered_target
from .distributions import apply_temperature
from .engine import (
    DEFAULT_SMALL_RUN_CAP,
    SPECULATIVE,
    DecodeConfig,
    DecodeTrace,
    Decoder,
    Rng,
    Strategy,
    StrategyKind,
)
from .models import SyntheticTask, build_partitioned_task, extend_context, sample_tokens, step_loss

STRICT_ENV = "SPECCASCADE_STRICT"
DEFAULT_TEMPERATURES = (0.0, 0.1, 0.5, 1.0)
DEFAULT_GAMMAS = (3, 5, 7)
GRID_POINTS = 21
TIE_TOL = 1e-12


class ConfigError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field_name = field_name


# -- config -------------------------------------------------------------------


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 6
    order: int = 1
    eos: Optional[int] = None
    seed: int = 0
    frac_small_favored: float = 0.5
    noise_small: float = 0.5
    noise_large: float = 0.5
    smoothing: float = 0.0
    calibrated: bool = False

    def build(self) -> SyntheticTask:
        return build_partitioned_task(
            self.vocab_size,
            self.order,
            self.frac_small_favored,
            self.noise_small,
            self.noise_large,
            self.seed,
            smoothing=self.smoothing,
            eos=self.eos,
            calibrated=self.calibrated,
        )


@dataclass(frozen=True)
class MethodConfig:
    name: str
    strategy: StrategyKind
    rule: Optional[str] = None
    alphas: tuple = ()
    gammas: tuple = DEFAULT_GAMMAS
    temperatures: tuple = DEFAULT_TEMPERATURES
    beta: str = "fixed-1"

    @property
    def speculative(self) -> bool:
        return self.strategy in SPECULATIVE

    def strategy_for(self, alpha: Optional[float]) -> Strategy:
        beta = None if self.beta == "tuned" else 1.0
        return Strategy(self.strategy, self.rule, alpha, beta)


@dataclass(frozen=True)
class RunSection:
    num_prompts: int = 16
    prompt_len: int = 2
    max_len: int = 16
    trials: int = 2
    seed: int = 0
    small_run_cap: Optional[int] = DEFAULT_SMALL_RUN_CAP
    c_small: float = 1.0
    c_large: float = 5.0
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig
    methods: tuple
    run: RunSection


ALPHA_FREE = {StrategyKind.SPEC_DECODE, StrategyKind.SMALL, StrategyKind.LARGE}


def default_alphas(strategy: StrategyKind, rule: Optional[str], vocab_size: int) -> tuple:
    """21 evenly spaced lenience values spanning the rule's domain."""
    if strategy in ALPHA_FREE:
        return (None,)
    if strategy is StrategyKind.LOSSY:
        # alpha must stay below 1
        return tuple(np.linspace(0.0, 1.0, GRID_POINTS + 1)[:-1].tolist())
    if strategy is StrategyKind.BILD_STAR:
        hi = BILD_ALPHA_MAX
    elif strategy in (StrategyKind.TOKEN_SPEC_CASCADE, StrategyKind.SEQ_CASCADE):
        hi = 1.0
    else:
        kind = RuleKind(rule)
        if kind is RuleKind.BILD:
            hi = BILD_ALPHA_MAX
        elif kind.log_domain:
            hi = math.log(vocab_size)
        else:
            hi = 1.0
    return tuple(np.linspace(0.0, hi, GRID_POINTS).tolist())


def _floats(text: str, name: str) -> tuple:
    try:
        vals = tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(name, f"expected numbers, got {text!r}") from None
    if not vals:
        raise ConfigError(name, "grid must be non-empty")
    return vals


def _opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("none", "") else int(text)


def _section_values(sec, schema, prefix: str) -> dict:
    out = {}
    for f in schema:
        if f.name not in sec:
            continue
        raw = sec[f.name]
        try:
            if f.type == "bool":
                out[f.name] = sec.getboolean(f.name)
            elif f.name in ("eos", "small_run_cap"):
                out[f.name] = _opt_int(raw)
            elif f.type in ("int",):
                out[f.name] = int(raw)
            else:
                out[f.name] = float(raw)
        except ValueError:
            raise ConfigError(f"{prefix}.{f.name}", f"cannot parse {raw!r}") from None
    unknown = set(sec) - {f.name for f in schema}
    if unknown:
        raise ConfigError(f"{prefix}.{sorted(unknown)[0]}", "unknown key")
    return out


def _method(name: str, sec, vocab_size: int) -> MethodConfig:
    where = f"method {name}"
    known = {"strategy", "rule", "alpha", "gamma", "temperature", "beta"}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}", "unknown key")
    try:
        strategy = StrategyKind(sec.get("strategy", name).strip())
    except ValueError:
        raise ConfigError(f"{where}.strategy", f"unknown strategy {sec.get('strategy', name)!r}") from None
    rule = sec.get("rule")
    rule = rule.strip() if rule else None
    if rule is not None and rule not in {k.value for k in RuleKind} | {k.value for k in TokenRuleKind}:
        raise ConfigError(f"{where}.rule", f"unknown rule {rule!r}")
    alpha_text = sec.get("alpha", "default").strip()
    if strategy in ALPHA_FREE:
        alphas = (None,)
    elif alpha_text == "default":
        if strategy in (StrategyKind.SPEC_CASCADE, StrategyKind.TOKEN_SPEC_CASCADE,
                        StrategyKind.TOKEN_CASCADE, StrategyKind.ORACLE_CASCADE) and rule is None:
            raise ConfigError(f"{where}.rule", f"{strategy.value} needs a rule")
        alphas = default_alphas(strategy, rule, vocab_size)
    else:
        alphas = _floats(alpha_text, f"{where}.alpha")
    gammas = tuple(int(g) for g in _floats(sec.get("gamma", "3 5 7"), f"{where}.gamma"))
    temps = _floats(sec.get("temperature", "0 0.1 0.5 1.0"), f"{where}.temperature")
    beta = sec.get("beta", "fixed-1").strip()
    if beta not in ("fixed-1", "tuned"):
        raise ConfigError(f"{where}.beta", "must be fixed-1 or tuned")
    mc = MethodConfig(name, strategy, rule, alphas, gammas if strategy in SPECULATIVE else (None,), temps, beta)
    for a in alphas:
        try:
            mc.strategy_for(a)
        except ValueError as e:
            raise ConfigError(f"{where}.alpha", str(e)) from None
    if any(g is not None and g < 1 for g in mc.gammas):
        raise ConfigError(f"{where}.gamma", "must be >= 1")
    if any(t < 0 for t in temps):
        raise ConfigError(f"{where}.temperature", "must be >= 0")
    return mc


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError("config", str(e)) from None
    task = TaskConfig(**_section_values(cp["task"], fields(TaskConfig), "task")) if cp.has_section("task") else TaskConfig()
    run = RunSection(**_section_values(cp["run"], fields(RunSection), "run")) if cp.has_section("run") else RunSection()
    methods = []
    for sec_name in cp.sections():
        if sec_name.startswith("method"):
            label = sec_name[len("method"):].strip(" .:") or cp[sec_name].get("strategy", "").strip()
            if not label:
                raise ConfigError(sec_name, "method section needs a name or a strategy")
            methods.append(_method(label, cp[sec_name], task.vocab_size))
        elif sec_name not in ("task", "run"):
            raise ConfigError(sec_name, "unknown section")
    if not methods:
        raise ConfigError("method", "at least one [method ...] section is required")
    if len({m.name for m in methods}) != len(methods):
        raise ConfigError("method", "method names must be unique")
    validate_run(run)
    return RunConfig(task, tuple(methods), run)


def validate_run(run: RunSection) -> None:
    for name in ("num_prompts", "max_len", "trials"):
        if getattr(run, name) < 1:
            raise ConfigError(f"run.{name}", "must be >= 1")
    if run.prompt_len < 0:
        raise ConfigError("run.prompt_len", "must be >= 0")
    if run.c_small <= 0 or run.c_large <= 0:
        raise ConfigError("run.c_small", "costs must be positive")
    if run.small_run_cap is not None and run.small_run_cap < 1:
        raise ConfigError("run.small_run_cap", "must be >= 1 or none")


def load_config(path: Union[str, Path]) -> RunConfig:
    return parse_config(Path(path).read_text())


def override(cfg: RunConfig, seed=None, method=None, alpha=None, gamma=None, temperature=None) -> RunConfig:
    """Apply command-line overrides.  `method` picks one configured method by
    name, or names a new one as ``strategy`` or ``strategy:rule``."""
    run = cfg.run if seed is None else replace(cfg.run, seed=seed)
    methods = list(cfg.methods)
    if method is not None:
        chosen = [m for m in methods if m.name == method]
        if not chosen:
            strategy, _, rule = method.partition(":")
            sec = {"strategy": strategy}
            if rule:
                sec["rule"] = rule
            chosen = [_method(method, sec, cfg.task.vocab_size)]
        methods = chosen
    out = []
    for m in methods:
        if alpha is not None and m.strategy not in ALPHA_FREE:
            m = replace(m, alphas=(float(alpha),))
            try:
                m.strategy_for(m.alphas[0])
            except ValueError as e:
                raise ConfigError("--alpha", str(e)) from None
        if gamma is not None and m.speculative:
            m = replace(m, gammas=(int(gamma),))
        if temperature is not None:
            m = replace(m, temperatures=(float(temperature),))
        out.append(m)
    return RunConfig(cfg.task, tuple(out), run)


# -- metrics ------------------------------------------------------------------


@dataclass
class SweepRow:
    method: str
    rule: Optional[str]
    alpha: Optional[float]
    gamma: Optional[int]
    temperature: float
    rejection_rate: float
    deferral_fraction: float
    large_rounds_per_token: float
    exact_expected_01_loss: float
    exact_expected_log_loss: float
    empirical_match_rate_with_large: float
    tokens_per_second_proxy: float
    seed: int


COLUMNS = [f.name for f in fields(SweepRow)]


def cost_model(trace: DecodeTrace, c_small: float, c_large: float) -> float:
    """Tokens per unit of model cost; one large call per verification round."""
    if c_small <= 0 or c_large <= 0:
        raise ValueError("costs must be positive")
    cost = c_small * trace.small_calls + c_large * trace.large_rounds
    return trace.tokens / cost if cost > 0 else 0.0


def _next_law(task: SyntheticTask, strategy: Strategy, temperature: float):
    """Per-context next-token law of a per-position method, as a function."""
    small, large = task.small, task.large
    kind = strategy.kind
    if strategy.speculative:
        spec = strategy.target_spec()

        def law(ctx):
            qt, _, pi = tempered_target(spec, small.dist_at(ctx), large.dist_at(ctx), temperature)
            return pi if spec.always_valid else effective_law(pi, qt)

        return law
    if kind is StrategyKind.SMALL:
        return lambda ctx: apply_temperature(small.dist_at(ctx), temperature)
    if kind is StrategyKind.LARGE:
        return lambda ctx: apply_temperature(large.dist_at(ctx), temperature)
    if kind in (StrategyKind.TOKEN_CASCADE, StrategyKind.ORACLE_CASCADE):
        rule = strategy.deferral_rule()

        def law(ctx):
            q_raw, p_raw = small.dist_at(ctx), large.dist_at(ctx)
            use_p = decide(rule, q_raw, p_raw if rule.kind.uses_p else None, temperature)
            return apply_temperature(p_raw if use_p else q_raw, temperature)

        return law
    raise ValueError(f"{kind.value} has no per-position law")


def exact_expected_loss(
    task: SyntheticTask,
    strategy: Strategy,
    temperature: float,
    prompts: Sequence[Sequence[int]],
    max_len: int,
    losses: Iterable[str] = ("0-1", "log"),
) -> dict:
    """Expected per-token loss of the method's next-token law, against the truth.

    Prefixes follow the truth model from each prompt for up to `max_len`
    tokens (stopping at eos); every reachable context is weighted by its
    exact probability.  The result pools all prompts and positions.  The
    token cascade's run cap is a cost device and is not modelled here.
    """
    law = _next_law(task, strategy, temperature)
    truth = task.truth
    eos = truth.eos
    losses = tuple(losses)
    memo: dict = {}
    total = dict.fromkeys(losses, 0.0)
    positions = 0.0
    for prompt in prompts:
        mass = {truth.context(prompt): 1.0}
        for _ in range(max_len):
            nxt: dict = {}
            for ctx, m in mass.items():
                if ctx not in memo:
                    t = truth.dist_at(ctx)
                    pi = law(ctx)
                    memo[ctx] = {name: step_loss(pi, t, name) for name in losses}
                positions += m
                for name in losses:
                    total[name] += m * memo[ctx][name]
                t = truth.dist_at(ctx)
                for v, pv in enumerate(t):
                    if pv > 0 and v != eos and m * pv > 0:
                        c = extend_context(ctx, v)
                        nxt[c] = nxt.get(c, 0.0) + m * pv
            mass = nxt
            if not mass:
                break
    return {name: total[name] / positions for name in losses}


def _realized_loss(task: SyntheticTask, temperature: float, prompt, tokens, use_large: bool, losses) -> tuple:
    model = task.large if use_large else task.small
    ctx = task.truth.context(prompt)
    sums = dict.fromkeys(losses, 0.0)
    for tok in tokens:
        d = apply_temperature(model.dist_at(ctx), temperature)
        t = task.truth.dist_at(ctx)
        for name in losses:
            sums[name] += step_loss(d, t, name)
        ctx = extend_context(ctx, tok)
    return sums, len(tokens)


# -- the sweep ----------------------------------------------------------------


def draw_prompts(task: SyntheticTask, run: RunSection) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 0x9E3779B9]))
    return [
        sample_tokens(task.truth, [], run.prompt_len, rng, allow_eos=False) for _ in range(run.num_prompts)
    ]


@dataclass(frozen=True)
class GridPoint:
    method: MethodConfig
    alpha: Optional[float]
    gamma: Optional[int]
    temperature: float


def grid(cfg: RunConfig) -> list:
    pts = []
    for m in cfg.methods:
        for t in m.temperatures:
            for g in m.gammas:
                for a in m.alphas:
                    pts.append(GridPoint(m, a, g, t))
    return pts


def evaluate_point(task: SyntheticTask, prompts, run: RunSection, pt: GridPoint) -> SweepRow:
    strategy = pt.method.strategy_for(pt.alpha)
    dcfg = DecodeConfig(
        max_len=run.max_len,
        gamma=pt.gamma or 1,
        temperature=pt.temperature,
        small_run_cap=run.small_run_cap,
        record_rounds=False,
    )
    decoder = Decoder(task.small, task.large, strategy, dcfg)
    totals = DecodeTrace()
    losses = ("0-1", "log")
    seq_sums = dict.fromkeys(losses, 0.0)
    seq_n = 0
    for i, prompt in enumerate(prompts):
        for trial in range(run.trials):
            out = decoder.decode(prompt, Rng.stream(run.seed, i, trial))
            totals.add(out.trace)
            if strategy.kind is StrategyKind.SEQ_CASCADE:
                sums, n = _realized_loss(task, pt.temperature, prompt, out.tokens, out.trace.seq_deferred, losses)
                for k in losses:
                    seq_sums[k] += sums[k]
                seq_n += n
    if strategy.kind is StrategyKind.SEQ_CASCADE:
        quality = {k: seq_sums[k] / seq_n for k in losses}
    else:
        quality = exact_expected_loss(task, strategy, pt.temperature, prompts, run.max_len, losses)
    tokens = max(totals.tokens, 1)
    return SweepRow(
        method=pt.method.name,
        rule=pt.method.rule,
        alpha=pt.alpha,
        gamma=pt.gamma,
        temperature=pt.temperature,
        rejection_rate=totals.rejected / totals.drafted if totals.drafted else 0.0,
        deferral_fraction=totals.deferrals / tokens,
        large_rounds_per_token=totals.large_rounds / tokens,
        exact_expected_01_loss=quality["0-1"],
        exact_expected_log_loss=quality["log"],
        empirical_match_rate_with_large=totals.large_mode_matches / tokens,
        tokens_per_second_proxy=cost_model(totals, run.c_small, run.c_large),
        seed=run.seed,
    )


_WORKER_STATE: dict = {}


def _init_worker(cfg: RunConfig) -> None:
    task = cfg.task.build()
    _WORKER_STATE["ctx"] = (task, draw_prompts(task, cfg.run), cfg.run)


def _evaluate_in_worker(pt: GridPoint) -> SweepRow:
    task, prompts, run = _WORKER_STATE["ctx"]
    return evaluate_point(task, prompts, run, pt)


def strict_mode() -> bool:
    return os.environ.get(STRICT_ENV, "").strip().lower() in ("1", "true", "yes", "on")


def run(cfg: RunConfig, out: Optional[Union[str, Path]] = None) -> list:
    """Evaluate every grid point; write the CSV to `out` when given."""
    task = cfg.task.build()
    prompts = draw_prompts(task, cfg.run)
    pts = grid(cfg)
    workers = 1 if strict_mode() else max(1, cfg.run.workers)
    if workers == 1 or len(pts) == 1:
        rows = [evaluate_point(task, prompts, cfg.run, pt) for pt in pts]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(cfg,)) as pool:
            # map preserves grid order regardless of completion order
            rows = list(pool.map(_evaluate_in_worker, pts, chunksize=max(1, len(pts) // (4 * workers))))
    if out is not None:
        write_csv(rows, out)
    return rows


# -- CSV ----------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".9g")
    return str(x)


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def write_csv(rows: Sequence[SweepRow], path: Union[str, Path]) -> None:
    Path(path).write_text(rows_to_csv(rows))


def read_csv(path: Union[str, Path]) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            rows.append(
                SweepRow(
                    method=rec["method"],
                    rule=rec["rule"] or None,
                    alpha=float(rec["alpha"]) if rec["alpha"] else None,
                    gamma=int(rec["gamma"]) if rec["gamma"] else None,
                    temperature=float(rec["temperature"]),
                    **{c: float(rec[c]) for c in COLUMNS[5:-1]},
                    seed=int(rec["seed"]),
                )
            )
    return rows


# -- frontiers ----------------------------------------------------------------


@dataclass
class BudgetResult:
    budget: float
    loss_a: float
    loss_b: float

    @property
    def winner(self) -> str:
        if abs(self.loss_a - self.loss_b) <= TIE_TOL:
            return "tie"
        return "a" if self.loss_a < self.loss_b else "b"


@dataclass
class FrontierReport:
    results: list = field(default_factory=list)

    def share(self, who: str) -> float:
        if not self.results:
            return 0.0
        return 100.0 * sum(r.winner == who for r in self.results) / len(self.results)

    def render(self, name_a: str = "a", name_b: str = "b") -> str:
        lines = ["budget,best_loss_a,best_loss_b,winner"]
        for r in self.results:
            w = {"a": name_a, "b": name_b, "tie": "tie"}[r.winner]
            lines.append(f"{r.budget:.9g},{r.loss_a:.9g},{r.loss_b:.9g},{w}")
        lines.append(
            f"# {name_a} wins {self.share('a'):.1f}%, {name_b} wins {self.share('b'):.1f}%, "
            f"ties {self.share('tie'):.1f}% over {len(self.results)} budgets"
        )
        return "\n".join(lines) + "\n"


def compare_frontiers(rows_a: Sequence[SweepRow], rows_b: Sequence[SweepRow]) -> FrontierReport:
    """Best exact 0-1 loss each method reaches within each deferral budget.

    Budgets are the deferral fractions observed in either row set; a budget
    is reported only when both methods have a point within it.
    """
    if not rows_a or not rows_b:
        raise ValueError("both row sets must be non-empty")
    seeds = {r.seed for r in rows_a} | {r.seed for r in rows_b}
    if len(seeds) != 1:
        raise ValueError(f"rows come from different runs (seeds {sorted(seeds)})")
    budgets = sorted({r.deferral_fraction for r in rows_a} | {r.deferral_fraction for r in rows_b})
    report = FrontierReport()
    for b in budgets:
        la = [r.exact_expected_01_loss for r in rows_a if r.deferral_fraction <= b]
        lb = [r.exact_expected_01_loss for r in rows_b if r.deferral_fraction <= b]
        if la and lb:
            report.results.append(BudgetResult(b, min(la), min(lb)))
    return report
