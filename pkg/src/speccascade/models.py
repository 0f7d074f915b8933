"""Tabular order-k Markov language models and synthetic cascade tasks.

A :class:`TabularLM` maps the last ``order`` tokens of a prefix (left-padded
with the :data:`BOS` sentinel) to a next-token distribution.  The same type
plays all three roles: ground truth, drafter and verifier.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .distributions import Vocab, as_dist, cross_entropy, mode

BOS = -1
LOSSES = ("0-1", "log")

Context = tuple[int, ...]


def _vocab_size(vocab: Union[int, Vocab]) -> int:
    return Vocab(vocab).size if isinstance(vocab, int) else vocab.size


def all_contexts(vocab_size: int, order: int) -> list[Context]:
    """Every context reachable from an empty prefix, BOS-heaviest first."""
    out: list[Context] = []
    for n_real in range(order + 1):
        pad = (BOS,) * (order - n_real)
        out.extend(pad + tail for tail in itertools.product(range(vocab_size), repeat=n_real))
    return out


@dataclass(frozen=True, eq=False)
class TabularLM:
    vocab_size: int
    order: int
    table: Mapping[Context, np.ndarray]
    eos: Optional[int] = None
    seed: Optional[int] = None
    _uniform: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.eos is not None and not 0 <= self.eos < self.vocab_size:
            raise ValueError(f"eos {self.eos} outside vocab")
        table = {}
        for ctx, d in self.table.items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) != self.order:
                raise ValueError(f"context {ctx} has length != order {self.order}")
            table[ctx] = as_dist(d, self.vocab_size)
        object.__setattr__(self, "table", table)
        uniform = np.full(self.vocab_size, 1.0 / self.vocab_size)
        uniform.setflags(write=False)
        object.__setattr__(self, "_uniform", uniform)

    def context(self, prefix: Sequence[int]) -> Context:
        for t in prefix:
            if not 0 <= t < self.vocab_size:
                raise ValueError(f"token {t} outside vocab of size {self.vocab_size}")
        if self.order == 0:
            return ()
        tail = tuple(int(t) for t in prefix[-self.order:])
        return (BOS,) * (self.order - len(tail)) + tail

    def dist_at(self, ctx: Context) -> np.ndarray:
        # unseen contexts fall back to uniform so the model stays total
        return self.table.get(ctx, self._uniform)

    def next_dist(self, prefix: Sequence[int]) -> np.ndarray:
        return self.dist_at(self.context(prefix))

    def contexts(self) -> list[Context]:
        return all_contexts(self.vocab_size, self.order)


def next_dist(m: TabularLM, prefix: Sequence[int]) -> np.ndarray:
    return m.next_dist(prefix)


def extend_context(ctx: Context, token: int) -> Context:
    if not ctx:
        return ctx
    return ctx[1:] + (token,)


@dataclass(frozen=True)
class SyntheticTask:
    truth: TabularLM
    small: TabularLM
    large: TabularLM
    partition: Optional[Mapping[Context, bool]] = None  # True where small is favored

    def __post_init__(self):
        shapes = {(m.vocab_size, m.order) for m in (self.truth, self.small, self.large)}
        if len(shapes) != 1:
            raise ValueError("truth, small and large must share vocab and order")

    @property
    def vocab_size(self) -> int:
        return self.truth.vocab_size

    @property
    def order(self) -> int:
        return self.truth.order


def build_random_truth(
    vocab: Union[int, Vocab], order: int, seed: int, eos: Optional[int] = None
) -> TabularLM:
    """Draw every context's distribution from a symmetric Dirichlet(1)."""
    size = _vocab_size(vocab)
    rng = np.random.default_rng(seed)
    table = {ctx: rng.dirichlet(np.ones(size)) for ctx in all_contexts(size, order)}
    return TabularLM(size, order, table, eos=eos, seed=seed)


def _perturb(d: np.ndarray, noise: float, smoothing: float, rng: np.random.Generator) -> np.ndarray:
    draw = rng.dirichlet(np.ones(d.shape[0]))
    out = (1.0 - noise) * d + noise * draw
    if smoothing:
        out = (out + smoothing) / (out.sum() + smoothing * d.shape[0])
    return out / out.sum()


def derive_model(truth: TabularLM, noise: float, smoothing: float, seed: int) -> TabularLM:
    """Noisy, smoothed copy of `truth`: larger `noise` gives a worse model.

    Per context the truth distribution is mixed with an independent
    Dirichlet(1) draw at weight `noise`, then add-`smoothing` smoothed.
    """
    if not 0 <= noise <= 1:
        raise ValueError(f"noise must be in [0, 1], got {noise}")
    if smoothing < 0:
        raise ValueError(f"smoothing must be >= 0, got {smoothing}")
    if noise == 0 and smoothing == 0:
        return TabularLM(truth.vocab_size, truth.order, truth.table, eos=truth.eos, seed=seed)
    rng = np.random.default_rng(seed)
    table = {
        ctx: _perturb(truth.dist_at(ctx), noise, smoothing, rng) for ctx in truth.contexts()
    }
    return TabularLM(truth.vocab_size, truth.order, table, eos=truth.eos, seed=seed)


def calibrate(d: Sequence[float], truth_d: Sequence[float]) -> np.ndarray:
    """Rescale `d` so its max probability equals ``truth_d[mode(d)]``.

    The mode is kept: lowering the peak mixes toward uniform, raising it
    mixes toward the one-hot at the mode.  If the true accuracy is at most
    1/V no distribution can match it and the uniform one is returned.
    """
    d = np.asarray(d, dtype=float)
    k, top = mode(d)
    acc = float(truth_d[k])
    v = len(d)
    if acc <= 1.0 / v:
        return np.full(v, 1.0 / v)
    if acc <= top:
        lam = (acc - 1.0 / v) / (top - 1.0 / v)
        out = lam * d + (1.0 - lam) / v
    else:
        lam = (1.0 - acc) / (1.0 - top)
        out = lam * d
        out[k] += 1.0 - lam
    return out / out.sum()


def build_partitioned_task(
    vocab: Union[int, Vocab],
    order: int,
    frac_small_favored: float,
    noise_small: float,
    noise_large: float,
    seed: int,
    smoothing: float = 0.0,
    eos: Optional[int] = None,
    calibrated: bool = False,
) -> SyntheticTask:
    """Task where each model is exact on its own share of the contexts.

    Contexts are split stratum by stratum (a stratum is the set of contexts
    with the same amount of BOS padding), taking ``round(frac * n)`` of each
    stratum as small-favored.  There the small model equals the truth and
    the large one is perturbed with `noise_large`; elsewhere the roles swap.

    With `calibrated`, every perturbed distribution is passed through
    :func:`calibrate`, so both models' max probability equals the true
    accuracy of their prediction (where that is attainable).
    """
    if not 0 <= frac_small_favored <= 1:
        raise ValueError("frac_small_favored must be in [0, 1]")
    size = _vocab_size(vocab)
    truth_seed, split_seed, small_seed, large_seed = (
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(4)
    )
    truth = build_random_truth(size, order, truth_seed, eos=eos)
    truth = TabularLM(size, order, truth.table, eos=eos, seed=seed)
    noisy_small = derive_model(truth, noise_small, smoothing, small_seed)
    noisy_large = derive_model(truth, noise_large, smoothing, large_seed)

    rng = np.random.default_rng(split_seed)
    partition: dict[Context, bool] = {}
    for n_real in range(order + 1):
        stratum = [c for c in truth.contexts() if sum(t != BOS for t in c) == n_real]
        k = math.floor(frac_small_favored * len(stratum) + 0.5)
        chosen = set(rng.permutation(len(stratum))[:k].tolist())
        partition.update((c, i in chosen) for i, c in enumerate(stratum))

    def noisy(m: TabularLM, c: Context):
        d = m.dist_at(c)
        return calibrate(d, truth.dist_at(c)) if calibrated else d

    small = {c: truth.dist_at(c) if fav else noisy(noisy_small, c) for c, fav in partition.items()}
    large = {c: noisy(noisy_large, c) if fav else truth.dist_at(c) for c, fav in partition.items()}
    return SyntheticTask(
        truth=truth,
        small=TabularLM(size, order, small, eos=eos, seed=small_seed),
        large=TabularLM(size, order, large, eos=eos, seed=large_seed),
        partition=partition,
    )


def step_loss(model_dist: Sequence[float], truth_dist: Sequence[float], loss: str) -> float:
    """Expected loss of predicting with `model_dist` when tokens follow `truth_dist`."""
    if loss == "0-1":
        return 1.0 - float(truth_dist[mode(model_dist)[0]])
    if loss == "log":
        return cross_entropy(truth_dist, model_dist)
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def expected_step_loss(m: TabularLM, truth: TabularLM, prefix: Sequence[int], loss: str) -> float:
    if m.vocab_size != truth.vocab_size:
        raise ValueError("model and truth vocabularies differ")
    return step_loss(m.next_dist(prefix), truth.next_dist(prefix), loss)


# -- plain-text serialization -------------------------------------------------

_HEADER = "# speccascade tabular-lm v1"


def _fmt_opt(x: Optional[int]) -> str:
    return "none" if x is None else str(x)


def _parse_opt(s: str) -> Optional[int]:
    return None if s == "none" else int(s)


def dumps_model(m: TabularLM) -> str:
    lines = [
        _HEADER,
        f"vocab_size {m.vocab_size}",
        f"order {m.order}",
        f"eos {_fmt_opt(m.eos)}",
        f"seed {_fmt_opt(m.seed)}",
    ]
    for ctx in sorted(m.table):
        key = " ".join("^" if t == BOS else str(t) for t in ctx) or "-"
        probs = " ".join(f"{x:.17g}" for x in m.table[ctx])
        lines.append(f"context {key} : {probs}")
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> TabularLM:
    header: dict[str, str] = {}
    table: dict[Context, list[float]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "context":
            ctx_text, sep, probs = rest.partition(":")
            if not sep:
                raise ValueError(f"line {lineno}: missing ':' in context line")
            toks = ctx_text.split()
            ctx = () if toks == ["-"] else tuple(BOS if t == "^" else int(t) for t in toks)
            table[ctx] = [float(x) for x in probs.split()]
        elif key in ("vocab_size", "order", "eos", "seed"):
            header[key] = rest.strip()
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    missing = {"vocab_size", "order"} - header.keys()
    if missing:
        raise ValueError(f"missing header fields: {sorted(missing)}")
    return TabularLM(
        int(header["vocab_size"]),
        int(header["order"]),
        table,
        eos=_parse_opt(header.get("eos", "none")),
        seed=_parse_opt(header.get("seed", "none")),
    )


def save_model(m: TabularLM, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_model(m))


def load_model(path: Union[str, Path]) -> TabularLM:
    return loads_model(Path(path).read_text())


def sample_tokens(
    m: TabularLM,
    prefix: Iterable[int],
    length: int,
    rng: np.random.Generator,
    allow_eos: bool = True,
) -> list[int]:
    """Ancestral sampling of `length` tokens after `prefix` (no temperature)."""
    seq = list(prefix)
    out = []
    for _ in range(length):
        d = m.next_dist(seq)
        if not allow_eos and m.eos is not None:
            d = d.copy()
            d[m.eos] = 0.0
            d = d / d.sum() if d.sum() > 0 else np.full_like(d, 1.0 / d.size)
        tok = int(rng.choice(m.vocab_size, p=d))
        seq.append(tok)
        out.append(tok)
        if allow_eos and tok == m.eos:
            break
    return out
