"""Synthetic review streams with known generating processes.

* ``poisson``: i.i.d. exponential gaps.
* ``hawkes``: exponential-kernel self-excitation, simulated by Ogata thinning.
* ``mark_dependent``: every review carries the token ``fast`` or ``slow``; the
  gap to the next review is exponential with mean ``fast_mean`` or
  ``slow_mean`` accordingly. Timing is therefore predictable only from text.

Each sequence draws from its own generator spawned from the spec seed.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .corpus import BowVector, ItemSequence, Review, Vocabulary

FAST, SLOW = 0, 1


class SynthKind(str, enum.Enum):
    POISSON = "poisson"
    HAWKES = "hawkes"
    MARK_DEPENDENT = "mark_dependent"


@dataclass(frozen=True)
class SynthSpec:
    kind: SynthKind = SynthKind.POISSON
    n_sequences: int = 100
    length: Optional[int] = 50  # events per sequence; None generates up to ``horizon``
    horizon: Optional[float] = None
    min_len: int = 2  # horizon mode drops shorter sequences; 0 keeps every one
    rate: float = 0.2
    mu: float = 0.5
    alpha: float = 0.4
    beta: float = 1.0
    fast_mean: float = 1.0
    slow_mean: float = 20.0
    vocab_size: int = 20
    words_per_review: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SynthKind(self.kind))
        if (self.length is None) == (self.horizon is None):
            raise ValueError("set exactly one of length and horizon")
        if self.length is not None and self.length < 1:
            raise ValueError("length must be positive")
        if self.horizon is not None and not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if min(self.rate, self.mu, self.beta, self.fast_mean, self.slow_mean) <= 0 or self.alpha < 0:
            raise ValueError("rates and means must be positive")
        if self.alpha / self.beta >= 1:
            raise ValueError("Hawkes branching ratio alpha/beta must be below 1")
        min_vocab = 3 if self.kind is SynthKind.MARK_DEPENDENT else 1
        if self.vocab_size < min_vocab or self.words_per_review < 0 or self.n_sequences < 1:
            raise ValueError("invalid vocabulary, review length or sequence count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


def vocabulary(spec: SynthSpec) -> Vocabulary:
    if spec.kind is SynthKind.MARK_DEPENDENT:
        filler = Vocabulary.synthetic(spec.vocab_size - 2).tokens
        return Vocabulary(("fast", "slow") + filler, (0,) * spec.vocab_size)
    return Vocabulary.synthetic(spec.vocab_size)


def _rngs(spec: SynthSpec) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(spec.n_sequences)]


def _uniform_bow(rng, n_words: int, low: int, high: int, extra: Optional[int] = None) -> BowVector:
    counts: dict[int, int] = {}
    for i in rng.integers(low, high, n_words) if n_words and high > low else ():
        counts[int(i)] = counts.get(int(i), 0) + 1
    if extra is not None:
        counts[extra] = counts.get(extra, 0) + 1
    return BowVector.from_counts(counts)


def poisson_times(rate: float, rng: np.random.Generator, n: Optional[int] = None,
                  horizon: Optional[float] = None) -> np.ndarray:
    """Arrival times on ``[0, inf)``: first ``n`` of them, or all up to ``horizon``."""
    if n is not None:
        return np.cumsum(rng.exponential(1.0 / rate, n))
    times = []
    t = rng.exponential(1.0 / rate)
    while t <= horizon:
        times.append(t)
        t += rng.exponential(1.0 / rate)
    return np.asarray(times)


def hawkes_times(mu: float, alpha: float, beta: float, rng: np.random.Generator,
                 n: Optional[int] = None, horizon: Optional[float] = None) -> np.ndarray:
    """Ogata thinning for ``mu + sum_i alpha * exp(-beta (t - t_i))``.

    The kernel only decays between events, so the intensity at the current
    time bounds it until the next acceptance. The bound is recomputed after
    every candidate, accepted or not.
    """
    times = []
    t = 0.0
    excite = 0.0  # sum of kernel terms at time t
    while n is None or len(times) < n:
        bound = mu + excite
        w = rng.exponential(1.0 / bound)
        t += w
        if horizon is not None and t > horizon:
            break
        excite *= np.exp(-beta * w)
        if rng.uniform() * bound <= mu + excite:
            times.append(t)
            excite += alpha
    return np.asarray(times)


def _to_sequence(prefix: str, k: int, times, bows) -> ItemSequence:
    return ItemSequence(f"{prefix}{k:05d}", tuple(Review(float(t), b) for t, b in zip(times, bows)))


def _keep(spec: SynthSpec, seq: ItemSequence) -> bool:
    return spec.length is not None or len(seq) >= spec.min_len


def gen_poisson(spec: SynthSpec) -> list[ItemSequence]:
    out = []
    for k, rng in enumerate(_rngs(spec)):
        times = poisson_times(spec.rate, rng, spec.length, spec.horizon)
        bows = [_uniform_bow(rng, spec.words_per_review, 0, spec.vocab_size) for _ in times]
        seq = _to_sequence("poisson-", k, times, bows)
        if _keep(spec, seq):
            out.append(seq)
    return out


def gen_hawkes(spec: SynthSpec) -> list[ItemSequence]:
    out = []
    for k, rng in enumerate(_rngs(spec)):
        times = hawkes_times(spec.mu, spec.alpha, spec.beta, rng, spec.length, spec.horizon)
        bows = [_uniform_bow(rng, spec.words_per_review, 0, spec.vocab_size) for _ in times]
        seq = _to_sequence("hawkes-", k, times, bows)
        if _keep(spec, seq):
            out.append(seq)
    return out


def gen_mark_dependent(spec: SynthSpec) -> list[ItemSequence]:
    """Marker token per review, fair coin; filler words uniform over the rest."""
    out = []
    for k, rng in enumerate(_rngs(spec)):
        times, bows = [], []
        t = 0.0
        while True:
            marker = FAST if rng.uniform() < 0.5 else SLOW
            times.append(t)
            bows.append(_uniform_bow(rng, spec.words_per_review, 2, spec.vocab_size, extra=marker))
            if spec.length is not None and len(times) == spec.length:
                break
            t += rng.exponential(spec.fast_mean if marker == FAST else spec.slow_mean)
            if spec.horizon is not None and t > spec.horizon:
                break
        seq = _to_sequence("marked-", k, times, bows)
        if _keep(spec, seq):
            out.append(seq)
    return out


def generate(spec: SynthSpec) -> list[ItemSequence]:
    return {
        SynthKind.POISSON: gen_poisson,
        SynthKind.HAWKES: gen_hawkes,
        SynthKind.MARK_DEPENDENT: gen_mark_dependent,
    }[spec.kind](spec)


def marker_of(review: Review) -> int:
    counts = review.bow.as_dict()
    if FAST in counts:
        return FAST
    if SLOW in counts:
        return SLOW
    raise ValueError("review carries no fast/slow marker")


def bayes_gap_predictions(spec: SynthSpec, seq: ItemSequence) -> np.ndarray:
    """Posterior-mean next gaps for reviews 2..N of a mark-dependent sequence."""
    return np.array([spec.fast_mean if marker_of(r) == FAST else spec.slow_mean for r in seq.reviews[:-1]])


def rescaled_gaps_poisson(times, rate: float) -> np.ndarray:
    return rate * np.diff(np.concatenate([[0.0], times]))


def rescaled_gaps_hawkes(times, mu: float, alpha: float, beta: float) -> np.ndarray:
    """Compensator increments between consecutive events (starting at 0)."""
    out = np.empty(len(times))
    prev = 0.0
    kernel = 0.0  # sum_i exp(-beta (prev - t_i)) over past events
    for j, t in enumerate(times):
        gap = t - prev
        decay = np.exp(-beta * gap)
        out[j] = mu * gap + (alpha / beta) * kernel * (1.0 - decay)
        kernel = kernel * decay + 1.0
        prev = t
    return out
