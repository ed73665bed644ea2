"""The four model variants sharing one recurrent cell.

========  ==========  =========  ==========================
kind      text input  text head  gap head
========  ==========  =========  ==========================
rprm      yes         yes        exponential-form intensity
lstm_bow  yes         yes        exponential distribution
rpp       no          no         exponential-form intensity
lstm      no          no         exponential distribution
========  ==========  =========  ==========================

A sequence of ``N`` reviews contributes ``N - 1`` prediction steps: the state
after review ``j`` scores the gap to review ``j + 1`` and (with a text head)
its words. The per-sequence loss is the summed negative log-likelihood; batch
losses average over sequences.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tpp
from .corpus import BowVector, ItemSequence, Review
from .numerics import NonFiniteError, ParameterStore, check_finite, load_checkpoint, save_checkpoint
from .recurrent import CellParams, EventBatch, HiddenState, featurize, lstm_backward, lstm_forward, step, unroll
from .textmodel import TextHead, text_loglik_terms, word_log_probs

MIN_RATE = 1e-6


class ModelKind(str, enum.Enum):
    RPRM = "rprm"
    LSTM_BOW = "lstm_bow"
    RPP = "rpp"
    LSTM = "lstm"

    @property
    def uses_text_input(self) -> bool:
        return self in (ModelKind.RPRM, ModelKind.LSTM_BOW)

    @property
    def has_text_head(self) -> bool:
        return self in (ModelKind.RPRM, ModelKind.LSTM_BOW)

    @property
    def intensity_head(self) -> bool:
        return self in (ModelKind.RPRM, ModelKind.RPP)


class UnsupportedCapability(RuntimeError):
    pass


@dataclass
class ModelConfig:
    kind: ModelKind
    d: int = 64
    e: int = 64
    V: int = 2000
    # "rate": lambda_phi is the exponential rate; "mean": it is the mean gap
    exp_head_param: str = "rate"
    # point estimate for intensity heads: "mean" (conditional) or "median"
    gap_estimate: str = "mean"
    clamp: bool = True
    quadrature: tpp.QuadratureConfig = field(default_factory=tpp.QuadratureConfig)

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if min(self.d, self.e, self.V) < 1:
            raise ValueError("model dimensions must be positive")
        if self.exp_head_param not in ("rate", "mean"):
            raise ValueError("exp_head_param must be 'rate' or 'mean'")
        if self.gap_estimate not in ("mean", "median"):
            raise ValueError("gap_estimate must be 'mean' or 'median'")

    def meta(self) -> dict:
        return {
            "kind": self.kind.value, "d": self.d, "e": self.e, "V": self.V,
            "exp_head_param": self.exp_head_param, "gap_estimate": self.gap_estimate,
            "clamp": self.clamp,
        }


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardResult:
    loss: float  # mean over sequences of the summed NLL
    time_ll: np.ndarray  # (B, T-1), zero where no prediction
    text_ll: np.ndarray  # (B, T-1)
    pred_mask: np.ndarray  # (B, T-1)
    H: np.ndarray
    clamped: int
    grads: Optional[dict]


class Model:
    def __init__(self, config: ModelConfig, store: ParameterStore):
        self.config = config
        self.store = store

    @property
    def kind(self) -> ModelKind:
        return self.config.kind

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, text_init: str = "random", scale: float = 0.1) -> "Model":
        """Uniform(-scale, scale) weights, zero biases, time slope -0.1.

        ``text_init="uniform"`` starts the text head at ``R = 0, b = 0``.
        """
        rng = np.random.default_rng(seed)
        d, e, V = config.d, config.e, config.V
        k = config.kind
        store = ParameterStore()
        CellParams.init_store(store, d, e, V, rng, text_input=k.uses_text_input, scale=scale)
        if k.intensity_head:
            store.add("tpp.v", rng.uniform(-scale, scale, d))
            store.add("tpp.w", -0.1)
            store.add("tpp.b", 0.0)
        else:
            store.add("exp.w1", rng.uniform(-scale, scale, (d, d)))
            store.add("exp.b1", np.zeros(d))
            store.add("exp.w2", rng.uniform(-scale, scale, d))
            store.add("exp.b2", 0.0)
        if k.has_text_head:
            if text_init == "uniform":
                store.add("text.R", np.zeros((d, V)))
            elif text_init == "random":
                store.add("text.R", rng.uniform(-scale, scale, (d, V)))
            else:
                raise ValueError(f"unknown text_init {text_init!r}")
            store.add("text.b", np.zeros(V))
        return cls(config, store)

    # ------------------------------------------------------------------ loss

    def forward(self, sequences: Sequence[ItemSequence] | EventBatch, with_grad: bool = False,
                store: Optional[ParameterStore] = None) -> ForwardResult:
        store = store or self.store
        batch = sequences if isinstance(sequences, EventBatch) else EventBatch(sequences, self.config.V)
        if batch.vocab_size != self.config.V:
            raise ValueError(f"batch vocabulary size {batch.vocab_size} != model V {self.config.V}")
        k = self.kind
        cell = CellParams.from_store(store)
        cache = lstm_forward(cell, batch)
        B, T = batch.B, batch.T
        H = cache.H
        pm = batch.mask[:, 1:]
        Hv = H[:, :-1][pm]  # (n, d) states that make a prediction
        delta = batch.gaps[:, 1:][pm]
        scale = 1.0 / B
        grads = {} if with_grad else None
        dHv = np.zeros_like(Hv)
        clamped = 0

        if k.intensity_head:
            v, w, bt = store["tpp.v"], store["tpp.w"][()], store["tpp.b"][()]
            a = Hv @ v + bt
            logf, da, dw, clamped = tpp.gap_loglik_terms(a, w, delta, clamp=self.config.clamp)
            check_finite("gap log-density", logf)
            time_terms = logf
            if with_grad:
                ga = -scale * da
                grads["tpp.v"] = Hv.T @ ga
                grads["tpp.b"] = np.array(ga.sum())
                grads["tpp.w"] = np.array(-scale * dw.sum())
                dHv += ga[:, None] * v
        else:
            W1, b1, w2, b2 = store["exp.w1"], store["exp.b1"], store["exp.w2"], store["exp.b2"][()]
            q = np.tanh(Hv @ W1.T + b1)
            s = q @ w2 + b2
            lam = _softplus(s) + MIN_RATE
            if self.config.exp_head_param == "rate":
                time_terms = np.log(lam) - lam * delta
                dll_dlam = 1.0 / lam - delta
            else:
                time_terms = -np.log(lam) - delta / lam
                dll_dlam = -1.0 / lam + delta / lam**2
            check_finite("exponential gap log-density", time_terms)
            if with_grad:
                gs = -scale * dll_dlam * _sigmoid(s)
                grads["exp.w2"] = q.T @ gs
                grads["exp.b2"] = np.array(gs.sum())
                dz1 = (gs[:, None] * w2) * (1.0 - q * q)
                grads["exp.w1"] = dz1.T @ Hv
                grads["exp.b1"] = dz1.sum(axis=0)
                dHv += dz1 @ W1

        if k.has_text_head:
            bi, ji = np.nonzero(pm)
            rows = bi * T + ji + 1
            counts = batch.counts[rows]
            R, bw = store["text.R"], store["text.b"]
            text_terms, tg = text_loglik_terms(R, bw, Hv, counts, with_grad)
            check_finite("text log-likelihood", text_terms)
            if with_grad:
                dR, db, dHt = tg
                grads["text.R"] = -scale * dR
                grads["text.b"] = -scale * db
                dHv -= scale * dHt
        else:
            text_terms = np.zeros_like(time_terms)

        time_ll = np.zeros((B, T - 1), dtype=time_terms.dtype)
        text_ll = np.zeros((B, T - 1), dtype=time_terms.dtype)
        time_ll[pm] = time_terms
        text_ll[pm] = text_terms
        # kept as a numpy scalar so extended-precision stores stay extended
        loss = -(time_terms.sum() + text_terms.sum()) * scale

        if with_grad:
            dH = np.zeros_like(H)
            dH[:, :-1][pm] = dHv
            grads.update(lstm_backward(cell, batch, cache, dH))
            for name, g in grads.items():
                check_finite(f"gradient of {name}", g)
        return ForwardResult(loss, time_ll, text_ll, pm, H, clamped, grads)

    def objective(self, sequences: Sequence[ItemSequence]):
        batch = EventBatch(sequences, self.config.V)

        def fn(store: ParameterStore, with_grad: bool):
            r = self.forward(batch, with_grad, store)
            return r.loss, r.grads

        return fn

    def sequence_loss(self, seq: ItemSequence) -> float:
        if len(seq) < 2:
            raise ValueError("sequence_loss needs at least 2 reviews")
        return self.forward([seq]).loss

    def per_sequence_nll(self, sequences: Sequence[ItemSequence], batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(sequences), batch_size):
            r = self.forward(sequences[i:i + batch_size])
            out.append(-(r.time_ll.sum(axis=1) + r.text_ll.sum(axis=1)))
        return np.concatenate(out)

    def mean_loss(self, sequences: Sequence[ItemSequence], batch_size: int = 256) -> float:
        return math.fsum(self.per_sequence_nll(sequences, batch_size)) / len(sequences)

    # ------------------------------------------------------------ prediction

    def hidden_states(self, seq: ItemSequence) -> np.ndarray:
        return self.forward([seq]).H[0, :len(seq)]

    def _last_state(self, prefix: ItemSequence) -> np.ndarray:
        if len(prefix) < 1:
            raise ValueError("prefix must contain at least one review")
        return self.hidden_states(prefix)[-1]

    def gap_distribution(self, h: np.ndarray) -> tpp.GapDistribution:
        s = self.store
        return tpp.GapDistribution(float(h @ s["tpp.v"] + s["tpp.b"]), float(s["tpp.w"]))

    def exponential_rate(self, h: np.ndarray):
        s = self.store
        q = np.tanh(h @ s["exp.w1"].T + s["exp.b1"])
        lam = _softplus(q @ s["exp.w2"] + s["exp.b2"]) + MIN_RATE
        return lam if self.config.exp_head_param == "rate" else 1.0 / lam

    def predict_gaps_from_states(self, H: np.ndarray) -> np.ndarray:
        """Point predictions of the next gap for each row of ``H``."""
        H = np.atleast_2d(H)
        if self.kind.intensity_head:
            s = self.store
            a = H @ s["tpp.v"] + s["tpp.b"]
            w = np.full_like(a, float(s["tpp.w"]))
            if self.config.gap_estimate == "median":
                return tpp.median_gaps(a, w)
            mean, _ = tpp.expected_gaps(a, w, self.config.quadrature)
            return mean
        return 1.0 / self.exponential_rate(H)

    def predict_next_gap(self, prefix: ItemSequence) -> float:
        return float(self.predict_gaps_from_states(self._last_state(prefix))[0])

    def predict_next_text(self, prefix: ItemSequence) -> np.ndarray:
        if not self.kind.has_text_head:
            raise UnsupportedCapability(f"{self.kind.value} has no text head")
        h = self._last_state(prefix)
        return np.exp(word_log_probs(TextHead.from_store(self.store), h))

    def simulate(self, prefix: ItemSequence, horizon: float, rng: np.random.Generator,
                 review_lengths: Sequence[int] = (1,), max_events: int = 100_000) -> list[tuple[float, BowVector]]:
        """Sample events after ``prefix`` until ``horizon`` days past its last review.

        Gaps come from the model's gap head; each review's length is drawn from
        ``review_lengths`` and its words i.i.d. from the next-text distribution.
        Models without a text head emit empty bags of words.
        """
        if horizon <= 0:
            return []
        cell = CellParams.from_store(self.store)
        V = self.config.V
        state = unroll(cell, prefix, V)[-1]
        t = prefix.reviews[-1].time_days
        end = t + horizon
        lengths = np.asarray(review_lengths, dtype=np.int64)
        head = TextHead.from_store(self.store) if self.kind.has_text_head else None
        events = []
        while len(events) < max_events:
            if self.kind.intensity_head:
                gap = tpp.sample_gap(self.gap_distribution(state.h), rng)
                if gap is None:
                    break
            else:
                gap = rng.exponential(1.0 / float(self.exponential_rate(state.h)))
            t_next = t + gap
            if t_next > end:
                break
            if head is not None:
                M = int(rng.choice(lengths))
                p = np.exp(word_log_probs(head, state.h))
                counts = rng.multinomial(M, p / p.sum())
                bow = BowVector.from_counts({int(i): int(c) for i, c in enumerate(counts) if c})
            else:
                bow = BowVector()
            review = Review(t_next, bow)
            events.append((t_next, bow))
            state = step(cell, featurize(review, t, cell, V), state)
            t = t_next
        return events

    # ------------------------------------------------------------ checkpoint

    def save(self, path: str | Path, opt=None, extra: Optional[dict] = None) -> None:
        meta = {"model": self.config.meta()}
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.store, opt, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        store, _, meta = load_checkpoint(path)
        m = meta["model"]
        config = ModelConfig(
            kind=m["kind"], d=m["d"], e=m["e"], V=m["V"],
            exp_head_param=m["exp_head_param"], gap_estimate=m["gap_estimate"], clamp=m["clamp"],
        )
        return cls(config, store)


def step_terms_reference(model: Model, seq: ItemSequence) -> tuple[list[float], list[float]]:
    """Per-step log-likelihood terms from the single-step reference path.

    Uses :func:`recurrent.unroll`, :func:`tpp.log_density` and
    :func:`textmodel.bow_log_likelihood` one review at a time; no clamping.
    """
    from .textmodel import bow_log_likelihood

    cell = CellParams.from_store(model.store)
    states = unroll(cell, seq, model.config.V)
    time_terms, text_terms = [], []
    for j in range(len(seq) - 1):
        h = states[j].h
        delta = seq.reviews[j + 1].time_days - seq.reviews[j].time_days
        if model.kind.intensity_head:
            time_terms.append(tpp.log_density(model.gap_distribution(h), delta))
        else:
            lam = float(model.exponential_rate(h))
            time_terms.append(np.log(lam) - lam * delta)
        if model.kind.has_text_head:
            text_terms.append(bow_log_likelihood(TextHead.from_store(model.store), h, seq.reviews[j + 1].bow))
        else:
            text_terms.append(0.0)
    return time_terms, text_terms
