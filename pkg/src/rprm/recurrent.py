"""LSTM recurrence over review events.

Each event is featurised as ``[log(1 + gap), E @ (counts / max(M, 1))]`` where
``gap`` is the time since the previous review (zero for the first one) and
``E`` is a learned ``e x V`` embedding. Gate pre-activations are stacked in
the order input, forget, candidate, output, each of size ``d``.

The batched functions work on zero-padded ``(B, T)`` arrays. Padding only
ever follows the valid events of a sequence, so it never influences them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import ItemSequence, Review
from .numerics import ParameterStore, check_finite


@dataclass
class CellParams:
    w_time: np.ndarray  # (4d,)
    w_in: np.ndarray  # (4d, e)
    w_rec: np.ndarray  # (4d, d)
    bias: np.ndarray  # (4d,)
    embed: Optional[np.ndarray] = None  # (e, V); None disables text input

    def __post_init__(self):
        d4 = self.bias.shape[0]
        if d4 % 4:
            raise ValueError("gate bias length must be a multiple of 4")
        d = d4 // 4
        if self.w_time.shape != (d4,) or self.w_rec.shape != (d4, d) or self.w_in.shape[0] != d4:
            raise ValueError("inconsistent LSTM parameter shapes")
        if self.embed is not None and self.embed.shape[0] != self.w_in.shape[1]:
            raise ValueError("embedding rows must match the input width")

    @property
    def hidden_size(self) -> int:
        return self.bias.shape[0] // 4

    @property
    def embed_size(self) -> int:
        return self.w_in.shape[1]

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str = "cell.") -> "CellParams":
        return cls(
            store[prefix + "w_time"],
            store[prefix + "w_in"],
            store[prefix + "w_rec"],
            store[prefix + "bias"],
            store.values.get(prefix + "embed"),
        )

    @staticmethod
    def init_store(store: ParameterStore, d: int, e: int, V: int, rng: np.random.Generator,
                   text_input: bool = True, scale: float = 0.1, prefix: str = "cell.") -> None:
        if text_input:
            store.add(prefix + "embed", rng.uniform(-scale, scale, (e, V)))
        store.add(prefix + "w_time", rng.uniform(-scale, scale, 4 * d))
        store.add(prefix + "w_in", rng.uniform(-scale, scale, (4 * d, e)))
        store.add(prefix + "w_rec", rng.uniform(-scale, scale, (4 * d, d)))
        store.add(prefix + "bias", np.zeros(4 * d))


@dataclass
class HiddenState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "HiddenState":
        return cls(np.zeros(d), np.zeros(d))


@dataclass
class EventFeatures:
    time_feature: float
    bow_embedding: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def normalized_counts(review: Review, V: int) -> np.ndarray:
    x = np.zeros(V)
    if review.bow.indices:
        x[list(review.bow.indices)] = review.bow.counts
        x /= max(review.bow.total_words, 1)
    return x


def featurize(review: Review, prev_time: float, params: CellParams, vocab_size: int) -> EventFeatures:
    gap = review.time_days - prev_time
    if gap < 0:
        raise ValueError(f"negative gap {gap}")
    if params.embed is None:
        emb = np.zeros(params.embed_size)
    else:
        emb = params.embed @ normalized_counts(review, vocab_size)
    return EventFeatures(float(np.log1p(gap)), emb)


def _gates(z, c_prev):
    d = c_prev.shape[-1]
    i = _sigmoid(z[..., :d])
    f = _sigmoid(z[..., d:2 * d])
    g = np.tanh(z[..., 2 * d:3 * d])
    o = _sigmoid(z[..., 3 * d:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return i, f, g, o, c, tc


def step(params: CellParams, features: EventFeatures, state: HiddenState) -> HiddenState:
    z = (features.time_feature * params.w_time + params.w_in @ features.bow_embedding
         + params.w_rec @ state.h + params.bias)
    _, _, _, o, c, tc = _gates(z, state.c)
    h = o * tc
    check_finite("lstm step", h, c)
    return HiddenState(h, c)


def unroll(params: CellParams, sequence: ItemSequence, vocab_size: int) -> list[HiddenState]:
    states = []
    state = HiddenState.zeros(params.hidden_size)
    prev = sequence.reviews[0].time_days if sequence.reviews else 0.0
    for r in sequence.reviews:
        state = step(params, featurize(r, prev, params, vocab_size), state)
        states.append(state)
        prev = r.time_days
    return states


class EventBatch:
    """Padded arrays for a list of sequences.

    Attributes: ``mask`` (B, T) valid events; ``gaps`` (B, T) time since the
    previous event (0 for the first); ``time_feature`` = log1p(gaps);
    ``counts`` CSR (B*T, V) raw counts; ``norm_counts`` CSR normalised counts;
    ``words`` (B, T) word totals.
    """

    def __init__(self, sequences: Sequence[ItemSequence], vocab_size: int):
        if not sequences:
            raise ValueError("empty batch")
        self.sequences = list(sequences)
        self.vocab_size = vocab_size
        B = len(sequences)
        T = max(len(s) for s in sequences)
        self.B, self.T = B, T
        self.mask = np.zeros((B, T), dtype=bool)
        self.times = np.zeros((B, T))
        self.gaps = np.zeros((B, T))
        self.words = np.zeros((B, T))
        rows, cols, vals = [], [], []
        for b, seq in enumerate(sequences):
            n = len(seq)
            t = np.array(seq.times, dtype=np.float64)
            self.mask[b, :n] = True
            self.times[b, :n] = t
            if n > 1:
                self.gaps[b, 1:n] = np.diff(t)
            for j, r in enumerate(seq.reviews):
                if r.bow.indices:
                    idx = b * T + j
                    rows.extend([idx] * len(r.bow.indices))
                    cols.extend(r.bow.indices)
                    vals.extend(r.bow.counts)
                    self.words[b, j] = r.bow.total_words
        if np.any(self.gaps < 0):
            raise ValueError("negative gap in batch")
        if cols and max(cols) >= vocab_size:
            raise ValueError("bow index exceeds vocabulary size")
        self.time_feature = np.log1p(self.gaps)
        shape = (B * T, vocab_size)
        self.counts = sp.csr_matrix((np.asarray(vals, dtype=np.float64), (rows, cols)), shape=shape)
        self.counts.sum_duplicates()
        scale = 1.0 / np.maximum(self.words.reshape(-1), 1.0)
        self.norm_counts = sp.csr_matrix(sp.diags(scale) @ self.counts)


@dataclass
class LSTMCache:
    x_emb: np.ndarray  # (B, T, e)
    H: np.ndarray  # (B, T, d)
    C: np.ndarray  # (B, T, d)
    gates: list  # per step (i, f, g, o, tanh(c))


def embed_inputs(params: CellParams, batch: EventBatch) -> np.ndarray:
    e = params.embed_size
    if params.embed is None:
        return np.zeros((batch.B, batch.T, e), dtype=params.bias.dtype)
    return np.asarray(batch.norm_counts @ params.embed.T).reshape(batch.B, batch.T, e)


def lstm_forward(params: CellParams, batch: EventBatch) -> LSTMCache:
    B, T, d = batch.B, batch.T, params.hidden_size
    dt = params.bias.dtype
    x_emb = embed_inputs(params, batch)
    # input contributions for every step at once
    z_in = (batch.time_feature[..., None] * params.w_time
            + x_emb @ params.w_in.T + params.bias)
    H = np.zeros((B, T, d), dtype=dt)
    C = np.zeros((B, T, d), dtype=dt)
    h = np.zeros((B, d), dtype=dt)
    c = np.zeros((B, d), dtype=dt)
    gates = []
    for j in range(T):
        z = z_in[:, j] + h @ params.w_rec.T
        i, f, g, o, c, tc = _gates(z, c)
        h = o * tc
        H[:, j] = h
        C[:, j] = c
        gates.append((i, f, g, o, tc))
    check_finite("lstm forward", H, C)
    return LSTMCache(x_emb, H, C, gates)


def lstm_backward(params: CellParams, batch: EventBatch, cache: LSTMCache, dH: np.ndarray,
                  prefix: str = "cell.") -> dict[str, np.ndarray]:
    """Backpropagate ``dLoss/dH`` through time into the cell parameters."""
    B, T, d = batch.B, batch.T, params.hidden_size
    dZ = np.zeros((B, T, 4 * d))
    dh_next = np.zeros((B, d))
    dc_next = np.zeros((B, d))
    for j in range(T - 1, -1, -1):
        i, f, g, o, tc = cache.gates[j]
        c_prev = cache.C[:, j - 1] if j > 0 else np.zeros((B, d))
        dh = dH[:, j] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate(
            [dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f), dc * i * (1.0 - g * g), do * o * (1.0 - o)],
            axis=1,
        )
        dZ[:, j] = dz
        dh_next = dz @ params.w_rec
        dc_next = dc * f
    H_prev = np.concatenate([np.zeros((B, 1, d)), cache.H[:, :-1]], axis=1)
    dZf = dZ.reshape(B * T, 4 * d)
    grads = {
        prefix + "w_time": dZf.T @ batch.time_feature.reshape(-1),
        prefix + "w_in": dZf.T @ cache.x_emb.reshape(B * T, -1),
        prefix + "w_rec": dZf.T @ H_prev.reshape(B * T, d),
        prefix + "bias": dZf.sum(axis=0),
    }
    if params.embed is not None:
        dX = dZf @ params.w_in  # (B*T, e)
        grads[prefix + "embed"] = np.asarray((batch.norm_counts.T @ dX).T)
    return grads
