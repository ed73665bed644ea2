"""Softmax word distribution conditioned on the hidden state.

Word logits are ``h @ R + b``; a review's words are scored independently
under the distribution produced by the state that precedes the review. The
multinomial coefficient is constant in the parameters and is left out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .corpus import BowVector
from .numerics import ParameterStore


@dataclass
class TextHead:
    R: np.ndarray  # (d, V)
    b: np.ndarray  # (V,)

    def __post_init__(self):
        if self.R.ndim != 2 or self.b.shape != (self.R.shape[1],):
            raise ValueError("text head shapes do not match")

    @property
    def vocab_size(self) -> int:
        return self.b.shape[0]

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str = "text.") -> "TextHead":
        return cls(store[prefix + "R"], store[prefix + "b"])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def word_log_probs(head: TextHead, h) -> np.ndarray:
    h = getattr(h, "h", h)
    return log_softmax(np.asarray(h) @ head.R + head.b)


def bow_log_likelihood(head: TextHead, h, bow: BowVector) -> float:
    if not bow.indices:
        return 0.0
    if bow.indices[-1] >= head.vocab_size:
        raise ValueError("bow index exceeds vocabulary size")
    logp = word_log_probs(head, h)
    return float(np.dot(np.asarray(bow.counts, dtype=np.float64), logp[list(bow.indices)]))


def text_loglik_terms(R: np.ndarray, b: np.ndarray, H: np.ndarray, counts: sp.csr_matrix, with_grad: bool = True):
    """Per-row multinomial log-likelihood of ``counts`` given states ``H``.

    Returns ``(ll, grads)`` where ``ll`` has one entry per row and ``grads``
    is ``(dR, db, dH)`` for the *sum* of ``ll`` (``None`` without grad).
    """
    logp = log_softmax(H @ R + b)
    ll = np.asarray(counts.multiply(logp).sum(axis=1)).reshape(-1)
    if not with_grad:
        return ll, None
    words = np.asarray(counts.sum(axis=1)).reshape(-1)
    dlogits = counts.toarray() - words[:, None] * np.exp(logp)
    return ll, (H.T @ dlogits, dlogits.sum(axis=0), dlogits @ R.T)
