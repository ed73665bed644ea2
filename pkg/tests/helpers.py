"""Small builders shared by the test modules."""

import numpy as np

from rprm.corpus import BowVector, ItemSequence, Review


def bow(counts):
    return BowVector.from_counts(dict(counts))


def seq_from(times, bows=None, item_id="s"):
    bows = bows or [BowVector()] * len(times)
    return ItemSequence(item_id, tuple(Review(float(t), b) for t, b in zip(times, bows)))


def random_sequence(rng, length, V, p_word=0.3, item_id="r"):
    """Exponential gaps and Bernoulli word presence with counts up to 3."""
    times = np.cumsum(rng.exponential(1.0, length))
    bows = []
    for _ in range(length):
        present = rng.random(V) < p_word
        counts = rng.integers(1, 4, V) * present
        bows.append(bow({i: int(c) for i, c in enumerate(counts) if c}))
    return seq_from(times, bows, item_id)
