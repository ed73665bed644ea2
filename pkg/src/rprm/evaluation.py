"""RMSE and R^2 on inter-review gaps, predictive perplexity on review text.

All reductions use :func:`math.fsum`, so metrics do not depend on batch
composition and a duplicated test set yields the same report.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import ItemSequence
from .models import Model

DISPLAY_NAMES = {"lstm": "LSTM", "rpp": "RPP", "lstm_bow": "LSTM-BoW", "rprm": "RPRM"}


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise ValueError("no predictions")
    return p, t


def rmse(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    return math.sqrt(math.fsum((p - t) ** 2) / p.size)


def r_squared(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    if p.size < 2:
        raise ValueError("r_squared needs at least 2 targets")
    mean = math.fsum(t) / t.size
    ss_tot = math.fsum((t - mean) ** 2)
    if ss_tot == 0.0:
        raise ValueError("targets have zero variance")
    return 1.0 - math.fsum((p - t) ** 2) / ss_tot


def predictive_perplexity_paper(review_logliks, review_sizes, history_sizes) -> float:
    """``exp(-(1/T) sum_j loglik_j / (|H_j| * M_j))`` over ``T`` scored reviews.

    ``review_logliks[j]`` is the summed word log-probability of review ``j``,
    ``review_sizes[j]`` its word count and ``history_sizes[j]`` the number of
    reviews preceding it.
    """
    ll = np.asarray(review_logliks, dtype=np.float64)
    M = np.asarray(review_sizes, dtype=np.float64)
    Hs = np.asarray(history_sizes, dtype=np.float64)
    if not ll.size or ll.shape != M.shape or ll.shape != Hs.shape:
        raise ValueError("need equally sized, nonempty per-review arrays")
    if np.any(M < 1):
        raise ValueError("reviews without words must be excluded before scoring")
    if np.any(Hs < 1):
        raise ValueError("history sizes must be at least 1")
    return math.exp(-math.fsum(ll / (Hs * M)) / ll.size)


def predictive_perplexity_perword(total_loglik: float, total_words: int) -> float:
    if total_words < 1:
        raise ValueError("need at least one word")
    return math.exp(-total_loglik / total_words)


@dataclass
class MetricReport:
    variant: str
    rmse: float
    r2: Optional[float]  # None when the targets have zero variance
    pred_perplexity_paper: Optional[float]
    pred_perplexity_perword: Optional[float]
    n_predictions: int
    n_words: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TeacherForced:
    """Per-step quantities gathered from true-history predictions."""

    predicted_gaps: np.ndarray
    target_gaps: np.ndarray
    text_loglik: np.ndarray  # summed word log-probs of each scored review
    words: np.ndarray  # word count of each scored review
    history: np.ndarray  # reviews preceding each scored review


def teacher_forced(model: Model, sequences: Sequence[ItemSequence], batch_size: int = 128) -> TeacherForced:
    preds, targets, lls, words, hist = [], [], [], [], []
    for start in range(0, len(sequences), batch_size):
        chunk = list(sequences[start:start + batch_size])
        r = model.forward(chunk)
        pm = r.pred_mask
        Hv = r.H[:, :-1][pm]
        preds.append(model.predict_gaps_from_states(Hv))
        gaps = np.zeros_like(r.time_ll)
        w = np.zeros_like(r.time_ll)
        for b, seq in enumerate(chunk):
            t = np.asarray(seq.times)
            gaps[b, :len(seq) - 1] = np.diff(t)
            w[b, :len(seq) - 1] = [rv.bow.total_words for rv in seq.reviews[1:]]
        targets.append(gaps[pm])
        lls.append(r.text_ll[pm])
        words.append(w[pm])
        hist.append(np.nonzero(pm)[1] + 1.0)
    cat = np.concatenate
    return TeacherForced(cat(preds), cat(targets), cat(lls), cat(words), cat(hist))


def evaluate(model: Model, test_set: Sequence[ItemSequence], batch_size: int = 128) -> MetricReport:
    """Metrics over predictions of reviews 2..N of every test sequence."""
    if not test_set:
        raise ValueError("empty test set")
    tf = teacher_forced(model, test_set, batch_size)
    pp_paper = pp_word = None
    n_words = int(tf.words.sum())
    if model.kind.has_text_head:
        scored = tf.words >= 1
        if np.any(scored):
            pp_paper = predictive_perplexity_paper(tf.text_loglik[scored], tf.words[scored], tf.history[scored])
            pp_word = predictive_perplexity_perword(math.fsum(tf.text_loglik[scored]), n_words)
    try:
        r2 = r_squared(tf.predicted_gaps, tf.target_gaps)
    except ValueError:
        r2 = None
    return MetricReport(
        variant=model.kind.value,
        rmse=rmse(tf.predicted_gaps, tf.target_gaps),
        r2=r2,
        pred_perplexity_paper=pp_paper,
        pred_perplexity_perword=pp_word,
        n_predictions=int(tf.predicted_gaps.size),
        n_words=n_words,
    )


def write_metrics(path: str | Path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_metrics(path: str | Path) -> list[MetricReport]:
    with open(path, encoding="utf-8") as fh:
        return [MetricReport(**json.loads(line)) for line in fh if line.strip()]


def comparison_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text table with one row per model; ``-`` marks absent text metrics."""
    header = f"{'Model':<10}{'RMSE':>12}{'R^2':>10}{'Pred. Perplexity':>18}{'Per-word PP':>14}"
    lines = [header, "-" * len(header)]

    def fmt(x):
        return "-" if x is None else f"{x:.2f}"

    for r in reports:
        lines.append(
            f"{DISPLAY_NAMES.get(r.variant, r.variant):<10}{r.rmse:>12.4f}"
            f"{'-' if r.r2 is None else format(r.r2, '.4f'):>10}"
            f"{fmt(r.pred_perplexity_paper):>18}{fmt(r.pred_perplexity_perword):>14}"
        )
    return "\n".join(lines) + "\n"
