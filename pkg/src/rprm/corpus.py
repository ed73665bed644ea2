"""Review ingestion, tokenization, vocabulary construction and event sequences.

The preprocessed dataset is stored as JSON lines: a header record holding the
format tag, version and vocabulary, followed by one record per item sequence::

    {"format": "rprm-dataset", "version": 1, "epoch": "2016-01-01T00:00:00",
     "vocabulary": {"tokens": [...], "doc_freq": [...]}}
    {"item_id": "b1", "times": [0.0, 3.25], "bows": [[[4, 2], [17, 1]], []]}

Each bow is a list of ``[index, count]`` pairs sorted by index.
"""

from __future__ import annotations

import json
import math
import random
import re
import string
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

DATASET_FORMAT = "rprm-dataset"
DATASET_VERSION = 1
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
TIE_EPSILON_DAYS = 1e-6

DEFAULT_STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because
    been before being below between both but by can could did do does doing
    down during each few for from further had has have having he her here hers
    herself him himself his how i if in into is it its itself just me more most
    my myself no nor not now of off on once only or other our ours ourselves
    out over own same she should so some such than that the their theirs them
    themselves then there these they this those through to too under until up
    very was we were what when where which while who whom why will with would
    you your yours yourself yourselves
    """.split()
)

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_WS = re.compile(r"\s+")


class MalformedRecordWarning(UserWarning):
    """A review record could not be parsed and was skipped."""


class SmallVocabularyWarning(UserWarning):
    """Fewer eligible tokens than the requested vocabulary size."""


@dataclass(frozen=True)
class RawReview:
    item_id: str
    timestamp: datetime
    text: str

    def __post_init__(self):
        if not self.item_id:
            raise ValueError("item_id must be non-empty")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    doc_freq: tuple[int, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.doc_freq):
            raise ValueError("tokens and doc_freq differ in length")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        width = len(str(size - 1))
        return cls(tuple(f"w{i:0{width}d}" for i in range(size)), (0,) * size)


@dataclass(frozen=True)
class BowVector:
    """Sparse word counts of one review over a fixed vocabulary."""

    indices: tuple[int, ...] = ()
    counts: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.indices) != len(self.counts):
            raise ValueError("indices and counts differ in length")
        if any(c < 1 for c in self.counts):
            raise ValueError("bow counts must be positive")
        if list(self.indices) != sorted(set(self.indices)):
            raise ValueError("bow indices must be unique and sorted")

    @property
    def total_words(self) -> int:
        return sum(self.counts)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.indices, self.counts))

    @classmethod
    def from_counts(cls, counts: dict[int, int]) -> "BowVector":
        items = sorted((i, c) for i, c in counts.items() if c > 0)
        return cls(tuple(i for i, _ in items), tuple(c for _, c in items))


EMPTY_BOW = BowVector()


@dataclass(frozen=True)
class Review:
    time_days: float
    bow: BowVector = EMPTY_BOW

    def __post_init__(self):
        if not self.time_days >= 0:
            raise ValueError(f"time_days must be nonnegative, got {self.time_days}")


@dataclass(frozen=True)
class ItemSequence:
    item_id: str
    reviews: tuple[Review, ...]

    def __post_init__(self):
        times = [r.time_days for r in self.reviews]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"reviews of {self.item_id!r} are not strictly increasing in time")

    def __len__(self) -> int:
        return len(self.reviews)

    @property
    def times(self) -> list[float]:
        return [r.time_days for r in self.reviews]

    def prefix(self, k: int) -> "ItemSequence":
        return ItemSequence(self.item_id, self.reviews[:k])


def tokenize(text: str) -> list[str]:
    """Lowercase, replace punctuation by spaces and split on whitespace."""
    return [t for t in _WS.split(text.lower().translate(_PUNCT_TABLE)) if t]


def build_vocabulary(
    corpus: Iterable[Sequence[str]],
    V: int,
    stopwords: Iterable[str] = DEFAULT_STOPWORDS,
) -> Vocabulary:
    """Keep the ``V`` tokens with the highest document frequency.

    Ties are broken lexicographically. Stopwords are removed before ranking.
    """
    if V < 1:
        raise ValueError("vocabulary size must be at least 1")
    stop = set(stopwords)
    df: Counter[str] = Counter()
    for doc in corpus:
        df.update(set(doc) - stop)
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < V:
        warnings.warn(
            f"only {len(ranked)} eligible tokens for a vocabulary of size {V}",
            SmallVocabularyWarning,
            stacklevel=2,
        )
    ranked = ranked[:V]
    return Vocabulary(tuple(t for t, _ in ranked), tuple(n for _, n in ranked))


def to_bow(tokens: Iterable[str], vocab: Vocabulary) -> BowVector:
    counts = Counter(vocab.index[t] for t in tokens if t in vocab.index)
    return BowVector.from_counts(counts)


def _parse_date(value: date | str) -> date:
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value
    return date.fromisoformat(value)


def _label_set(categories) -> set[str]:
    if not categories:
        return set()
    if isinstance(categories, str):
        categories = categories.split(",")
    return {c.strip().lower() for c in categories if c.strip()}


def load_business_categories(path: str | Path) -> dict[str, set[str]]:
    """Map business_id to its category labels from a business records file."""
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                mapping[str(rec["business_id"])] = _label_set(rec.get("categories"))
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError):
                warnings.warn(f"{path}:{lineno}: malformed business record", MalformedRecordWarning, stacklevel=2)
    return mapping


def ingest(
    path: str | Path,
    window_start: date | str,
    window_end: date | str,
    category_filter: str | None = None,
    business_categories: dict[str, set[str]] | None = None,
) -> list[RawReview]:
    """Read review records and keep those inside the inclusive date window.

    The window end is a calendar day, so every timestamp on that day is kept.
    Categories come from the record itself or, failing that, from
    ``business_categories``. Malformed lines are skipped with a
    :class:`MalformedRecordWarning` each.
    """
    start = datetime.combine(_parse_date(window_start), datetime.min.time())
    stop = datetime.combine(_parse_date(window_end), datetime.min.time()) + timedelta(days=1)
    wanted = category_filter.strip().lower() if category_filter else None
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                item_id = rec["business_id"]
                if not isinstance(item_id, str) or not item_id:
                    raise TypeError("business_id")
                ts = datetime.strptime(rec["date"], TIMESTAMP_FORMAT)
                text = rec["text"]
                if not isinstance(text, str):
                    raise TypeError("text")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                warnings.warn(f"{path}:{lineno}: skipped malformed record ({exc})", MalformedRecordWarning, stacklevel=2)
                continue
            if not start <= ts < stop:
                continue
            if wanted is not None:
                labels = _label_set(rec.get("categories"))
                if not labels and business_categories is not None:
                    labels = business_categories.get(item_id, set())
                if wanted not in labels:
                    continue
            out.append(RawReview(item_id, ts, text))
    return out


def group_by_item(raws: Iterable[RawReview], min_len: int = 1) -> dict[str, list[RawReview]]:
    """Group reviews by item, sort each group by time and drop short groups.

    Equal timestamps keep their input order. The result is ordered by item id.
    """
    groups: dict[str, list[RawReview]] = defaultdict(list)
    for r in raws:
        groups[r.item_id].append(r)
    return {
        k: sorted(v, key=lambda r: r.timestamp)
        for k, v in sorted(groups.items())
        if len(v) >= min_len
    }


def _break_ties(times: list[float]) -> list[float]:
    out = []
    run = 0
    for i, t in enumerate(times):
        run = run + 1 if i and t == times[i - 1] else 0
        t = t + run * TIE_EPSILON_DAYS
        if out and t <= out[-1]:
            t = out[-1] + TIE_EPSILON_DAYS
        out.append(t)
    return out


def assemble_sequences(
    raws: Iterable[RawReview],
    vocab: Vocabulary,
    epoch: date | datetime | str,
    min_len: int = 5,
) -> list[ItemSequence]:
    if min_len < 1:
        raise ValueError("min_len must be positive")
    origin = epoch if isinstance(epoch, datetime) else datetime.combine(_parse_date(epoch), datetime.min.time())
    sequences = []
    for item_id, group in group_by_item(raws, min_len).items():
        days = [(r.timestamp - origin).total_seconds() / 86400.0 for r in group]
        days = _break_ties(days)
        reviews = tuple(Review(t, to_bow(tokenize(r.text), vocab)) for t, r in zip(days, group))
        sequences.append(ItemSequence(item_id, reviews))
    return sequences


def split(items: Sequence, train_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded item-level partition into train and test lists.

    The train side gets ``round(n * train_fraction)`` items, clipped so both
    sides are nonempty. Input order is preserved within each side.
    """
    n = len(items)
    if n < 2:
        raise ValueError("need at least 2 sequences to split")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = min(max(round(n * train_fraction), 1), n - 1)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    chosen = set(order[:n_train])
    train = [x for i, x in enumerate(items) if i in chosen]
    test = [x for i, x in enumerate(items) if i not in chosen]
    return train, test


def corpus_stats(sequences: Sequence[ItemSequence], token_counts: Sequence[int] | None = None) -> dict:
    """Counts and moments of reviews per item and words per review.

    ``token_counts`` holds the raw token count of every review (before
    vocabulary truncation) in sequence order; when omitted, in-vocabulary
    word totals are used for the per-review word statistics.
    """
    lengths = [len(s) for s in sequences]
    bow_words = [r.bow.total_words for s in sequences for r in s.reviews]
    words = list(token_counts) if token_counts is not None else bow_words

    def mean_std(xs):
        if not xs:
            return 0.0, 0.0
        m = sum(xs) / len(xs)
        return m, math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))

    m_len, s_len = mean_std(lengths)
    m_w, s_w = mean_std(words)
    return {
        "items": len(sequences),
        "reviews": sum(lengths),
        "words": sum(words),
        "vocabulary_words": sum(bow_words),
        "mean_reviews_per_item": round(m_len, 6),
        "std_reviews_per_item": round(s_len, 6),
        "mean_words_per_review": round(m_w, 6),
        "std_words_per_review": round(s_w, 6),
    }


def save_dataset(path: str | Path, vocab: Vocabulary, sequences: Sequence[ItemSequence], epoch: str = "") -> None:
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "epoch": epoch,
        "vocabulary": {"tokens": list(vocab.tokens), "doc_freq": list(vocab.doc_freq)},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for seq in sequences:
            rec = {
                "item_id": seq.item_id,
                "times": [r.time_days for r in seq.reviews],
                "bows": [[[i, c] for i, c in zip(r.bow.indices, r.bow.counts)] for r in seq.reviews],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[Vocabulary, list[ItemSequence]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not an {DATASET_FORMAT} file")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
        voc = header["vocabulary"]
        vocab = Vocabulary(tuple(voc["tokens"]), tuple(voc["doc_freq"]))
        sequences = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            reviews = tuple(
                Review(float(t), BowVector(tuple(i for i, _ in bow), tuple(c for _, c in bow)))
                for t, bow in zip(rec["times"], rec["bows"])
            )
            for r in reviews:
                if r.bow.indices and r.bow.indices[-1] >= len(vocab):
                    raise ValueError(f"{path}: bow index out of vocabulary range")
            sequences.append(ItemSequence(rec["item_id"], reviews))
    return vocab, sequences
