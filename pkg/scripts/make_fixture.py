"""Regenerate the bundled review fixture in src/rprm/data/.

The fixture mimics the shape of the public Yelp dump: a review file with
business_id, date and text fields, and a separate business file carrying the
comma-separated categories. It contains 200 well-formed review records plus
two malformed lines, items below the 5-review cutoff, reviews outside the
default date window, non-shopping businesses and one duplicated timestamp.
"""

import json
import random
from datetime import datetime, timedelta
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "rprm" / "data"

WORDS = (
    "great service friendly staff price prices store shop selection quality "
    "clean helpful rude slow fast cheap expensive returned bought found "
    "shoes dress gift jacket books mall parking checkout line manager sale "
    "discount love hate recommend again never always nice awesome terrible"
).split()
FILLER = ["the", "and", "a", "was", "is", "to", "of", "it", "i", "they"]


def review_text(rng):
    n = rng.randint(3, 25)
    toks = [rng.choice(WORDS) if rng.random() < 0.7 else rng.choice(FILLER) for _ in range(n)]
    text = " ".join(toks).capitalize()
    return text + rng.choice([".", "!", "...", "?!"])


def main():
    rng = random.Random(2019)
    businesses = []
    for k in range(30):
        cats = "Shopping, Fashion" if k < 20 else "Restaurants, Food"
        if k in (3, 7):
            cats = "Shopping"
        businesses.append((f"biz{k:02d}", cats))
    # reviews per business; sums to 200, several below 5
    counts = [16, 14, 13, 11, 12, 9, 9, 8, 8, 8, 7, 7, 6, 6, 5, 4, 3, 2, 1, 1,
              8, 7, 6, 6, 6, 5, 4, 3, 3, 2]
    assert sum(counts) == 200
    start = datetime(2015, 11, 1)
    reviews = []
    for (bid, _), n in zip(businesses, counts):
        for _ in range(n):
            ts = start + timedelta(seconds=rng.randrange(0, 3 * 365 * 86400 + 120 * 86400))
            reviews.append({"business_id": bid, "date": ts.strftime("%Y-%m-%d %H:%M:%S"),
                            "text": review_text(rng), "stars": rng.randint(1, 5)})
    # a duplicated timestamp inside one item
    first = next(r for r in reviews if r["business_id"] == "biz00")
    second = [r for r in reviews if r["business_id"] == "biz00"][1]
    second["date"] = first["date"]
    rng.shuffle(reviews)
    lines = [json.dumps(r, sort_keys=True) for r in reviews]
    lines.insert(50, '{"business_id": "biz01", "date": "not a date", "text": "bad"}')
    lines.insert(120, '{"business_id": "biz02", "text": "truncated')
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "fixture_reviews.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (OUT / "fixture_business.jsonl").write_text(
        "".join(json.dumps({"business_id": b, "categories": c}, sort_keys=True) + "\n" for b, c in businesses),
        encoding="utf-8",
    )


if __name__ == "__main__":
    main()
