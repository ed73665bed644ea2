"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The verdict lines are also gathered into the ``acceptance criteria`` section
of the pytest terminal summary. Run alone with::

    pytest tests/test_acceptance.py -v
"""

import json
import math
import time
from pathlib import Path

import numpy as np
from scipy import integrate, stats

import rprm
from rprm import corpus, synth, tpp
from rprm.cli import main, run_gradcheck
from rprm.evaluation import evaluate, r_squared, rmse
from rprm.models import Model, ModelConfig, ModelKind
from rprm.training import TrainConfig, train
from tests.conftest import ACCEPTANCE_RESULTS
from tests.helpers import bow, random_sequence, seq_from

DATA = Path(rprm.__file__).parent / "data"
GOLDEN = Path(__file__).parent / "data" / "fixture_stats.golden.json"


def verdict(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    ACCEPTANCE_RESULTS.append(line)
    assert ok, line


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_gradient_correctness():
    with Timer() as t:
        reports = run_gradcheck(d=4, e=4, V=10, length=3, seed=0, h=1e-5, tol=1e-5)
    worst = {k: r.worst for k, r in reports.items()}
    ok = all(r.ok for r in reports.values()) and t.seconds < 10
    verdict("gradient correctness", ok,
            ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f"; {t.seconds:.1f} s (limit 10 s)")


def test_likelihood_closed_form_vs_quadrature():
    rng = np.random.default_rng(2024)
    a = rng.uniform(-2, 2, 100)
    w = rng.uniform(-1, 1, 100)
    w[:20] = rng.uniform(-1e-8, 1e-8, 20)  # Taylor branch
    w[20:25] = [0.0, 1e-8, -1e-8, 1.0000001e-8, -0.9999999e-8]
    delta = rng.uniform(0.01, 5, 100)
    errs = []
    with Timer() as t:
        for ai, wi, di in zip(a, w, delta):
            lam = lambda s: math.exp(ai + wi * s)  # noqa: E731
            cum, _ = integrate.quad(lam, 0.0, di, epsabs=1e-14, epsrel=1e-13)
            ref = math.log(lam(di) * math.exp(-cum))
            errs.append(abs(tpp.log_density(tpp.GapDistribution(ai, wi), di) - ref))
    worst = max(errs)
    verdict("likelihood vs quadrature", worst < 1e-9 and t.seconds < 5,
            f"max abs err {worst:.1e} over 100 triples (25 with |w| <= 1e-8); {t.seconds:.2f} s (limit 5 s)")


def test_sampler_correctness():
    rng = np.random.default_rng(7)
    n = 10_000
    pvals = []
    with Timer() as t:
        for _ in range(10):
            a, w = rng.uniform(-1, 1), rng.uniform(-1, 1)
            x = tpp.sample_gaps(np.full(n, a), np.full(n, w), rng)
            p0 = float(tpp.defect_mass(a, w))
            ev = x[np.isfinite(x)]
            # conditional on an event the CDF is (1 - S) / (1 - p0)
            cdf = lambda d: -np.expm1(-tpp.cumulative_intensity(a, w, d)) / (1.0 - p0)  # noqa: E731
            pvals.append(stats.kstest(ev, cdf).pvalue)
        # the 1% mean tolerance is 1 standard error at 1e4 draws, so the mean check uses 1e6
        m = tpp.sample_gaps(np.full(10**6, math.log(2)), np.zeros(10**6), rng).mean()
    ok = min(pvals) > 0.01 and abs(m - 0.5) / 0.5 < 0.01 and t.seconds < 30
    verdict("sampler correctness", ok,
            f"min KS p-value {min(pvals):.3f} over 10 pairs x 1e4; mean(a=ln2, w=0) = {m:.5f}; {t.seconds:.1f} s")


def test_poisson_parameter_recovery():
    spec = synth.SynthSpec(kind="poisson", n_sequences=200, length=50, rate=0.2, vocab_size=10, seed=7)
    seqs = synth.generate(spec)
    tr, va = corpus.split(seqs, 0.9, 0)
    cfg = TrainConfig(variant="rpp", d=8, e=4, V=10, lr=0.01, batch_size=20, max_epochs=60, patience=10, seed=0)
    with Timer() as t:
        model = train(cfg, tr, va).model
    fresh = synth.generate(synth.SynthSpec(kind="poisson", n_sequences=50, length=50, rate=0.2, vocab_size=10, seed=8))
    H = np.concatenate([model.hidden_states(s)[10:] for s in fresh])  # post-burn-in states
    lam = np.exp(H @ model.store["tpp.v"] + model.store["tpp.b"])
    err = abs(lam.mean() - 0.2) / 0.2
    verdict("Poisson recovery", err < 0.05 and t.seconds < 600,
            f"mean predicted intensity {lam.mean():.4f} (target 0.2, rel err {err:.1%}, "
            f"w = {float(model.store['tpp.w']):.2e}); {t.seconds:.1f} s")


def test_mark_dependent_ordering():
    spec = synth.SynthSpec(kind="mark_dependent", n_sequences=1200, length=20, vocab_size=20, words_per_review=4,
                           seed=3)
    seqs = synth.generate(spec)
    train_all, test = seqs[:1000], seqs[1000:]
    tr, va = corpus.split(train_all, 0.9, 0)
    target = np.concatenate([np.diff(s.times) for s in test])
    bayes = rmse(np.concatenate([synth.bayes_gap_predictions(spec, s) for s in test]), target)
    scores = {}
    with Timer() as t:
        for v in ("rprm", "lstm_bow", "rpp", "lstm"):
            cfg = TrainConfig(variant=v, d=16, e=8, V=20, lr=0.01, batch_size=50, max_epochs=40, patience=5, seed=0)
            scores[v] = evaluate(train(cfg, tr, va).model, test).rmse
    text_better = all(scores[a] < scores[b] for a in ("rprm", "lstm_bow") for b in ("rpp", "lstm"))
    near_bayes = scores["rprm"] <= 1.15 * bayes
    verdict("mark-dependent ordering", text_better and near_bayes and t.seconds < 900,
            ", ".join(f"{k} {v:.3f}" for k, v in scores.items())
            + f"; Bayes {bayes:.3f} (RPRM/Bayes = {scores['rprm'] / bayes:.3f}); {t.seconds:.0f} s")


def test_perplexity_anchors():
    rng = np.random.default_rng(5)
    V = 50
    test = [random_sequence(rng, int(rng.integers(2, 9)), V, p_word=0.2) for _ in range(30)]
    uni = Model.init(ModelConfig(ModelKind.RPRM, d=4, e=3, V=V), seed=1, text_init="uniform")
    rep = evaluate(uni, test)
    inv = [1 / j for s in test for j in range(1, len(s)) if s.reviews[j].bow.total_words]
    hist_expected = V ** (sum(inv) / len(inv))
    e1 = abs(rep.pred_perplexity_perword - V) / V
    e2 = abs(rep.pred_perplexity_paper - hist_expected) / hist_expected

    data = [seq_from([2.0 * j for j in range(10)], [bow({0: 3})] * 10, f"c{k}") for k in range(20)]
    cfg = TrainConfig(variant="rprm", d=8, e=4, V=10, lr=0.05, batch_size=5, max_epochs=100, patience=100, seed=0)
    fitted = evaluate(train(cfg, data, data).model, data).pred_perplexity_perword
    verdict("perplexity anchors", e1 < 1e-6 and e2 < 1e-6 and fitted < 1.1,
            f"uniform per-word {rep.pred_perplexity_perword:.9f} (V={V}), history-normalized form rel err {e2:.1e}; "
            f"degenerate corpus per-word {fitted:.5f}")


def test_metric_units():
    r1 = rmse([1, 3], [2, 5])
    t = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0])
    r2 = r_squared(np.full_like(t, t.mean()), t)
    ok = abs(r1 - math.sqrt(2.5)) <= 1e-12 and abs(r2) <= 1e-12
    verdict("metric unit tests", ok, f"rmse {r1!r} vs sqrt(2.5); r2(mean predictor) {r2!r}")


def test_preprocessing_golden(tmp_path):
    argv = ["preprocess", "--input", str(DATA / "fixture_reviews.jsonl"),
            "--business-file", str(DATA / "fixture_business.jsonl"), "--category", "shopping"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    got = (tmp_path / "a" / "stats.json").read_bytes()
    stable = got == (tmp_path / "b" / "stats.json").read_bytes()
    golden = GOLDEN.read_bytes()
    s = json.loads(got)["all"]
    verdict("preprocessing golden file", stable and got == golden,
            f"{s['reviews']} reviews, {s['items']} items, {s['mean_reviews_per_item']} reviews/item, "
            f"{s['mean_words_per_review']} words/review; byte-identical to golden: {got == golden}")


def test_end_to_end_determinism(tmp_path):
    def pipeline(root):
        assert main(["preprocess", "--input", str(DATA / "fixture_reviews.jsonl"),
                     "--business-file", str(DATA / "fixture_business.jsonl"), "--category", "shopping",
                     "--min-reviews", "3", "--seed", "1", "--out", str(root / "data")]) == 0
        assert main(["train", "--data", str(root / "data" / "train.jsonl"), "--variant", "rprm", "--seed", "1",
                     "--set", "d=8", "--set", "e=8", "--set", "max_epochs=10", "--set", "lr=0.01",
                     "--out", str(root / "model")]) == 0
        assert main(["evaluate", "--checkpoint", str(root / "model" / "checkpoint.json"),
                     "--data", str(root / "data" / "test.jsonl"), "--out", str(root / "eval")]) == 0
        return (root / "eval" / "metrics.jsonl").read_bytes()

    with Timer() as t:
        a = pipeline(tmp_path / "run1")
        b = pipeline(tmp_path / "run2")
    verdict("end-to-end determinism", a == b and t.seconds < 1200,
            f"metrics files identical: {a == b} ({len(a)} bytes); {t.seconds:.1f} s")
