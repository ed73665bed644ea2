"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Log verbosity comes
from ``RPRM_LOG_LEVEL`` (default ``WARNING``). Every command that writes an
output directory also writes ``manifest.json`` with the resolved arguments,
configuration, seed and package version.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import corpus, evaluation, synth
from .models import Model, ModelConfig, ModelKind, UnsupportedCapability
from .numerics import grad_check
from .training import TrainConfig, TrainingAborted, train

log = logging.getLogger("rprm")


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _plain(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _manifest(out: Path, command: str, args: dict, config: dict | None = None, seed: int | None = None) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "arguments": {k: _plain(v) for k, v in sorted(args.items()) if k not in ("func", "command")},
        "config": config or {},
        "seed": seed,
        "version": __version__,
    })


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_stopwords(spec: str | None):
    if spec is None:
        return corpus.DEFAULT_STOPWORDS
    if spec == "none":
        return frozenset()
    return frozenset(w.strip().lower() for w in Path(spec).read_text(encoding="utf-8").split() if w.strip())


def cmd_preprocess(args) -> int:
    business = corpus.load_business_categories(args.business_file) if args.business_file else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", corpus.MalformedRecordWarning)
        raws = corpus.ingest(args.input, args.date_from, args.date_to, args.category, business)
    malformed = sum(issubclass(w.category, corpus.MalformedRecordWarning) for w in caught)
    for w in caught:
        log.warning("%s", w.message)
    groups = corpus.group_by_item(raws, args.min_reviews)
    if len(groups) < 2:
        raise RuntimeError(f"only {len(groups)} items with at least {args.min_reviews} reviews; cannot split")
    train_ids, test_ids = corpus.split(list(groups), args.train_fraction, args.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", corpus.SmallVocabularyWarning)
        vocab = corpus.build_vocabulary(
            (corpus.tokenize(r.text) for i in train_ids for r in groups[i]), args.vocab_size,
            _load_stopwords(args.stopwords),
        )
    for w in caught:
        log.warning("%s", w.message)
    epoch = args.epoch or args.date_from
    out = _outdir(args.out)
    stats = {"malformed_records": malformed, "vocab_size": len(vocab), "window": [args.date_from, args.date_to],
             "category": args.category, "epoch": epoch}
    for name, ids in (("train", train_ids), ("test", test_ids)):
        rows = [r for i in ids for r in groups[i]]
        seqs = corpus.assemble_sequences(rows, vocab, epoch, args.min_reviews)
        corpus.save_dataset(out / f"{name}.jsonl", vocab, seqs, epoch=str(epoch))
        tokens = [len(corpus.tokenize(r.text)) for i in ids for r in groups[i]]
        stats[name] = corpus.corpus_stats(seqs, tokens)
    all_rows = [r for rs in groups.values() for r in rs]
    stats["all"] = corpus.corpus_stats(corpus.assemble_sequences(all_rows, vocab, epoch, args.min_reviews),
                                       [len(corpus.tokenize(r.text)) for r in all_rows])
    _write_json(out / "stats.json", stats)
    _manifest(out, "preprocess", vars(args), seed=args.seed)
    print(json.dumps(stats["all"], sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    spec = synth.SynthSpec(
        kind=args.kind, n_sequences=args.n_sequences,
        length=None if args.horizon is not None else args.length, horizon=args.horizon,
        rate=args.rate, mu=args.mu, alpha=args.alpha, beta=args.beta,
        vocab_size=args.vocab_size, words_per_review=args.words_per_review, seed=args.seed,
    )
    seqs = synth.generate(spec)
    vocab = synth.vocabulary(spec)
    out = _outdir(args.out)
    n_test = args.n_test if args.n_test is not None else round(0.2 * len(seqs))
    if not 0 < n_test < len(seqs):
        raise UsageError("--n-test must leave both splits nonempty")
    corpus.save_dataset(out / "train.jsonl", vocab, seqs[:-n_test])
    corpus.save_dataset(out / "test.jsonl", vocab, seqs[-n_test:])
    _manifest(out, "synth", vars(args), config=spec.to_dict(), seed=args.seed)
    return 0


def _parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def _train_config(args, V: int) -> TrainConfig:
    values = {}
    if args.config:
        doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
            raise UsageError("config file must be a flat key: value mapping")
        values.update(doc)
    values.update(_parse_overrides(args.set))
    values["variant"] = args.variant
    values["V"] = V
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    vocab, seqs = corpus.load_dataset(args.data)
    config = _train_config(args, len(vocab))
    seqs = [s for s in seqs if len(s) >= 2]
    if len(seqs) < 2:
        raise RuntimeError("need at least 2 sequences with 2 or more reviews")
    train_set, val_set = corpus.split(seqs, 1.0 - config.val_fraction, config.seed)
    out = _outdir(args.out)
    _manifest(out, "train", vars(args), config=config.to_dict(), seed=config.seed)
    try:
        result = train(config, train_set, val_set)
        status = 0
    except TrainingAborted as exc:
        log.error("training aborted: %s", exc)
        print(f"error: training aborted: {exc}", file=sys.stderr)
        result = exc.last_good
        status = 1
    rep = result.report
    result.model.save(out / "checkpoint.json", result.optimizer,
                      extra={"best_epoch": rep.best_epoch, "train_config": config.to_dict()})
    with open(out / "train_log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"epoch": 0, "train_nll": rep.initial_train_nll, "val_nll": rep.initial_val_nll}) + "\n")
        for e in rep.epochs:
            fh.write(json.dumps({"epoch": e.epoch, "train_nll": e.train_nll, "val_nll": e.val_nll,
                                 "clamp_events": e.clamp_events, "clip_events": e.clip_events,
                                 "best_epoch": rep.best_epoch}) + "\n")
    return status


def _load_compatible(checkpoint, data):
    model = Model.load(checkpoint)
    vocab, seqs = corpus.load_dataset(data)
    if len(vocab) != model.config.V:
        raise RuntimeError(f"{checkpoint}: model vocabulary size {model.config.V} != dataset size {len(vocab)}")
    return model, vocab, seqs


def cmd_evaluate(args) -> int:
    reports = []
    for ckpt in args.checkpoint:
        model, _, seqs = _load_compatible(ckpt, args.data)
        seqs = [s for s in seqs if len(s) >= 2]
        reports.append(evaluation.evaluate(model, seqs))
    out = _outdir(args.out)
    evaluation.write_metrics(out / "metrics.jsonl", reports)
    table = evaluation.comparison_table(reports)
    (out / "table.txt").write_text(table, encoding="utf-8")
    _manifest(out, "evaluate", vars(args))
    print(table, end="")
    return 0


def _select_prefix(seqs, item, prefix_len):
    if item is None:
        seq = seqs[0]
    else:
        matches = [s for s in seqs if s.item_id == item]
        if not matches:
            raise RuntimeError(f"item {item!r} not found")
        seq = matches[0]
    n = len(seq) if prefix_len is None else prefix_len
    if not 1 <= n <= len(seq):
        raise RuntimeError(f"prefix length {n} outside 1..{len(seq)}")
    return seq.prefix(n)


def cmd_predict(args) -> int:
    model, vocab, seqs = _load_compatible(args.checkpoint, args.data)
    prefix = _select_prefix(seqs, args.item, args.prefix_len)
    result = {"item_id": prefix.item_id, "prefix_len": len(prefix),
              "expected_gap_days": model.predict_next_gap(prefix)}
    try:
        probs = model.predict_next_text(prefix)
        top = np.argsort(-probs, kind="stable")[:args.k]
        result["top_words"] = [[vocab.tokens[i], float(probs[i])] for i in top]
    except UnsupportedCapability:
        result["top_words"] = None
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    model, _, seqs = _load_compatible(args.checkpoint, args.data)
    prefix = _select_prefix(seqs, args.item, args.prefix_len)
    lengths = [r.bow.total_words for s in seqs for r in s.reviews] or [1]
    events = model.simulate(prefix, args.horizon, np.random.default_rng(args.seed), lengths)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for t, bow in events:
            fh.write(json.dumps({"time": t, "bow": [[i, c] for i, c in zip(bow.indices, bow.counts)]}) + "\n")
    _manifest(out.parent, "simulate", vars(args), seed=args.seed)
    return 0


def gradcheck_sequence(rng: np.random.Generator, length: int, V: int, p_word: float = 0.3) -> corpus.ItemSequence:
    times = np.cumsum(rng.exponential(1.0, length))
    reviews = []
    for t in times:
        c = rng.binomial(1, p_word, V)
        reviews.append(corpus.Review(float(t), corpus.BowVector.from_counts({i: int(x) for i, x in enumerate(c) if x})))
    return corpus.ItemSequence("gradcheck", tuple(reviews))


def run_gradcheck(d=4, e=4, V=10, length=3, seed=0, h=1e-5, tol=1e-5, scale=0.5):
    """Finite-difference check of every variant's full loss; returns ``{kind: report}``.

    All slots, biases included, are drawn uniformly from ``(-scale, scale)``.
    """
    rng = np.random.default_rng(seed)
    seq = gradcheck_sequence(rng, length, V)
    reports = {}
    for kind in ModelKind:
        model = Model.init(ModelConfig(kind, d=d, e=e, V=V), seed=seed, scale=scale)
        # zero biases would make the first hidden state vanish and some slots' gradients trivially zero
        for name in model.store.names():
            x = model.store[name]
            x[...] = rng.uniform(-scale, scale, x.shape)
        reports[kind.value] = grad_check(model.objective([seq]), model.store, h=h, tolerance=tol,
                                         fd_dtype=np.longdouble)
    return reports


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(args.d, args.e, args.V, args.length, args.seed, args.h, args.tol)
    ok = True
    print(f"{'variant':<10}{'slot':<14}{'max rel err':>14}  status")
    for kind, rep in reports.items():
        for slot, err in rep.max_rel_error.items():
            status = "pass" if err < rep.tolerance else "FAIL"
            ok &= status == "pass"
            print(f"{kind:<10}{slot:<14}{err:>14.3e}  {status}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rprm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="review records -> train/test datasets and stats")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--business-file", type=Path)
    p.add_argument("--category")
    p.add_argument("--from", dest="date_from", default="2016-01-01")
    p.add_argument("--to", dest="date_to", default="2018-11-30")
    p.add_argument("--epoch", help="origin of the day axis (default: --from)")
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--min-reviews", type=int, default=5)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--stopwords", help="file of stopwords, or 'none' (default: built-in list)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=[k.value for k in synth.SynthKind], required=True)
    p.add_argument("--n-sequences", type=int, default=1200)
    p.add_argument("--n-test", type=int)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--horizon", type=float)
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--words-per-review", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="maximum-likelihood training")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--variant", required=True, choices=[k.value for k in ModelKind])
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="RMSE, R^2 and perplexities on a test set")
    p.add_argument("--checkpoint", required=True, nargs="+", type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="next gap and top-k words for an item prefix")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--item")
    p.add_argument("--prefix-len", type=int)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="sample future reviews after an item prefix")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--item")
    p.add_argument("--prefix-len", type=int)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all variants")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--e", type=int, default=4)
    p.add_argument("--V", type=int, default=10)
    p.add_argument("--length", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RPRM_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rprm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"rprm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
