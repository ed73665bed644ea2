"""Maximum-likelihood training with Adam, gradient clipping and early stopping."""

from __future__ import annotations

import copy
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .corpus import ItemSequence
from .models import Model, ModelConfig, ModelKind
from .numerics import NonFiniteError, OptimizerState, adam_step, backward, clip_grad_norm

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    variant: str = "rprm"
    d: int = 64
    e: int = 64
    V: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    clip_norm: float = 5.0
    clamp: bool = True
    val_fraction: float = 0.1
    max_len: int = 500
    init_scale: float = 0.1
    text_init: str = "random"
    exp_head_param: str = "rate"
    gap_estimate: str = "mean"

    def __post_init__(self):
        ModelKind(self.variant)
        if min(self.d, self.e, self.V, self.batch_size) < 1:
            raise ValueError("dimensions and batch size must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        defaults = cls()
        coerced = {}
        for k, v in values.items():
            kind = type(getattr(defaults, k))
            if kind is bool and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            coerced[k] = kind(v)
        return cls(**coerced)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            kind=self.variant, d=self.d, e=self.e, V=self.V, exp_head_param=self.exp_head_param,
            gap_estimate=self.gap_estimate, clamp=self.clamp,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    clamp_events: int
    clip_events: int
    wall_time: float = field(compare=False)


@dataclass
class TrainReport:
    initial_train_nll: float
    initial_val_nll: float
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0  # 0 means the initial parameters were never improved on
    best_val_nll: float = float("inf")
    stopped_early: bool = False

    @property
    def train_nll(self) -> list[float]:
        return [e.train_nll for e in self.epochs]

    @property
    def val_nll(self) -> list[float]:
        return [e.val_nll for e in self.epochs]


@dataclass
class TrainResult:
    model: Model
    optimizer: OptimizerState
    report: TrainReport


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: TrainResult):
        super().__init__(message)
        self.last_good = last_good


def _truncate(sequences: Sequence[ItemSequence], max_len: int) -> list[ItemSequence]:
    out = []
    for s in sequences:
        if len(s) > max_len:
            warnings.warn(f"sequence {s.item_id!r} truncated from {len(s)} to {max_len} events", stacklevel=3)
            s = s.prefix(max_len)
        out.append(s)
    return out


def evaluate_nll(model: Model, dataset: Sequence[ItemSequence], batch_size: int = 256) -> float:
    """Mean per-sequence negative log-likelihood; parameters are not modified."""
    if not dataset:
        raise ValueError("empty dataset")
    if any(len(s) < 2 for s in dataset):
        raise ValueError("every sequence needs at least 2 reviews")
    return model.mean_loss(list(dataset), batch_size)


def train(config: TrainConfig, train_set: Sequence[ItemSequence], val_set: Sequence[ItemSequence],
          init_model: Optional[Model] = None) -> TrainResult:
    """Fit a model by maximum likelihood.

    The returned model holds the parameters of the epoch with the lowest
    validation NLL (the initial parameters when no epoch improves on them).
    Training stops after ``patience`` epochs without improvement or at
    ``max_epochs``. Runs are deterministic given ``config.seed``.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    if any(len(s) < 2 for s in list(train_set) + list(val_set)):
        raise ValueError("every sequence needs at least 2 reviews")
    train_set = _truncate(train_set, config.max_len)
    val_set = _truncate(val_set, config.max_len)

    model = init_model or Model.init(config.model_config(), seed=config.seed, text_init=config.text_init,
                                     scale=config.init_scale)
    opt = OptimizerState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    opt.ensure(model.store)
    shuffle_rng = np.random.default_rng(config.seed + 1)

    report = TrainReport(evaluate_nll(model, train_set), evaluate_nll(model, val_set))
    report.best_val_nll = report.initial_val_nll
    best = TrainResult(Model(model.config, model.store.copy()), copy.deepcopy(opt), report)
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_set))
        total, clamps, clips = 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            stats = {}

            def objective(store, with_grad, chunk=chunk, stats=stats):
                r = model.forward(chunk, with_grad, store)
                stats["clamped"] = r.clamped
                return r.loss, r.grads

            try:
                loss = backward(objective, model.store)
                clips += clip_grad_norm(model.store, config.clip_norm)
                adam_step(model.store, opt)
            except (NonFiniteError, OverflowError) as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}", best) from exc
            clamps += stats["clamped"]
            total += loss * len(chunk)
        val = evaluate_nll(model, val_set)
        rec = EpochRecord(epoch, total / len(train_set), val, clamps, clips, time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("epoch %d train_nll=%.6f val_nll=%.6f clamps=%d clips=%d", epoch, rec.train_nll, val, clamps, clips)
        if val < report.best_val_nll:
            report.best_val_nll = val
            report.best_epoch = epoch
            best = TrainResult(Model(model.config, model.store.copy()), copy.deepcopy(opt), report)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = True
                break
    return best
