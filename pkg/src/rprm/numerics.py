"""Parameter storage, gradient plumbing, Adam and finite-difference checks.

An *objective* is any callable ``objective(store, with_grad)`` returning
``(loss, grads)`` where ``grads`` maps slot names to arrays shaped like the
slots (or is ``None`` when ``with_grad`` is false). Models provide
hand-derived gradients through this interface; :func:`grad_check` verifies
them against central differences.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

CHECKPOINT_FORMAT = "rprm-checkpoint"
CHECKPOINT_VERSION = 1

Objective = Callable[["ParameterStore", bool], "tuple[float, Optional[dict[str, np.ndarray]]]"]


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or infinity."""

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        super().__init__(f"non-finite value in {where}" + (f": {detail}" if detail else ""))


def check_finite(where: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(where)


class ParameterStore:
    """Named float64 slots with same-shaped gradient accumulators."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"slot {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        check_finite(f"slot {name}", arr)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.values.items()}

    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def accumulate(self, grads: dict[str, np.ndarray], scale: float = 1.0) -> None:
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            if g.shape != self.values[name].shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, slot is {self.values[name].shape}")
            self.grads[name] += scale * g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for k, v in self.values.items():
            other.values[k] = v.copy()
            other.grads[k] = self.grads[k].copy()
        return other

    def cast(self, dtype) -> "ParameterStore":
        """Copy with values converted to ``dtype`` (gradients zeroed)."""
        other = ParameterStore()
        for k, v in self.values.items():
            other.values[k] = v.astype(dtype)
            other.grads[k] = np.zeros_like(other.values[k])
        return other

    def assert_finite(self) -> None:
        for k, v in self.values.items():
            check_finite(f"slot {k}", v)


def backward(objective: Objective, store: ParameterStore) -> float:
    """Evaluate ``objective`` and add its gradient into ``store.grads``."""
    loss, grads = objective(store, True)
    check_finite("loss", loss)
    for name, g in grads.items():
        check_finite(f"gradient of {name}", g)
    store.accumulate(grads)
    return float(loss)


def clip_grad_norm(store: ParameterStore, max_norm: float) -> bool:
    """Rescale all gradients to global norm ``max_norm``; True when clipped."""
    norm = store.grad_norm()
    if norm > max_norm:
        for g in store.grads.values():
            g *= max_norm / norm
        return True
    return False


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def ensure(self, store: ParameterStore) -> None:
        for name, value in store.values.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)


def adam_step(store: ParameterStore, opt: OptimizerState) -> None:
    """One bias-corrected Adam update from the accumulated gradients.

    Gradients are cleared afterwards. The update is computed for every slot
    before any slot is modified, so a non-finite update leaves the store
    untouched.
    """
    opt.ensure(store)
    t = opt.step + 1
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    updates = {}
    for name, g in store.grads.items():
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * (g * g)
        new = store.values[name] - opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"adam update of {name}")
        updates[name] = (new, m, v)
    for name, (new, m, v) in updates.items():
        store.values[name][...] = new
        opt.m[name] = m
        opt.v[name] = v
    opt.step = t
    store.zero_grad()


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def failed(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    objective: Objective,
    store: ParameterStore,
    h: float = 1e-5,
    tolerance: float = 1e-5,
    slots: Optional[list[str]] = None,
    fd_dtype=np.float64,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, slot by slot.

    The relative error of each coordinate is
    ``|g - n| / max(|g|, |n|, 1e-8)``. The store's values are restored and
    its gradient buffers are not touched.

    ``fd_dtype=np.longdouble`` evaluates the perturbed losses on an
    extended-precision copy of the store. In float64 the central difference
    carries roundoff of about ``eps * |loss| / h`` (~1e-10 for a loss of 10),
    which swamps coordinates whose gradient is 1e-6 or smaller; the objective
    must then propagate the store's dtype. The analytic side is always float64.
    """
    _, grads = objective(store, True)
    fd_store = store if np.dtype(fd_dtype) == np.float64 else store.cast(fd_dtype)
    h = np.asarray(h, dtype=fd_dtype)[()]
    errors = {}
    for name in slots or store.names():
        x = fd_store.values[name]
        analytic = np.asarray(grads.get(name, np.zeros_like(x)), dtype=np.float64)
        flat = x.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus, _ = objective(fd_store, False)
            flat[i] = orig - h
            f_minus, _ = objective(fd_store, False)
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * h)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(errors, tolerance)


def _encode(arr: np.ndarray) -> dict:
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "data": base64.b64encode(raw).decode("ascii")}


def _decode(rec: dict) -> np.ndarray:
    raw = base64.b64decode(rec["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).astype(np.float64)


def checkpoint_bytes(store: ParameterStore, opt: Optional[OptimizerState] = None, meta: Optional[dict] = None) -> bytes:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "slots": {k: _encode(v) for k, v in store.values.items()},
        "slot_order": store.names(),
    }
    if opt is not None:
        doc["optimizer"] = {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step": opt.step,
            "m": {k: _encode(v) for k, v in opt.m.items()},
            "v": {k: _encode(v) for k, v in opt.v.items()},
        }
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")


def save_checkpoint(path: str | Path, store: ParameterStore, opt: Optional[OptimizerState] = None, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(store, opt, meta))


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, Optional[OptimizerState], dict]:
    doc = json.loads(Path(path).read_bytes().decode("utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    store = ParameterStore()
    for name in doc["slot_order"]:
        store.add(name, _decode(doc["slots"][name]))
    opt = None
    if "optimizer" in doc:
        o = doc["optimizer"]
        opt = OptimizerState(
            lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
            m={k: _decode(v) for k, v in o["m"].items()},
            v={k: _decode(v) for k, v in o["v"].items()},
        )
    return store, opt, doc["meta"]
