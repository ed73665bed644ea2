"""Exponential-form conditional intensity and its inter-event distribution.

Between events the intensity is ``lambda(delta) = exp(a + w * delta)`` where
``a = v . h + b`` summarises the history. The cumulative intensity has the
closed form ``Lambda(delta) = exp(a) * expm1(w * delta) / w``; the gap density
is ``lambda(delta) * exp(-Lambda(delta))``. For ``w < 0`` the total mass is
``1 - exp(-exp(a) / |w|)``: with the remaining probability no further event
occurs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

W_EPS = 1e-8
CLAMP = 40.0
# switch to a series for dLambda/dw when |w * delta| is below this
_SERIES_X = 1e-2


class QuadratureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GapDistribution:
    a: float
    w: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.w)):
            raise ValueError(f"non-finite gap distribution parameters a={self.a}, w={self.w}")


@dataclass(frozen=True)
class QuadratureConfig:
    nodes: int = 256
    panel_order: int = 16
    survival_tol: float = 1e-12
    rtol: float = 1e-8
    max_nodes: int = 8192


class GapMean(NamedTuple):
    mean: float
    defect_mass: float


def _exp_checked(x, where):
    with np.errstate(over="ignore"):
        out = np.exp(x)
    if not np.all(np.isfinite(out)):
        raise OverflowError(f"{where}: exp overflow")
    return out


def cumulative_intensity(a, w, delta):
    """``Lambda(delta)`` elementwise, with a series branch for ``|w| < W_EPS``."""
    a, w, delta = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (a, w, delta)))
    ea = _exp_checked(a, "cumulative intensity")
    small = np.abs(w) < W_EPS
    x = w * delta
    safe_w = np.where(small, 1.0, w)
    with np.errstate(over="ignore"):
        closed = ea * np.expm1(x) / safe_w
    series = delta * ea * (1.0 + x / 2.0 + x * x / 6.0)
    out = np.where(small, series, closed)
    if not np.all(np.isfinite(out)):
        raise OverflowError("cumulative intensity overflow")
    return out


def intensity(gd: GapDistribution, delta: float) -> float:
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return float(_exp_checked(gd.a + gd.w * delta, "intensity"))


def log_density(gd: GapDistribution, delta: float) -> float:
    if not delta > 0:
        raise ValueError("delta must be positive")
    return float(gd.a + gd.w * delta - cumulative_intensity(gd.a, gd.w, delta))


def survival(gd: GapDistribution, delta: float) -> float:
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    try:
        return float(np.exp(-cumulative_intensity(gd.a, gd.w, delta)))
    except OverflowError:
        return 0.0  # the integrated intensity exceeds the float range


def defect_mass(a, w):
    """Probability that no further event occurs (zero unless ``w < 0``)."""
    a, w = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(w, dtype=np.float64))
    neg = w <= -W_EPS
    with np.errstate(over="ignore", divide="ignore"):
        total = np.where(neg, np.exp(a) / np.where(neg, -w, 1.0), np.inf)
    return np.where(neg, np.exp(-total), 0.0)


def inverse_cumulative(a, w, target):
    """Solve ``Lambda(delta) = target``; NaN where the target is unreachable."""
    a, w, target = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (a, w, target)))
    base = target * np.exp(-a)
    y = w * base
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(y == 0.0, 1.0, np.log1p(y) / np.where(y == 0.0, 1.0, y))
    ratio = np.where(y <= -1.0, np.nan, ratio)
    return base * ratio


def gap_loglik_terms(a, w: float, delta, clamp: bool = True):
    """Log-density of gaps and its partial derivatives for training.

    Returns ``(logf, dlogf_da, dlogf_dw, n_clamped)``. With ``clamp`` the
    log-intensity arguments ``a`` and ``a + w * delta`` are clipped to
    ``[-CLAMP, CLAMP]``; clipped arguments contribute no gradient.
    """
    a = np.asarray(a, dtype=np.result_type(a, np.float64))
    delta = np.asarray(delta, dtype=np.float64)
    x = w * delta
    l = a + x
    if clamp:
        hit = (np.abs(a) > CLAMP) | (np.abs(l) > CLAMP)
    else:
        hit = np.zeros(a.shape, dtype=bool)
    n_clamped = int(np.count_nonzero(hit))

    ea = _exp_checked(np.clip(a, -CLAMP, CLAMP) if clamp else a, "gap log-density")
    if abs(w) < W_EPS:
        lam = delta * ea * (1.0 + x / 2.0 + x * x / 6.0)
    else:
        lam = ea * np.expm1(x) / w
    series = np.abs(x) < _SERIES_X
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        dlam_dw = np.where(
            series,
            ea * delta**2 * (0.5 + x * (1 / 3 + x * (1 / 8 + x * (1 / 30 + x / 144)))),
            ea * (delta * w * np.exp(x) - np.expm1(x)) / (w * w if w != 0 else 1.0),
        )
    logf = l - lam
    dlogf_da = 1.0 - lam
    dlogf_dw = delta - dlam_dw

    if n_clamped:
        ac = np.clip(a[hit], -CLAMP, CLAMP)
        lc = np.clip(l[hit], -CLAMP, CLAMP)
        d = delta[hit]
        a_free = (np.abs(a[hit]) <= CLAMP).astype(np.float64)
        l_free = (np.abs(l[hit]) <= CLAMP).astype(np.float64)
        eac, elc = np.exp(ac), np.exp(lc)
        if abs(w) < W_EPS:
            lam_c = d * eac
            dlam_da = lam_c * a_free
            dlam_dw_c = 0.5 * d * d * eac
        else:
            lam_c = (elc - eac) / w
            dlam_da = (elc * l_free - eac * a_free) / w
            dlam_dw_c = (d * elc * l_free - lam_c) / w
        logf[hit] = lc - lam_c
        dlogf_da[hit] = l_free - dlam_da
        dlogf_dw[hit] = d * l_free - dlam_dw_c
    return logf, dlogf_da, dlogf_dw, n_clamped


def _gauss_legendre_panels(lo, hi, n_panels, order, integrand):
    """Composite Gauss-Legendre on ``[lo, hi]`` for each row independently."""
    x, wts = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    u = (mid[:, None] + half[:, None] * x[None, :]).reshape(-1)
    uw = (half[:, None] * wts[None, :]).reshape(-1)
    width = hi - lo
    s = lo[:, None] + width[:, None] * u[None, :]
    return width * np.sum(integrand(s) * uw[None, :], axis=1)


def expected_gaps(a, w, quadrature: QuadratureConfig = QuadratureConfig()):
    """Vectorised conditional mean gap and defect mass.

    The mean gap given that an event occurs is
    ``integral_0^inf (S(s) - p0) ds / (1 - p0)`` with ``p0`` the defect mass.
    The integrand is treated as exactly ``1 - p0`` up to the point where
    ``Lambda < 1e-16`` and integrated by composite Gauss-Legendre from there
    until the remaining conditional survival drops below ``survival_tol``.
    """
    a, w = np.broadcast_arrays(np.atleast_1d(np.asarray(a, dtype=np.float64)), np.atleast_1d(np.asarray(w, dtype=np.float64)))
    a, w = a.astype(np.float64), w.astype(np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
        raise QuadratureError("non-finite gap distribution parameters")
    tol = quadrature.survival_tol
    p0 = defect_mass(a, w)
    neg = w <= -W_EPS
    total = np.where(neg, np.exp(a) / np.where(neg, -w, 1.0), np.inf)
    big_target = -math.log(tol)

    mass = -np.expm1(-total)
    s_lo = inverse_cumulative(a, w, 1e-16 * mass)
    s_hi = np.empty_like(a)
    reach = total > big_target
    s_hi[reach] = inverse_cumulative(a[reach], w[reach], big_target)
    rest = ~reach
    if np.any(rest):
        # tail where p0 * expm1(r) < tol * (1 - p0), r = exp(a + w s) / |w|
        r_star = np.log1p(tol * (-np.expm1(-total[rest])) / p0[rest])
        s_hi[rest] = (np.log(r_star * -w[rest]) - a[rest]) / w[rest]
    s_lo = np.minimum(s_lo, s_hi)
    if not (np.all(np.isfinite(s_lo)) and np.all(np.isfinite(s_hi))):
        raise QuadratureError("could not bracket the gap distribution support")

    def integrand(s):
        surv = np.exp(-cumulative_intensity(a[:, None], w[:, None], s))
        # S - p0 = S * (1 - exp(-remaining)) keeps precision when p0 is near 1
        with np.errstate(over="ignore", divide="ignore"):
            remaining = np.exp(a[:, None] + w[:, None] * s) / np.where(neg, -w, 1.0)[:, None]
        return np.where(neg[:, None], surv * -np.expm1(-remaining), surv)

    order = quadrature.panel_order
    n_panels = max(1, quadrature.nodes // order)
    prev = _gauss_legendre_panels(s_lo, s_hi, max(1, n_panels // 2), order, integrand)
    while True:
        cur = _gauss_legendre_panels(s_lo, s_hi, n_panels, order, integrand)
        err = np.abs(cur - prev)
        if np.all(err <= quadrature.rtol * np.abs(cur) + 1e-300):
            break
        if n_panels * order * 2 > quadrature.max_nodes:
            bad = int(np.argmax(err / np.maximum(np.abs(cur), 1e-300)))
            raise QuadratureError(
                f"expected gap did not converge with {n_panels * order} nodes "
                f"(a={a[bad]:.6g}, w={w[bad]:.6g}, estimate={cur[bad]:.6g}, change={err[bad]:.3g})"
            )
        prev = cur
        n_panels *= 2
    mean = (s_lo * mass + cur) / mass
    return mean, p0


def expected_gap(gd: GapDistribution, quadrature: QuadratureConfig = QuadratureConfig()) -> GapMean:
    mean, p0 = expected_gaps(gd.a, gd.w, quadrature)
    return GapMean(float(mean[0]), float(p0[0]))


def median_gaps(a, w):
    """Median gap conditional on an event occurring."""
    p0 = defect_mass(a, w)
    return inverse_cumulative(a, w, -np.log(0.5 * (1.0 + p0)))


def median_gap(gd: GapDistribution) -> float:
    return float(median_gaps(gd.a, gd.w))


def sample_gaps(a, w, rng: np.random.Generator, size=None):
    """Inverse-CDF samples; ``nan`` marks the no-event outcome."""
    e = rng.exponential(1.0, size=size if size is not None else np.broadcast(np.asarray(a), np.asarray(w)).shape)
    out = inverse_cumulative(a, w, e)
    return np.where(np.isfinite(out), out, np.nan)


def sample_gap(gd: GapDistribution, rng: np.random.Generator) -> Optional[float]:
    """One gap, or ``None`` when the decaying intensity produces no event."""
    e = rng.exponential(1.0)
    if gd.w <= -W_EPS and e >= math.exp(gd.a) / -gd.w:
        return None
    return float(inverse_cumulative(gd.a, gd.w, e))
