"""Reproduction-number estimation and forecast error metrics."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

SI_MEAN = 6.48
SI_SD = 3.83
SI_MAX = 20
INCUBATION_DAYS = 5  # kept for reference; the renewal posterior does not use it
PRIOR_SHAPE = 1.0
PRIOR_SCALE = 5.0
RT_WINDOW = 7


@dataclass
class SerialIntervalDist:
    mean: float
    sd: float
    weights: np.ndarray     # weights[s] for lag s = 0..S_max, weights[0] = 0

    @property
    def s_max(self) -> int:
        return self.weights.shape[0] - 1


def discretize_serial_interval(mean: float = SI_MEAN, sd: float = SI_SD, s_max: int = SI_MAX) -> SerialIntervalDist:
    """Gamma(shape=(mean/sd)^2, scale=sd^2/mean) binned into whole days 1..s_max."""
    if mean <= 0 or sd <= 0:
        raise ValueError("serial interval mean and sd must be positive")
    if s_max < 2:
        raise ValueError("s_max must be >= 2")
    shape, scale = (mean / sd) ** 2, sd * sd / mean
    cdf = stats.gamma.cdf(np.arange(s_max + 1), shape, scale=scale)
    w = np.concatenate([[0.0], np.diff(cdf)])
    total = w.sum()
    if total <= 0:
        raise ValueError("serial interval has no mass within s_max days")
    return SerialIntervalDist(mean, sd, w / total)


def total_infectiousness(incidence, si: SerialIntervalDist) -> np.ndarray:
    """Lambda_t = sum_s I_{t-s} w_s, with incidence before day 1 taken as zero."""
    inc = np.asarray(incidence, dtype=np.float64)
    return np.convolve(inc, si.weights)[:inc.shape[0]]


@dataclass
class RtEstimate:
    mean: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    available: np.ndarray
    window: int

    def write_csv(self, path: str | Path, start: dt.date | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "rt_mean", "rt_q025", "rt_q975", "available"])
            for t in range(self.mean.shape[0]):
                day = (start + dt.timedelta(days=t)).isoformat() if start else str(t + 1)
                ok = bool(self.available[t])
                vals = [repr(float(v[t])) if ok else "" for v in (self.mean, self.q025, self.q975)]
                w.writerow([day] + vals + [int(ok)])


def estimate_rt(incidence, si: SerialIntervalDist | None = None, window: int = RT_WINDOW,
                prior_shape: float = PRIOR_SHAPE, prior_scale: float = PRIOR_SCALE) -> RtEstimate:
    """Sliding-window renewal-equation posterior for R_t (gamma prior, Poisson likelihood)."""
    si = si or discretize_serial_interval()
    inc = np.asarray(incidence, dtype=np.float64)
    if inc.ndim != 1:
        raise ValueError("incidence must be a vector")
    if np.any(inc < 0) or not np.all(np.isfinite(inc)):
        raise ValueError("incidence must be finite and non-negative")
    if window < 1:
        raise ValueError("window must be >= 1")
    if prior_shape <= 0 or prior_scale <= 0:
        raise ValueError("prior shape and scale must be positive")
    T = inc.shape[0]
    lam = total_infectiousness(inc, si)
    csum = lambda x: np.concatenate([[0.0], np.cumsum(x)])
    ci, cl = csum(inc), csum(lam)
    t = np.arange(1, T + 1)                     # 1-based day
    lo = np.maximum(t - window, 0)
    sum_i = ci[t] - ci[lo]
    sum_l = cl[t] - cl[lo]
    available = (t >= max(window, 2)) & (sum_l > 0)
    shape = prior_shape + sum_i
    scale = 1.0 / (1.0 / prior_scale + sum_l)
    nan = np.full(T, np.nan)
    mean = np.where(available, shape * scale, nan)
    q025 = np.where(available, stats.gamma.ppf(0.025, shape, scale=scale), nan)
    q975 = np.where(available, stats.gamma.ppf(0.975, shape, scale=scale), nan)
    return RtEstimate(mean, q025, q975, available, window)


def renewal_simulation(R: float, T: int, seed: int = 0, initial: float = 10.0,
                       si: SerialIntervalDist | None = None) -> np.ndarray:
    """Poisson renewal process I_t ~ Poisson(R * Lambda_t) started from ``initial`` cases on day 1."""
    si = si or discretize_serial_interval()
    rng = np.random.default_rng(seed)
    w = si.weights
    inc = np.zeros(T)
    inc[0] = initial
    for t in range(1, T):
        lags = np.arange(1, min(t, si.s_max) + 1)
        inc[t] = rng.poisson(R * np.dot(inc[t - lags], w[lags]))
    return inc


# -- metrics -----------------------------------------------------------------------

def _pair(truth, pred):
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.ndim != 1 or truth.size < 1:
        raise ValueError(f"need two equal-length non-empty vectors, got {truth.shape} and {pred.shape}")
    return truth, pred


def rmse(truth, pred) -> float:
    truth, pred = _pair(truth, pred)
    return float(np.sqrt(np.mean((truth - pred) ** 2)))


def mae(truth, pred) -> float:
    truth, pred = _pair(truth, pred)
    return float(np.mean(np.abs(truth - pred)))


def mape(truth, pred) -> float:
    """Mean absolute percentage error, in percent."""
    truth, pred = _pair(truth, pred)
    zero = np.flatnonzero(truth == 0)
    if zero.size:
        raise ValueError(f"mape undefined: truth is zero at index {int(zero[0])}")
    return float(100.0 * np.mean(np.abs((truth - pred) / truth)))
