"""Revision triangles and nowcasting of the most recent, still-revising days."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import training as tr
from .neural import adapter_correct

DEFAULT_WINDOW = 7
DEFAULT_STABILITY_TOL = 0.05


class TriangleError(ValueError):
    pass


@dataclass
class RevisionTriangle:
    """Values reported for event day t on report day r >= t (days are 1-based).

    ``values[t-1, r-1]`` holds the report; entries with r < t are NaN.
    """

    values: np.ndarray
    start: dt.date | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] < v.shape[0]:
            raise TriangleError(f"triangle must be (events, reports >= events), got {v.shape}")
        below = np.tril(np.ones(v.shape, dtype=bool), -1)
        if np.any(np.isfinite(v[below])):
            raise TriangleError("report earlier than its event day")
        self.values = v

    @property
    def n_events(self) -> int:
        return self.values.shape[0]

    @property
    def n_reports(self) -> int:
        return self.values.shape[1]

    def as_of(self, T: int) -> np.ndarray:
        """Latest report on or before day T for every event day 1..T (NaN if none)."""
        if not 1 <= T <= self.n_reports:
            raise TriangleError(f"report day {T} outside [1, {self.n_reports}]")
        out = np.full(min(T, self.n_events), np.nan)
        for t in range(out.shape[0]):
            row = self.values[t, t:T]
            ok = np.flatnonzero(np.isfinite(row))
            if ok.size:
                out[t] = row[ok[-1]]
        return out

    def real_time(self) -> np.ndarray:
        """First report of each event day, made on the day itself."""
        return np.diag(self.values).copy()

    def stable(self) -> np.ndarray:
        """Final report of each event day."""
        return self.as_of(self.n_reports)[:self.n_events]

    def write_csv(self, path: str | Path) -> None:
        start = self.start or dt.date(2020, 1, 1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["event_date", "report_date", "value"])
            for t, r in zip(*np.nonzero(np.isfinite(self.values))):
                w.writerow([(start + dt.timedelta(days=int(t))).isoformat(),
                            (start + dt.timedelta(days=int(r))).isoformat(),
                            repr(float(self.values[t, r]))])

    @classmethod
    def read_csv(cls, path: str | Path) -> "RevisionTriangle":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise TriangleError(f"{path}: no revision records")
        missing = {"event_date", "report_date", "value"} - set(rows[0])
        if missing:
            raise TriangleError(f"{path}: missing columns {sorted(missing)}")
        try:
            recs = [(dt.date.fromisoformat(r["event_date"]), dt.date.fromisoformat(r["report_date"]),
                     float(r["value"])) for r in rows]
        except ValueError as exc:
            raise TriangleError(f"{path}: {exc}") from None
        start = min(e for e, _, _ in recs)
        last_event = max(e for e, _, _ in recs)
        last_report = max(r for _, r, _ in recs)
        vals = np.full(((last_event - start).days + 1, max((last_report - start).days + 1,
                                                           (last_event - start).days + 1)), np.nan)
        for e, r, v in recs:
            t, rr = (e - start).days, (r - start).days
            if rr < t:
                raise TriangleError(f"{path}: report {r} precedes event {e}")
            if np.isfinite(vals[t, rr]):
                raise TriangleError(f"{path}: duplicate record for ({e}, {r})")
            vals[t, rr] = v
        return cls(vals, start)


def revision_sequence(tri: RevisionTriangle, t: int) -> np.ndarray:
    """Reports for event day t (1-based) in report order, missing reports skipped."""
    if not 1 <= t <= tri.n_events:
        raise TriangleError(f"event day {t} outside [1, {tri.n_events}]")
    row = tri.values[t - 1, t - 1:]
    return row[np.isfinite(row)]


def stability_time(seq, final: float | None = None, eps: float = DEFAULT_STABILITY_TOL) -> int:
    """Smallest index r* with |seq[r] - final| <= eps * |final| for every r >= r*.

    ``final`` defaults to the last report.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 1 or seq.size == 0:
        raise ValueError("revision sequence must be a non-empty vector")
    if eps <= 0:
        raise ValueError("stability tolerance must be positive")
    final = seq[-1] if final is None else float(final)
    if final == 0:
        raise ValueError("relative stability undefined for a zero final value")
    bad = np.flatnonzero(np.abs(seq - final) > eps * abs(final))
    return 0 if bad.size == 0 else int(bad[-1]) + 1


def geometric_triangle(stable, rho: float = 0.5, lam: float = 0.7, settle: int = 60,
                       start: dt.date | None = None) -> RevisionTriangle:
    """Triangle whose report r for day t is stable[t] * (1 - rho * lam**(r - t)).

    Reporting continues ``settle`` days past the last event day, where the
    final report equals the stable value exactly.
    """
    stable = np.asarray(stable, dtype=np.float64)
    if not 0 <= rho < 1 or not 0 < lam < 1:
        raise ValueError("need 0 <= rho < 1 and 0 < lam < 1")
    T = stable.shape[0]
    R = T + settle
    lag = np.arange(R)[None, :] - np.arange(T)[:, None]
    with np.errstate(invalid="ignore"):
        vals = stable[:, None] * (1.0 - rho * lam ** np.where(lag >= 0, lag, 0))
    vals[lag < 0] = np.nan
    vals[:, -1] = stable
    return RevisionTriangle(vals, start)


@dataclass
class NowcastResult:
    days: np.ndarray        # 1-based event days T-w..T
    values: np.ndarray
    revised: np.ndarray     # as-of-T series with the last w+1 days replaced
    model: tr.TrainedModel


def nowcast_training_data(public, private, tri: RevisionTriangle, T: int, w: int = DEFAULT_WINDOW,
                          case_col: int = 0) -> tr.TrainingData:
    """Window 1..T-w-1 whose targets are (by day T) settled reports.

    The case column of the inputs is replaced by the first (real-time) report of
    each day so that training and inference see equally provisional inputs.
    """
    if T > tri.n_events or T - w - 1 <= 7:
        raise TriangleError(f"T={T} with window {w} leaves no training days in a {tri.n_events}-day triangle")
    pub = np.array(public, dtype=np.float64)[:T]
    pub[:, case_col] = tri.real_time()[:T]
    T_train = T - w - 1
    target = tri.as_of(T)[:T_train]
    return tr.TrainingData(pub, private, target)


def nowcast(config: tr.TrainConfig, public, private, tri: RevisionTriangle, T: int,
            w: int = DEFAULT_WINDOW, case_col: int = 0, contact=None, population=None) -> NowcastResult:
    """Train on settled history and estimate the stable counts for days T-w..T."""
    if w < 0:
        raise ValueError("window must be >= 0")
    data = nowcast_training_data(public, private, tri, T, w, case_col)
    model = tr.train(config, data, contact, population)
    model.mode = "nowcast"
    values = nowcast_with(model, data.public, private, T, w)
    revised = tri.as_of(T)
    revised[T - w - 1:T] = values
    return NowcastResult(np.arange(T - w, T + 1), values, revised, model)


def nowcast_with(model: tr.TrainedModel, public, private, T: int, w: int = DEFAULT_WINDOW) -> np.ndarray:
    """Adapter-corrected simulation for days T-w..T from a trained model."""
    if model is None or not model.trained or model.mode != "nowcast":
        raise RuntimeError("nowcasting needs a model trained in nowcast mode")
    _, _, sim = model.fit_window(public, private, T)
    k = model.adapter.k
    if T - w - 1 < k:
        raise ValueError("window reaches before the first adapter chunk")
    corr = adapter_correct(model.adapter, sim.values())
    if corr.ndim == 2:
        corr = np.sort(corr, axis=1)[:, corr.shape[1] // 2]
    return corr[T - w - 1 - k:T - k]
