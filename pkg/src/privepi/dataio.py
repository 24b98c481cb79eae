"""Panels, CSV ingestion, windowing, and the synthetic data generator."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metapop as mp


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class PanelSchema:
    """Expected layout of a city-level panel; None leaves a dimension free."""

    name: str
    n_features: int | None = None
    n_days: int | None = None
    required: tuple = ("cases", "deaths")


SCHEMAS = {
    "generic": PanelSchema("generic"),
    "bogota": PanelSchema("bogota", 11, 343),
    "medellin": PanelSchema("medellin", 11, 343),
    "usa": PanelSchema("usa", 14, 602),
}


@dataclass
class FeaturePanel:
    """Daily (T, F) city-level signals; column 0 is cases, column 1 deaths."""

    dates: list
    columns: list
    values: np.ndarray
    region: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.dates), len(self.columns)):
            raise SchemaError(f"values {self.values.shape} do not match {len(self.dates)} dates x "
                              f"{len(self.columns)} columns")

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def F(self) -> int:
        return len(self.columns)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    @property
    def cases(self) -> np.ndarray:
        return self.column("cases")

    def window(self, lo: int, hi: int) -> "FeaturePanel":
        """Days lo..hi (1-based, inclusive)."""
        return FeaturePanel(self.dates[lo - 1:hi], list(self.columns), self.values[lo - 1:hi], self.region)

    def with_column(self, name: str, values) -> "FeaturePanel":
        v = self.values.copy()
        v[:, self.columns.index(name)] = values
        return FeaturePanel(list(self.dates), list(self.columns), v, self.region)

    def __eq__(self, other):
        return (isinstance(other, FeaturePanel) and self.dates == other.dates and self.columns == other.columns
                and self.region == other.region and np.array_equal(self.values, other.values))


def _parse_date(s: str, path, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(s.strip())
    except ValueError:
        raise SchemaError(f"{path}:{line}: unparseable date {s!r}") from None


def _fill_gaps(x: np.ndarray) -> np.ndarray:
    """Linear interpolation of interior NaNs; leading/trailing NaNs take the nearest value."""
    x = x.copy()
    idx = np.arange(x.shape[0])
    for j in range(x.shape[1]):
        ok = np.isfinite(x[:, j])
        if not ok.any():
            raise SchemaError(f"column {j} has no values")
        if not ok.all():
            x[~ok, j] = np.interp(idx[~ok], idx[ok], x[ok, j])
    return x


def load_panel(path: str | Path, schema: PanelSchema | str = "generic", region: str = "") -> FeaturePanel:
    """Parse ``date,cases,deaths,<covariates>``; sort by date, fill missing days and values."""
    if isinstance(schema, str):
        if schema not in SCHEMAS:
            raise SchemaError(f"unknown schema {schema!r}")
        schema = SCHEMAS[schema]
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(c.strip() for c in rows[0]):
        raise SchemaError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if header[0] != "date":
        raise SchemaError(f"{path}: first column must be 'date', got {header[0]!r}")
    missing = [c for c in schema.required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    columns = header[1:]
    if schema.n_features is not None and len(columns) != schema.n_features:
        raise SchemaError(f"{path}: schema {schema.name!r} expects {schema.n_features} features, got {len(columns)}")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise SchemaError(f"{path}: no data rows")
    records = {}
    for line, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SchemaError(f"{path}:{line}: expected {len(header)} fields, got {len(r)}")
        d = _parse_date(r[0], path, line)
        if d in records:
            raise SchemaError(f"{path}:{line}: duplicate date {d}")
        try:
            records[d] = [float(c) if c.strip() else np.nan for c in r[1:]]
        except ValueError as exc:
            raise SchemaError(f"{path}:{line}: {exc}") from None
    first, last = min(records), max(records)
    dates = [first + dt.timedelta(days=i) for i in range((last - first).days + 1)]
    nan_row = [np.nan] * len(columns)
    values = _fill_gaps(np.array([records.get(d, nan_row) for d in dates], dtype=np.float64))
    if schema.n_days is not None and len(dates) != schema.n_days:
        raise SchemaError(f"{path}: schema {schema.name!r} expects {schema.n_days} days, got {len(dates)}")
    return FeaturePanel(dates, columns, values, region)


def save_panel(panel: FeaturePanel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date"] + panel.columns)
        for d, row in zip(panel.dates, panel.values.tolist()):
            w.writerow([d.isoformat()] + [repr(v) for v in row])


@dataclass
class ZipPanel:
    """Weekly private features: ``values`` is (M zips, W weeks, F features)."""

    zips: list
    values: np.ndarray
    features: list = field(default_factory=lambda: ["amount"])

    def __post_init__(self):
        self.zips = [str(z) for z in self.zips]
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.shape[0] != len(self.zips) or v.shape[2] != len(self.features):
            raise SchemaError(f"zip panel values {v.shape} do not match {len(self.zips)} zips x "
                              f"{len(self.features)} features")
        self.values = v

    @property
    def W(self) -> int:
        return self.values.shape[1]

    def matrix(self) -> np.ndarray:
        """(M * F, W) rows grouped by zip, as consumed by the parameter network."""
        M, W, F = self.values.shape
        return self.values.transpose(0, 2, 1).reshape(M * F, W)

    def weeks(self, W: int) -> "ZipPanel":
        return ZipPanel(self.zips, self.values[:, :W], list(self.features))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["zip", "week"] + self.features)
            for i, z in enumerate(self.zips):
                for j in range(self.W):
                    w.writerow([z, j + 1] + [repr(float(v)) for v in self.values[i, j]])

    @classmethod
    def read_csv(cls, path: str | Path) -> "ZipPanel":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:2] != ["zip", "week"]:
            raise SchemaError(f"{path}: header must start with 'zip,week'")
        features = rows[0][2:]
        cells = {}
        for line, r in enumerate(rows[1:], start=2):
            try:
                cells[(r[0], int(r[1]))] = [float(v) for v in r[2:]]
            except (ValueError, IndexError) as exc:
                raise SchemaError(f"{path}:{line}: {exc}") from None
        zips = list(dict.fromkeys(z for z, _ in cells))
        W = max(wk for _, wk in cells)
        vals = np.full((len(zips), W, len(features)), np.nan)
        for (z, wk), v in cells.items():
            vals[zips.index(z), wk - 1] = v
        if np.isnan(vals).any():
            raise SchemaError(f"{path}: zip panel has missing (zip, week) cells")
        return cls(zips, vals, features)


def day_to_week(day: int) -> int:
    """1-based week containing 1-based day."""
    return math.ceil(day / 7)


def align(zip_panel: ZipPanel, panel: FeaturePanel) -> tuple[ZipPanel, FeaturePanel]:
    """Truncate both panels to their common range (week w covers days 7(w-1)+1..7w)."""
    W = min(zip_panel.W, mp.n_weeks(panel.T))
    if W < 1:
        raise SchemaError("zip panel and feature panel do not overlap")
    T = min(panel.T, 7 * W)
    return zip_panel.weeks(W), panel.window(1, T)


def split(panel: FeaturePanel, T_train: int, H: int) -> tuple[FeaturePanel, FeaturePanel]:
    if T_train < 1 or H < 0:
        raise ValueError("need T_train >= 1 and H >= 0")
    if T_train + H > panel.T:
        raise ValueError(f"T_train + H = {T_train + H} exceeds panel length {panel.T}")
    return panel.window(1, T_train), panel.window(T_train + 1, T_train + H)


# -- synthetic data ------------------------------------------------------------------

def default_beta(W: int, change_week: int | None = 48, change: float = 0.6) -> np.ndarray:
    """Two seasonal waves, then a step change in transmission held to the end."""
    w = np.arange(W)
    beta = 0.19 * (1.0 + 0.28 * np.sin(2 * np.pi * w / 22 + 0.3))
    if change_week is not None and change_week < W:
        beta[change_week:] = beta[change_week - 1] * change
    return beta


@dataclass
class SyntheticSpec:
    m: int = 4
    T: int = 343                 # training days
    horizon: int = 28            # extra days generated past T
    seed: int = 0
    beta: tuple | None = None    # weekly; default_beta() when None
    alpha: float = 0.2
    gamma: float = 0.15
    eta: float = 0.002
    delta: float = 0.01
    seed_fraction: float = 2e-4
    obs_noise: float = 0.1       # log-normal sd on reported cases and deaths
    covariate_lags: tuple = (1, 3, 7)
    covariate_gain: tuple = (0.8, 0.5, 0.3)
    covariate_noise: float = 0.15
    mobility_noise: float = 0.6
    n_zips: int = 6
    records_per_cell: int = 2000
    spend_sensitivity: float = 0.5
    rho: float = 0.5
    lam: float = 0.7
    start: str = "2020-03-02"

    @property
    def days(self) -> int:
        return self.T + self.horizon

    def weekly_params(self) -> np.ndarray:
        W = mp.n_weeks(self.days)
        beta = default_beta(W) if self.beta is None else np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (W,):
            raise ValueError(f"beta must have {W} weekly values")
        table = np.column_stack([beta] + [np.full(W, v) for v in (self.alpha, self.gamma, self.eta, self.delta)])
        mp.EpidemicParams(table, np.arange(self.days) // 7).validate()
        return table

    def validate(self) -> None:
        if self.m < 1 or self.T < 8 or self.horizon < 0:
            raise ValueError("need m >= 1, T >= 8, horizon >= 0")
        if not 0 < self.seed_fraction <= mp.SEED_MAX:
            raise ValueError(f"seed fraction must lie in (0, {mp.SEED_MAX}]")
        if np.any(mp.PARAM_BOUNDS <= self.weekly_params().max(axis=0)):
            raise ValueError("true parameters exceed the admissible ranges")
        if len(self.covariate_lags) != len(self.covariate_gain):
            raise ValueError("one gain per covariate lag")


def contact_for(m: int) -> tuple[np.ndarray, np.ndarray]:
    if m == 4:
        return mp.DEFAULT_CONTACT.copy(), mp.DEFAULT_POPULATION.copy()
    if m == 1:
        return np.ones((1, 1)), np.array([mp.DEFAULT_POPULATION.sum()])
    i = np.arange(m)
    C = 0.45 * np.exp(-np.abs(i[:, None] - i[None, :]) / 1.5)
    return C, np.full(m, mp.DEFAULT_POPULATION.sum() / m)


@dataclass
class SyntheticData:
    panel: FeaturePanel
    transactions: object          # privacy.Transactions
    zips: list
    triangle: object              # nowcast.RevisionTriangle over the stable case series
    params: np.ndarray            # (weeks, 5) true weekly rates
    seed_fraction: float
    contact: np.ndarray
    population: np.ndarray
    infections: np.ndarray        # noise-free simulated daily inflow
    spec: SyntheticSpec

    def simulate_truth(self) -> np.ndarray:
        return simulate_params(self.params, self.seed_fraction, self.contact, self.population, self.spec.days)

    def clean_zip_panel(self, clip: float = 100.0) -> np.ndarray:
        from .privacy import clip_and_aggregate
        return clip_and_aggregate(self.transactions, clip, self.zips, mp.n_weeks(self.spec.days))


def simulate_params(weekly, seed_fraction, C, N, T: int) -> np.ndarray:
    z0 = mp.CompartmentState.seeded(N, seed_fraction * N)
    return mp.simulate(z0, C, N, mp.EpidemicParams(np.asarray(weekly, dtype=np.float64), np.arange(T) // 7)).values()


def synth_generate(spec: SyntheticSpec | None = None) -> SyntheticData:
    """Simulate an epidemic from known weekly parameters plus derived observations.

    Reported cases and deaths carry log-normal noise; public covariates follow
    lagged cases; a noisy mobility index and the zip-level spending both move
    against transmission.
    """
    from .nowcast import geometric_triangle
    from .privacy import Transactions

    spec = spec or SyntheticSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    T = spec.days
    C, N = contact_for(spec.m)
    table = spec.weekly_params()
    z0 = mp.CompartmentState.seeded(N, spec.seed_fraction * N)
    sim = mp.simulate(z0, C, N, mp.EpidemicParams(table, np.arange(T) // 7))
    y = sim.values()
    traj = sim.trajectory()
    deaths_true = np.array([spec.eta * traj[t, 2].sum() for t in range(T)])

    def noisy(x):
        s = spec.obs_noise
        return x * np.exp(s * rng.standard_normal(x.shape) - 0.5 * s * s)

    cases = noisy(y)
    deaths = noisy(deaths_true)
    cols, vals = ["cases", "deaths"], [cases, deaths]
    for lag, gain in zip(spec.covariate_lags, spec.covariate_gain):
        lagged = np.concatenate([np.full(lag, cases[0]), cases[:T - lag]]) if lag > 0 else cases
        cols.append(f"trend_lag{lag}")
        vals.append(gain * lagged * np.exp(spec.covariate_noise * rng.standard_normal(T)))
    beta_daily = table[np.arange(T) // 7, 0]
    rel = beta_daily / table[:, 0].mean() - 1.0
    cols.append("mobility")
    vals.append(-rel + spec.mobility_noise * rng.standard_normal(T))
    start = dt.date.fromisoformat(spec.start)
    dates = [start + dt.timedelta(days=i) for i in range(T)]
    panel = FeaturePanel(dates, cols, np.column_stack(vals), "synthetic")

    # zip-level spending: more transactions when transmission is low
    W = mp.n_weeks(T)
    zips = [f"{11001 + 2 * i}" for i in range(spec.n_zips)]
    weekly_rel = table[:, 0] / table[:, 0].mean() - 1.0
    zip_base = 0.7 + 0.6 * rng.random(spec.n_zips)
    lam = spec.records_per_cell * zip_base[:, None] * np.clip(1.0 - spec.spend_sensitivity * weekly_rel, 0.05, None)
    counts = rng.poisson(lam)
    zi, wi = np.nonzero(counts)
    reps = counts[zi, wi]
    zip_idx = np.repeat(zi, reps)
    week_idx = np.repeat(wi, reps) + 1
    n = zip_idx.shape[0]
    amounts = np.round(rng.lognormal(np.log(35.0), 0.8, size=n), 2)
    # each merchant trades in up to three neighbouring zips
    n_merch = 20 * spec.n_zips
    home = rng.integers(0, 20, size=n) * spec.n_zips
    offset = rng.integers(0, 3, size=n)
    merchant = (home + (zip_idx - offset) % spec.n_zips) % n_merch
    categories = np.array(["grocery", "restaurant", "retail", "fuel", "pharmacy"])
    tx = Transactions(np.char.add("m", merchant.astype(str)), np.array(zips)[zip_idx], week_idx,
                      amounts, categories[rng.integers(0, len(categories), size=n)])

    tri = geometric_triangle(cases, spec.rho, spec.lam, start=start)
    return SyntheticData(panel, tx, zips, tri, table, spec.seed_fraction, C, N, y, spec)


def write_params(path: str | Path, data: SyntheticData) -> None:
    doc = {"columns": list(mp.PARAM_NAMES), "weekly": data.params.tolist(),
           "seed_fraction": data.seed_fraction, "contact": data.contact.tolist(),
           "population": data.population.tolist(), "days": data.spec.days,
           "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(data.spec).items()}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_params(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    for k in ("weekly", "contact", "population"):
        doc[k] = np.array(doc[k], dtype=np.float64)
    return doc
