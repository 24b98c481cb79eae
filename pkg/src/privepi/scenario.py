"""Counterfactual transmission schedules projected through a trained model."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metapop as mp
from .training import TrainedModel


@dataclass(frozen=True)
class Intervention:
    """Transmission cut by a factor (1 - x) starting 7 * lead_weeks days after day t_prime."""

    t_prime: int
    lead_weeks: int
    x: float

    def __post_init__(self):
        if self.lead_weeks < 0:
            raise ValueError("lead time must be >= 0 weeks")
        if not -1 < self.x < 1:
            raise ValueError("effect size must satisfy |x| < 1")
        if self.t_prime < 1:
            raise ValueError("decision day must be >= 1")

    @property
    def start(self) -> int:
        """First day (1-based) at the reduced rate."""
        return self.t_prime + 7 * self.lead_weeks


def intervene_beta(beta_t_prime: float, iv: Intervention, horizon: int) -> np.ndarray:
    """beta for days t_prime+1 .. t_prime+horizon."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if iv.start > iv.t_prime + horizon:
        raise ValueError(f"intervention day {iv.start} lies beyond the horizon end {iv.t_prime + horizon}")
    days = iv.t_prime + np.arange(1, horizon + 1)
    return np.where(days >= iv.start, (1.0 - iv.x) * beta_t_prime, beta_t_prime)


@dataclass
class Projection:
    intervention: Intervention
    days: np.ndarray
    new_infections: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.new_infections)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "new_infections", "cumulative"])
            for d, v, c in zip(self.days, self.new_infections, self.cumulative):
                w.writerow([int(d), repr(float(v)), repr(float(c))])


def project(model: TrainedModel, public, private, iv: Intervention, horizon: int) -> Projection:
    """Simulate days t_prime+1 .. t_prime+horizon from the fitted state at t_prime.

    All rates other than beta stay at their values on day t_prime.
    """
    if model is None or not model.trained:
        raise RuntimeError("model has not been trained")
    if iv.t_prime > model.T:
        raise ValueError(f"decision day {iv.t_prime} beyond the training window ({model.T} days)")
    rates, _, sim = model.fit_window(public, private)
    row = rates[(iv.t_prime - 1) // 7]
    beta = intervene_beta(float(row[0]), iv, horizon)
    daily = np.tile(row, (horizon, 1))
    daily[:, 0] = beta
    state = sim.states[iv.t_prime]
    out = mp.simulate(state, model.contact, model.population, mp.EpidemicParams.from_daily(daily))
    return Projection(iv, iv.t_prime + np.arange(1, horizon + 1), out.values())


def scenario_grid(model: TrainedModel, public, private, t_prime: int, xs, leads, horizon: int) -> dict:
    """Projections keyed by (x, lead_weeks)."""
    return {(x, d): project(model, public, private, Intervention(t_prime, d, x), horizon)
            for x in xs for d in leads}
