"""Differentiable SEIRM metapopulation simulator.

Groups interact through a contact matrix ``C`` (``C[i, j]`` is the contact
probability between groups i and j). One explicit Euler step per day moves
mass S -> E -> I -> {R, M} with waning R -> S. All functions accept either
plain numpy arrays or :class:`~privepi.diffcore.Node` values, so the same code
serves fast scenario runs and end-to-end training.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Node

PARAM_NAMES = ("beta", "alpha", "gamma", "eta", "delta")
# Upper bounds of each rate (1/day); rates are sigmoid-scaled into (0, bound).
PARAM_BOUNDS = np.array([2.0, 0.5, 0.5, 0.05, 0.05])
SEED_MAX = 0.05
NEG_TOL = 1e-9
CONSERVATION_TOL = 1e-9

AGE_GROUPS = ("0-17", "18-49", "50-64", "65+")
DEFAULT_POPULATION = np.array([1_900_000.0, 3_800_000.0, 1_300_000.0, 800_000.0])
DEFAULT_CONTACT = np.array([
    [0.50, 0.25, 0.10, 0.05],
    [0.25, 0.45, 0.20, 0.10],
    [0.10, 0.20, 0.40, 0.15],
    [0.05, 0.10, 0.15, 0.35],
])


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def check_contact(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] < 1:
        raise ValueError(f"contact matrix must be square with m >= 1, got shape {C.shape}")
    if not np.all(np.isfinite(C)) or np.any(C < 0):
        raise ValueError("contact matrix entries must be finite and non-negative")
    return C


def check_population(N, m: int | None = None) -> np.ndarray:
    N = np.atleast_1d(np.asarray(N, dtype=np.float64))
    if N.ndim != 1 or (m is not None and N.shape[0] != m):
        raise ValueError(f"population vector must have length {m}, got shape {N.shape}")
    if not np.all(np.isfinite(N)) or np.any(N <= 0):
        raise ValueError("population entries must be positive")
    return N


def load_contact_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return check_contact(rows)


def load_population_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if len(rows) != 1:
        raise ValueError(f"{path}: population CSV must hold exactly one row")
    return check_population(rows[0])


def effective_infections(C, I):
    """Contact-weighted infections seen by each group: ``I_eff[j] = sum_i C[i, j] I[i]``."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != _val(I).shape[0]:
        raise ValueError(f"contact matrix {C.shape} does not match group vector {_val(I).shape}")
    return C.T @ I


def force_of_infection(beta, I_eff, N_eff):
    """Conditional force of infection ``beta * I_eff / N_eff``."""
    N_eff = np.asarray(N_eff, dtype=np.float64)
    if np.any(N_eff <= 0):
        raise ValueError("effective population must be positive")
    return beta * I_eff * (1.0 / N_eff)


@dataclass
class CompartmentState:
    """Per-group compartment counts (persons)."""

    S: object
    E: object
    I: object
    R: object
    M: object

    def values(self) -> np.ndarray:
        """Numeric (5, m) array of S, E, I, R, M."""
        return np.stack([_val(x) for x in (self.S, self.E, self.I, self.R, self.M)])

    def totals(self) -> np.ndarray:
        return self.values().sum(axis=0)

    @classmethod
    def from_array(cls, z) -> "CompartmentState":
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, None]
        return cls(*(z[k].copy() for k in range(5)))

    @classmethod
    def seeded(cls, N, seed) -> "CompartmentState":
        """All susceptible except ``seed`` persons per group placed in E."""
        zeros = np.zeros_like(np.asarray(N, dtype=np.float64))
        return cls(N - seed, seed, zeros, zeros.copy(), zeros.copy())


@dataclass
class EpidemicParams:
    """Daily rate schedule stored as a table of distinct rows plus a day -> row map.

    ``table`` has columns beta, alpha, gamma, eta, delta. Weekly schedules map
    day t (0-based) to row t // 7; arbitrary daily schedules use one row per day.
    """

    table: object
    block: np.ndarray

    @property
    def T(self) -> int:
        return int(self.block.shape[0])

    def daily(self) -> np.ndarray:
        return _val(self.table)[self.block]

    def validate(self) -> None:
        d = self.daily()
        if not np.all(np.isfinite(d)):
            raise ValueError("epidemic parameters must be finite")
        beta, rest = d[:, 0], d[:, 1:]
        if np.any(beta < 0) or np.any(beta > PARAM_BOUNDS[0]):
            raise ValueError(f"beta outside [0, {PARAM_BOUNDS[0]}]")
        if np.any(rest < 0) or np.any(rest >= 1):
            raise ValueError("alpha, gamma, eta, delta must lie in [0, 1)")
        if np.any(d[:, 2] + d[:, 3] >= 1):
            raise ValueError("gamma + eta must stay below 1")

    @classmethod
    def constant(cls, beta, alpha, gamma, eta, delta, T: int) -> "EpidemicParams":
        return cls(np.array([[beta, alpha, gamma, eta, delta]], dtype=np.float64),
                   np.zeros(T, dtype=int))

    @classmethod
    def from_daily(cls, daily) -> "EpidemicParams":
        daily = np.asarray(daily, dtype=np.float64)
        return cls(daily, np.arange(daily.shape[0]))


def n_weeks(T: int) -> int:
    return math.ceil(T / 7)


def expand_weekly(weekly, T: int) -> EpidemicParams:
    """Hold each weekly parameter row constant over its 7-day block."""
    rows = _val(weekly).shape[0]
    if T < 1 or rows != n_weeks(T):
        raise ValueError(f"{rows} weekly rows given but T={T} days needs {n_weeks(T)}")
    return EpidemicParams(weekly, np.arange(T) // 7)


@dataclass
class Diagnostics:
    clamp_events: int = 0
    max_conservation_error: float = 0.0


@dataclass
class SimulationOutput:
    new_infections: object          # (T,) Node or array: daily inflow into I
    states: list                    # CompartmentState for t = 0..T
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    @property
    def final_state(self) -> CompartmentState:
        return self.states[-1]

    def values(self) -> np.ndarray:
        return _val(self.new_infections)

    def trajectory(self) -> np.ndarray:
        """Numeric (T+1, 5, m) array of compartments."""
        return np.stack([s.values() for s in self.states])


def _group_change(z_prev: np.ndarray, z_next: np.ndarray) -> float:
    """Largest per-group change of S+E+I+R+M, summed exactly over compartments."""
    d = z_next - z_prev
    return max(abs(math.fsum(d[:, i])) for i in range(d.shape[1]))


def _clamp(x, diag: Diagnostics | None):
    v = _val(x)
    if np.any(v < -NEG_TOL):
        if diag is not None:
            diag.clamp_events += int(np.sum(v < -NEG_TOL))
        return dc.relu(x) if isinstance(x, Node) else np.maximum(v, 0.0)
    return x


def step(z: CompartmentState, C, N, p, diag: Diagnostics | None = None, inv_n_eff=None):
    """Advance one day. ``p`` is the 5-vector (beta, alpha, gamma, eta, delta).

    Returns ``(next_state, new_infections)`` where new infections per group is
    the inflow ``alpha * E`` into I. Built op by op, so it also runs on graph
    nodes; :func:`simulate` uses a fused equivalent for long rollouts.
    """
    C = np.asarray(C, dtype=np.float64)
    if inv_n_eff is None:
        n_eff = C.T @ np.asarray(N, dtype=np.float64)
        if np.any(n_eff <= 0):
            raise ValueError("effective population must be positive")
        inv_n_eff = 1.0 / n_eff
    if isinstance(p, Node):
        beta, alpha, gamma, eta, delta = (p[k] for k in range(5))
    else:
        beta, alpha, gamma, eta, delta = np.asarray(p, dtype=np.float64)
    S, E, I, R, M = z.S, z.E, z.I, z.R, z.M

    beta_eff = beta * (C.T @ I) * inv_n_eff
    infection = (C @ beta_eff) * S
    waning = delta * R
    progression = alpha * E
    recovery = gamma * I
    death = eta * I

    # each compartment takes one rounding at its own scale
    nxt = CompartmentState(
        S + (waning - infection),
        E + (infection - progression),
        I + (progression - (recovery + death)),
        R + (recovery - waning),
        M + death,
    )
    if diag is not None:
        err = _group_change(z.values(), nxt.values())
        diag.max_conservation_error = max(diag.max_conservation_error, err)
    nxt = CompartmentState(*(_clamp(x, diag) for x in (nxt.S, nxt.E, nxt.I, nxt.R, nxt.M)))
    return nxt, progression


def _rollout(daily: np.ndarray, z0: np.ndarray, C: np.ndarray, inv_n_eff: np.ndarray):
    """Numeric rollout. Returns inflow (T,), trajectory (T+1, 5, m), keep-masks, diagnostics."""
    T = daily.shape[0]
    traj = np.empty((T + 1,) + z0.shape)
    traj[0] = z0
    y = np.empty(T)
    masks: dict[int, np.ndarray] = {}
    diag = Diagnostics()
    CT = C.T
    for t in range(T):
        beta, alpha, gamma, eta, delta = daily[t]
        S, E, I, R, M = traj[t]
        beta_eff = beta * (CT @ I) * inv_n_eff
        infection = (C @ beta_eff) * S
        waning = delta * R
        progression = alpha * E
        recovery = gamma * I
        death = eta * I
        nxt = traj[t + 1]
        nxt[0] = S + (waning - infection)
        nxt[1] = E + (infection - progression)
        nxt[2] = I + (progression - (recovery + death))
        nxt[3] = R + (recovery - waning)
        nxt[4] = M + death
        y[t] = np.sum(progression)
        diag.max_conservation_error = max(diag.max_conservation_error, _group_change(traj[t], nxt))
        bad = nxt < -NEG_TOL
        if bad.any():
            diag.clamp_events += int(bad.sum())
            rows = bad.any(axis=1)
            keep = np.ones_like(nxt, dtype=bool)
            keep[rows] = nxt[rows] > 0.0
            nxt[rows] = np.maximum(nxt[rows], 0.0)
            masks[t] = keep
    return y, traj, masks, diag


def _rollout_forward(v, at):
    daily, S0, E0, I0, R0, M0 = v
    z0 = np.stack([S0, E0, I0, R0, M0])
    y, traj, masks, diag = _rollout(daily, z0, at["C"], at["inv_n_eff"])
    at["trajectory"], at["masks"], at["diagnostics"] = traj, masks, diag
    return y


def _rollout_backward(gy, out, v, at, need):
    """Reverse sweep of the Euler recursion (adjoint of each daily update)."""
    daily = v[0]
    C, inv_n_eff, traj, masks = at["C"], at["inv_n_eff"], at["trajectory"], at["masks"]
    CT = C.T
    T = daily.shape[0]
    g_daily = np.zeros_like(daily)
    gz = np.zeros_like(traj[0])  # adjoint of the state after the current step
    for t in range(T - 1, -1, -1):
        if t in masks:
            gz = gz * masks[t]
        gS1, gE1, gI1, gR1, gM1 = gz
        beta, alpha, gamma, eta, delta = daily[t]
        S, E, I, R, M = traj[t]
        u = CT @ I
        beta_eff = beta * u * inv_n_eff
        lam = C @ beta_eff
        g_inf = gE1 - gS1
        g_lam = g_inf * S
        g_beff = CT @ g_lam
        gy_t = gy[t]
        g_daily[t] = (
            np.sum(g_beff * u * inv_n_eff),
            np.sum(E * (gI1 - gE1 + gy_t)),
            np.sum(I * (gR1 - gI1)),
            np.sum(I * (gM1 - gI1)),
            np.sum(R * (gS1 - gR1)),
        )
        g_u = beta * g_beff * inv_n_eff
        gz = np.stack([
            gS1 + g_inf * lam,
            gE1 * (1.0 - alpha) + alpha * (gI1 + gy_t),
            gI1 * (1.0 - gamma - eta) + gamma * gR1 + eta * gM1 + C @ g_u,
            gR1 * (1.0 - delta) + delta * gS1,
            gM1,
        ])
    return [g_daily if need[0] else None] + [gz[k] if need[k + 1] else None for k in range(5)]


dc.register_op("seirm_rollout", _rollout_forward, _rollout_backward)


def simulate(z0: CompartmentState, C, N, params: EpidemicParams, T: int | None = None,
             engine: str = "fused") -> SimulationOutput:
    """Roll the daily step ``T`` times; ``new_infections[t]`` sums inflow over groups.

    ``engine="tape"`` records every elementary operation instead of the fused
    rollout primitive; both give the same values and gradients.
    """
    C = check_contact(C)
    N = check_population(N, C.shape[0])
    T = params.T if T is None else T
    if T < 1 or T > params.T:
        raise ValueError(f"T={T} must be in [1, {params.T}]")
    n_eff = C.T @ N
    if np.any(n_eff <= 0):
        raise ValueError("effective population must be positive")
    inv_n_eff = 1.0 / n_eff
    comps = (z0.S, z0.E, z0.I, z0.R, z0.M)
    symbolic = isinstance(params.table, Node) or any(isinstance(x, Node) for x in comps)

    if engine == "tape":
        return _simulate_tape(z0, C, N, params, T, inv_n_eff)
    if engine != "fused":
        raise ValueError(f"unknown engine {engine!r}")

    if not symbolic:
        z = np.stack([np.broadcast_to(_val(x), N.shape) for x in comps]).astype(np.float64)
        y, traj, _, diag = _rollout(params.daily()[:T], z, C, inv_n_eff)
        return SimulationOutput(y, [CompartmentState.from_array(s) for s in traj], diag)

    graph = next(x.graph for x in (params.table,) + comps if isinstance(x, Node))
    table = graph.lift(params.table)
    block = params.block[:T]
    if table.shape[0] == T and np.array_equal(block, np.arange(T)):
        daily = table
    else:
        daily = table[block]
    ins = [graph.lift(np.broadcast_to(x, N.shape).copy() if not isinstance(x, Node) else x) for x in comps]
    y = graph.apply("seirm_rollout", daily, *ins, C=C, inv_n_eff=inv_n_eff)
    traj = y.attrs["trajectory"]
    return SimulationOutput(y, [CompartmentState.from_array(s) for s in traj], y.attrs["diagnostics"])


def _simulate_tape(z0, C, N, params, T, inv_n_eff) -> SimulationOutput:
    table = params.table
    rows: dict[int, object] = {}
    diag = Diagnostics()
    states = [z0]
    daily = []
    z = z0
    for t in range(T):
        b = int(params.block[t])
        if b not in rows:
            rows[b] = table[b] if isinstance(table, Node) else np.asarray(table[b], dtype=np.float64)
        z, inflow = step(z, C, N, rows[b], diag, inv_n_eff)
        states.append(z)
        daily.append(dc.sum(inflow) if isinstance(inflow, Node) else float(np.sum(inflow)))
    if any(isinstance(d, Node) for d in daily):
        y = dc.stack(daily)
    else:
        y = np.array(daily)
    return SimulationOutput(y, states, diag)


def single_patch(params: EpidemicParams, N_total: float, z0: CompartmentState, T: int | None = None) -> SimulationOutput:
    """One well-mixed population: ``simulate`` with ``C = [[1]]``."""
    return simulate(z0, np.ones((1, 1)), np.array([float(N_total)]), params, T)


def scale_params(raw):
    """Map unconstrained (W, 5) outputs into the admissible rate ranges."""
    if isinstance(raw, Node):
        return dc.sigmoid(raw) * PARAM_BOUNDS
    return PARAM_BOUNDS / (1.0 + np.exp(-np.asarray(raw, dtype=np.float64)))


def unscale_params(rates) -> np.ndarray:
    """Inverse of :func:`scale_params` for numeric rates strictly inside their ranges."""
    u = np.asarray(rates, dtype=np.float64) / PARAM_BOUNDS
    return np.log(u) - np.log1p(-u)


def scale_seeds(raw):
    if isinstance(raw, Node):
        return dc.sigmoid(raw) * SEED_MAX
    return SEED_MAX / (1.0 + np.exp(-np.asarray(raw, dtype=np.float64)))


def write_trajectory_csv(path: str | Path, out: SimulationOutput, start_day: int = 1) -> None:
    y = out.values()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "new_infections", "cumulative"])
        for i, (v, c) in enumerate(zip(y, np.cumsum(y))):
            w.writerow([start_day + i, repr(float(v)), repr(float(c))])
