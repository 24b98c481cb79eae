"""Joint training of parameter network, simulator and adapter; forecasting."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import metapop as mp
from .diffcore import Graph, Node
from .neural import Adapter, ParameterNN, Standardizer, bind, read_checkpoint, write_checkpoint
from .optim import Adam

log = logging.getLogger(__name__)

SCHEDULES = ("joint-blend", "three-stage")
LOSS_MODES = ("mse", "quantile")
MODEL_VARIANTS = ("age-stratified", "single-patch")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 2000
    schedule: str = "joint-blend"
    stage_epochs: tuple = (2000, 500, 500)
    loss: str = "mse"
    quantiles: tuple = (20, 50, 80)
    seed: int = 0
    horizon: int = 28
    chunk: int = 7
    hidden: int = 32
    head_hidden: int = 64
    adapter_hidden: int = 32
    clip_norm: float = 5.0
    model: str = "age-stratified"
    use_private: bool = True
    # starting rates (beta, alpha, gamma, eta, delta) and seed fraction of the head
    init_rates: tuple | None = None
    init_seed_fraction: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if self.model not in MODEL_VARIANTS:
            raise ValueError(f"model must be one of {MODEL_VARIANTS}")
        if self.schedule == "joint-blend" and self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if any(not 0 < q < 100 for q in self.quantiles):
            raise ValueError("quantile levels must lie in (0, 100)")
        self.stage_epochs = tuple(int(e) for e in self.stage_epochs)
        self.quantiles = tuple(self.quantiles)

    @property
    def total_epochs(self) -> int:
        return self.epochs if self.schedule == "joint-blend" else sum(self.stage_epochs)


@dataclass
class LossReport:
    epoch: list = field(default_factory=list)
    metapop: list = field(default_factory=list)
    adapter: list = field(default_factory=list)
    total: list = field(default_factory=list)
    alpha: list = field(default_factory=list)

    def append(self, epoch, l_m, l_a, total, alpha):
        self.epoch.append(epoch)
        self.metapop.append(l_m)
        self.adapter.append(l_a)
        self.total.append(total)
        self.alpha.append(alpha)

    def __len__(self):
        return len(self.epoch)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "L_MetaPop", "L_Adapter", "L", "alpha"])
            for row in zip(self.epoch, self.metapop, self.adapter, self.total, self.alpha):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


# -- losses --------------------------------------------------------------------

def _as_node(graph: Graph | None, x):
    return x if isinstance(x, Node) else (graph or Graph()).constant(x)


def loss_metapop(sim, truth) -> Node:
    """Mean smoothed absolute deviation between simulated and observed daily counts."""
    n_sim = sim.shape[0] if isinstance(sim, Node) else np.shape(sim)[0]
    truth = np.asarray(truth, dtype=np.float64)
    if n_sim != truth.shape[0] or n_sim < 1:
        raise ValueError(f"length mismatch: simulation {n_sim}, truth {truth.shape[0]}")
    sim = _as_node(None, sim)
    return dc.mean(dc.abs_smooth(sim - truth))


def loss_adapter(corrected, truth, k: int) -> Node:
    """Mean smoothed absolute deviation between corrected[t] and truth[t + k]."""
    truth = np.asarray(truth, dtype=np.float64)
    n = corrected.shape[0] if isinstance(corrected, Node) else np.shape(corrected)[0]
    if n != truth.shape[0] - k:
        raise ValueError(f"corrected length {n} must equal len(truth) - k = {truth.shape[0] - k}")
    corrected = _as_node(None, corrected)
    return dc.mean(dc.abs_smooth(corrected - truth[k:]))


def quantile_loss(truth, pred, level: float) -> Node:
    """Pinball loss summed over steps; ``level`` in percent.

    Uses max(u, 0) = (u + |u|) / 2 with the smoothed absolute value, which gives
    0.5 * |u| + (level/100 - 0.5) * u for u = truth - pred.
    """
    if not 0 < level < 100:
        raise ValueError("quantile level must lie in (0, 100)")
    truth = np.asarray(truth, dtype=np.float64)
    n = pred.shape[0] if isinstance(pred, Node) else np.shape(pred)[0]
    if n != truth.shape[0]:
        raise ValueError(f"length mismatch: truth {truth.shape[0]}, prediction {n}")
    pred = _as_node(None, pred)
    u = truth - pred
    q = level / 100.0
    return dc.sum(0.5 * dc.abs_smooth(u) + (q - 0.5) * u)


def alpha_schedule(epoch: int, total: int) -> float:
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return epoch / total


def combined_loss(l_m, l_a, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * l_m + (1.0 - alpha) * l_a


# -- model -----------------------------------------------------------------------

@dataclass
class TrainingData:
    """Inputs of one training window.

    ``public`` is (T, F) daily with the case series in column 0, ``private`` is
    the (M, >= weeks) privatized zip panel or None, ``target`` the (T,) series
    the simulator is fitted to.
    """

    public: np.ndarray
    private: np.ndarray | None
    target: np.ndarray

    def __post_init__(self):
        self.public = np.asarray(self.public, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.private is not None:
            self.private = np.asarray(self.private, dtype=np.float64)
        if self.public.shape[0] < self.target.shape[0]:
            raise ValueError("public panel shorter than the target window")

    @property
    def T(self) -> int:
        return int(self.target.shape[0])


@dataclass
class TrainedModel:
    net: ParameterNN
    adapter: Adapter
    config: TrainConfig
    contact: np.ndarray
    population: np.ndarray
    T: int
    mode: str = "forecast"
    report: LossReport = field(default_factory=LossReport)
    trained: bool = False

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return {**self.net.weights, **self.adapter.weights}

    def _private(self, private):
        return private if self.net.n_private > 0 else None

    def fit_window(self, public, private, T: int | None = None):
        """Numeric rates/seeds and simulation over days 1..T."""
        T = self.T if T is None else T
        g = Graph()
        rates, seeds, params = self.net.predict(bind(g, self.net.weights), self._private(private), public, T)
        z0 = mp.CompartmentState.seeded(self.population, seeds.value * self.population)
        sim = mp.simulate(z0, self.contact, self.population, mp.expand_weekly(rates.value, T))
        return rates.value, seeds.value, sim

    def save(self, path: str | Path) -> None:
        meta = {
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()},
            "net": self.net.config(),
            "adapter": self.adapter.config(),
            "normalization": {
                "public": self.net.pub_norm.to_dict(),
                "private": self.net.priv_norm.to_dict() if self.net.priv_norm else None,
            },
            "contact": self.contact.tolist(),
            "population": self.population.tolist(),
            "T": self.T,
            "mode": self.mode,
            "trained": self.trained,
        }
        write_checkpoint(path, meta, self.weights)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        meta, weights = read_checkpoint(path)
        cfg = meta["config"]
        cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
        net = ParameterNN(**meta["net"])
        a = meta["adapter"]
        adapter = Adapter(k=a["k"], hidden=a["hidden"], n_out=a["n_out"])
        adapter.scale = a["scale"]
        for k in net.weights:
            net.weights[k] = weights[k]
        for k in adapter.weights:
            adapter.weights[k] = weights[k]
        norm = meta["normalization"]
        net.pub_norm = Standardizer.from_dict(norm["public"])
        net.priv_norm = Standardizer.from_dict(norm["private"]) if norm["private"] else None
        return cls(net, adapter, cfg, np.array(meta["contact"]), np.array(meta["population"]),
                   meta["T"], meta["mode"], trained=meta["trained"])


def build_model(config: TrainConfig, data: TrainingData, contact=None, population=None) -> TrainedModel:
    """Fresh (untrained) model with normalization fitted on ``data``."""
    if config.model == "single-patch":
        total = float(np.sum(mp.DEFAULT_POPULATION if population is None else population))
        contact, population = np.ones((1, 1)), np.array([total])
    else:
        contact = mp.check_contact(mp.DEFAULT_CONTACT if contact is None else contact)
        population = mp.check_population(mp.DEFAULT_POPULATION if population is None else population,
                                         contact.shape[0])
    use_private = config.use_private and data.private is not None
    n_private = data.private.shape[0] if use_private else 0
    n_out = len(config.quantiles) if config.loss == "quantile" else 1
    net = ParameterNN(data.public.shape[1], n_private, contact.shape[0], config.hidden,
                      config.head_hidden, seed=config.seed)
    if config.init_rates is not None or config.init_seed_fraction is not None:
        rates = np.asarray(config.init_rates if config.init_rates is not None
                           else mp.PARAM_BOUNDS / 2, dtype=np.float64)
        frac = config.init_seed_fraction if config.init_seed_fraction is not None else mp.SEED_MAX / 2
        net.set_output_bias(rates, np.full(contact.shape[0], frac))
    adapter = Adapter(config.chunk, config.adapter_hidden, n_out, seed=config.seed + 1)
    adapter.scale = max(float(np.mean(np.abs(data.target))), 1.0)
    net.fit_normalization(data.private if use_private else None, data.public, data.T)
    return TrainedModel(net, adapter, config, contact, population, data.T)


def _forward_losses(model: TrainedModel, w: dict[str, Node], data: TrainingData, freeze_sim: bool = False):
    """Returns (L_MetaPop node, L_Adapter node)."""
    net, adapter, cfg = model.net, model.adapter, model.config
    graph = w["adapter.W1"].graph
    if freeze_sim:
        sim = graph.constant(model.fit_window(data.public, data.private, data.T)[2].values())
    else:
        rates, seeds, params = net.predict(w, model._private(data.private), data.public, data.T)
        z0 = mp.CompartmentState.seeded(model.population, seeds * model.population)
        sim = mp.simulate(z0, model.contact, model.population, params).new_infections
    l_m = loss_metapop(sim, data.target)
    corrected = adapter.forward(w, sim)
    k = adapter.k
    if cfg.loss == "quantile":
        terms = [quantile_loss(data.target[k:], corrected[:, i], q) for i, q in enumerate(cfg.quantiles)]
        l_a = terms[0]
        for t in terms[1:]:
            l_a = l_a + t
        l_a = l_a * (1.0 / (data.T - k))
    else:
        l_a = loss_adapter(corrected[:, 0], data.target, k)
    return l_m, l_a


def train(config: TrainConfig, data: TrainingData, contact=None, population=None,
          model: TrainedModel | None = None) -> TrainedModel:
    """Gradient-based fit of all networks through the simulator.

    ``joint-blend`` minimizes alpha_t * L_MetaPop + (1 - alpha_t) * L_Adapter with
    alpha_t = epoch / epochs. ``three-stage`` runs L_MetaPop on the parameter
    network, then L_Adapter on the adapter with the simulation frozen, then the
    blend on everything.
    """
    if model is None:
        model = build_model(config, data, contact, population)
    if data.T <= model.adapter.k:
        raise ValueError(f"training window {data.T} must exceed chunk size {model.adapter.k}")
    weights = {**model.net.weights, **model.adapter.weights}
    opt = Adam(config.lr, clip_norm=config.clip_norm)
    if config.schedule == "joint-blend":
        stages = [("blend", config.epochs)]
    else:
        stages = list(zip(("metapop", "adapter", "blend"), config.stage_epochs))
    epoch = 0
    for stage, n_epochs in stages:
        for t in range(1, n_epochs + 1):
            epoch += 1
            g = Graph()
            if stage == "adapter":
                w = bind(g, model.adapter.weights)
            else:
                w = bind(g, weights)
            l_m, l_a = _forward_losses(model, w, data, freeze_sim=stage == "adapter")
            if stage == "metapop":
                alpha, root = 1.0, l_m
            elif stage == "adapter":
                alpha, root = 0.0, l_a
            else:
                alpha = alpha_schedule(t, n_epochs)
                root = combined_loss(l_m, l_a, alpha)
            value = root.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, value)
            grads = g.backward(root).params()
            if stage == "metapop":
                grads = {k: v for k, v in grads.items() if not k.startswith("adapter.")}
            opt.step(weights, grads)
            model.report.append(epoch, l_m.item(), l_a.item(), value, alpha)
            if epoch % 250 == 0:
                log.info("epoch %d  L_MetaPop=%.4g  L_Adapter=%.4g  alpha=%.3f", epoch, l_m.item(), l_a.item(), alpha)
    model.net.weights.update({k: v for k, v in weights.items() if k in model.net.weights})
    model.adapter.weights.update({k: v for k, v in weights.items() if k in model.adapter.weights})
    model.trained = True
    return model


# -- forecasting -----------------------------------------------------------------

@dataclass
class Forecast:
    days: np.ndarray              # 1-based day indices T+1..T+H
    point: np.ndarray             # adapter-corrected (median track in quantile mode)
    quantiles: np.ndarray | None  # (H, 3) sorted tracks, quantile mode only
    raw: np.ndarray               # simulator output over the horizon
    fitted: np.ndarray            # simulator output over days 1..T
    final_state: mp.CompartmentState
    rates: np.ndarray             # weekly rates used over days 1..T


def forecast(model: TrainedModel | None, public, private, H: int, T: int | None = None) -> Forecast:
    """Extend the learned schedule (last week held) H days past T and correct with the adapter."""
    if model is None or not model.trained:
        raise RuntimeError("model has not been trained")
    if H < 1:
        raise ValueError("horizon must be >= 1")
    T = model.T if T is None else T
    g = Graph()
    rates, seeds, _ = model.net.predict(bind(g, model.net.weights), model._private(private), public, T)
    rates = rates.value
    block = np.concatenate([np.arange(T) // 7, np.full(H, rates.shape[0] - 1)])
    params = mp.EpidemicParams(rates, block)
    z0 = mp.CompartmentState.seeded(model.population, seeds.value * model.population)
    sim = mp.simulate(z0, model.contact, model.population, params)
    y = sim.values()
    k = model.adapter.k
    g = Graph()
    corrected = model.adapter.forward(bind(g, model.adapter.weights), y).value[T - k:T - k + H]
    if model.adapter.n_out > 1:
        tracks = np.sort(corrected, axis=1)
        mid = list(model.config.quantiles).index(50) if 50 in model.config.quantiles else tracks.shape[1] // 2
        point = tracks[:, mid]
    else:
        tracks, point = None, corrected[:, 0]
    return Forecast(np.arange(T + 1, T + H + 1), point, tracks, y[T:], y[:T], sim.states[T], rates)
