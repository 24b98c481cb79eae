"""Networks built on :mod:`privepi.diffcore`.

* :class:`ParameterNN` - two recurrent encoders (private zip-level panel and
  public city-level panel, both at weekly resolution) feeding a per-week
  feed-forward head that emits raw SEIRM rates plus per-group seed logits.
* :class:`Adapter` - maps each window of ``k`` consecutive simulated values to a
  corrected value for the day after the window.
* :class:`LSTMBaseline` - pure sequence model used as the comparison method.

Weights are plain numpy arrays in a flat ``dict`` with dotted names; a forward
pass binds them into a :class:`~privepi.diffcore.Graph` as trainable leaves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import metapop as mp
from .diffcore import Graph, Node
from .optim import Adam

CHECKPOINT_FORMAT = "privepi-checkpoint/1"


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def bind(graph: Graph, weights: dict[str, np.ndarray], prefix: str = "") -> dict[str, Node]:
    return {k: graph.param(v, k) for k, v in weights.items() if k.startswith(prefix)}


@dataclass
class Standardizer:
    """Per-column z-scoring with statistics frozen from the training window."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def weekly_mean(daily: np.ndarray, T: int) -> np.ndarray:
    """Average daily rows 1..T within each 7-day block (last block may be partial)."""
    daily = np.asarray(daily, dtype=np.float64)[:T]
    return np.stack([daily[w * 7:(w + 1) * 7].mean(axis=0) for w in range(mp.n_weeks(T))])


# -- recurrent cells ---------------------------------------------------------

def init_gru(rng, prefix: str, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.Wx": glorot(rng, n_in, 3 * hidden),
        f"{prefix}.bx": np.zeros(3 * hidden),
        f"{prefix}.Uh": glorot(rng, hidden, 3 * hidden, (3 * hidden, hidden)),
        f"{prefix}.bh": np.zeros(3 * hidden),
    }


def gru_encode(w: dict[str, Node], prefix: str, x, hidden: int) -> Node:
    """Unidirectional GRU over the rows of ``x`` (steps x features); returns all states."""
    graph = w[f"{prefix}.Wx"].graph
    proj = graph.lift(x) @ w[f"{prefix}.Wx"] + w[f"{prefix}.bx"]
    U, bh = w[f"{prefix}.Uh"], w[f"{prefix}.bh"]
    H2 = 2 * hidden
    h = graph.constant(np.zeros(hidden))
    states = []
    for t in range(proj.shape[0]):
        xt = proj[t]
        uh = U @ h + bh
        zr = dc.sigmoid(xt[:H2] + uh[:H2])
        z, r = zr[:hidden], zr[hidden:]
        n = dc.tanh(xt[H2:] + r * uh[H2:])
        h = n + z * (h - n)
        states.append(h)
    return dc.stack(states)


def init_lstm(rng, prefix: str, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget-gate bias
    return {
        f"{prefix}.Wx": glorot(rng, n_in, 4 * hidden),
        f"{prefix}.Wh": glorot(rng, hidden, 4 * hidden),
        f"{prefix}.b": b,
    }


def lstm_encode(w: dict[str, Node], prefix: str, xs: list, hidden: int) -> Node:
    """Batched LSTM over a list of (batch, features) inputs; returns the last hidden state."""
    graph = w[f"{prefix}.Wx"].graph
    batch = xs[0].shape[0]
    h = graph.constant(np.zeros((batch, hidden)))
    c = graph.constant(np.zeros((batch, hidden)))
    Wx, Wh, b = w[f"{prefix}.Wx"], w[f"{prefix}.Wh"], w[f"{prefix}.b"]
    H = hidden
    for x in xs:
        gates = graph.lift(x) @ Wx + h @ Wh + b
        i = dc.sigmoid(gates[:, :H])
        f = dc.sigmoid(gates[:, H:2 * H])
        g = dc.tanh(gates[:, 2 * H:3 * H])
        o = dc.sigmoid(gates[:, 3 * H:])
        c = f * c + i * g
        h = o * dc.tanh(c)
    return h


# -- parameter network ---------------------------------------------------------

class ParameterNN:
    """Maps (private weekly zip panel, public daily panel) to weekly SEIRM rates and seeds."""

    def __init__(self, n_public: int, n_private: int, n_groups: int, hidden: int = 32,
                 head_hidden: int = 64, seed: int = 0):
        self.n_public = n_public
        self.n_private = n_private
        self.n_groups = n_groups
        self.hidden = hidden
        self.head_hidden = head_hidden
        rng = np.random.default_rng(seed)
        n_enc = 2 if n_private > 0 else 1
        w = {}
        w.update(init_gru(rng, "pub", n_public, hidden))
        if n_private > 0:
            w.update(init_gru(rng, "priv", n_private, hidden))
        w["head.W1"] = glorot(rng, n_enc * hidden, head_hidden)
        w["head.b1"] = np.zeros(head_hidden)
        w["head.W2"] = glorot(rng, head_hidden, 5 + n_groups)
        w["head.b2"] = np.zeros(5 + n_groups)
        self.weights = w
        self.pub_norm: Standardizer | None = None
        self.priv_norm: Standardizer | None = None

    def config(self) -> dict:
        return {"n_public": self.n_public, "n_private": self.n_private, "n_groups": self.n_groups,
                "hidden": self.hidden, "head_hidden": self.head_hidden}

    def _inputs(self, zip_panel, public_daily, T: int):
        public_daily = np.asarray(public_daily, dtype=np.float64)
        if public_daily.ndim != 2 or public_daily.shape[0] < T or public_daily.shape[1] != self.n_public:
            raise ValueError(f"public panel must be (>= {T}, {self.n_public}), got {public_daily.shape}")
        W = mp.n_weeks(T)
        pub = weekly_mean(public_daily, T)
        if not np.all(np.isfinite(pub)):
            raise ValueError("public panel contains non-finite values")
        priv = None
        if self.n_private > 0:
            zp = np.asarray(zip_panel, dtype=np.float64)
            if zp.ndim != 2 or zp.shape[0] != self.n_private or zp.shape[1] < W:
                raise ValueError(f"zip panel must be ({self.n_private}, >= {W}), got {zp.shape}")
            priv = zp[:, :W].T
            if not np.all(np.isfinite(priv)):
                raise ValueError("zip panel contains non-finite values")
        return pub, priv

    def fit_normalization(self, zip_panel, public_daily, T: int) -> None:
        pub, priv = self._inputs(zip_panel, public_daily, T)
        self.pub_norm = Standardizer.fit(pub)
        self.priv_norm = Standardizer.fit(priv) if priv is not None else None

    def raw_outputs(self, w: dict[str, Node], zip_panel, public_daily, T: int) -> Node:
        """Unconstrained (weeks, 5 + m) head outputs."""
        pub, priv = self._inputs(zip_panel, public_daily, T)
        if self.pub_norm is None:
            raise RuntimeError("normalization statistics not fitted")
        enc = [gru_encode(w, "pub", self.pub_norm(pub), self.hidden)]
        if priv is not None:
            enc.append(gru_encode(w, "priv", self.priv_norm(priv), self.hidden))
        z = enc[0] if len(enc) == 1 else dc.concat(enc, axis=1)
        hid = dc.tanh(z @ w["head.W1"] + w["head.b1"])
        return hid @ w["head.W2"] + w["head.b2"]

    def predict(self, w: dict[str, Node], zip_panel, public_daily, T: int):
        """Returns (weekly scaled rates node, seed-fraction node, daily EpidemicParams)."""
        raw = self.raw_outputs(w, zip_panel, public_daily, T)
        rates = mp.scale_params(raw[:, :5])
        seeds = mp.scale_seeds(raw[0, 5:])
        return rates, seeds, mp.expand_weekly(rates, T)

    def set_output_bias(self, rates: np.ndarray, seed_fraction: np.ndarray) -> None:
        """Start the head at given rates/seed fractions (inverse sigmoid scaling)."""
        u = np.asarray(seed_fraction, dtype=np.float64) / mp.SEED_MAX
        self.weights["head.b2"] = np.concatenate([mp.unscale_params(rates), np.log(u) - np.log1p(-u)])


def predict_params(net: ParameterNN, zip_panel, public_daily, T: int):
    """Numeric convenience: daily EpidemicParams and seed fractions for days 1..T."""
    g = Graph()
    rates, seeds, _ = net.predict(bind(g, net.weights), zip_panel, public_daily, T)
    return mp.expand_weekly(rates.value, T), seeds.value


# -- adapter -------------------------------------------------------------------

def chunk_index(T: int, k: int) -> np.ndarray:
    """(T - k, k) day indices of the overlapping windows starting at each day."""
    return np.arange(T - k)[:, None] + np.arange(k)[None, :]


class Adapter:
    """Feed-forward corrector: window of ``k`` simulated values -> next-day value(s)."""

    def __init__(self, k: int = 7, hidden: int = 32, n_out: int = 1, seed: int = 0):
        if k < 1:
            raise ValueError("chunk size must be >= 1")
        self.k = k
        self.hidden = hidden
        self.n_out = n_out
        rng = np.random.default_rng(seed)
        self.weights = {
            "adapter.W1": glorot(rng, k, hidden),
            "adapter.b1": np.zeros(hidden),
            "adapter.W2": glorot(rng, hidden, n_out),
            "adapter.b2": np.zeros(n_out),
        }
        self.scale = 1.0

    def config(self) -> dict:
        return {"k": self.k, "hidden": self.hidden, "n_out": self.n_out, "scale": self.scale}

    def forward(self, w: dict[str, Node], sim) -> Node:
        """Corrected values, shape (T - k, n_out); row j pairs with day j + k."""
        T = sim.shape[0]
        if T <= self.k:
            raise ValueError(f"sequence length {T} must exceed chunk size {self.k}")
        graph = w["adapter.W1"].graph
        sim = graph.lift(sim)
        chunks = sim[chunk_index(T, self.k)] * (1.0 / self.scale)
        hid = dc.relu(chunks @ w["adapter.W1"] + w["adapter.b1"])
        return (hid @ w["adapter.W2"] + w["adapter.b2"]) * self.scale

    def passthrough(self) -> None:
        """Arrange weights so the output equals the last value of each window."""
        W1 = np.zeros_like(self.weights["adapter.W1"])
        W1[-1, 0] = 1.0
        W2 = np.zeros_like(self.weights["adapter.W2"])
        W2[0, :] = 1.0
        self.weights.update({"adapter.W1": W1, "adapter.b1": np.zeros(self.hidden),
                             "adapter.W2": W2, "adapter.b2": np.zeros(self.n_out)})


def adapter_correct(adapter: Adapter, sim) -> np.ndarray:
    """Numeric corrected sequence of length T - k (squeezed when single-output)."""
    g = Graph()
    out = adapter.forward(bind(g, adapter.weights), np.asarray(sim, dtype=np.float64)).value
    return out[:, 0] if adapter.n_out == 1 else out


# -- LSTM baseline ---------------------------------------------------------------

class LSTMBaseline:
    """Two-encoder LSTM forecaster trained on sliding 5-day chunks (4 inputs -> 1 target).

    Public features (target in column ``target_col``) go through one LSTM, the
    optional daily zip features through another; their final states are
    concatenated, passed through a dense ReLU layer and dropout, and a linear
    output layer with an L2 kernel penalty.
    """

    window = 4

    def __init__(self, n_public: int, n_private: int = 0, hidden: int = 32, dense: int = 16,
                 dropout: float = 0.2, l2: float = 0.01, target_col: int = 0, seed: int = 0):
        self.n_public = n_public
        self.n_private = n_private
        self.hidden = hidden
        self.dense = dense
        self.dropout = dropout
        self.l2 = l2
        self.target_col = target_col
        self.seed = seed
        rng = np.random.default_rng(seed)
        w = init_lstm(rng, "lstm_pub", n_public, hidden)
        if n_private > 0:
            w.update(init_lstm(rng, "lstm_priv", n_private, hidden))
        n_enc = 2 if n_private > 0 else 1
        w["dense.W"] = glorot(rng, n_enc * hidden, dense)
        w["dense.b"] = np.zeros(dense)
        w["out.W"] = glorot(rng, dense, 1)
        w["out.b"] = np.zeros(1)
        self.weights = w
        self.pub_norm: Standardizer | None = None
        self.priv_norm: Standardizer | None = None
        self.trained = False

    def _forward(self, w, pub_windows, priv_windows, mask=None) -> Node:
        h = [lstm_encode(w, "lstm_pub", pub_windows, self.hidden)]
        if self.n_private > 0:
            h.append(lstm_encode(w, "lstm_priv", priv_windows, self.hidden))
        z = h[0] if len(h) == 1 else dc.concat(h, axis=1)
        d = dc.relu(z @ w["dense.W"] + w["dense.b"])
        if mask is not None:
            d = d * mask
        return (d @ w["out.W"] + w["out.b"])[:, 0]

    def _check(self, public_daily, zip_daily):
        pub = np.asarray(public_daily, dtype=np.float64)
        if pub.ndim != 2 or pub.shape[1] != self.n_public:
            raise ValueError(f"public panel must have {self.n_public} columns, got {pub.shape}")
        priv = None
        if self.n_private > 0:
            priv = np.asarray(zip_daily, dtype=np.float64)
            if priv.shape != (pub.shape[0], self.n_private):
                raise ValueError(f"daily zip panel must be {(pub.shape[0], self.n_private)}, got {priv.shape}")
        return pub, priv

    def fit(self, public_daily, zip_daily=None, epochs: int = 400, lr: float = 1e-3) -> list[float]:
        pub, priv = self._check(public_daily, zip_daily)
        T = pub.shape[0]
        if T < self.window + 1:
            raise ValueError(f"need at least {self.window + 1} days to form a training chunk, got {T}")
        self.pub_norm = Standardizer.fit(pub)
        pn = self.pub_norm(pub)
        if priv is not None:
            self.priv_norm = Standardizer.fit(priv)
            qn = self.priv_norm(priv)
        starts = np.arange(T - self.window)
        pub_w = [pn[starts + i] for i in range(self.window)]
        priv_w = [qn[starts + i] for i in range(self.window)] if priv is not None else None
        target = pn[starts + self.window, self.target_col]
        rng = np.random.default_rng(self.seed + 1)
        opt = Adam(lr=lr, clip_norm=None)
        keep = 1.0 - self.dropout
        history = []
        for _ in range(epochs):
            g = Graph()
            w = bind(g, self.weights)
            mask = (rng.random((len(starts), self.dense)) < keep) / keep
            pred = self._forward(w, pub_w, priv_w, mask)
            loss = dc.mean(dc.square(pred - target)) + self.l2 * dc.sum(dc.square(w["out.W"]))
            grads = g.backward(loss).params()
            opt.step(self.weights, grads)
            history.append(loss.item())
        self.trained = True
        return history

    def predict_next(self, pub_window: np.ndarray, priv_window: np.ndarray | None) -> float:
        """Normalized next-day target from 4 normalized rows (dropout off)."""
        g = Graph()
        w = bind(g, self.weights)
        pub_w = [pub_window[i][None, :] for i in range(self.window)]
        priv_w = [priv_window[i][None, :] for i in range(self.window)] if priv_window is not None else None
        return float(self._forward(w, pub_w, priv_w).value[0])

    def forecast(self, public_daily, zip_daily=None, H: int = 28) -> np.ndarray:
        """Autoregressive H-day forecast of the target column after the last row.

        The predicted target is fed back; other features are held at their last
        observed values.
        """
        if not self.trained:
            raise RuntimeError("baseline has not been trained")
        pub, priv = self._check(public_daily, zip_daily)
        if pub.shape[0] < self.window + 1:
            raise ValueError(f"need at least {self.window + 1} days, got {pub.shape[0]}")
        if H <= 0:
            return np.zeros(0)
        pn = list(self.pub_norm(pub[-self.window:]))
        qn = list(self.priv_norm(priv[-self.window:])) if priv is not None else None
        out = []
        for _ in range(H):
            nxt = self.predict_next(np.array(pn[-self.window:]),
                                    np.array(qn[-self.window:]) if qn is not None else None)
            row = pn[-1].copy()
            row[self.target_col] = nxt
            pn.append(row)
            if qn is not None:
                qn.append(qn[-1])
            out.append(nxt * self.pub_norm.std[self.target_col] + self.pub_norm.mean[self.target_col])
        return np.array(out)


def lstm_forecast(baseline: LSTMBaseline, public_daily, zip_daily, T: int, H: int) -> np.ndarray:
    """Forecast days T+1..T+H from data on days 1..T."""
    if T < LSTMBaseline.window + 1:
        raise ValueError(f"T={T} is shorter than one 5-day chunk")
    pub = np.asarray(public_daily, dtype=np.float64)[:T]
    priv = None if zip_daily is None else np.asarray(zip_daily, dtype=np.float64)[:T]
    return baseline.forecast(pub, priv, H)


# -- checkpoints -----------------------------------------------------------------

def write_checkpoint(path: str | Path, meta: dict, weights: dict[str, np.ndarray]) -> None:
    """Self-describing JSON checkpoint; floats are written with exact round-trip repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta,
        "weights": {k: {"shape": list(v.shape), "data": [float(x) for x in np.ravel(v)]}
                    for k, v in sorted(weights.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    weights = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["weights"].items()}
    return doc["meta"], weights
