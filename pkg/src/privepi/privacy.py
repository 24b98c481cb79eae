"""Input perturbation of transaction data and privacy-budget accounting.

Two merchant-level routes produce the private zip panel:

* Laplace: clip every amount, sum per (zip, week), add Laplace noise to each
  cell with scale K * C / eps (K = cells a merchant can touch).
* Randomized response: Bernoulli-subsample records, randomize the zip code and
  the quantized amount of each kept record, dequantize and aggregate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import ZipPanel

DEFAULT_K = 627
DEFAULT_CLIP = 100.0
DEFAULT_BINS = 50
DEFAULT_ALPHA = 0.2
DEFAULT_EPS_EVENT = 0.007
MECHANISMS = ("laplace", "rr")
GRANULARITIES = ("merchant-level", "event-level")


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class TransactionRecord:
    merchant_id: str
    zip: str
    week: int
    amount: float
    category: str = ""


@dataclass
class Transactions:
    """Column-oriented list of transaction records."""

    merchant_id: np.ndarray
    zip: np.ndarray
    week: np.ndarray
    amount: np.ndarray
    category: np.ndarray

    def __post_init__(self):
        self.merchant_id = np.asarray(self.merchant_id, dtype=str)
        self.zip = np.asarray(self.zip, dtype=str)
        self.week = np.asarray(self.week, dtype=np.int64)
        self.amount = np.asarray(self.amount, dtype=np.float64)
        self.category = np.asarray(self.category, dtype=str)
        n = len(self.zip)
        if not all(len(a) == n for a in (self.merchant_id, self.week, self.amount, self.category)):
            raise ValueError("transaction columns differ in length")
        if np.any(self.week < 1):
            raise ValueError("week index must be >= 1")
        if not np.all(np.isfinite(self.amount)) or np.any(self.amount < 0):
            raise ValueError("amounts must be finite and non-negative")

    def __len__(self):
        return len(self.zip)

    @classmethod
    def from_records(cls, records) -> "Transactions":
        records = list(records)
        return cls([r.merchant_id for r in records], [r.zip for r in records],
                   np.array([r.week for r in records], dtype=np.int64),
                   np.array([r.amount for r in records], dtype=np.float64),
                   [r.category for r in records])

    def records(self):
        for i in range(len(self)):
            yield TransactionRecord(str(self.merchant_id[i]), str(self.zip[i]), int(self.week[i]),
                                    float(self.amount[i]), str(self.category[i]))

    def subset(self, mask) -> "Transactions":
        return Transactions(self.merchant_id[mask], self.zip[mask], self.week[mask],
                            self.amount[mask], self.category[mask])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["merchant_id", "zip", "week", "amount", "category"])
            w.writerows(zip(self.merchant_id, self.zip, self.week.tolist(),
                            map(repr, self.amount.tolist()), self.category))

    @classmethod
    def read_csv(cls, path: str | Path) -> "Transactions":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: empty transaction file")
            need = ["merchant_id", "zip", "week", "amount", "category"]
            missing = [c for c in need if c not in header]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            idx = [header.index(c) for c in need]
            cols = list(zip(*([row[i] for i in idx] for row in reader))) or [()] * 5
        try:
            return cls(cols[0], cols[1], np.array(cols[2], dtype=np.int64),
                       np.array(cols[3], dtype=np.float64), cols[4])
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from None


def _as_transactions(records) -> Transactions:
    return records if isinstance(records, Transactions) else Transactions.from_records(records)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# -- aggregation and the Laplace route ---------------------------------------------

def clip_and_aggregate(records, clip: float, zips, W: int) -> np.ndarray:
    """(M, W) table of per-record amounts clipped at ``clip`` and summed per zip and week."""
    if clip <= 0:
        raise ValueError("clip bound must be positive")
    tx = _as_transactions(records)
    zips = [str(z) for z in zips]
    table = np.zeros((len(zips), W))
    if len(tx) == 0:
        return table
    lookup = {z: i for i, z in enumerate(zips)}
    unknown = sorted(set(tx.zip.tolist()) - set(lookup))
    if unknown:
        raise ValueError(f"records with unknown zip codes: {unknown}")
    if np.any(tx.week > W):
        raise ValueError(f"week index exceeds W={W}")
    rows = np.array([lookup[z] for z in tx.zip.tolist()], dtype=np.int64)
    np.add.at(table, (rows, tx.week - 1), np.minimum(tx.amount, clip))
    return table


def laplace_scale(eps: float, K: int = DEFAULT_K, clip: float = DEFAULT_CLIP) -> float:
    if not eps > 0:
        raise BudgetError("epsilon must be positive (or inf)")
    if K < 1:
        raise ValueError("K must be >= 1")
    return K * clip / eps


def laplace_privatize(table, eps: float, K: int = DEFAULT_K, clip: float = DEFAULT_CLIP, seed=0) -> np.ndarray:
    """Add Laplace(K * clip / eps) noise to every cell; eps = inf returns a copy."""
    table = np.array(table, dtype=np.float64)
    b = laplace_scale(eps, K, clip)
    if math.isinf(eps):
        return table
    return table + _rng(seed).laplace(0.0, b, size=table.shape)


def event_level_privatize(series, eps: float, clip: float, seed=0) -> np.ndarray:
    """Clip each daily value to [0, clip] and add Laplace(clip / eps) per timestamp."""
    if clip <= 0:
        raise ValueError("clip bound must be positive")
    if not eps > 0:
        raise BudgetError("epsilon must be positive (or inf)")
    x = np.clip(np.asarray(series, dtype=np.float64), 0.0, clip)
    if math.isinf(eps):
        return x
    return x + _rng(seed).laplace(0.0, clip / eps, size=x.shape)


# -- randomized response route -----------------------------------------------------

def rr_keep_probability(k: int, eps: float) -> float:
    if k < 1:
        raise ValueError("universe size must be >= 1")
    if eps < 0:
        raise BudgetError("epsilon must be >= 0")
    if math.isinf(eps) or k == 1:
        return 1.0
    return 1.0 / (1.0 + (k - 1) * math.exp(-eps))


def rr_categorical(value, k: int, eps: float, seed=0):
    """Keep the true index with prob e^eps / (e^eps + k - 1), else a uniform other index.

    ``value`` may be a scalar or an integer array (each entry randomized independently).
    """
    v = np.asarray(value)
    if not np.issubdtype(v.dtype, np.integer):
        if not np.all(v == np.floor(v)):
            raise ValueError("category index must be an integer")
        v = v.astype(np.int64)
    if np.any(v < 0) or np.any(v >= k):
        raise ValueError(f"category index outside universe [0, {k})")
    p = rr_keep_probability(k, eps)
    rng = _rng(seed)
    keep = rng.random(v.shape) < p
    if k == 1:
        out = v.copy()
    else:
        other = rng.integers(0, k - 1, size=v.shape)
        other = other + (other >= v)
        out = np.where(keep, v, other)
    return int(out) if np.ndim(value) == 0 else out


def quantize(amount, B: int = DEFAULT_BINS, lo: float = 0.0, hi: float = DEFAULT_CLIP):
    """Equal-width bin index in 0..B-1 after clamping to [lo, hi]."""
    if B < 1 or not lo < hi:
        raise ValueError("need B >= 1 and lo < hi")
    a = np.clip(np.asarray(amount, dtype=np.float64), lo, hi)
    idx = np.minimum(np.floor((a - lo) / ((hi - lo) / B)).astype(np.int64), B - 1)
    return int(idx) if np.ndim(amount) == 0 else idx


def dequantize(index, B: int = DEFAULT_BINS, lo: float = 0.0, hi: float = DEFAULT_CLIP):
    if B < 1 or not lo < hi:
        raise ValueError("need B >= 1 and lo < hi")
    i = np.asarray(index)
    if np.any(i < 0) or np.any(i >= B):
        raise ValueError(f"bin index outside [0, {B})")
    mid = lo + (i + 0.5) * ((hi - lo) / B)
    return float(mid) if np.ndim(index) == 0 else mid


def event_budget(eps_zip: float, eps_trans: float) -> float:
    if eps_zip < 0 or eps_trans < 0:
        raise BudgetError("budgets must be >= 0")
    return eps_zip + eps_trans


def subsample(records, rate: float, seed=0):
    """Independent Bernoulli(rate) inclusion of each record."""
    if not 0 < rate <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    tx = _as_transactions(records)
    if rate == 1:
        keep = np.ones(len(tx), dtype=bool)
    else:
        keep = _rng(seed).random(len(tx)) < rate
    out = tx.subset(keep)
    return out if isinstance(records, Transactions) else list(out.records())


def account_merchant_budget(eps_event: float, K: int = DEFAULT_K, rate: float = DEFAULT_ALPHA) -> float:
    """Merchant-level budget K * rate * eps_event after subsampling amplification."""
    if eps_event < 0 or K < 1 or not 0 < rate <= 1:
        raise BudgetError("need eps_event >= 0, K >= 1 and rate in (0, 1]")
    return K * rate * eps_event


def basic_composition_budget(eps_event: float, K: int = DEFAULT_K) -> float:
    """Merchant-level budget without subsampling."""
    return account_merchant_budget(eps_event, K, 1.0)


# -- pipeline ------------------------------------------------------------------------

@dataclass
class PrivacyConfig:
    mechanism: str = "laplace"
    epsilon: float = 1.0            # target at merchant level (inf = no privacy)
    delta: float = 0.0
    K: int = DEFAULT_K
    clip: float = DEFAULT_CLIP
    bins: int = DEFAULT_BINS
    alpha: float = DEFAULT_ALPHA
    eps_event: float = DEFAULT_EPS_EVENT
    eps_zip: float | None = None    # defaults to half of eps_event
    eps_trans: float | None = None
    granularity: str = "merchant-level"

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if self.epsilon < 0 or not 0 <= self.delta <= 1:
            raise BudgetError("need epsilon >= 0 and delta in [0, 1]")
        if self.eps_zip is None:
            self.eps_zip = self.eps_event / 2
        if self.eps_trans is None:
            self.eps_trans = self.eps_event / 2
        self.eps_event = event_budget(self.eps_zip, self.eps_trans)


@dataclass
class Certificate:
    mechanism: str
    granularity: str
    epsilon: float
    delta: float
    params: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"mechanism={self.mechanism}", f"granularity={self.granularity}",
                 f"epsilon={self.epsilon!r}", f"delta={self.delta!r}"]
        lines += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in self.params.items()]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "Certificate":
        kv = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                kv[key.strip()] = val.strip()
        try:
            mech, gran = kv.pop("mechanism"), kv.pop("granularity")
            eps, delta = float(kv.pop("epsilon")), float(kv.pop("delta"))
        except KeyError as exc:
            raise ValueError(f"{path}: certificate lacks {exc.args[0]}") from None
        return cls(mech, gran, eps, delta, kv)


def privatize_pipeline(records, config: PrivacyConfig, zips, W: int, seed=0) -> tuple[ZipPanel, Certificate]:
    """Perturbed (M, W) zip panel plus a certificate of the guarantee it carries."""
    tx = _as_transactions(records)
    zips = [str(z) for z in zips]
    common = {"clip_bound": float(config.clip), "K": int(config.K)}
    if config.mechanism == "laplace":
        table = clip_and_aggregate(tx, config.clip, zips, W)
        noisy = laplace_privatize(table, config.epsilon, config.K, config.clip, seed)
        cert = Certificate("laplace", config.granularity, config.epsilon, config.delta,
                           {**common, "noise_scale": laplace_scale(config.epsilon, config.K, config.clip)})
        return ZipPanel(zips, noisy[:, :, None], ["amount"]), cert

    spent = account_merchant_budget(config.eps_event, config.K, config.alpha)
    if spent > config.epsilon:
        raise BudgetError(f"merchant-level budget {spent!r} exceeds target {config.epsilon!r} "
                          f"by {spent - config.epsilon!r}")
    rng = _rng(seed)
    kept = subsample(tx, config.alpha, rng)
    lookup = {z: i for i, z in enumerate(zips)}
    unknown = sorted(set(kept.zip.tolist()) - set(lookup))
    if unknown:
        raise ValueError(f"records with unknown zip codes: {unknown}")
    zip_idx = np.array([lookup[z] for z in kept.zip.tolist()], dtype=np.int64)
    noisy_zip = rr_categorical(zip_idx, len(zips), config.eps_zip, rng)
    bins = quantize(kept.amount, config.bins, 0.0, config.clip)
    noisy_bins = rr_categorical(bins, config.bins, config.eps_trans, rng)
    amounts = dequantize(noisy_bins, config.bins, 0.0, config.clip)
    released = Transactions(kept.merchant_id, np.array(zips)[noisy_zip] if len(kept) else kept.zip,
                            kept.week, amounts, kept.category)
    table = clip_and_aggregate(released, config.clip, zips, W)
    cert = Certificate("rr", config.granularity, spent, config.delta,
                       {**common, "B": int(config.bins), "alpha": float(config.alpha),
                        "eps_event": float(config.eps_event), "eps_zip": float(config.eps_zip),
                        "eps_trans": float(config.eps_trans), "target_epsilon": float(config.epsilon)})
    return ZipPanel(zips, table[:, :, None], ["amount"]), cert
