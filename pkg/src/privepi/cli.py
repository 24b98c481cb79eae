"""Command-line entry point: ``privepi <command> --config run.ini --seed N --out DIR``."""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataio as dio
from . import epiquant as eq
from . import metapop as mp
from . import nowcast as nc
from . import privacy as pv
from . import scenario as sc
from . import training as tr
from .neural import LSTMBaseline, lstm_forecast

log = logging.getLogger("privepi")

COMMANDS = ("privatize", "synth", "train", "forecast", "nowcast", "rt", "intervene", "evaluate")


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

class RunConfig:
    """Sectioned key-value settings; relative paths resolve against the config file."""

    def __init__(self, path: str | None, overrides: list[str]):
        self.parser = configparser.ConfigParser(interpolation=None)
        self.base = Path(".")
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {path}")
            self.parser.read(p)
            self.base = p.parent
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            if not self.parser.has_section(section):
                self.parser.add_section(section)
            self.parser.set(section, name, value)

    def get(self, section: str, key: str, default=None):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key).strip()
        return default

    def require(self, section: str, key: str) -> str:
        v = self.get(section, key)
        if v is None or v == "":
            raise ConfigError(f"missing [{section}] {key}")
        return v

    def path(self, section: str, key: str, required: bool = True) -> Path | None:
        v = self.require(section, key) if required else self.get(section, key)
        if not v:
            return None
        p = Path(v)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise ConfigError(f"[{section}] {key}: no such file {p}")
        return p

    def number(self, section: str, key: str, default, kind=float):
        v = self.get(section, key)
        if v is None or v == "":
            return default
        try:
            return kind(float(v)) if kind is int else kind(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: not a number: {v!r}") from None

    def numbers(self, section: str, key: str, default, kind=float) -> list:
        v = self.get(section, key)
        if v is None or v == "":
            return list(default)
        try:
            return [kind(x) for x in v.replace(";", ",").split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"[{section}] {key}: bad number list {v!r}") from None

    def section(self, name: str) -> dict:
        return dict(self.parser.items(name)) if self.parser.has_section(name) else {}


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(float(value))
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [x.strip() for x in value.replace(";", ",").split(",") if x.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(float(x)) if kind is int else kind(x) for x in items)
    if default is None:
        return float(value) if value.lower() not in ("none", "") else None
    return value


def _dataclass_from(cls, settings: dict, **fixed):
    kwargs = {}
    for f in fields(cls):
        if f.name in fixed:
            kwargs[f.name] = fixed[f.name]
        elif f.name.lower() in settings:
            default = f.default if f.default is not f.default_factory else None
            if f.name == "init_rates":
                default = (0.0,)
            try:
                kwargs[f.name] = _coerce(settings[f.name.lower()], default)
            except ValueError:
                raise ConfigError(f"bad value for {f.name}: {settings[f.name.lower()]!r}") from None
    return cls(**kwargs)


def train_config(cfg: RunConfig, seed: int) -> tr.TrainConfig:
    s = cfg.section("train")
    return _dataclass_from(tr.TrainConfig, s, seed=seed)


def privacy_config(cfg: RunConfig, **fixed) -> pv.PrivacyConfig:
    s = cfg.section("privacy")
    if "epsilon" in s and s["epsilon"].lower() in ("inf", "infinity", "none"):
        s["epsilon"] = "inf"
    return _dataclass_from(pv.PrivacyConfig, s, **fixed)


def _population(cfg: RunConfig):
    c = cfg.path("data", "contact", required=False)
    n = cfg.path("data", "population", required=False)
    contact = mp.load_contact_csv(c) if c else None
    population = mp.load_population_csv(n) if n else None
    return contact, population


def _panel(cfg: RunConfig) -> dio.FeaturePanel:
    return dio.load_panel(cfg.path("data", "panel"), cfg.get("data", "schema", "generic"))


def _zip_matrix(cfg: RunConfig):
    p = cfg.path("data", "zip_panel", required=False)
    return dio.ZipPanel.read_csv(p).matrix() if p else None


def _write_series(path: Path, days, columns: dict) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day"] + list(columns))
        for i, d in enumerate(days):
            w.writerow([int(d)] + [repr(float(v[i])) for v in columns.values()])


# -- commands -----------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    spec = _dataclass_from(dio.SyntheticSpec, cfg.section("synth"), seed=seed)
    data = dio.synth_generate(spec)
    paths = [out / "panel.csv", out / "transactions.csv", out / "triangle.csv", out / "params.json"]
    dio.save_panel(data.panel, paths[0])
    data.transactions.write_csv(paths[1])
    data.triangle.write_csv(paths[2])
    dio.write_params(paths[3], data)
    return paths


def cmd_privatize(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    tx = pv.Transactions.read_csv(cfg.path("data", "transactions"))
    zips = [z.strip() for z in cfg.get("data", "zips", "").split(",") if z.strip()] or sorted(set(tx.zip.tolist()))
    W = cfg.number("data", "weeks", int(tx.week.max()) if len(tx) else 1, int)
    pcfg = privacy_config(cfg)
    panel, cert = pv.privatize_pipeline(tx, pcfg, zips, W, seed)
    paths = [out / "zip_panel.csv", out / "certificate.txt"]
    panel.write_csv(paths[0])
    cert.write(paths[1])
    return paths


def _training_data(cfg: RunConfig, panel: dio.FeaturePanel, zmat, tcfg: tr.TrainConfig) -> tr.TrainingData:
    T = cfg.number("train", "t_train", panel.T, int)
    if not 8 <= T <= panel.T:
        raise ConfigError(f"[train] t_train={T} must lie in [8, {panel.T}]")
    return tr.TrainingData(panel.values[:T], zmat if tcfg.use_private else None, panel.cases[:T])


def cmd_train(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    panel = _panel(cfg)
    zmat = _zip_matrix(cfg)
    tcfg = train_config(cfg, seed)
    contact, population = _population(cfg)
    model = tr.train(tcfg, _training_data(cfg, panel, zmat, tcfg), contact, population)
    paths = [out / "model.json", out / "losses.csv", out / "fitted.csv"]
    model.save(paths[0])
    model.report.write_csv(paths[1])
    _, _, sim = model.fit_window(panel.values, zmat)
    _write_series(paths[2], np.arange(1, model.T + 1), {"simulated": sim.values(), "observed": panel.cases[:model.T]})
    return paths


def cmd_forecast(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    model = tr.TrainedModel.load(cfg.path("data", "model"))
    panel = _panel(cfg)
    zmat = _zip_matrix(cfg)
    H = cfg.number("forecast", "horizon", model.config.horizon, int)
    fc = tr.forecast(model, panel.values, zmat, H)
    paths = [out / "forecast.csv", out / "forecast_raw.csv"]
    if fc.quantiles is not None:
        cols = {f"q{q}": fc.quantiles[:, i] for i, q in enumerate(sorted(model.config.quantiles))}
    else:
        cols = {"point": fc.point}
    _write_series(paths[0], fc.days, cols)
    _write_series(paths[1], fc.days, {"simulated": fc.raw})
    return paths


def cmd_nowcast(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    panel = _panel(cfg)
    tri = nc.RevisionTriangle.read_csv(cfg.path("data", "triangle"))
    zmat = _zip_matrix(cfg)
    tcfg = train_config(cfg, seed)
    T = cfg.number("nowcast", "t", min(panel.T, tri.n_events), int)
    w = cfg.number("nowcast", "window", nc.DEFAULT_WINDOW, int)
    contact, population = _population(cfg)
    res = nc.nowcast(tcfg, panel.values, zmat if tcfg.use_private else None, tri, T, w, contact=contact,
                     population=population)
    provisional = tri.as_of(T)
    paths = [out / "nowcast.csv", out / "revised.csv", out / "nowcast_model.json"]
    _write_series(paths[0], res.days, {"nowcast": res.values, "provisional": provisional[res.days - 1]})
    _write_series(paths[1], np.arange(1, T + 1), {"value": res.revised, "provisional": provisional})
    res.model.save(paths[2])
    return paths


def _read_track(path: Path, column: str) -> np.ndarray:
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or column not in rows[0]:
        raise ConfigError(f"{path}: no column {column!r}")
    return np.array([float(r[column]) for r in rows])


def cmd_rt(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    spec = cfg.require("rt", "inputs")
    si = eq.discretize_serial_interval(cfg.number("rt", "si_mean", eq.SI_MEAN), cfg.number("rt", "si_sd", eq.SI_SD),
                                       cfg.number("rt", "s_max", eq.SI_MAX, int))
    window = cfg.number("rt", "window", eq.RT_WINDOW, int)
    paths = []
    for item in spec.split(","):
        parts = [p.strip() for p in item.split(":")]
        if len(parts) != 3:
            raise ConfigError(f"[rt] inputs entries must be name:path:column, got {item.strip()!r}")
        name, rel, column = parts
        p = Path(rel) if Path(rel).is_absolute() else cfg.base / rel
        if not p.exists():
            raise ConfigError(f"[rt] inputs: no such file {p}")
        series = np.clip(_read_track(p, column), 0.0, None)
        est = eq.estimate_rt(series, si, window, cfg.number("rt", "prior_shape", eq.PRIOR_SHAPE),
                             cfg.number("rt", "prior_scale", eq.PRIOR_SCALE))
        path = out / f"rt_{name}.csv"
        est.write_csv(path)
        paths.append(path)
    return paths


def cmd_intervene(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    model = tr.TrainedModel.load(cfg.path("data", "model"))
    panel = _panel(cfg)
    zmat = _zip_matrix(cfg)
    t_prime = cfg.number("scenario", "t_prime", model.T, int)
    horizon = cfg.number("scenario", "horizon", model.config.horizon, int)
    xs = cfg.numbers("scenario", "x", (0.01, 0.05))
    leads = cfg.numbers("scenario", "delta_weeks", (1, 2), int)
    paths = []
    base = sc.project(model, panel.values, zmat, sc.Intervention(t_prime, 0, 0.0), horizon)
    base.write_csv(out / "scenario_baseline.csv")
    paths.append(out / "scenario_baseline.csv")
    for (x, d), proj in sc.scenario_grid(model, panel.values, zmat, t_prime, xs, leads, horizon).items():
        path = out / f"scenario_x{x:g}_d{d}.csv"
        proj.write_csv(path)
        paths.append(path)
    return paths


def _daily_zip(zmat, T: int):
    return None if zmat is None else np.repeat(zmat, 7, axis=1)[:, :T].T


def cmd_evaluate(cfg: RunConfig, seed: int, out: Path) -> list[Path]:
    import csv
    panel = _panel(cfg)
    tcfg = train_config(cfg, seed)
    H = cfg.number("evaluate", "horizon", tcfg.horizon, int)
    T = cfg.number("train", "t_train", panel.T - H, int)
    train_win, test_win = dio.split(panel, T, H)
    truth = test_win.cases
    settings = [s.strip() for s in cfg.get("evaluate", "settings", "none").split(",") if s.strip()]
    methods = [m.strip() for m in cfg.get("evaluate", "methods", "dpepinn,metapop,lstm").split(",") if m.strip()]
    unknown = set(methods) - {"dpepinn", "metapop", "lstm", "oracle"}
    if unknown:
        raise ConfigError(f"[evaluate] unknown methods {sorted(unknown)}")
    tx_path = cfg.path("data", "transactions", required=False)
    tx = pv.Transactions.read_csv(tx_path) if tx_path else None
    W = mp.n_weeks(panel.T)
    contact, population = _population(cfg)
    lstm_epochs = cfg.number("evaluate", "lstm_epochs", 400, int)
    rows, tracks = [], {}
    for setting in settings:
        if setting == "public":
            zmat = None
        elif tx is None:
            raise ConfigError(f"setting {setting!r} needs [data] transactions")
        else:
            mech, _, eps = setting.partition(":")
            mech = "laplace" if mech == "none" else mech
            eps_val = math.inf if setting == "none" else float(eps)
            zips = sorted(set(tx.zip.tolist()))
            fixed = {"mechanism": mech, "epsilon": eps_val}
            zp, _ = pv.privatize_pipeline(tx, privacy_config(cfg, **fixed), zips, W, seed)
            zmat = zp.matrix()
        preds = {"oracle": truth}   # reference row: perfect prediction
        if {"dpepinn", "metapop"} & set(methods):
            data = tr.TrainingData(panel.values[:T], zmat, panel.cases[:T])
            model = tr.train(tcfg, data, contact, population)
            fc = tr.forecast(model, panel.values, zmat, H)
            preds["dpepinn"], preds["metapop"] = fc.point, fc.raw
        if "lstm" in methods:
            base = LSTMBaseline(panel.F, 0 if zmat is None else zmat.shape[0], seed=seed)
            base.fit(panel.values[:T], _daily_zip(zmat, T), epochs=lstm_epochs)
            preds["lstm"] = lstm_forecast(base, panel.values, _daily_zip(zmat, panel.T), T, H)
        for m in methods:
            p = preds[m]
            rows.append([m, setting, eq.rmse(truth, p), eq.mae(truth, p), eq.mape(truth, p)])
            tracks[f"{m}|{setting}"] = p
    paths = [out / "metrics.csv", out / "evaluation_tracks.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "setting", "rmse", "mae", "mape"])
        for r in rows:
            w.writerow(r[:2] + [repr(float(v)) for v in r[2:]])
    _write_series(paths[1], np.arange(T + 1, T + H + 1), {"truth": truth, **tracks})
    return paths


HANDLERS = {
    "privatize": cmd_privatize, "synth": cmd_synth, "train": cmd_train, "forecast": cmd_forecast,
    "nowcast": cmd_nowcast, "rt": cmd_rt, "intervene": cmd_intervene, "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="privepi", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with per-module sections")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config entry (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = RunConfig(args.config, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for p in HANDLERS[args.command](cfg, args.seed, out):
            log.info("wrote %s", p)
    except Exception as exc:  # one machine-parseable line, nonzero exit
        msg = " ".join(str(exc).split())
        print(f"error: {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
