"""Experiment runner: configuration, verbs and CSV reporting.

Config files are sectioned ``key = value`` documents::

    [scenario]
    I = 4
    res_mean = 3.75

    [algorithm]
    theta = 0.9
    trainer = sadmm

    [run]
    seed = 7
    thetas = 0, 0.3, 0.6, 0.9

Keys mirror the fields of :class:`~greencmbf.scenario.ScenarioConfig`,
:class:`AlgorithmConfig` and :class:`RunConfig`; unknown sections or keys
are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import central, sadmm, scenario
from .errors import CmbfError, ConfigError, InfeasibleError, NumericalError
from .model import transaction_cost

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4
EXPERIMENTS = ("convergence", "res-sweep", "theta-cdf", "nt-sweep", "sinr-sweep")
TRAINERS = ("sadmm", "oracle")
MIN_COST_LABEL = "Min-Cost"
NO_RES_LABEL = "No-RES"

# fixed spawn keys so every stream is reproducible from the run seed alone
_STREAMS = {"channels": 0, "train": 1, "eval": 2, "admm": 3, "rounding": 4}


@dataclass(frozen=True)
class AlgorithmConfig:
    theta: float = 0.9
    rho: float = 1.0
    zeta_mode: str = "constant"
    zeta0: float = 0.1
    max_iters: int = 500
    residual_tol: float = 1e-3
    rel_change_tol: float = 1e-4
    stop_window: int = 50
    use_stop_rule: bool = True
    averaging: str = "cumulative"
    oracle_samples: int = central.DEFAULT_ORACLE_SAMPLES
    trials: int = 100
    trainer: str = "sadmm"
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.theta < 1.0:
            raise ConfigError(f"theta must lie in [0, 1), got {self.theta}")
        if self.trainer not in TRAINERS:
            raise ConfigError(f"trainer must be one of {TRAINERS}, got {self.trainer!r}")
        if self.oracle_samples < 1 or self.trials < 1 or self.workers < 1:
            raise ConfigError("oracle_samples, trials and workers must be positive")
        try:
            self.sadmm_params()
        except CmbfError as exc:
            raise ConfigError(str(exc)) from None

    def sadmm_params(self, theta=None):
        return sadmm.SadmmParams(
            theta=self.theta if theta is None else theta, rho=self.rho, zeta0=self.zeta0,
            zeta_mode=self.zeta_mode, max_iters=self.max_iters, residual_tol=self.residual_tol,
            rel_change_tol=self.rel_change_tol, stop_window=self.stop_window,
            use_stop_rule=self.use_stop_rule, averaging=self.averaging, trials=self.trials,
            workers=self.workers)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "out"
    experiments: tuple = ("convergence",)
    eval_samples: int = 10_000
    res_means: tuple = (0.0, 3.75, 7.5)
    thetas: tuple = (0.0, 0.3, 0.6, 0.9)
    nt_values: tuple = (8, 12, 16)
    sinr_values: tuple = (1.0, 1.5, 2.0)
    timing: bool = True

    def __post_init__(self):
        bad = [x for x in self.experiments if x not in EXPERIMENTS]
        if bad:
            raise ConfigError(f"unknown experiments {bad}; choose from {EXPERIMENTS}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: scenario.ScenarioConfig = field(default_factory=scenario.ScenarioConfig)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    run: RunConfig = field(default_factory=RunConfig)
    dump_dir: str | None = None

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)

    def rng(self, stream, *extra):
        """Generator for a named stream, optionally specialized per sweep point."""
        ss = np.random.SeedSequence(self.run.seed, spawn_key=(_STREAMS[stream], *extra))
        return np.random.default_rng(ss)

    @property
    def out(self):
        return Path(self.run.out)


# ---------------------------------------------------------------- config I/O

def _convert(text, typ, key):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text.strip()
        if typ is tuple or origin is tuple:
            return tuple(_item(x.strip()) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    raise ConfigError(f"key {key} cannot be set from a config file")


def _item(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _section(cls, items, name):
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls) if f.name != "res_sampler"}
    values = {}
    for key, text in items:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        typ = hints[key]
        if typing.get_origin(typ) is typing.Union:
            typ = next(t for t in typing.get_args(typ) if t is not type(None))
        values[key] = _convert(text, typ, f"{name}.{key}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError, CmbfError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(text):
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"scenario": scenario.ScenarioConfig, "algorithm": AlgorithmConfig, "run": RunConfig}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
    parts = {name: _section(cls, parser.items(name) if parser.has_section(name) else [], name)
             for name, cls in known.items()}
    return ExperimentConfig(**parts)


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


# ------------------------------------------------------------------ outputs

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


def read_costs(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return np.array([float(r["cost"]) for r in csv.DictReader(fh)])


def _write_costs(path, costs):
    return write_csv(path, ["sample_index", "cost"], enumerate(costs))


def cost_stats(costs):
    """``(average, empirical max, empirical 99th percentile)`` of a cost sample."""
    c = np.asarray(costs, dtype=float)
    return float(c.mean()), float(c.max()), float(np.quantile(c, 0.99, method="inverted_cdf"))


# -------------------------------------------------------------- experiments

def build_instance(cfg):
    """Channels plus the training archive and the held-out evaluation set."""
    sc = cfg.scenario
    model = scenario.make_channels(sc, cfg.rng("channels"))
    train = scenario.sample_states(sc, cfg.rng("train"))
    held_out = scenario.sample_states(sc, cfg.rng("eval"), cfg.run.eval_samples)
    return model, train, held_out


def train(cfg, model, db, theta, point=()):
    """Beamformers for one operating point from the configured trainer."""
    alg = cfg.algorithm
    dump = cfg.dump_dir
    if alg.trainer == "oracle":
        sol, obj = central.solve_saa(model, db, theta, alg.oracle_samples, dump_dir=dump)
        sol.info["objective"] = obj
        return sol, None
    res = sadmm.run(model, db, alg.sadmm_params(theta), cfg.rng("admm", *point))
    res.solution.info["converged"] = res.converged
    return res.solution, res


def evaluate(sol, db):
    """Per-sample total transaction cost of fixed beamformers."""
    return transaction_cost(sol.P[None, :], db.a, db.b, db.e).sum(axis=1)


def run_convergence(cfg):
    model, db, _ = build_instance(cfg)
    alg = cfg.algorithm
    dump = cfg.dump_dir
    oracle, obj = central.solve_saa(model, db, alg.theta, alg.oracle_samples, dump_dir=dump)
    res = sadmm.run(model, db, alg.sadmm_params(), cfg.rng("admm"))
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.run.timing:
        res.trace.wall_ms = [0.0] * len(res.trace)
    res.trace.to_csv(out / "trace.csv")
    avg = np.asarray(res.trace.avg_objective)
    entry = sadmm.band_entry(avg, obj)
    summary = {
        "oracle_objective": obj,
        "final_avg_objective": float(avg[-1]),
        "relative_gap": float(avg[-1] / obj - 1.0),
        "band_entry": -1 if entry is None else entry,
        "iterations": res.iterations,
        "converged": res.converged,
        "final_residual": float(res.trace.residual[-1]),
    }
    write_csv(out / "convergence_summary.csv", list(summary), [list(summary.values())])
    return summary, res


def run_res_sweep(cfg, res_means=None):
    means = list(cfg.run.res_means if res_means is None else res_means)
    if not means:
        raise ConfigError("res_means must not be empty")
    if any(m < 0 for m in means):
        raise ConfigError("RES means must be nonnegative")
    out = cfg.out
    base_model, base_train, base_eval = build_instance(cfg)
    sol, no_res = central.solve_no_res_baseline(base_model, base_eval)
    _write_costs(out / "costs_no_res.csv", no_res)
    base_avg = float(no_res.mean())
    rows = [[NO_RES_LABEL, 0.0, base_avg, 0.0]]
    results = {NO_RES_LABEL: no_res}
    for n, mean in enumerate(means):
        point = cfg.replace(scenario=cfg.scenario.replace(res_mean=float(mean)))
        model, db, held = build_instance(point)
        sol, _ = train(point, model, db, cfg.algorithm.theta, (0, n))
        costs = evaluate(sol, held)
        _write_costs(out / f"costs_res_{n}.csv", costs)
        avg = float(costs.mean())
        rows.append(["Min-CVaR", float(mean), avg, 1.0 - avg / base_avg])
        results[float(mean)] = costs
    write_csv(out / "res_sweep.csv", ["scheme", "res_mean", "average_cost", "saving_vs_no_res"], rows)
    return rows, results


def theta_label(theta):
    return MIN_COST_LABEL if theta == 0 else f"Min-CVaR(theta={theta:g})"


def run_theta_cdf(cfg, thetas=None):
    thetas = list(cfg.run.thetas if thetas is None else thetas)
    if not thetas:
        raise ConfigError("thetas must not be empty")
    for t in thetas:
        if not 0.0 <= t < 1.0:
            raise ConfigError(f"theta must lie in [0, 1), got {t}")
    model, db, held = build_instance(cfg)
    rows, results = [], {}
    for n, theta in enumerate(thetas):
        sol, _ = train(cfg, model, db, float(theta), (1, n))
        costs = evaluate(sol, held)
        _write_costs(cfg.out / f"costs_theta_{n}.csv", costs)
        rows.append([theta_label(theta), float(theta), *cost_stats(costs)])
        results[float(theta)] = costs
    write_csv(cfg.out / "theta_cdf.csv", ["scheme", "theta", "average", "max", "p99"], rows)
    return rows, results


def _two_scheme_sweep(cfg, values, key, tag, name):
    if not values:
        raise ConfigError(f"{name} values must not be empty")
    rows = []
    for n, v in enumerate(values):
        try:
            sc = cfg.scenario.replace(**{key: v})
        except (ConfigError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad {name} value {v!r}: {exc}") from None
        point = cfg.replace(scenario=sc)
        model, db, held = build_instance(point)
        for label, theta in (("Min-CVaR", cfg.algorithm.theta), (MIN_COST_LABEL, 0.0)):
            sol, _ = train(point, model, db, theta, (tag, n, int(theta == 0)))
            costs = evaluate(sol, held)
            slug = "cvar" if label == "Min-CVaR" else "mincost"
            _write_costs(cfg.out / f"costs_{name}_{n}_{slug}.csv", costs)
            rows.append([label, v, *cost_stats(costs)])
    write_csv(cfg.out / f"{name}_sweep.csv", ["scheme", name, "average", "max", "p99"], rows)
    return rows


def run_nt_sweep(cfg, values=None):
    values = list(cfg.run.nt_values if values is None else values)
    if any((not isinstance(v, (int, np.integer))) or v < 1 for v in values):
        raise ConfigError("antenna counts must be positive integers")
    return _two_scheme_sweep(cfg, values, "Nt", 2, "nt")


def run_sinr_sweep(cfg, values=None):
    values = [float(v) for v in (cfg.run.sinr_values if values is None else values)]
    if any(v <= 0 for v in values):
        raise ConfigError("SINR targets must be positive")
    return _two_scheme_sweep(cfg, values, "sinr_target", 3, "sinr")


def run_gen(cfg):
    model, db, held = build_instance(cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "scenario.npz", R=model.R, gamma=model.gamma, sigma2=model.sigma2)
    scenario.save_database(db, out / "database.csv")
    scenario.save_database(held, out / "eval_database.csv")
    return model, db


def run_oracle(cfg):
    model, db, held = build_instance(cfg)
    alg = cfg.algorithm
    sol, obj = central.solve_saa(model, db, alg.theta, alg.oracle_samples,
                                 dump_dir=cfg.dump_dir)
    write_csv(cfg.out / "oracle_solution.csv", ["bs_index", "P", "eta"],
              [[i, sol.P[i], sol.eta[i]] for i in range(model.I)])
    write_csv(cfg.out / "oracle_summary.csv", ["theta", "objective", "n_samples"],
              [[alg.theta, obj, sol.info["n_samples"]]])
    costs = evaluate(sol, held)
    _write_costs(cfg.out / "costs_oracle.csv", costs)
    return sol, obj


def run_experiments(cfg):
    """Run every experiment listed in ``[run] experiments``, in order."""
    by_name = {"convergence": run_convergence, "res-sweep": run_res_sweep, "theta-cdf": run_theta_cdf,
               "nt-sweep": run_nt_sweep, "sinr-sweep": run_sinr_sweep}
    for name in cfg.run.experiments:
        by_name[name](cfg)


VERBS = {
    "run": run_experiments,
    "gen": run_gen,
    "converge": run_convergence,
    "sweep-res": run_res_sweep,
    "sweep-theta": run_theta_cdf,
    "sweep-nt": run_nt_sweep,
    "sweep-sinr": run_sinr_sweep,
    "oracle": run_oracle,
}


def build_parser():
    p = argparse.ArgumentParser(prog="greencmbf", description="Risk-aware multicell beamforming experiments.")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", help="override [run] output directory")
    p.add_argument("--dump-conic", metavar="DIR", help="write every centralized conic program to DIR")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["out"] = args.out
        if changes:
            cfg = cfg.replace(run=dataclasses.replace(cfg.run, **changes))
        if args.dump_conic:
            cfg = cfg.replace(dump_dir=args.dump_conic)
        cfg.out.mkdir(parents=True, exist_ok=True)
        VERBS[args.verb](cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
