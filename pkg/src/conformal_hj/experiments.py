"""Experiment commands behind the command-line interface.

Every command is a function of ``(RunConfig, input artifacts)``. Runs are
keyed by a hash of the configuration fields they depend on, so a later
command finds the artifacts of an earlier one without extra bookkeeping:
``calibrate`` looks up ``runs/train-<key>/manifest.json``, ``eval`` and
``certify`` additionally look up ``runs/calibrate-<key>/manifest.json``.
"""

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import store
from .certify import BetaDist, certify, episode_seeds
from .conformal import (calibrate, conditional_coverages, conformal_index, marginal_coverage,
                        nonconformity)
from .exceptions import ConfigurationError, ResolutionError
from .filter import EnsembleSwitchedPolicy, NominalPolicy, Strategy, SwitchedPolicy, run_episode
from .highway import Outcome
from .learn import TrainConfig, fit_value_function, train_ensemble
from .oracle import GridValueIteration
from .systems import make_system

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.02, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2)

TABLE_COLUMNS = ("policy", "members", "strategy", "alpha", "trials", "violation_rate",
                 "success_rate", "timeout_rate", "violations", "successes", "timeouts")
SWEEP_COLUMNS = ("alpha", "policy", "quantile", "violation_rate", "success_rate", "timeout_rate")
CERT_COLUMNS = ("policy", "n_cert", "k", "beta_a", "beta_b", "mean", "ci90_low", "ci90_high",
                "ci95_low", "ci95_high", "ci99_low", "ci99_high")


@dataclass
class OracleConfig:
    system: str = "double_integrator"
    system_params: dict = field(default_factory=dict)
    nodes: int = 101
    gamma: float = 0.999
    tol: float = 1e-6
    train: dict = field(default_factory=dict)
    pool: int = 20000
    n_cal: int = 200
    n_test: int = 1000
    reps: int = 200
    alphas: tuple = (0.05, 0.1, 0.2)
    conditional_n: int = 99
    conditional_alpha: float = 0.1
    conditional_reps: int = 500


@dataclass
class RunConfig:
    system: str = "highway"
    system_params: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    members: int = 5
    alpha: float = 0.06
    alphas: tuple = DEFAULT_ALPHAS
    strategy: str = "multiple"
    n_traj: int = 2000
    calib_horizon: int | None = None
    trials: int = 50
    ncert: tuple = (50, 100, 200)
    certify_policies: tuple = ("nominal", "ensemble")
    alpha_sweep: bool = True
    traces: bool = True
    seed: int = 0
    out: str = "runs"
    oracle: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        self.ncert = tuple(int(n) for n in self.ncert)
        self.certify_policies = tuple(self.certify_policies)
        if self.strategy not in {s.value for s in Strategy}:
            raise ConfigurationError(f"strategy must be single or multiple, got {self.strategy!r}")
        if self.members < 1 or self.trials < 1 or self.n_traj < 1 or min(self.ncert, default=1) < 1:
            raise ConfigurationError("members, trials, n_traj and ncert must be positive")
        for a in (self.alpha, *self.alphas):
            if not 0.0 < a < 1.0:
                raise ConfigurationError(f"alpha values must lie in (0, 1), got {a}")
        self.train_config()
        self.oracle_config()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self):
        d = asdict(self)
        for k in ("alphas", "ncert", "certify_policies"):
            d[k] = list(d[k])
        return d

    def train_config(self):
        try:
            return TrainConfig(**{"seed": self.seed, **self.train})
        except TypeError as exc:
            raise ConfigurationError(f"bad train config: {exc}") from exc

    def oracle_config(self):
        try:
            return OracleConfig(**self.oracle)
        except TypeError as exc:
            raise ConfigurationError(f"bad oracle config: {exc}") from exc

    def make_system(self):
        return make_system(self.system, self.system_params)


def _key(obj):
    return hashlib.sha256(store.canonical_bytes(obj)).hexdigest()[:16]


def training_key(cfg):
    return _key({"system": cfg.system, "system_params": cfg.system_params,
                 "train": cfg.train_config().to_dict(), "members": cfg.members, "seed": cfg.seed})


def calibration_key(cfg):
    return _key({"train": training_key(cfg), "n_traj": cfg.n_traj,
                 "calib_horizon": cfg.calib_horizon, "seed": cfg.seed})


def _stream_seed(seed, *stream):
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


def write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in columns})
    return store.atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


# -- train / calibrate --------------------------------------------------------

def cmd_train(cfg):
    sys = cfg.make_system()
    tc = cfg.train_config()
    root = Path(cfg.out)
    t0 = time.perf_counter()
    models = train_ensemble(sys, tc, cfg.members, base_seed=cfg.seed)
    hashes = [store.save_model(root, m, {**tc.to_dict(), "seed": cfg.seed + j})[0]
              for j, m in enumerate(models)]
    run_id = f"train-{training_key(cfg)}"
    store.write_manifest(root, run_id, "train", cfg.to_dict(), cfg.seed, produced=hashes,
                         extra={"models": hashes, "seconds": time.perf_counter() - t0})
    return {"run_id": run_id, "models": hashes}


def resolve_models(cfg, system=None):
    root = Path(cfg.out)
    run_id = f"train-{training_key(cfg)}"
    try:
        hashes = store.read_manifest(root, run_id)["models"]
    except ResolutionError as exc:
        raise ResolutionError(f"{exc}; run `train` with this config first") from None
    system = cfg.make_system() if system is None else system
    return hashes, [store.load_model(store.model_path(root, h), system) for h in hashes]


def cmd_calibrate(cfg):
    root = Path(cfg.out)
    sys = cfg.make_system()
    model_hashes, models = resolve_models(cfg, sys)
    horizon = sys.horizon if cfg.calib_horizon is None else cfg.calib_horizon
    calibs, quantiles = [], []
    for j, (h, m) in enumerate(zip(model_hashes, models)):
        cal, points = calibrate(sys, m, cfg.n_traj, m.gamma, horizon,
                                seed=_stream_seed(cfg.seed, 1, j), alpha=cfg.alpha)
        digest, _ = store.save_calibration(root, cal, h, points,
                                           meta={"n_traj": cfg.n_traj, "horizon": horizon})
        calibs.append(digest)
        quantiles.append({"member": j, "model": h, "calibration": digest,
                          **{str(a): cal.quantile(a) for a in cfg.alphas}})
    run_id = f"calibrate-{calibration_key(cfg)}"
    store.write_report(root, f"quantiles-{calibration_key(cfg)}",
                       {"alphas": list(cfg.alphas), "members": quantiles})
    store.write_manifest(root, run_id, "calibrate", cfg.to_dict(), cfg.seed,
                         consumed=model_hashes, produced=calibs,
                         extra={"models": model_hashes, "calibrations": calibs})
    return {"run_id": run_id, "calibrations": calibs, "quantiles": quantiles}


def resolve_calibrated(cfg, system=None):
    root = Path(cfg.out)
    system = cfg.make_system() if system is None else system
    _, models = resolve_models(cfg, system)
    run_id = f"calibrate-{calibration_key(cfg)}"
    try:
        man = store.read_manifest(root, run_id)
    except ResolutionError as exc:
        raise ResolutionError(f"{exc}; run `calibrate` with this config first") from None
    out = []
    for digest, model in zip(man["calibrations"], models):
        cal, _ = store.load_calibration(store.calib_path(root, digest), model)
        out.append(cal)
    return man["calibrations"], out


# -- evaluation ---------------------------------------------------------------

def policy_suite(sys, calibrated, alpha, strategies=("single", "multiple")):
    """Nominal, each member alone, and ensemble prefixes ``1..k`` per strategy."""
    suite = [("nominal", 0, "", NominalPolicy(sys))]
    for j, cal in enumerate(calibrated):
        suite.append((f"member-{j + 1}", 1, "", SwitchedPolicy(sys, cal, alpha)))
    for s in strategies:
        for k in range(2, len(calibrated) + 1):
            suite.append((f"ensemble-1-{k}", k, s,
                          EnsembleSwitchedPolicy(sys, calibrated[:k], alpha, s)))
    return suite


def evaluate_policies(sys, policies, seeds, trace_sink=None):
    """Run every policy from the same initial-state seeds; returns per-policy counts.

    ``policies`` is a list of ``(name, policy)`` pairs. ``trace_sink(name, i,
    records)`` receives each episode's step records if given.
    """
    results = {}
    for name, pol in policies:
        outcomes = []
        for i, s in enumerate(seeds):
            traj, trace, outcome = run_episode(sys, pol, seed=s)
            outcomes.append(outcome)
            if trace_sink is not None:
                trace_sink(name, i, trace.to_records())
        counts = {o: sum(r.kind is o for r in outcomes) for o in Outcome}
        n = len(seeds)
        results[name] = {"trials": n,
                         "violations": counts[Outcome.VIOLATION],
                         "successes": counts[Outcome.SUCCESS],
                         "timeouts": counts[Outcome.TIMEOUT],
                         "violation_rate": counts[Outcome.VIOLATION] / n,
                         "success_rate": counts[Outcome.SUCCESS] / n,
                         "timeout_rate": counts[Outcome.TIMEOUT] / n,
                         "outcomes": [o.kind.value for o in outcomes]}
    return results


def cmd_eval(cfg):
    root = Path(cfg.out)
    sys = cfg.make_system()
    calib_hashes, calibrated = resolve_calibrated(cfg, sys)
    seeds = episode_seeds([cfg.seed, 2], cfg.trials)
    key = calibration_key(cfg)
    t0 = time.perf_counter()

    def sink(name, i, records):
        store.append_trace_record(root, f"eval-{key}-a{cfg.alpha:g}-{name}-t{i:03d}", records)

    suite = policy_suite(sys, calibrated, cfg.alpha)
    names = [f"{n}-{s}" if s else n for n, _, s, _ in suite]
    res = evaluate_policies(sys, [(nm, p) for nm, (_, _, _, p) in zip(names, suite)], seeds,
                            sink if cfg.traces else None)
    rows = []
    for nm, (label, k, strat, _) in zip(names, suite):
        r = res[nm]
        rows.append({"policy": label, "members": k, "strategy": strat, "alpha": cfg.alpha,
                     **{c: r[c] for c in TABLE_COLUMNS[4:]}})
    write_csv(root / "reports" / f"table-{key}-a{cfg.alpha:g}.csv", TABLE_COLUMNS, rows)

    sweep = []
    if cfg.alpha_sweep:
        for a in cfg.alphas:
            pols = [(f"member-{j + 1}", SwitchedPolicy(sys, c, a)) for j, c in enumerate(calibrated)]
            if len(calibrated) > 1:
                pols.append((f"ensemble-1-{len(calibrated)}",
                             EnsembleSwitchedPolicy(sys, calibrated, a, cfg.strategy)))
            sres = evaluate_policies(sys, pols, seeds)
            for j, (nm, _) in enumerate(pols):
                q = calibrated[j].quantile(a) if nm.startswith("member") else None
                sweep.append({"alpha": a, "policy": nm, "quantile": q,
                              **{c: sres[nm][c] for c in SWEEP_COLUMNS[3:]}})
        write_csv(root / "reports" / f"alpha-sweep-{key}.csv", SWEEP_COLUMNS, sweep)

    report = {"alpha": cfg.alpha, "trials": cfg.trials, "seeds": seeds, "table": rows,
              "per_trial": {nm: res[nm]["outcomes"] for nm in names}, "alpha_sweep": sweep}
    store.write_report(root, f"eval-{key}-a{cfg.alpha:g}", report)
    store.write_manifest(root, f"eval-{key}-a{cfg.alpha:g}", "eval", cfg.to_dict(), cfg.seed,
                         consumed=calib_hashes, produced=[f"eval-{key}-a{cfg.alpha:g}"],
                         extra={"paired_seeds": seeds, "seconds": time.perf_counter() - t0})
    return report


# -- certification ------------------------------------------------------------

def _cert_policy(name, sys, calibrated, alpha, strategy):
    if name == "nominal":
        return NominalPolicy(sys)
    if name == "ensemble":
        return EnsembleSwitchedPolicy(sys, calibrated, alpha, strategy)
    if name.startswith("member-"):
        j = int(name.split("-", 1)[1]) - 1
        if not 0 <= j < len(calibrated):
            raise ConfigurationError(f"no ensemble member {j + 1}")
        return SwitchedPolicy(sys, calibrated[j], alpha)
    raise ConfigurationError(f"unknown certify policy {name!r} (nominal, ensemble, member-<j>)")


def cmd_certify(cfg, curve_points=201):
    root = Path(cfg.out)
    sys = cfg.make_system()
    calib_hashes, calibrated = resolve_calibrated(cfg, sys)
    key = calibration_key(cfg)
    curves, rows = [], []
    for name in cfg.certify_policies:
        pol = _cert_policy(name, sys, calibrated, cfg.alpha, cfg.strategy)
        for n in cfg.ncert:
            res = certify(sys, pol, n, seed=[cfg.seed, 3, n])
            d = res.to_dict(curve_points)
            curves.append({"policy": name, **d})
            row = {"policy": name, "n_cert": n, "k": res.k, "beta_a": res.beta_a,
                   "beta_b": res.beta_b, "mean": res.mean}
            for lv, tag in ((0.9, "90"), (0.95, "95"), (0.99, "99")):
                if lv in res.intervals:
                    row[f"ci{tag}_low"], row[f"ci{tag}_high"] = res.intervals[lv]
            rows.append(row)
    name = f"certify-{key}-a{cfg.alpha:g}-{cfg.strategy}"
    write_csv(root / "reports" / f"{name}.csv", CERT_COLUMNS, rows)
    report = {"alpha": cfg.alpha, "strategy": cfg.strategy, "results": curves}
    store.write_report(root, name, report)
    store.write_manifest(root, name, "certify", cfg.to_dict(), cfg.seed,
                         consumed=calib_hashes, produced=[name])
    return report


# -- oracle -------------------------------------------------------------------

def ks_statistic(samples, cdf):
    """One-sample Kolmogorov-Smirnov distance to a continuous ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    f = np.array([cdf(v) for v in x])
    return float(max(np.max(np.arange(1, n + 1) / n - f), np.max(f - np.arange(n) / n)))


def oracle_study(oc, seed=0):
    """Grid oracle, learned-model comparison and coverage experiments.

    The coverage experiments use a pool of states drawn uniformly from the
    grid box, scoring the learned value against the oracle value at each
    state. Calibration and test sets are resampled from the pool.
    """
    from .certify import beta_cdf

    sys = make_system(oc.system, oc.system_params)
    t0 = time.perf_counter()
    gvi = GridValueIteration(sys, nodes=oc.nodes, gamma=oc.gamma, tol=oc.tol).fit()
    t_grid = time.perf_counter() - t0
    pts = gvi.grid_.points()
    v_grid = gvi.value_function_.values

    tc = TrainConfig(**{"seed": seed, "gamma": oc.gamma, **oc.train})
    t0 = time.perf_counter()
    model = fit_value_function(sys, tc, seed=seed)
    t_train = time.perf_counter() - t0
    v_nodes = model.predict(pts)
    sign_agree = float(np.mean(np.sign(v_nodes) == np.sign(v_grid)))

    rng = np.random.default_rng(_stream_seed(seed, 4))
    pool = rng.uniform(gvi.grid_.lower, gvi.grid_.upper, size=(oc.pool, sys.n))
    v_theta = model.predict(pool)
    v_star = gvi.predict(pool)
    cov_rows = []
    for a in oc.alphas:
        mean, per = marginal_coverage(v_theta, v_star, oc.n_cal, oc.n_test, a, oc.reps,
                                      seed=_stream_seed(seed, 5, int(round(a * 1e6))))
        cov_rows.append({"alpha": a, "target": 1 - a, "mean_coverage": mean,
                         "std": float(per.std()), "n_cal": oc.n_cal, "n_test": oc.n_test,
                         "reps": oc.reps})
    n, a = oc.conditional_n, oc.conditional_alpha
    cond = conditional_coverages(v_theta, v_star, n, a, oc.conditional_reps,
                                 seed=_stream_seed(seed, 6))
    l = n + 1 - conformal_index(n, a)
    law = BetaDist(n + 1 - l, l)
    conditional = {"n": n, "alpha": a, "reps": oc.conditional_reps, "beta": [law.a, law.b],
                   "law_mean": law.mean, "mean": float(cond.mean()),
                   "ks": ks_statistic(cond, lambda p: beta_cdf(law, p)),
                   "coverages": cond.tolist()}
    return {
        "system": {"name": sys.name, "params": sys.params()},
        "grid": {"nodes": list(gvi.grid_.nodes), "gamma": oc.gamma, "tol": oc.tol,
                 "n_iter": gvi.n_iter_, "residual": gvi.residual_, "converged": gvi.residual_ < oc.tol,
                 "seconds": t_grid},
        "learned": {"sign_agreement": sign_agree,
                    "sup_error": float(np.max(np.abs(v_nodes - v_grid))),
                    "mean_abs_error": float(np.mean(np.abs(v_nodes - v_grid))),
                    "train_seconds": t_train, "train_config": tc.to_dict()},
        "coverage": cov_rows,
        "conditional": conditional,
        "pool_fraction_zero_score": float(np.mean(nonconformity(v_theta, v_star) == 0)),
    }


def cmd_oracle(cfg):
    root = Path(cfg.out)
    oc = cfg.oracle_config()
    rep = oracle_study(oc, cfg.seed)
    name = f"oracle-{_key({'oracle': asdict(oc), 'seed': cfg.seed})}"
    write_csv(root / "reports" / f"{name}-coverage.csv",
              ("alpha", "target", "mean_coverage", "std", "n_cal", "n_test", "reps"), rep["coverage"])
    timing = {k: rep[k].pop(s) for k, s in (("grid", "seconds"), ("learned", "train_seconds"))}
    store.write_report(root, name, rep)
    store.write_manifest(root, name, "oracle", cfg.to_dict(), cfg.seed, produced=[name],
                         extra={"seconds": timing})
    return rep


# -- report -------------------------------------------------------------------

def cmd_report(cfg):
    """Index every report under the output root into ``reports/summary.json``."""
    root = Path(cfg.out)
    rep_dir = root / "reports"
    if not rep_dir.is_dir():
        raise ResolutionError(f"no reports under {root}; run eval, certify or oracle first")
    summary = {"tables": [], "certifications": [], "oracles": []}
    for path in sorted(rep_dir.glob("*.json")):
        if path.stem == "summary":
            continue
        data = json.loads(path.read_text())
        if path.stem.startswith("eval-"):
            summary["tables"].append({"report": path.stem, "alpha": data["alpha"],
                                      "rows": data["table"]})
        elif path.stem.startswith("certify-"):
            summary["certifications"].append({
                "report": path.stem,
                "rows": [{k: r[k] for k in ("policy", "n_cert", "k", "beta_a", "beta_b", "mean")}
                         for r in data["results"]]})
        elif path.stem.startswith("oracle-"):
            summary["oracles"].append({"report": path.stem, "grid": data["grid"],
                                       "learned": data["learned"], "coverage": data["coverage"],
                                       "conditional": {k: v for k, v in data["conditional"].items()
                                                       if k != "coverages"}})
    store.write_report(root, "summary", summary)
    return summary


COMMANDS = {"train": cmd_train, "calibrate": cmd_calibrate, "eval": cmd_eval,
            "certify": cmd_certify, "oracle": cmd_oracle, "report": cmd_report}
