"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The verdicts are also collected by ``conftest.record_criterion`` and shown
in a dedicated section at the end of the pytest run.
"""

import json
import time
from fractions import Fraction

import numpy as np
import pytest

from conformal_hj import store
from conformal_hj.certify import BetaDist, beta_cdf, coverage_selfcheck
from conformal_hj.cli import main
from conformal_hj.conformal import conformal_index
from conformal_hj.experiments import (OracleConfig, RunConfig, cmd_calibrate, cmd_eval,
                                      cmd_train, oracle_study, resolve_calibrated)
from conformal_hj.filter import EnsembleSwitchedPolicy, SwitchedPolicy, run_episode
from conformal_hj.learn import MLP

from conftest import record_criterion


@pytest.fixture(scope="module")
def oracle_report():
    t0 = time.perf_counter()
    rep = oracle_study(OracleConfig(), seed=0)
    rep["elapsed"] = time.perf_counter() - t0
    return rep


@pytest.fixture(scope="module")
def highway_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("highway")
    cfg = RunConfig(out=str(out), alpha=0.06, members=5, trials=50, alpha_sweep=False,
                    traces=False, seed=0)
    t0 = time.perf_counter()
    cmd_train(cfg)
    cmd_calibrate(cfg)
    report = cmd_eval(cfg)
    elapsed = time.perf_counter() - t0
    return cfg, report, elapsed


def test_criterion_1_marginal_coverage(oracle_report):
    rows = oracle_report["coverage"]
    ok = all(r["mean_coverage"] >= 1 - r["alpha"] - 0.02 for r in rows) and \
        {r["alpha"] for r in rows} == {0.05, 0.1, 0.2} and all(r["reps"] == 200 for r in rows)
    ok = ok and oracle_report["elapsed"] <= 300
    detail = ", ".join(f"alpha={r['alpha']}: {r['mean_coverage']:.4f} (need >= {1 - r['alpha'] - 0.02:.2f})"
                       for r in rows)
    assert record_criterion(1, ok, f"{detail}; {oracle_report['elapsed']:.0f}s")


def test_criterion_2_conditional_coverage_law(oracle_report):
    c = oracle_report["conditional"]
    assert (c["n"], c["alpha"], c["reps"]) == (99, 0.1, 500) and c["beta"] == [90, 10]
    target = 90 / 101
    ok = abs(c["mean"] - target) <= 0.01 and c["ks"] < 0.08
    assert record_criterion(2, ok, f"mean {c['mean']:.4f} vs {target:.4f}, KS {c['ks']:.4f} vs Beta(90, 10)")


def test_criterion_3_quantile_index_identity():
    bad = 0
    checked = 0
    for n in range(1, 501):
        for k in range(n):
            alpha = Fraction(k + 1, n + 1)
            checked += 1
            if Fraction(conformal_index(n, alpha), n) != Fraction(n - k, n):
                bad += 1
    assert record_criterion(3, bad == 0, f"{checked} (N, k) pairs, {bad} mismatches")


def test_criterion_4_certification_self_consistency():
    cov = coverage_selfcheck(0.9, 100, 200, 0.9, seed=0)
    errs = []
    for p in np.linspace(0, 1, 101):
        errs.append(abs(beta_cdf(BetaDist(1, 1), p) - p))
        for a in (2, 5, 48):
            errs.append(abs(beta_cdf(BetaDist(a, 1), p) - p ** a))
        errs.append(abs(beta_cdf(BetaDist(2, 2), p) + beta_cdf(BetaDist(2, 2), 1 - p) - 1))
    errs.append(abs(beta_cdf(BetaDist(2, 2), 0.5) - 0.5))
    ok = cov >= 0.85 and max(errs) < 1e-8
    assert record_criterion(4, ok, f"selfcheck coverage {cov:.3f} (need >= 0.85), "
                                   f"closed-form max error {max(errs):.1e}")


def test_criterion_5_oracle_quality_gate(oracle_report):
    rng = np.random.default_rng(0)
    net = MLP.initialize([2, 8, 8, 1], rng)
    X, y = rng.normal(size=(32, 2)), rng.normal(size=32)
    _, grads = net.loss_and_grad(X, y)
    num = []
    for p in net.params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + 1e-6
            lp, _ = net.loss_and_grad(X, y)
            p[i] = old - 1e-6
            lm, _ = net.loss_and_grad(X, y)
            p[i] = old
            g[i] = (lp - lm) / 2e-6
        num.append(g)
    a = np.concatenate([g.ravel() for g in grads])
    b = np.concatenate([g.ravel() for g in num])
    rel = float(np.linalg.norm(a - b) / np.linalg.norm(b))
    grid, learned = oracle_report["grid"], oracle_report["learned"]
    ok = grid["residual"] < 1e-6 and grid["nodes"] == [101, 101] and grid["gamma"] == 0.999 \
        and learned["sign_agreement"] >= 0.9 and rel < 1e-4
    assert record_criterion(5, ok, f"residual {grid['residual']:.1e} in {grid['n_iter']} sweeps, "
                                   f"sign agreement {learned['sign_agreement']:.3f}, "
                                   f"gradient rel. err {rel:.1e}")


@pytest.mark.slow
def test_criterion_6_highway_reproduction(highway_run):
    cfg, report, elapsed = highway_run
    rows = {(r["policy"], r["strategy"]): r for r in report["table"]}
    nominal = rows[("nominal", "")]["violation_rate"]
    members = [rows[(f"member-{j}", "")]["violation_rate"] for j in range(1, cfg.members + 1)]
    ensemble = rows[(f"ensemble-1-{cfg.members}", "multiple")]["violation_rate"]
    a = all(m < nominal for m in members)
    b = ensemble <= min(members) + 0.06 + 1e-12
    c = nominal >= 0.25
    ok = a and b and c and elapsed <= 1800
    assert record_criterion(6, ok, f"nominal {nominal:.2f}, members {members}, "
                                   f"ensemble(multiple) {ensemble:.2f}, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_7_single_member_ensemble_equivalence(highway_run):
    cfg = highway_run[0]
    sys = cfg.make_system()
    _, calibrated = resolve_calibrated(cfg, sys)
    cal = calibrated[0]
    mismatches = 0
    switched = 0
    for seed in range(50):
        t1, tr1, o1 = run_episode(sys, SwitchedPolicy(sys, cal, cfg.alpha), seed=seed)
        for strategy in ("single", "multiple"):
            t2, tr2, o2 = run_episode(sys, EnsembleSwitchedPolicy(sys, [cal], cfg.alpha, strategy),
                                      seed=seed)
            same = t1.tobytes() == t2.tobytes() and tr1.to_records() == tr2.to_records() and o1 == o2
            mismatches += not same
        switched += any(r.controller == "safe" for r in tr1)
    assert record_criterion(7, mismatches == 0,
                            f"50 seeds x 2 strategies, {mismatches} mismatches "
                            f"({switched} episodes used the safe policy)")


SMOKE = {
    "system": "double_integrator",
    "train": {"n_steps": 300, "episodes": 10, "rounds": 2, "pretrain_steps": 50, "hidden": [16, 16]},
    "members": 2, "n_traj": 100, "trials": 4, "ncert": [5, 10], "alphas": [0.1, 0.2],
    "oracle": {"nodes": 21, "train": {"n_steps": 300, "episodes": 10, "rounds": 2},
               "pool": 2000, "n_cal": 50, "n_test": 100, "reps": 10, "conditional_reps": 20},
}


def _artifact_bytes(root):
    # manifests carry wall-clock timestamps and are excluded by design
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and "runs" not in p.parts}


def test_criterion_8_determinism(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(SMOKE))
    roots = [tmp_path / "first", tmp_path / "second"]
    for root in roots:
        for cmd in ("train", "calibrate", "eval", "certify", "oracle", "report"):
            assert main([cmd, "--config", str(cfg_path), "--out", str(root)]) == 0
    a, b = (_artifact_bytes(r) for r in roots)
    model_hashes = [store.read_envelope(p, "model")["hash"] for p in sorted((roots[0] / "models").iterdir())]
    ok = a == b and len(a) > 0 and all(
        p.name.startswith(h) for p, h in zip(sorted((roots[0] / "models").iterdir()), model_hashes))
    assert record_criterion(8, ok, f"{len(a)} artifacts compared across 6 commands, "
                                   f"{sum(a.get(k) != b.get(k) for k in set(a) | set(b))} differ")
