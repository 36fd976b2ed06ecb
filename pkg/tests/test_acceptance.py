"""Acceptance criteria; each test prints one PASS/FAIL line.

The two training experiments (method comparison and return instability)
share one cached set of runs driven by ``configs/gridhazard.json``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from ambs import agent as ag
from ambs.config import from_dict
from ambs.envs import GridHazardEnv
from ambs.gradcheck import check_all, random_problem
from ambs.measure import sample_size_exact
from ambs.shield import ShieldConfig, exact_pair_measure, shield_calibration_report
from ambs.theory import run_suite
from ambs.trainer import Trainer
from ambs.world_model import TrueDynamicsModel

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "gridhazard.json"
SEEDS = (0, 1, 2, 3, 4)


def _suite(name, criterion, label, limit_s, **kw):
    t = time.perf_counter()
    rows = run_suite(name, np.random.default_rng(kw.pop("seed", 0)), kw.pop("instances", None))
    elapsed = time.perf_counter() - t
    failed = [r for r in rows if not r.passed]
    worst = max(rows, key=lambda r: r.quantity - r.bound)
    ok = not failed and elapsed < limit_s
    criterion(label, ok, f"{len(rows)} checks, {len(failed)} failures, worst {worst.quantity:.4g} "
                         f"vs bound {worst.bound:.4g}, {elapsed:.1f}s")
    return ok, rows


def test_theorem1_coverage(criterion):
    assert sample_size_exact(0.1, 0.05) == 185
    ok, rows = _suite("thm1", criterion, "Theorem 1 coverage", 60)
    assert len(rows) == 5
    assert all(r.bound == 0.07 for r in rows)
    assert ok


def test_theorem2_model_error(criterion):
    ok, rows = _suite("thm2", criterion, "Theorem 2 model-error bound", 60)
    assert len(rows) == 100 and all(r.bound == pytest.approx(0.1) for r in rows)
    assert ok


def test_error_amplification_and_pinsker(criterion):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    rows = run_suite("lemma", rng) + run_suite("pinsker", rng)
    elapsed = time.perf_counter() - t
    failed = [r for r in rows if not r.passed]
    ok = not failed and elapsed < 60
    criterion("Error amplification and Pinsker", ok,
              f"{len(rows)} checks over 100+100 instances, {len(failed)} failures, {elapsed:.1f}s")
    assert ok


def test_theorem3_partial_observability(criterion):
    ok, rows = _suite("thm3", criterion, "Theorem 3 state vs belief divergence", 120)
    assert len(rows) == 200
    assert ok


def test_gradient_correctness(criterion):
    t = time.perf_counter()
    policy, *_ = random_problem(np.random.default_rng(0))
    assert policy.n_states <= 20
    errs = check_all(np.random.default_rng(0), points=50)
    elapsed = time.perf_counter() - t
    ok = max(errs.values()) <= 1e-4 and elapsed < 60
    criterion("Gradient correctness", ok,
              ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + f", {elapsed:.1f}s")
    assert ok


def test_reduction_chain(criterion):
    worst = {"penl0": 0.0, "plpg": 0.0, "copt": 0.0}
    rng = np.random.default_rng(0)
    # a scale at which zero-cost traces lie below center - 10 kappa
    kappa, gamma, C, T = 0.5, 0.997, 10.0, 15
    assert 0.0 <= ag.copt_center(gamma, T, C) - 10 * kappa
    for _ in range(50):
        policy, batch, G, GC, _ = random_problem(rng)
        v = ag.grad_vanilla(batch, G, policy)
        p0 = ag.grad_penl(batch, G, GC, 0.0, policy)
        worst["penl0"] = max(worst["penl0"], np.abs(p0.coefficients - v.coefficients).max(),
                             np.abs(p0.grad - v.grad).max())
        # safe values for which every per-step delta vanishes
        safe = np.zeros(batch.states.shape)
        for t in range(batch.horizon - 1, -1, -1):
            safe[:, t] = batch.costs[:, t + 1] + safe[:, t + 1]
        alpha = float(rng.uniform(0.1, 2.0))
        pl = ag.grad_plpg(batch, G, GC, alpha, safe, policy)
        pe = ag.grad_penl(batch, G, GC, alpha, policy)
        worst["plpg"] = max(worst["plpg"], np.abs(pl.coefficients - pe.coefficients).max())
        clean = type(batch)(batch.states, batch.actions, batch.raw_actions, batch.rewards,
                            np.zeros_like(batch.costs), batch.continues,
                            np.zeros_like(batch.violations))
        co = ag.grad_copt(clean, G, GC, alpha, kappa, gamma, T, C, policy)
        pc = ag.grad_penl(clean, G, GC, alpha, policy)
        worst["copt"] = max(worst["copt"], np.abs(co.coefficients - pc.coefficients).max())
    ok = worst["penl0"] == 0.0 and worst["plpg"] <= 1e-12 and worst["copt"] <= 1e-6
    criterion("Reduction chain", ok, ", ".join(f"{k} max diff {v:.2e}" for k, v in worst.items()))
    assert ok


def test_shield_soundness_with_true_dynamics(criterion):
    t = time.perf_counter()
    env = GridHazardEnv(slip=0.1)
    mdp = env.finite_mdp()
    policy = ag.TabularSoftmaxPolicy(mdp.n_states, mdp.n_actions)
    cfg = ShieldConfig(delta=0.1, epsilon=0.05, fail_prob=0.05, samples=sample_size_exact(0.05, 0.05),
                       horizon=5, lookahead=5, cost_value=env.cost_value, allow_undersampling=True)
    assert cfg.samples == 738
    exact = exact_pair_measure(mdp, policy, env.formula, cfg.horizon)
    high = [tuple(p) for p in np.argwhere(exact >= 1 - cfg.delta + 2 * cfg.epsilon)]
    low_all = np.argwhere(exact <= 1 - cfg.delta)
    # the low pairs closest to the acceptance level are the hardest to reject
    order = np.argsort(-exact[low_all[:, 0], low_all[:, 1]])
    low = [tuple(p) for p in low_all[order[:20]]]
    model = TrueDynamicsModel(mdp, env.formula, env.cost_value)
    rep = shield_calibration_report(mdp, policy, model, cfg, trials=1000,
                                    rng=np.random.default_rng(0), formula=env.formula,
                                    pairs=high + low, route="rollout")
    elapsed = time.perf_counter() - t
    ok = (len(high) > 0 and len(low) > 0 and rep.min_high_accept >= 1 - cfg.fail_prob
          and rep.max_low_accept <= cfg.fail_prob and elapsed < 180)
    criterion("Shield soundness", ok,
              f"{len(high)} high pairs min accept {rep.min_high_accept:.3f}; {len(low)} low pairs "
              f"(mu up to {exact[low[0]]:.4f}) max false accept {rep.max_low_accept:.3f}; {elapsed:.1f}s")
    assert ok


def test_augmented_lagrangian(criterion):
    psi1, s1 = ag.lagrangian_step(ag.LagrangianState(lam=0.01, mu=1.0, threshold=0.0), -1.0)
    psi2, s2 = ag.lagrangian_step(ag.LagrangianState(lam=0.01, mu=2.0, threshold=0.0), 0.5)
    examples = (psi1 == -0.01 ** 2 / 2 and s1.lam == 0.0
                and psi2 == pytest.approx(0.01 * 0.5 + 0.5 * 2.0 * 0.25, abs=1e-15)
                and s2.lam == pytest.approx(1.01, abs=1e-15))
    rng = np.random.default_rng(0)
    nonneg = True
    for rule in ("monotone", "literal"):
        state = ag.LagrangianState(mu_rule=rule)
        for jc in rng.normal(1.0, 3.0, size=2000):
            _, state = ag.lagrangian_step(state, float(jc))
            nonneg &= state.lam >= 0.0
    worst = 0.0
    for _ in range(100):
        lam, mu, d = rng.uniform(0, 5), rng.uniform(1e-3, 10), rng.uniform(-2, 2)
        jc = d - lam / mu
        g = jc - d
        psi, _ = ag.lagrangian_step(ag.LagrangianState(lam=lam, mu=mu, threshold=d), jc)
        worst = max(worst, abs((lam * g + 0.5 * mu * g * g) - psi), abs(-lam ** 2 / (2 * mu) - psi))
    ok = examples and nonneg and worst <= 1e-10
    criterion("Augmented Lagrangian", ok,
              f"examples {'match' if examples else 'differ'}, lambda>=0 {nonneg}, "
              f"boundary gap {worst:.1e}")
    assert ok


# --- training experiments ----------------------------------------------------------

def _run(method, seed):
    doc = json.loads(CONFIG.read_text())
    doc.update(method=method, seed=seed)
    t = time.perf_counter()
    tr = Trainer(from_dict(doc))
    log = tr.run()
    ev = tr.evaluate()
    returns = log.column("episode_return")
    tail = returns[-max(1, len(returns) // 5):]
    return {"violations": tr.cum_violations, "eval_return": ev["mean_return"],
            "tail_std": float(tail.std()), "seconds": time.perf_counter() - t}


@pytest.fixture(scope="module")
def runs():
    cache = {}

    def get(method, seed):
        if (method, seed) not in cache:
            cache[method, seed] = _run(method, seed)
        return cache[method, seed]

    return get


def test_end_to_end_method_ordering(criterion, runs):
    methods = ("VANILLA", "LAG", "AMBS+PENL", "AMBS+PLPG", "AMBS+COPT")
    res = {(m, s): runs(m, s) for m in methods for s in SEEDS}
    elapsed = sum(r["seconds"] for r in res.values())
    lag_viol = {s: res["LAG", s]["violations"] for s in SEEDS}
    lag_ret = np.mean([res["LAG", s]["eval_return"] for s in SEEDS])
    parts, ok = [], elapsed < 20 * 60
    for m in methods[2:]:
        wins = sum(res[m, s]["violations"] < lag_viol[s] for s in SEEDS)
        ret = np.mean([res[m, s]["eval_return"] for s in SEEDS])
        within = abs(ret - lag_ret) <= 0.25 * abs(lag_ret)
        ok &= wins >= 4 and within
        parts.append(f"{m} fewer violations than LAG in {wins}/5, eval return {ret:.2f} vs {lag_ret:.2f}")
    most = sum(all(res["VANILLA", s]["violations"] > res[m, s]["violations"] for m in methods[1:])
               for s in SEEDS)
    ok &= most >= 4
    parts.append(f"VANILLA most violations in {most}/5")
    criterion("End-to-end method ordering", ok, "; ".join(parts) + f"; {elapsed / 60:.1f} min")
    assert ok


def test_unpenalised_shielding_is_unstable(criterion, runs):
    ambs = [runs("AMBS", s)["tail_std"] for s in SEEDS]
    penl = [runs("AMBS+PENL", s)["tail_std"] for s in SEEDS]
    elapsed = sum(runs(m, s)["seconds"] for m in ("AMBS", "AMBS+PENL") for s in SEEDS)
    ratio = np.mean(ambs) / np.mean(penl) if np.mean(penl) > 0 else math.inf
    ok = ratio >= 1.5 and elapsed < 10 * 60
    criterion("Return instability without penalty", ok,
              f"tail return std AMBS {np.mean(ambs):.3f} vs AMBS+PENL {np.mean(penl):.3f}, "
              f"ratio {ratio:.2f}; {elapsed / 60:.1f} min")
    assert ok
