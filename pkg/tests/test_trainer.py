import json

import numpy as np
import pytest

from ambs.config import from_dict
from ambs.trainer import (METRICS_COLUMNS, Trainer, TrainingError, evaluate, read_metrics,
                          write_outputs)
from ambs.agent import TabularSoftmaxPolicy
from ambs.envs import GridHazardEnv
from ambs.errors import ConfigurationError

SMALL_GRID = {"kind": "grid", "width": 4, "height": 4, "hazards": [[1, 2], [2, 1]],
              "goals": [[3, 3], [0, 3]], "episode_limit": 40}


def small(method="AMBS+PENL", frames=1200, **extra):
    doc = {"schema": "config-v1", "method": method, "total_frames": frames, "env": SMALL_GRID,
           "eval_episodes": 3,
           "shield": {"horizon": 4, "lookahead": 4, "epsilon": 0.05},
           "agent": {"horizon": 5, "prefill": 200}}
    for k, v in extra.items():
        if isinstance(v, dict):
            doc[k] = {**doc.get(k, {}), **v}
        else:
            doc[k] = v
    return from_dict(doc)


def test_vanilla_never_consults_the_shield():
    tr = Trainer(small("VANILLA"))
    log = tr.run()
    assert np.all(log.column("interventions") == 0)
    assert np.all(np.isnan(log.column("mu_mean")))
    assert tr.total_interventions == 0


def test_shielded_run_records_shield_telemetry():
    tr = Trainer(small("AMBS"))
    log = tr.run()
    mu = log.column("mu_mean")
    assert np.any(np.isfinite(mu))
    assert np.all((mu[np.isfinite(mu)] >= 0) & (mu[np.isfinite(mu)] <= 1))


@pytest.mark.parametrize("method", ["AMBS+COPT", "LAG"])
def test_fixed_seed_gives_identical_metrics(method):
    a = Trainer(small(method)).run().to_csv()
    b = Trainer(small(method)).run().to_csv()
    assert a == b


def test_different_seeds_differ():
    a = Trainer(small("VANILLA", seed=0)).run().to_csv()
    b = Trainer(small("VANILLA", seed=1)).run().to_csv()
    assert a != b


def test_frame_and_episode_accounting():
    tr = Trainer(small("AMBS+PLPG", frames=400))
    log = tr.run()
    assert tr.frames == 400
    assert len(log.rows) == tr.episodes == 400 // 40
    assert list(log.column("frames")) == [40.0 * (i + 1) for i in range(10)]
    assert tr.updates == 400 // 16
    assert log.column("cum_violations")[-1] == tr.cum_violations
    assert np.all(np.diff(log.column("cum_violations")) >= 0)


def test_lagrangian_columns_only_for_lag():
    lag = Trainer(small("LAG", frames=400)).run()
    assert np.all(np.isfinite(lag.column("lambda"))) and np.all(lag.column("lambda") >= 0)
    other = Trainer(small("AMBS+PENL", frames=400)).run()
    assert np.all(np.isnan(other.column("lambda")))


def test_paper_mu_rule_lifts_mu_to_one():
    tr = Trainer(small("LAG", frames=400, lagrangian={"mu_rule": "literal"}))
    tr.run()
    assert tr.lag.mu >= 1.0


def test_model_kl_is_logged_and_finite_after_fitting():
    log = Trainer(small("VANILLA", frames=800)).run()
    kl = log.column("model_kl_max")
    assert np.all(np.isfinite(kl[2:])) and np.all(kl[2:] >= 0)


def test_resume_from_checkpoint_matches_uninterrupted_run(tmp_path):
    full = Trainer(small("AMBS+PENL", frames=800))
    full.run()
    part = Trainer(small("AMBS+PENL", frames=800))
    part.run(until_frames=400)
    part.save_checkpoint(tmp_path / "ck")
    resumed = Trainer.restore(tmp_path / "ck")
    resumed.run()
    assert resumed.log.to_csv() == full.log.to_csv()
    assert np.array_equal(resumed.task.logits, full.task.logits)


def test_checkpoint_rejects_foreign_documents(tmp_path):
    (tmp_path / "checkpoint.json").write_text(json.dumps({"schema": "other"}))
    with pytest.raises(ConfigurationError):
        Trainer.restore(tmp_path)


def test_phase_is_reported_on_failure():
    tr = Trainer(small("AMBS+PENL", frames=400))

    def broken(*args, **kw):
        raise FloatingPointError("boom")

    tr._update_task = broken
    with pytest.raises(TrainingError) as info:
        tr.run()
    assert info.value.phase == "task-update"


def test_outputs_written(tmp_path):
    tr = Trainer(small("VANILLA", frames=400))
    tr.run()
    write_outputs(tr, tmp_path, tr.evaluate())
    cols = read_metrics(tmp_path / "metrics.csv")
    assert tuple(cols) == METRICS_COLUMNS
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == ",".join(METRICS_COLUMNS)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["frames"] == 400 and "evaluation" in summary
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert resolved["method"] == "VANILLA" and resolved["seeds"]
    assert (tmp_path / "checkpoint" / "checkpoint.json").is_file()


def test_read_metrics_rejects_foreign_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigurationError):
        read_metrics(p)


def test_evaluate_on_hazard_free_layout():
    env = GridHazardEnv(width=4, height=4, hazards=(), goals=((3, 3), (0, 3)), episode_limit=30)
    out = evaluate(TabularSoftmaxPolicy(env.n_states, 4), env, 5, rng=np.random.default_rng(0))
    assert out["violations_per_episode"] == 0.0 and out["episodes"] == 5


def test_trained_agent_clears_the_random_policy_floor():
    tr = Trainer(small("AMBS+PENL", frames=4000, agent={"return_mode": "advantage"},
                       model={"smoothing": 1e-4}))
    tr.run()
    trained = tr.evaluate(20)["mean_return"]
    env = GridHazardEnv(width=4, height=4, hazards=((1, 2), (2, 1)), goals=((3, 3), (0, 3)),
                        episode_limit=40)
    floor = evaluate(TabularSoftmaxPolicy(env.n_states, 4), env, 20,
                     rng=np.random.default_rng(0))["mean_return"]
    assert trained > floor


def test_point_navigation_smoke():
    doc = {"schema": "config-v1", "method": "AMBS+PENL", "total_frames": 300,
           "env": {"kind": "point", "episode_limit": 50}, "eval_episodes": 1,
           "shield": {"horizon": 3, "lookahead": 3, "epsilon": 0.08, "samples": 50,
                      "allow_undersampling": True},
           "agent": {"horizon": 4, "prefill": 100}}
    tr = Trainer(from_dict(doc))
    log = tr.run()
    assert len(log.rows) == 6
    assert np.all(np.isfinite(log.column("episode_return")))
