import json

import pytest

from ambs import config as cf
from ambs.errors import ConfigurationError


def doc(**kw):
    return {"schema": cf.CONFIG_SCHEMA, **kw}


def test_defaults():
    c = cf.from_dict(doc())
    assert c.method == "AMBS+PENL" and c.total_frames == 200_000
    assert (c.shield.delta, c.shield.epsilon, c.shield.horizon, c.shield.lookahead) == (0.1, 0.09, 15, 30)
    assert (c.agent.gamma, c.agent.lam, c.agent.horizon) == (0.997, 0.95, 15)
    assert (c.lagrangian.lam, c.lagrangian.mu, c.lagrangian.sigma) == (0.01, 5e-9, 1e-6)


@pytest.mark.parametrize("method, alpha, cost", [
    ("VANILLA", 0.0, 10.0), ("AMBS", 0.0, 10.0), ("AMBS+PENL", 1.0, 10.0),
    ("AMBS+PLPG", 0.8, 10.0), ("AMBS+COPT", 1.0, 10.0), ("LAG", 0.0, 1.0),
])
def test_method_defaults(method, alpha, cost):
    c = cf.from_dict(doc(method=method))
    assert c.resolved_alpha == alpha
    assert c.resolved_cost == cost
    assert c.shielded == (method in cf.SHIELDED)


def test_explicit_values_override_method_defaults():
    c = cf.from_dict(doc(method="LAG", cost_value=3.0, agent={"alpha": 0.25}))
    assert c.resolved_cost == 3.0 and c.resolved_alpha == 0.25


def test_disabled_shield_is_not_shielded():
    assert not cf.from_dict(doc(method="AMBS", shield={"enabled": False})).shielded


@pytest.mark.parametrize("bad", [
    {"schema": "config-v0"},
    {"schema": cf.CONFIG_SCHEMA, "colour": "red"},
    {"schema": cf.CONFIG_SCHEMA, "shield": {"sigma": 1}},
    {"schema": cf.CONFIG_SCHEMA, "method": "PPO"},
    {"schema": cf.CONFIG_SCHEMA, "total_frames": 0},
    {"schema": cf.CONFIG_SCHEMA, "agent": {"return_mode": "gae"}},
    {"schema": cf.CONFIG_SCHEMA, "lagrangian": {"mu_rule": "fast"}},
    {"schema": cf.CONFIG_SCHEMA, "shield": {"route": "exact"}},
    {"schema": cf.CONFIG_SCHEMA, "shield": 3},
    {"schema": cf.CONFIG_SCHEMA, "env": "grid"},
])
def test_invalid_documents_rejected(bad):
    with pytest.raises(ConfigurationError):
        cf.from_dict(bad)


def test_missing_schema_rejected():
    with pytest.raises(ConfigurationError):
        cf.from_dict({"method": "LAG"})


def test_load_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        cf.load(tmp_path / "missing.json")
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigurationError):
        cf.load(p)


def test_load_round_trip(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc(method="LAG", seed=4, agent={"prefill": 100})))
    c = cf.load(p)
    assert (c.method, c.seed, c.agent.prefill) == ("LAG", 4, 100)


def test_resolve_is_complete_and_reloadable():
    c = cf.from_dict(doc(method="AMBS+PLPG", seed=7))
    full = cf.resolve(c)
    assert full["agent"]["alpha"] == 0.8
    assert full["shield"]["samples"] == 1309
    assert set(full["seeds"]) == set(cf.SEED_STREAMS)
    again = cf.from_dict(json.loads(json.dumps(full)))
    assert cf.resolve(again) == full


def test_seed_streams_are_distinct_and_deterministic():
    a = cf.derive_seeds(0)
    assert a == cf.derive_seeds(0)
    assert len(set(a.values())) == len(cf.SEED_STREAMS)
    assert a != cf.derive_seeds(1)
