import json
import math

import numpy as np
import pytest

from cc_env import (
    CollectionConfig,
    EpsilonGreedy,
    ExperienceDataset,
    ExpertUnavailable,
    Observation,
    RewardSpec,
    Scenario,
    apply_action,
    build_observation,
    check_action,
    collect,
    collect_many,
    eta,
    reward,
    sample_scenarios,
)
from config import ConfigInvalid
from netsim import WindowStats
from policies import ConstantPolicy, Policy, PolicyProtocolError, ScriptedExpert

BOUNDS = RewardSpec(ack_bounds=(0.0, 40.0), rtt_bounds=(1e-4, 1e-3), loss_bounds=(0.0, 50.0))


def window(rtt_sum=0.0, rtt_samples=0, losses=0, sent=0, min_rtt=1e-3, intersend=1e-4, acks=0):
    return WindowStats(time=0.001, flow_id=0, intersend=intersend, sent=sent, acks=acks,
                       rtt_sum=rtt_sum, rtt_samples=rtt_samples, losses=losses, min_rtt=min_rtt)


class FailingExpert(Policy):
    name = "failing"

    def act(self, obs):
        raise PolicyProtocolError("endpoint went away")


# --- Observation ---

@pytest.mark.parametrize("values", [
    (math.nan, 1e-3, 1.0, 0.0),
    (0.0, 1e-3, 1.0, 0.0),
    (1e-4, 1e-3, 0.9, 0.0),
    (1e-4, 1e-3, 1.0, 1.5),
])
def test_observation_invariants(values):
    with pytest.raises(ValueError):
        Observation(*values)


def test_observation_units():
    obs = Observation(1e-4, 2e-3, 2.0, 0.1)
    assert obs.as_array("ms").tolist() == pytest.approx([0.1, 2.0, 2.0, 0.1])
    assert obs.as_array().tolist() == [1e-4, 2e-3, 2.0, 0.1]


def test_check_action():
    assert check_action(1.2) == 1.2
    with pytest.raises(ValueError):
        check_action(1.6)


# --- build_observation ---

def test_rtt_ratio():
    obs = build_observation(window(rtt_sum=4e-3, rtt_samples=2, sent=10))
    assert obs.x2 == pytest.approx(2e-3)
    assert obs.x3 == pytest.approx(2.0)


def test_loss_ratio():
    assert build_observation(window(rtt_sum=1e-3, rtt_samples=1, sent=100)).x4 == 0.0
    assert build_observation(window(rtt_sum=1e-3, rtt_samples=1, losses=5, sent=50)).x4 == pytest.approx(0.1)


def test_empty_window_carries_rtt_forward():
    obs = build_observation(window(), previous_rtt=3e-3)
    assert obs.x2 == 3e-3
    assert obs.x3 == pytest.approx(3.0)


def test_fallback_before_first_sample():
    obs = build_observation(window(min_rtt=math.inf), fallback_min_rtt=5e-5)
    assert obs.x2 == 5e-5
    assert obs.x3 == 1.0


def test_losses_without_sends_are_capped():
    assert build_observation(window(losses=3, sent=0)).x4 == 1.0


# --- apply_action ---

def test_apply_action_examples():
    assert apply_action(100e-6, 1.25) == pytest.approx(80e-6, rel=1e-15)
    assert apply_action(100e-6, 1.0) == 100e-6
    assert apply_action(1e-6, 1.5, x1_min=1e-6) == 1e-6
    assert apply_action(0.09, 0.8) == 0.1


def test_apply_action_inverse():
    rng = np.random.default_rng(21)
    for _ in range(10_000):
        x1 = 10.0 ** rng.uniform(-6, -2)
        a = rng.uniform(0.8, 1.5)
        assert apply_action(x1, a) * a == pytest.approx(x1, rel=4.5e-16)


def test_apply_action_rejects_nonpositive():
    with pytest.raises(ValueError):
        apply_action(0.0, 1.0)


# --- reward ---

def test_reward_extremes():
    assert reward(40.0, 1e-4, 0.0, BOUNDS) == 1.0
    assert reward(40.0, 1e-3, 50.0, BOUNDS) == -1.0
    assert reward(20.0, 1e-4, 0.0, BOUNDS) == 0.5


def test_eta_clips():
    assert eta(-5.0, (0.0, 10.0)) == 0.0
    assert eta(15.0, (0.0, 10.0)) == 1.0


def test_reward_spec_bounds():
    with pytest.raises(ConfigInvalid):
        RewardSpec(ack_bounds=(1.0, 1.0), rtt_bounds=(0.0, 1.0), loss_bounds=(0.0, 1.0))


def test_reward_monotone_and_bounded():
    rng = np.random.default_rng(22)
    for _ in range(10_000):
        acks, extra_acks = rng.uniform(0, 60, 2)
        rtt, extra_rtt = rng.uniform(0, 2e-3, 2)
        losses, extra_losses = rng.uniform(0, 80, 2)
        base = reward(acks, rtt, losses, BOUNDS)
        assert -2.0 <= base <= 1.0
        assert reward(acks + extra_acks, rtt, losses, BOUNDS) >= base
        assert reward(acks, rtt + extra_rtt, losses, BOUNDS) <= base
        assert reward(acks, rtt, losses + extra_losses, BOUNDS) <= base


# --- collect ---

def test_collect_pure_expert(small_scenario):
    explorer_rng = np.random.default_rng(0)
    expert = ScriptedExpert()
    explorer = EpsilonGreedy(expert, 0.0, explorer_rng)
    obs = Observation(1e-4, 1e-3, 1.3, 0.0)
    assert explorer.act(obs) == expert.act(obs)

    dataset = collect(expert, small_scenario, epsilon=0.0, seed=1)
    assert len(dataset) == 50
    for row in dataset.rows.itertuples():
        assert row.action == expert.act(Observation(row.x1, row.x2, row.x3, row.x4))


def test_collect_labels_are_expert_actions(small_scenario):
    expert = ScriptedExpert()
    dataset = collect(expert, small_scenario.with_overrides(pair_count=2), epsilon=0.5, seed=3)
    assert len(dataset) == 100
    assert dataset.provenance["rows_per_flow"] == [50, 50]
    for row in dataset.rows.itertuples():
        assert row.action == expert.act(Observation(row.x1, row.x2, row.x3, row.x4))


def test_fully_random_actions_are_uniform():
    explorer = EpsilonGreedy(ScriptedExpert(), 1.0, np.random.default_rng(5))
    obs = Observation(1e-4, 1e-3, 1.0, 0.0)
    for _ in range(5000):
        explorer.act(obs)
    executed = np.asarray(explorer.executed)
    assert executed.min() >= 0.8 and executed.max() <= 1.5
    assert executed.mean() == pytest.approx(1.15, abs=0.01)
    assert all(row[4] == explorer.rows[0][4] for row in explorer.rows)


def test_collect_one_row_per_window():
    scenario = Scenario(bottleneck_capacity_mbps=10.0, duration_s=5.0, pair_count=1)
    dataset = collect(ConstantPolicy(1.0), scenario, epsilon=0.0, seed=0)
    assert len(dataset) == 5000


def test_collect_rejects_bad_epsilon(small_scenario):
    with pytest.raises(ConfigInvalid):
        collect(ScriptedExpert(), small_scenario, epsilon=1.5)


def test_expert_failure(small_scenario):
    with pytest.raises(ExpertUnavailable):
        collect(FailingExpert(), small_scenario, epsilon=0.5)


def test_merge_sums_rows(small_scenario):
    config = CollectionConfig(pair_counts=(1, 2))
    scenarios = config.scenarios(small_scenario)
    merged = collect_many(ScriptedExpert(), scenarios, epsilon=0.5, seed=0)
    assert len(merged) == 50 + 100
    assert [p["scenario"]["pair_count"] for p in merged.provenance["union_of"]] == [1, 2]


def test_collect_many_is_seeded(small_scenario):
    scenarios = [small_scenario, small_scenario]
    first = collect_many(ScriptedExpert(), scenarios, seed=9)
    second = collect_many(ScriptedExpert(), scenarios, seed=9)
    assert first.rows.equals(second.rows)


# --- domain randomisation ---

def test_sample_scenarios():
    config = CollectionConfig(capacity_range_mbps=(1.0, 2000.0), pair_choices=(1, 2), episodes=200)
    scenarios = sample_scenarios(Scenario(), config, seed=4)
    capacities = np.array([s.bottleneck_capacity_mbps for s in scenarios])
    assert len(scenarios) == 200
    assert capacities.min() >= 1.0 and capacities.max() <= 2000.0
    assert {s.pair_count for s in scenarios} == {1, 2}
    # log-uniform: about half the draws fall below the geometric midpoint
    assert 0.35 < np.mean(capacities < math.sqrt(2000.0)) < 0.65
    assert [s.bottleneck_capacity_mbps for s in sample_scenarios(Scenario(), config, seed=4)] == capacities.tolist()


def test_collection_config_modes():
    base = Scenario()
    assert CollectionConfig(episodes=3).scenarios(base) == [base] * 3
    assert [s.pair_count for s in CollectionConfig(pair_counts=(1, 2)).scenarios(base)] == [1, 2]
    assert CollectionConfig(pair_choices=(2,), episodes=4).randomized


@pytest.mark.parametrize("changes, field", [
    ({"epsilon": 1.2}, "epsilon"),
    ({"capacity_range_mbps": (5.0,)}, "capacity_range_mbps"),
    ({"capacity_range_mbps": (10.0, 1.0)}, "capacity_range_mbps"),
    ({"pair_counts": (0,)}, "pair_counts"),
])
def test_collection_config_invalid(changes, field):
    with pytest.raises(ConfigInvalid) as info:
        CollectionConfig(**changes)
    assert info.value.field == field


# --- ExperienceDataset ---

def test_behaviour_classes():
    rows = [(1e-4, 1e-3, 1.0, 0.0, a) for a in (0.85, 0.99, 1.0, 1.015, 1.3, 1.4)]
    assert ExperienceDataset(rows).behaviour_classes() == {"decrease": 1, "stabilize": 3, "increase": 2}


def test_validate_rejects_bad_rows():
    with pytest.raises(ValueError):
        ExperienceDataset([(1e-4, 1e-3, 0.5, 0.0, 1.0)]).validate()
    with pytest.raises(ValueError):
        ExperienceDataset([(1e-4, 1e-3, 1.0, 0.0, 1.6)]).validate()


def test_save_and_load(tmp_path, small_scenario):
    dataset = collect(ScriptedExpert(), small_scenario, epsilon=0.5, seed=2)
    path = dataset.save(tmp_path / "dataset.csv")
    header = path.read_text().splitlines()[0]
    assert header == "x1,x2,x3,x4,action"

    sidecar = json.loads(path.with_suffix(".json").read_text())
    assert sidecar["rows"] == len(dataset)
    assert sidecar["classes"] == dataset.behaviour_classes()
    assert sidecar["epsilon"] == 0.5
    assert sidecar["seed"] == 2
    assert set(sidecar["reward_spec"]) >= {"ack_bounds", "rtt_bounds", "loss_bounds"}

    loaded = ExperienceDataset.load(path)
    assert len(loaded) == len(dataset)
    assert np.allclose(loaded.matrix(), dataset.matrix(), rtol=1e-11, atol=0.0)
    assert loaded.provenance["expert"] == "scripted-expert"


def test_split_partitions_rows():
    rows = [(1e-4, 1e-3, 1.0 + i / 100, 0.0, 1.0) for i in range(100)]
    first, second = ExperienceDataset(rows).split(0.8, seed=1)
    assert len(first) == 80 and len(second) == 20
    assert sorted(first.rows.x3.tolist() + second.rows.x3.tolist()) == sorted(r[2] for r in rows)


def test_matrix_units():
    dataset = ExperienceDataset([(1e-4, 2e-3, 2.0, 0.0, 1.0)])
    assert dataset.matrix("ms")[0].tolist() == pytest.approx([0.1, 2.0, 2.0, 0.0])
