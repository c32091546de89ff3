import math

import numpy as np
import pytest
from scipy.stats import chisquare

from config import ControllerConfig
from models.cell import ACTIVATIONS, enumerate_architectures, parse
from models.controller import (
    ControllerPolicy,
    RewardBaseline,
    decision_log_prob,
    load_controller,
    log_prob,
    reinforce_update,
    sample,
    save_controller,
)
from models.tensor import no_grad

BANDIT_CONFIG = ControllerConfig(hidden_size=32, learning_rate=0.05, temperature=1.0,
                                 entropy_weight=0.0, baseline_decay=0.9)


def test_two_node_space_probabilities_sum_to_one(rng):
    policy = ControllerPolicy(rng, num_nodes=2)
    total = sum(math.exp(log_prob(policy, arch)) for arch in enumerate_architectures(2))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_three_node_space_probabilities_sum_to_one(rng):
    policy = ControllerPolicy(rng, num_nodes=3, config=ControllerConfig(temperature=1.0))
    total = sum(math.exp(log_prob(policy, arch)) for arch in enumerate_architectures(3))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_sampled_trace_matches_log_prob(rng):
    policy = ControllerPolicy(rng)
    arch, trace = sample(policy, rng)
    assert arch.num_nodes == 6
    assert trace.decisions == arch.decisions()
    assert trace.log_prob == pytest.approx(log_prob(policy, arch), abs=1e-10)
    assert trace.entropy > 0.0


def test_illegal_decisions_have_zero_probability(rng):
    policy = ControllerPolicy(rng)
    decisions = list(parse("Tanh 0:Relu 1:Relu 2:Relu 0:Relu 2:Relu").decisions())
    decisions[3] = 2  # node 2 may only read nodes 0 or 1
    assert decision_log_prob(policy, decisions) == float("-inf")
    with pytest.raises(ValueError):
        decision_log_prob(policy, decisions[:-1])


def test_high_temperature_is_near_uniform():
    rng = np.random.default_rng(5)
    policy = ControllerPolicy(rng, config=ControllerConfig(temperature=1e6))
    draws = [sample(policy, rng)[0] for _ in range(2000)]
    node0 = np.bincount([ACTIVATIONS.index(a.node0_op) for a in draws], minlength=4)
    node4_input = np.bincount([a.inputs_of(4) for a in draws], minlength=4)
    assert chisquare(node0).pvalue > 0.001
    assert chisquare(node4_input).pvalue > 0.001


def test_baseline_uses_value_before_update(rng):
    policy = ControllerPolicy(rng, num_nodes=2)
    baseline = RewardBaseline(value=0.5, decay=0.9)
    traces = [sample(policy, rng)[1] for _ in range(2)]
    stats = reinforce_update(policy, traces, [1.0, 0.0], baseline)
    assert baseline.value == pytest.approx(0.9 * 0.5 + 0.1 * 0.5)
    assert stats["mean_reward"] == pytest.approx(0.5)
    assert stats["grad_norm"] >= 0.0


def test_reinforce_rejects_bad_batches(rng):
    policy = ControllerPolicy(rng, num_nodes=2)
    trace = sample(policy, rng)[1]
    with pytest.raises(ValueError):
        reinforce_update(policy, [], [], RewardBaseline())
    with pytest.raises(ValueError):
        reinforce_update(policy, [trace], [1.0, 2.0], RewardBaseline())


def test_baseline_decay_must_be_in_unit_interval():
    with pytest.raises(ValueError):
        RewardBaseline(decay=1.5)


def _bandit_run(seed: int, updates: int = 500, batch: int = 8) -> float:
    rng = np.random.default_rng(seed)
    policy = ControllerPolicy(rng, num_nodes=2, config=BANDIT_CONFIG)
    baseline = RewardBaseline(decay=BANDIT_CONFIG.baseline_decay)
    target = parse("Sigmoid 0:Relu", num_nodes=2)
    prob = math.exp(log_prob(policy, target))
    for step in range(updates):
        drawn = [sample(policy, rng) for _ in range(batch)]
        rewards = [1.0 if arch == target else 0.0 for arch, _ in drawn]
        reinforce_update(policy, [trace for _, trace in drawn], rewards, baseline)
        if step % 10 == 9:
            prob = math.exp(log_prob(policy, target))
            if prob > 0.9:
                break
    return prob


def test_bandit_training_finds_rewarded_architecture():
    wins = sum(_bandit_run(seed) > 0.9 for seed in range(10))
    assert wins >= 9


def test_controller_checkpoint_round_trip(tmp_path, rng):
    policy = ControllerPolicy(rng, num_nodes=3)
    baseline = RewardBaseline(decay=0.9)
    traces = [sample(policy, rng)[1] for _ in range(3)]
    reinforce_update(policy, traces, [0.1, 0.5, 0.9], baseline)
    save_controller(tmp_path / "controller", policy, baseline)

    restored, restored_baseline = load_controller(tmp_path / "controller")
    arch = parse("Relu 0:Tanh 1:Identity", num_nodes=3)
    assert log_prob(restored, arch) == pytest.approx(log_prob(policy, arch), abs=1e-12)
    assert restored_baseline.value == baseline.value
    assert restored.optimizer.step == policy.optimizer.step


def test_update_raises_log_prob_of_rewarded_trace():
    rng = np.random.default_rng(2)
    policy = ControllerPolicy(rng, num_nodes=3, config=ControllerConfig(learning_rate=1e-4, entropy_weight=0.0))
    arch, trace = sample(policy, rng)
    before = log_prob(policy, arch)
    reinforce_update(policy, [trace], [1.0], RewardBaseline(value=0.2))
    assert log_prob(policy, arch) > before


def test_update_ignores_shared_reward_offset():
    shifted, plain = (ControllerPolicy(np.random.default_rng(9), num_nodes=3) for _ in range(2))
    rng = np.random.default_rng(1)
    traces = [sample(plain, rng)[1] for _ in range(3)]
    rewards = [0.2, 0.9, 0.4]
    offset = 3.0

    plain_baseline = RewardBaseline(value=0.5, decay=0.9)
    shifted_baseline = RewardBaseline(value=0.5 + offset, decay=0.9)
    reinforce_update(plain, traces, rewards, plain_baseline)
    reinforce_update(shifted, traces, [r + offset for r in rewards], shifted_baseline)

    after_plain, after_shifted = plain.parameters(), shifted.parameters()
    for name, p in after_plain.items():
        np.testing.assert_allclose(after_shifted[name].data, p.data, rtol=0, atol=1e-12, err_msg=name)
    assert shifted_baseline.value == pytest.approx(plain_baseline.value + offset)


@pytest.mark.parametrize("temperature", [1.0, 5.0, 1e6])
def test_position_entropy_is_bounded_by_legal_choices(temperature):
    rng = np.random.default_rng(4)
    policy = ControllerPolicy(rng, config=ControllerConfig(temperature=temperature))
    arch, _ = sample(policy, rng)
    with no_grad():
        rows = policy.distributions(arch.decisions())
    for position, (log_probs, probs) in enumerate(rows):
        entropy = -float(np.sum(probs.data * log_probs.data))
        bound = math.log(policy.valid_count(position))
        assert entropy <= bound + 1e-12
        if temperature == 1e6:
            assert entropy == pytest.approx(bound, abs=1e-6)
