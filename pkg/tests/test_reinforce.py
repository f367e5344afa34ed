import math

import pytest
import torch

from Agents.ControllerAgent import log_prob_and_entropy, new_stage_controller, sample_cell
from Agents.ReinforceAgent import (
    BaselineState,
    ReinforceAgent,
    reinforce_update,
    surrogate_loss,
    update_baseline,
)
from utils.errors import ControllerStateError, RewardError
from utils.tensor_core import GradientContext


def test_first_reward_initializes_baseline():
    state = update_baseline(BaselineState(), 0.7)
    assert state.initialized and state.value == 0.7


def test_moving_average_update():
    state = update_baseline(BaselineState(value=1.0, decay=0.9, initialized=True), 2.0)
    assert state.value == pytest.approx(1.1)


def test_baseline_rejects_bad_inputs():
    with pytest.raises(RewardError):
        update_baseline(BaselineState(), float("nan"))
    with pytest.raises(ValueError):
        BaselineState(decay=1.0)


def test_first_update_has_zero_advantage():
    ctrl = new_stage_controller(0, 8, torch.Generator().manual_seed(0))
    trace = sample_cell(ctrl, None, torch.Generator().manual_seed(1))
    outcome = reinforce_update(ctrl, trace, 5.0, BaselineState())
    assert outcome.advantage == 0.0
    assert outcome.baseline.value == 5.0

    second = sample_cell(ctrl, None, torch.Generator().manual_seed(2))
    outcome = reinforce_update(ctrl, second, 6.0, outcome.baseline)
    assert outcome.advantage == pytest.approx(1.0)
    assert outcome.baseline.value == pytest.approx(5.1)


def test_surrogate_gradient_matches_softmax_closed_form():
    ctrl = new_stage_controller(0, 8, torch.Generator().manual_seed(3))
    trace = sample_cell(ctrl, None, torch.Generator().manual_seed(4))
    advantage = 0.8
    with GradientContext(ctrl.params.values()) as ctx:
        loss, _, _ = surrogate_loss(ctrl, trace, advantage, entropy_weight=0.0)
        ctx.backward(loss)
    for slot, token in enumerate(trace.tokens):
        grad = ctrl.params[f"head{slot}.bias"].gradient
        # d(-A log p_t)/d bias = -A (onehot(t) - p)
        expected_token_entry = -advantage * (1.0 - math.exp(trace.log_probs[slot]))
        assert grad[token].item() == pytest.approx(expected_token_entry, abs=1e-5)
        assert grad.sum().item() == pytest.approx(0.0, abs=1e-5)


def test_update_rejects_foreign_trace_and_bad_reward():
    stage0 = new_stage_controller(0, 8, torch.Generator().manual_seed(5))
    stage1 = new_stage_controller(1, 8, torch.Generator().manual_seed(6))
    trace = sample_cell(stage0, None, torch.Generator())
    with pytest.raises(ControllerStateError):
        reinforce_update(stage1, trace, 1.0, BaselineState())
    with pytest.raises(RewardError):
        reinforce_update(stage0, trace, float("inf"), BaselineState())


def test_baseline_leaves_expected_gradient_unchanged():
    ctrl = new_stage_controller(0, 8, torch.Generator().manual_seed(7))
    rng = torch.Generator().manual_seed(8)
    bias = ctrl.params["head0.bias"].value
    draws = 3000
    plain = torch.zeros_like(bias)
    centred = torch.zeros_like(bias)
    for _ in range(draws):
        trace = sample_cell(ctrl, None, rng)
        reward = 1.0 if trace.tokens[0] == 0 else 0.0
        total, _, _, _ = log_prob_and_entropy(ctrl, trace.tokens, None)
        (grad,) = torch.autograd.grad(total, [bias])
        plain += reward * grad
        centred += (reward - 0.5) * grad
    plain /= draws
    centred /= draws

    with torch.no_grad():
        total, _, per_slot, _ = log_prob_and_entropy(ctrl, (0, 0, 0, 0), None)
    p0 = math.exp(per_slot[0])
    exact = torch.tensor([p0 * (1 - p0), -p0 * (1 - p0)])
    assert torch.allclose(plain, exact, atol=0.07)
    assert torch.allclose(centred, exact, atol=0.07)
    assert torch.equal(torch.sign(plain), torch.sign(centred))


def test_policy_learns_to_prefer_token_zero():
    ctrl = new_stage_controller(0, 16, torch.Generator().manual_seed(9))
    agent = ReinforceAgent(ctrl, entropy_weight=1e-4, lr=0.05)
    rng = torch.Generator().manual_seed(10)
    for _ in range(500):
        trace = sample_cell(ctrl, None, rng)
        reward = sum(1.0 for t in trace.tokens if t == 0) / len(trace.tokens)
        agent.record(trace, reward)

    with torch.no_grad():
        _, _, per_slot, _ = log_prob_and_entropy(ctrl, (0, 0, 0, 0), None)
    assert all(math.exp(lp) > 0.9 for lp in per_slot)
    assert agent.baseline.value > 0.8


def _score(ctrl, trace):
    with torch.no_grad():
        total, _, _, _ = log_prob_and_entropy(ctrl, trace.tokens, None)
    return total.item()


@pytest.mark.parametrize("reward, direction", [(2.0, 1.0), (0.0, -1.0)])
def test_step_moves_log_prob_with_the_advantage_sign(reward, direction):
    ctrl = new_stage_controller(0, 8, torch.Generator().manual_seed(11))
    trace = sample_cell(ctrl, None, torch.Generator().manual_seed(12))
    before = _score(ctrl, trace)
    baseline = BaselineState(value=1.0, initialized=True)
    reinforce_update(ctrl, trace, reward, baseline, entropy_weight=0.0, lr=1e-3)
    assert direction * (_score(ctrl, trace) - before) > 0


def test_reward_at_baseline_is_a_no_op_only_on_fresh_optimizer_state():
    ctrl = new_stage_controller(0, 8, torch.Generator().manual_seed(13))
    rng = torch.Generator().manual_seed(14)
    before = {name: p.value.detach().clone() for name, p in ctrl.params.items()}
    baseline = BaselineState(value=1.0, initialized=True)
    reinforce_update(ctrl, sample_cell(ctrl, None, rng), 1.0, baseline, entropy_weight=0.0)
    assert all(torch.equal(ctrl.params[name].value, value) for name, value in before.items())

    reinforce_update(ctrl, sample_cell(ctrl, None, rng), 3.0, baseline, entropy_weight=0.0)
    moved = {name: p.value.detach().clone() for name, p in ctrl.params.items()}
    reinforce_update(ctrl, sample_cell(ctrl, None, rng), 1.0, baseline, entropy_weight=0.0)
    # Adam momentum from the previous step keeps moving the weights
    assert any(not torch.equal(ctrl.params[name].value, value) for name, value in moved.items())
