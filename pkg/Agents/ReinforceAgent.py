"""
Reinforce Agent
---------------

Policy-gradient learner for one stage's controller:
1. Re-score the sampled tokens under the current policy (differentiable).
2. Minimize -[(reward - b) * sum(log pi) + entropy_weight * sum(H)] with one
   Adam step, using the baseline b from *before* this reward.
3. Fold the reward into the moving-average baseline.
"""

import math
from dataclasses import dataclass, replace

import structlog

from Agents.ControllerAgent import ControllerState, SampleTrace, log_prob_and_entropy
from utils.errors import ControllerStateError, RewardError
from utils.tensor_core import CONTROLLER_BETAS, GradientContext, adam_update_all

log = structlog.get_logger(__name__)

DEFAULT_BASELINE_DECAY = 0.9
DEFAULT_ENTROPY_WEIGHT = 1e-4
DEFAULT_CONTROLLER_LR = 3.5e-4


@dataclass(frozen=True)
class BaselineState:
    value: float = 0.0
    decay: float = DEFAULT_BASELINE_DECAY
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"baseline decay must be in (0, 1), got {self.decay}")


def update_baseline(state: BaselineState, reward: float) -> BaselineState:
    if not math.isfinite(reward):
        raise RewardError(f"non-finite reward {reward}")
    if not state.initialized:
        return replace(state, value=float(reward), initialized=True)
    return replace(state, value=state.decay * state.value + (1.0 - state.decay) * float(reward))


@dataclass(frozen=True)
class ReinforceOutcome:
    controller: ControllerState
    baseline: BaselineState
    advantage: float
    surrogate_loss: float
    total_log_prob: float
    total_entropy: float


def surrogate_loss(ctrl: ControllerState, trace: SampleTrace, advantage: float, entropy_weight: float):
    """The scalar the REINFORCE step minimizes, plus the summed log-prob and entropy."""
    total_log_prob, total_entropy, _, _ = log_prob_and_entropy(ctrl, trace.tokens, trace.seed_hidden)
    loss = -(advantage * total_log_prob + entropy_weight * total_entropy)
    return loss, total_log_prob, total_entropy


def reinforce_update(
    ctrl: ControllerState,
    trace: SampleTrace,
    reward: float,
    baseline: BaselineState,
    entropy_weight: float = DEFAULT_ENTROPY_WEIGHT,
    lr: float = DEFAULT_CONTROLLER_LR,
    betas: tuple[float, float] = CONTROLLER_BETAS,
) -> ReinforceOutcome:
    """
    One Adam step on the controller; the controller is updated in place and returned.

    A zero advantage does not freeze the controller in general: the entropy
    bonus still has a gradient, and Adam keeps moving along the moments of
    earlier steps. Only with entropy_weight=0 and fresh optimizer state
    (step_count 0, zero moments) does reward == baseline leave every weight
    unchanged.
    """
    if trace.stage != ctrl.stage:
        raise ControllerStateError(f"trace from stage {trace.stage} cannot update the stage {ctrl.stage} controller")
    if not math.isfinite(reward):
        raise RewardError(f"non-finite reward {reward}")

    # the first reward initializes the baseline, so its advantage is zero
    advantage = float(reward) - baseline.value if baseline.initialized else 0.0
    with GradientContext(ctrl.params.values()) as ctx:
        loss, total_log_prob, total_entropy = surrogate_loss(ctrl, trace, advantage, entropy_weight)
        ctx.backward(loss)
    adam_update_all(ctrl.params.values(), lr, betas)

    return ReinforceOutcome(
        controller=ctrl,
        baseline=update_baseline(baseline, reward),
        advantage=advantage,
        surrogate_loss=float(loss.detach()),
        total_log_prob=float(total_log_prob.detach()),
        total_entropy=float(total_entropy.detach()),
    )


class ReinforceAgent:
    """
    Owns one stage's controller and its moving-average baseline.
      - `record(trace, reward)` runs one REINFORCE step and keeps the new baseline.
    """

    def __init__(
        self,
        controller: ControllerState,
        entropy_weight: float = DEFAULT_ENTROPY_WEIGHT,
        lr: float = DEFAULT_CONTROLLER_LR,
        baseline_decay: float = DEFAULT_BASELINE_DECAY,
    ):
        """
        :param controller: the stage's policy, updated in place
        :param entropy_weight: weight of the entropy bonus (1e-4 by default)
        :param lr: controller Adam learning rate
        :param baseline_decay: moving-average decay of the reward baseline
        """
        self.controller = controller
        self.entropy_weight = entropy_weight
        self.lr = lr
        self.baseline = BaselineState(decay=baseline_decay)

    def record(self, trace: SampleTrace, reward: float) -> ReinforceOutcome:
        outcome = reinforce_update(self.controller, trace, reward, self.baseline, self.entropy_weight, self.lr)
        self.baseline = outcome.baseline
        log.debug(
            "[ReinforceAgent] step",
            stage=self.controller.stage,
            reward=reward,
            baseline=self.baseline.value,
            entropy=outcome.total_entropy,
            loss=outcome.surrogate_loss,
        )
        return outcome
