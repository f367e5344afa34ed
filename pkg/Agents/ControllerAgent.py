"""
Controller Agent
----------------

The autoregressive LSTM policy over genotype tokens:
1. Each step feeds the embedding of the previously sampled token (a learned
   start row for the first step) through one LSTM step.
2. The step's hidden vector goes through that slot's softmax head and one
   token is drawn.
3. The final hidden vector of a sample is kept so a top-K beam can seed the
   next stage's controller.

Under multi-level search there is one fresh controller per cell
(`cell_indices == (stage,)`); single-level search uses one controller over
every cell's slots.
"""

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from utils.errors import ControllerStateError, DecodeError
from utils.genotype import TokenSpec, decode
from utils.tensor_core import LSTMWeights, Parameter, ParameterStore, Tensor, linear, lstm_step, uniform_init

INIT_RANGE = 0.1
DEFAULT_HIDDEN_SIZE = 64


@dataclass
class ControllerState:
    params: ParameterStore
    hidden_size: int
    stage: int
    cell_indices: tuple[int, ...]

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        sizes = ()
        for cell in self.cell_indices:
            sizes += TokenSpec(cell).vocab_sizes
        return sizes

    @property
    def num_slots(self) -> int:
        return len(self.vocab_sizes)

    def embedding_row(self, slot: int, token: int) -> int:
        """Row 0 is the start token; then one row per (slot, value) pair."""
        return 1 + sum(self.vocab_sizes[:slot]) + token

    def lstm_weights(self) -> LSTMWeights:
        p = self.params
        return LSTMWeights(p["lstm.w_ih"].value, p["lstm.w_hh"].value, p["lstm.bias"].value)

    def split_tokens(self, tokens: Sequence[int]) -> list[list[int]]:
        """Token list cut into per-cell groups."""
        groups, start = [], 0
        for cell in self.cell_indices:
            n = TokenSpec(cell).num_slots
            groups.append(list(tokens[start:start + n]))
            start += n
        return groups


@dataclass
class SampleTrace:
    tokens: tuple[int, ...]
    log_probs: tuple[float, ...]
    entropies: tuple[float, ...]
    final_hidden: Tensor | None
    stage: int
    seed_hidden: Tensor | None = None
    beam_index: int | None = None

    @property
    def total_log_prob(self) -> float:
        return float(sum(self.log_probs))

    @property
    def total_entropy(self) -> float:
        return float(sum(self.entropies))


def new_stage_controller(
    stage: int,
    hidden_size: int,
    rng: torch.Generator,
    cell_indices: tuple[int, ...] | None = None,
) -> ControllerState:
    """Fresh policy parameters for one stage, uniform in [-0.1, 0.1]."""
    if stage < 0:
        raise ValueError("stage must be >= 0")
    cell_indices = (stage,) if cell_indices is None else tuple(cell_indices)
    shell = ControllerState({}, hidden_size, stage, cell_indices)
    vocab = shell.vocab_sizes
    shapes = {
        "embedding": (1 + sum(vocab), hidden_size),
        "lstm.w_ih": (4 * hidden_size, hidden_size),
        "lstm.w_hh": (4 * hidden_size, hidden_size),
        "lstm.bias": (4 * hidden_size,),
    }
    for t, size in enumerate(vocab):
        shapes[f"head{t}.weight"] = (size, hidden_size)
        shapes[f"head{t}.bias"] = (size,)
    shell.params = {name: Parameter(name, uniform_init(shape, INIT_RANGE, rng)) for name, shape in shapes.items()}
    return shell


def _check_seed(ctrl: ControllerState, seed_hidden: Tensor | None) -> None:
    if (seed_hidden is not None) != (ctrl.stage > 0):
        raise ControllerStateError(
            f"stage {ctrl.stage} controller {'needs' if seed_hidden is None else 'takes no'} beam seed hidden vector"
        )
    if seed_hidden is not None and seed_hidden.numel() != ctrl.hidden_size:
        raise ControllerStateError(f"seed hidden size {seed_hidden.numel()} != controller hidden size {ctrl.hidden_size}")


def _unroll(
    ctrl: ControllerState,
    seed_hidden: Tensor | None,
    choose: Callable[[int, Tensor], int],
) -> tuple[list[int], list[Tensor], list[Tensor], Tensor]:
    emb = ctrl.params["embedding"].value
    weights = ctrl.lstm_weights()
    hidden = ctrl.hidden_size
    h = torch.zeros(1, hidden, dtype=emb.dtype) if seed_hidden is None else seed_hidden.detach().to(emb.dtype).view(1, hidden)
    c = torch.zeros(1, hidden, dtype=emb.dtype)
    x = emb[0:1]
    tokens, log_probs, entropies = [], [], []
    for t in range(ctrl.num_slots):
        h, c = lstm_step(x, h, c, weights)
        logits = linear(h, ctrl.params[f"head{t}.weight"].value, ctrl.params[f"head{t}.bias"].value)[0]
        log_p = F.log_softmax(logits, dim=-1)
        token = choose(t, log_p)
        tokens.append(token)
        log_probs.append(log_p[token])
        entropies.append(-(log_p.exp() * log_p).sum())
        row = ctrl.embedding_row(t, token)
        x = emb[row:row + 1]
    return tokens, log_probs, entropies, h[0]


def sample_cell(ctrl: ControllerState, seed_hidden: Tensor | None, rng: torch.Generator) -> SampleTrace:
    """Draw one token per slot, feeding each drawn token into the next step."""
    _check_seed(ctrl, seed_hidden)

    def draw(_, log_p: Tensor) -> int:
        return int(torch.multinomial(log_p.exp(), 1, generator=rng).item())

    with torch.no_grad():
        tokens, log_probs, entropies, final_hidden = _unroll(ctrl, seed_hidden, draw)
    return SampleTrace(
        tokens=tuple(tokens),
        log_probs=tuple(float(v) for v in log_probs),
        entropies=tuple(float(v) for v in entropies),
        final_hidden=final_hidden.detach().clone(),
        stage=ctrl.stage,
        seed_hidden=None if seed_hidden is None else seed_hidden.detach().clone(),
    )


def log_prob_and_entropy(
    ctrl: ControllerState,
    tokens: Sequence[int],
    seed_hidden: Tensor | None,
) -> tuple[Tensor, Tensor, list[float], list[float]]:
    """Differentiable re-scoring of a token sequence under the current policy."""
    _check_seed(ctrl, seed_hidden)
    tokens = [int(t) for t in tokens]
    if len(tokens) != ctrl.num_slots:
        raise DecodeError(f"stage {ctrl.stage} controller scores {ctrl.num_slots} tokens, got {len(tokens)}")
    for cell, group in zip(ctrl.cell_indices, ctrl.split_tokens(tokens)):
        decode(group, cell)

    tokens_iter = iter(tokens)
    _, log_probs, entropies, _ = _unroll(ctrl, seed_hidden, lambda _t, _lp: next(tokens_iter))
    total_log_prob = torch.stack(log_probs).sum()
    total_entropy = torch.stack(entropies).sum()
    return (
        total_log_prob,
        total_entropy,
        [float(v.detach()) for v in log_probs],
        [float(v.detach()) for v in entropies],
    )


def seed_from_beam(trace: SampleTrace) -> Tensor:
    """The hidden vector a beam hands to the next stage's controller."""
    n = len(trace.tokens)
    if trace.final_hidden is None or n == 0 or len(trace.log_probs) != n or len(trace.entropies) != n:
        raise ControllerStateError("sample trace is incomplete; it cannot seed the next stage")
    return trace.final_hidden.detach().clone()


def max_entropy(ctrl: ControllerState) -> float:
    """Entropy of the uniform policy: sum of ln|V| over slots."""
    return sum(math.log(v) for v in ctrl.vocab_sizes)
