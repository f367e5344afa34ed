"""
Random Search Agent
-------------------

Two random-search baselines under a generator-step budget:
  - shared_weights: one supernet trained with a uniformly random genotype per
    step, then M random candidates ranked by proxy reward on those weights
  - early_stop: each random candidate trained briefly from scratch and ranked
    by its own reward; budget // early_stop_steps candidates fit the budget
"""

import json
import os
from dataclasses import asdict, dataclass

import structlog
import torch

from Agents.DerivationAgent import DerivationAgent, retrain_from_scratch
from Agents.SearchAgent import ProxyEvaluator, RewardFn, adversarial_hparams, make_streams
from utils.config import BASELINE_MODES, SearchConfig
from utils.errors import ConfigError
from utils.genotype import Genotype, ensure_valid, random_genotype
from utils.networks import build_discriminator, build_supernet, gan_train_step

log = structlog.get_logger(__name__)

SEED_RANGE = 2 ** 31 - 1


@dataclass(frozen=True)
class BaselineRow:
    index: int
    genotype: str
    score: float
    generator_steps: int


@dataclass
class BaselineReport:
    mode: str
    budget: int
    rows: list[BaselineRow]
    best: BaselineRow
    steps_used: int
    retrained_is: float | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "budget": self.budget,
            "steps_used": self.steps_used,
            "rows": [asdict(r) for r in self.rows],
            "best": asdict(self.best),
            "retrained_is": self.retrained_is,
        }


def _geometry(config: SearchConfig) -> dict:
    return {"base_resolution": config.base_resolution, "base_channels": config.base_channels, "z_dim": config.z_dim}


def _draw_seed(rng: torch.Generator) -> int:
    return int(torch.randint(0, SEED_RANGE, (1,), generator=rng).item())


def _shared_weights(config, budget, dataset, rng, reward_fn, gan_step):
    streams = make_streams(_draw_seed(rng))
    supernet = build_supernet(
        config.num_cells, config.base_channels, config.z_dim, streams["init"], config.base_resolution,
        dataset.image_channels,
    )
    disc = build_discriminator(
        config.num_cells, config.base_channels, streams["init"], config.base_resolution, dataset.image_channels
    )
    hparams = adversarial_hparams(config)
    for _ in range(budget):
        genotype = random_genotype(config.num_cells, rng, **_geometry(config))
        real = dataset.sample_batch(config.batch_size, streams["data"], disc.resolution)
        gan_step(supernet, disc, genotype, real, streams["noise"], hparams)

    scored = []
    for _ in range(config.num_candidates):
        genotype = ensure_valid(random_genotype(config.num_cells, rng, **_geometry(config)))
        scored.append((genotype, float(reward_fn(supernet, genotype)), 0))
    return scored, budget


def _early_stop(config, budget, dataset, rng, reward_fn, gan_step):
    count = budget // config.early_stop_steps
    if count < 1:
        raise ConfigError(f"budget {budget} is smaller than one early-stop run ({config.early_stop_steps} steps)")
    scored = []
    for _ in range(count):
        genotype = ensure_valid(random_genotype(config.num_cells, rng, **_geometry(config)))
        child = retrain_from_scratch(genotype, config, dataset, _draw_seed(rng), config.early_stop_steps, gan_step)
        scored.append((genotype, float(reward_fn(child, genotype)), config.early_stop_steps))
    return scored, count * config.early_stop_steps


def random_search_baseline(
    mode: str,
    budget: int,
    dataset,
    rng: torch.Generator,
    config: SearchConfig,
    reward_fn: RewardFn,
    gan_step=gan_train_step,
) -> tuple[Genotype, BaselineReport]:
    """Best genotype (highest score, earliest on ties) and one report row per evaluated candidate."""
    if mode not in BASELINE_MODES:
        raise ConfigError(f"baseline mode must be one of {BASELINE_MODES}, got '{mode}'")
    if budget < 1:
        raise ConfigError(f"baseline budget must be positive, got {budget}")
    runner = _shared_weights if mode == "shared_weights" else _early_stop
    scored, used = runner(config, budget, dataset, rng, reward_fn, gan_step)

    rows = [BaselineRow(i, str(g), score, steps) for i, (g, score, steps) in enumerate(scored)]
    best_index = max(range(len(rows)), key=lambda i: (rows[i].score, -i))
    report = BaselineReport(mode, budget, rows, rows[best_index], used)
    log.info("[RandomSearchAgent] baseline finished", mode=mode, candidates=len(rows),
             best=report.best.genotype, score=report.best.score)
    return scored[best_index][0], report


class RandomSearchAgent:
    """
    Runs a random-search baseline and retrains its winner the same way a
    derived architecture is retrained, so the two are comparable.
    """

    def __init__(
        self,
        config: SearchConfig,
        dataset,
        evaluator: ProxyEvaluator,
        out_dir: str | None = None,
        gan_step=gan_train_step,
    ):
        self.config = config
        self.dataset = dataset
        self.evaluator = evaluator
        self.out_dir = out_dir
        self.gan_step = gan_step

    def run(self, mode: str | None = None, budget: int | None = None, retrain_winner: bool = True):
        mode = mode or self.config.baseline_mode
        budget = budget or self.config.baseline_budget or self.config.search_generator_steps
        rng = torch.Generator().manual_seed(self.config.seed + 3)
        genotype, report = random_search_baseline(
            mode, budget, self.dataset, rng, self.config, self.evaluator, self.gan_step
        )
        if retrain_winner:
            deriver = DerivationAgent(self.config, self.dataset, self.evaluator, self.out_dir, self.gan_step)
            child, evaluation = deriver.retrain(genotype, _draw_seed(rng))
            report.retrained_is = evaluation.is_mean
            deriver.save_child(child, evaluation, f"baseline_{mode}")
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(os.path.join(self.out_dir, f"baseline_{mode}.json"), "w", encoding="utf-8") as f:
                json.dump(report.to_dict(), f, indent=1)
        return genotype, report
