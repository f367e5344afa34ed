"""
Derivation Agent
----------------

Turns a finished search into one architecture:
1. Sample M full genotypes from the learned policy (past stage 0 each sample
   is seeded by a beam of the previous stage, round-robin over the beams).
2. Rank them by proxy reward on the shared weights; keep the top K.
3. Retrain each of the K from scratch as a standalone child model, in
   parallel, and evaluate it on a larger sample.
4. Return the genotype with the highest Inception score.

Also hosts the proxy-vs-real study: proxy rewards on shared weights against
from-scratch scores, summarized by Spearman's rank correlation.
"""

import json
import os
from dataclasses import asdict, dataclass
from typing import Callable

import structlog
import torch

from Agents.ControllerAgent import ControllerState
from Agents.SearchAgent import (
    BeamArchive,
    Candidate,
    ProxyEvaluator,
    SearchResult,
    adversarial_hparams,
    make_streams,
    sample_genotype,
    select_top_k,
)
from asyncutils.async_retrain import run_jobs
from utils.checkpoint import load_parameters, save_parameters
from utils.config import SearchConfig
from utils.errors import ConfigError
from utils.genotype import Genotype, format_genotype, parse_genotype
from utils.images import save_sample_grid
from utils.metrics import EvaluationReport, spearman_rank_correlation
from utils.networks import (
    ChildModel,
    build_discriminator,
    build_supernet,
    extract_child,
    gan_train_step,
)
from utils.run_logging import RunRecorder

log = structlog.get_logger(__name__)

MIN_STUDY_GENOTYPES = 5
SEED_RANGE = 2 ** 31 - 1

RetrainFn = Callable[[Genotype, int], EvaluationReport]


@dataclass(frozen=True)
class RetrainResult:
    index: int
    genotype: str
    proxy_reward: float
    is_mean: float
    is_std: float
    fid: float | None
    n_samples: int
    seed: int


@dataclass
class DerivationReport:
    candidates: list[dict]
    retrained: list[RetrainResult]
    best: RetrainResult

    def to_dict(self) -> dict:
        return {
            "candidates": self.candidates,
            "retrained": [asdict(r) for r in self.retrained],
            "best": asdict(self.best),
        }


@dataclass
class StudyResult:
    coefficient: float
    table: list[dict]


def retrain_from_scratch(
    genotype: Genotype,
    config: SearchConfig,
    dataset,
    seed: int,
    steps: int | None = None,
    gan_step=gan_train_step,
) -> ChildModel:
    """Fresh weights for the genotype, then `steps` adversarial steps on it alone."""
    streams = make_streams(seed)
    image_channels = dataset.image_channels
    supernet = build_supernet(
        genotype.num_cells, genotype.base_channels, genotype.z_dim, streams["init"], genotype.base_resolution,
        image_channels,
    )
    child = extract_child(supernet, genotype)
    disc = build_discriminator(
        genotype.num_cells, genotype.base_channels, streams["init"], genotype.base_resolution, image_channels
    )
    hparams = adversarial_hparams(config)
    steps = config.retrain_generator_steps if steps is None else steps
    for step in range(steps):
        real = dataset.sample_batch(config.batch_size, streams["data"], disc.resolution)
        d_loss, g_loss = gan_step(child, disc, genotype, real, streams["noise"], hparams)
        if (step + 1) % 100 == 0:
            log.debug("[DerivationAgent] retrain step", genotype=str(genotype), step=step + 1, d_loss=d_loss, g_loss=g_loss)
    return child


def final_latents(config: SearchConfig, seed: int, samples: int | None = None) -> torch.Tensor:
    rng = torch.Generator().manual_seed(seed)
    return torch.randn(samples or config.final_eval_samples, config.z_dim, generator=rng)


def sample_final_candidates(
    controllers: list[ControllerState],
    archive: BeamArchive,
    geometry: dict,
    count: int,
    rng: torch.Generator,
) -> list[tuple[Genotype, object]]:
    ctrl = controllers[-1]
    samples = []
    for index in range(count):
        beam_index = None
        if ctrl.stage > 0:
            beam_index = index % len(archive.beams(ctrl.stage - 1))
        samples.append(sample_genotype(ctrl, archive, geometry, rng, beam_index))
    return samples


def derive_final(
    controllers: list[ControllerState],
    archive: BeamArchive,
    supernet,
    config: SearchConfig,
    rng: torch.Generator,
    reward_fn: Callable,
    retrain_fn: RetrainFn,
    workers: int = 1,
) -> tuple[Genotype, DerivationReport]:
    samples = sample_final_candidates(controllers, archive, supernet.geometry(), config.num_candidates, rng)
    candidates = [
        Candidate(genotype, trace, float(reward_fn(supernet, genotype)), index)
        for index, (genotype, trace) in enumerate(samples)
    ]
    top = select_top_k(candidates, config.top_k)
    seeds = [int(torch.randint(0, SEED_RANGE, (1,), generator=rng).item()) for _ in top]
    log.info("[DerivationAgent] retraining top candidates", k=len(top), workers=workers,
             proxy_rewards=[c.reward for c in top])

    jobs = [lambda c=c, s=s: retrain_fn(c.genotype, s) for c, s in zip(top, seeds)]
    reports = run_jobs(jobs, workers)

    retrained = [
        RetrainResult(c.index, str(c.genotype), c.reward, r.is_mean, r.is_std, r.fid, r.n_samples, s)
        for c, r, s in zip(top, reports, seeds)
    ]
    best_position = max(range(len(retrained)), key=lambda i: (retrained[i].is_mean, -i))
    report = DerivationReport(
        candidates=[{"index": c.index, "genotype": str(c.genotype), "proxy_reward": c.reward} for c in candidates],
        retrained=retrained,
        best=retrained[best_position],
    )
    return top[best_position].genotype, report


def proxy_vs_real_study(
    genotypes: list[Genotype],
    supernet,
    reward_fn: Callable,
    real_fn: Callable[[Genotype, int], float],
    seeds: list[int],
    workers: int = 1,
) -> StudyResult:
    if len(genotypes) < MIN_STUDY_GENOTYPES:
        raise ConfigError(f"the proxy study needs at least {MIN_STUDY_GENOTYPES} genotypes, got {len(genotypes)}")
    proxy = [float(reward_fn(supernet, g)) for g in genotypes]
    real = run_jobs([lambda g=g, s=s: float(real_fn(g, s)) for g, s in zip(genotypes, seeds)], workers)
    coefficient = spearman_rank_correlation(proxy, real)
    table = [{"genotype": str(g), "proxy": p, "real": r} for g, p, r in zip(genotypes, proxy, real)]
    log.info("[DerivationAgent] proxy study", n=len(genotypes), spearman=coefficient)
    return StudyResult(coefficient, table)


class DerivationAgent:
    """
    Retraining and derivation on top of a search run.
      - `derive(result)` picks the final architecture
      - `retrain(genotype, seed)` trains one genotype from scratch and scores it
      - `study(genotypes, supernet)` runs the proxy-vs-real comparison
    """

    def __init__(
        self,
        config: SearchConfig,
        dataset,
        evaluator: ProxyEvaluator,
        out_dir: str | None = None,
        gan_step=gan_train_step,
        workers: int | None = None,
    ):
        """
        :param config: the search configuration (retraining steps, K, M, sample counts)
        :param dataset: real images used for retraining
        :param evaluator: proxy evaluator with the frozen scorer and reference statistics
        :param out_dir: where reports, child checkpoints and samples are written
        :param workers: parallel retrainings; defaults to config.retrain_workers
        """
        self.config = config
        self.dataset = dataset
        self.evaluator = evaluator
        self.out_dir = out_dir
        self.gan_step = gan_step
        self.workers = workers or config.retrain_workers
        self.recorder = RunRecorder(out_dir)

    def retrain(self, genotype: Genotype, seed: int, steps: int | None = None) -> tuple[ChildModel, EvaluationReport]:
        child = retrain_from_scratch(genotype, self.config, self.dataset, seed, steps, self.gan_step)
        report = self.evaluator.report(child, genotype, final_latents(self.config, seed))
        log.info("[DerivationAgent] retrained", genotype=str(genotype), is_mean=report.is_mean, fid=report.fid)
        return child, report

    def _retrain_report(self, genotype: Genotype, seed: int) -> EvaluationReport:
        return self.retrain(genotype, seed)[1]

    def save_child(self, child: ChildModel, report: EvaluationReport, name: str) -> str | None:
        if not self.out_dir:
            return None
        directory = os.path.join(self.out_dir, name)
        save_parameters(
            child.params,
            directory,
            meta={"genotype": format_genotype(child.genotype), "image_channels": child.image_channels,
                  "is_mean": report.is_mean, "fid": report.fid},
        )
        z = final_latents(self.config, self.config.seed, 16)
        save_sample_grid(child.forward(z), os.path.join(self.out_dir, "samples", f"{name}.ppm"), columns=4)
        return directory

    def derive(self, result: SearchResult) -> tuple[Genotype, DerivationReport]:
        rng = torch.Generator().manual_seed(self.config.seed + 1)
        genotype, report = derive_final(
            result.controllers, result.archive, result.supernet, self.config, rng, self.evaluator,
            self._retrain_report, self.workers,
        )
        for row in report.retrained:
            self.recorder.metrics("derive", row.index, row.genotype, row.is_mean, row.is_std, row.fid,
                                  row.proxy_reward, row.n_samples)
        if self.out_dir:
            with open(os.path.join(self.out_dir, "derived.txt"), "w", encoding="utf-8") as f:
                f.write(format_genotype(genotype))
            with open(os.path.join(self.out_dir, "derive_report.json"), "w", encoding="utf-8") as f:
                json.dump(report.to_dict(), f, indent=1)
        log.info("[DerivationAgent] derived", genotype=str(genotype), is_mean=report.best.is_mean)
        return genotype, report

    def study(self, genotypes: list[Genotype], supernet, seed: int | None = None) -> StudyResult:
        rng = torch.Generator().manual_seed(self.config.seed + 2 if seed is None else seed)
        seeds = [int(torch.randint(0, SEED_RANGE, (1,), generator=rng).item()) for _ in genotypes]
        result = proxy_vs_real_study(
            genotypes, supernet, self.evaluator, lambda g, s: self._retrain_report(g, s).is_mean, seeds, self.workers
        )
        if self.out_dir:
            with open(os.path.join(self.out_dir, "proxy_study.json"), "w", encoding="utf-8") as f:
                json.dump({"spearman": result.coefficient, "table": result.table}, f, indent=1)
        return result


def load_child(directory: str) -> ChildModel:
    params, manifest = load_parameters(directory)
    genotype = parse_genotype(manifest.meta["genotype"])
    return ChildModel(genotype, params, manifest.meta.get("image_channels", 3))
