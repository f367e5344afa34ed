"""
Search Agent
------------

Runs the architecture search loop. Every iteration:
1. Shared-GAN phase: each minibatch samples a genotype from the current
   controller and takes one adversarial step on the shared weights. The
   phase stops early when the loss windows flag a collapse.
2. Controller phase: REINFORCE steps with proxy rewards on the frozen
   shared weights.
3. At the end of a stage (every u_stage iterations, not after the last
   stage): sample M candidates, keep the top K as beams, grow G and D by one
   cell/block and start a fresh controller seeded by those beams.
4. If the collapse flag was raised: reinitialize G and D. The controller
   keeps its parameters.
When the loop ends the final stage's top K is saved too.

With an output directory the agent writes the run records and a checkpoint
at every iteration boundary, and `run(resume=True)` continues from it.
"""

import json
import math
import os
import shutil
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import structlog
import torch

from Agents.ControllerAgent import (
    ControllerState,
    SampleTrace,
    new_stage_controller,
    sample_cell,
    seed_from_beam,
)
from Agents.ReinforceAgent import BaselineState, ReinforceAgent
from utils.checkpoint import (
    load_checkpoint,
    restore_generator,
    restore_store,
    save_checkpoint,
    store_tensors,
)
from utils.config import SearchConfig, config_hash, format_config
from utils.errors import (
    ConfigError,
    DegenerateBatchError,
    OptimizerError,
    RewardError,
    TrainingStepError,
)
from utils.genotype import Genotype, decode, format_genotype, genotype_from_tokens
from utils.images import save_sample_grid
from utils.metrics import (
    EvaluationReport,
    GaussianStats,
    RewardMetric,
    SurrogateScorer,
    evaluate_images,
)
from utils.networks import (
    AdversarialHParams,
    ChildModel,
    DiscriminatorNet,
    SupernetWeights,
    build_discriminator,
    build_supernet,
    forward_child,
    gan_train_step,
    grow,
    reinitialize,
)
from utils.run_logging import EVENTS_FILE, RunRecorder
from utils.tensor_core import GAN_BETAS, Tensor, parameter_checksum

log = structlog.get_logger(__name__)

STREAMS = ("init", "noise", "data", "controller")
CHECKPOINT_DIR = "checkpoint"
ABORT_DIR = "abort"
# outputs of an earlier search or derivation in the same run directory
STALE_OUTPUTS = (CHECKPOINT_DIR, ABORT_DIR, "samples", "archive.json", "archive.txt", "derived.txt",
                 "derive_report.json", "proxy_study.json")
SAMPLE_GRID_SIZE = 16
EVAL_CHUNK = 250

GanStep = Callable[..., tuple[float, float]]
RewardFn = Callable[["SupernetWeights | ChildModel", Genotype], float]


def make_streams(seed: int) -> dict[str, torch.Generator]:
    """Independent generator per concern, derived from one run seed."""
    return {name: torch.Generator().manual_seed(seed * len(STREAMS) + k) for k, name in enumerate(STREAMS)}


# ---------------------------------------------------------------------------
# Proxy evaluation
# ---------------------------------------------------------------------------

def generate_images(generator: "SupernetWeights | ChildModel", genotype: Genotype, z: Tensor) -> Tensor:
    chunks = max(1, math.ceil(z.shape[0] / EVAL_CHUNK))
    with torch.no_grad():
        return torch.cat([forward_child(generator, genotype, part, training=True) for part in z.tensor_split(chunks)])


class ProxyEvaluator:
    """
    Scores a genotype on whatever weights it is handed, with a fixed latent
    batch so the same weights always get the same reward.
    """

    def __init__(
        self,
        scorer: SurrogateScorer,
        metric: RewardMetric | str,
        reference_stats: GaussianStats,
        z: Tensor,
        eps_r: float = 1e-3,
        splits: int = 10,
    ):
        """
        :param scorer: frozen surrogate classifier
        :param metric: reward metric, IS or reciprocal FID
        :param reference_stats: feature statistics of held-out real images
        :param z: fixed latent batch; its size is the proxy sample count
        """
        self.scorer = scorer
        self.metric = RewardMetric(metric)
        self.reference_stats = reference_stats
        self.z = z
        self.eps_r = eps_r
        self.splits = splits

    @classmethod
    def build(cls, scorer: SurrogateScorer, eval_set, config: SearchConfig, seed: int) -> "ProxyEvaluator":
        rng = torch.Generator().manual_seed(seed)
        reference = GaussianStats.from_features(scorer.features(eval_set.images))
        z = torch.randn(config.eval_samples, config.z_dim, generator=rng)
        return cls(scorer, config.metric, reference, z, config.recip_fid_eps, config.is_splits)

    def report(self, generator, genotype: Genotype, z: Tensor | None = None) -> EvaluationReport:
        z = self.z if z is None else z
        images = generate_images(generator, genotype, z)
        return evaluate_images(images, self.scorer, self.reference_stats, self.splits, min_samples=z.shape[0])

    def __call__(self, generator, genotype: Genotype) -> float:
        images = generate_images(generator, genotype, self.z)
        stats = self.reference_stats if self.metric == RewardMetric.RECIP_FID else None
        report = evaluate_images(images, self.scorer, stats, self.splits, min_samples=self.z.shape[0])
        reward = report.reward(self.metric, self.eps_r)
        if not math.isfinite(reward):
            raise RewardError(f"non-finite reward for genotype {genotype}")
        return reward


# ---------------------------------------------------------------------------
# Loss windows and the collapse check
# ---------------------------------------------------------------------------

@dataclass
class LossWindow:
    capacity: int
    values: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"window length must be >= 1, got {self.capacity}")
        self.values = deque(self.values, maxlen=self.capacity)

    def push(self, value: float) -> None:
        self.values.append(float(value))

    @property
    def full(self) -> bool:
        return len(self.values) == self.capacity

    def std(self) -> float | None:
        """Population standard deviation; None until the window is full."""
        if not self.full:
            return None
        return float(np.std(np.asarray(self.values, dtype=np.float64)))

    def clear(self) -> None:
        self.values.clear()


def dynamic_reset_check(window_g: LossWindow, window_d: LossWindow, threshold: float) -> bool:
    if not (window_g.full and window_d.full):
        return False
    return window_g.std() < threshold or window_d.std() < threshold


# ---------------------------------------------------------------------------
# Beams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    genotype: Genotype
    trace: SampleTrace
    reward: float
    index: int


def select_top_k(candidates: list[Candidate], k: int) -> list[Candidate]:
    """Descending by reward, ties to the earlier sample."""
    if k < 1 or len(candidates) < k:
        raise ConfigError(f"need at least K = {k} candidates, got {len(candidates)}")
    return sorted(candidates, key=lambda c: (-c.reward, c.index))[:k]


def _tensor_to_list(t: Tensor | None):
    return None if t is None else [float(v) for v in t.tolist()]


def _list_to_tensor(values) -> Tensor | None:
    return None if values is None else torch.tensor(values, dtype=torch.float32)


def trace_to_dict(trace: SampleTrace) -> dict:
    return {
        "tokens": list(trace.tokens),
        "log_probs": list(trace.log_probs),
        "entropies": list(trace.entropies),
        "final_hidden": _tensor_to_list(trace.final_hidden),
        "seed_hidden": _tensor_to_list(trace.seed_hidden),
        "stage": trace.stage,
        "beam_index": trace.beam_index,
    }


def trace_from_dict(row: dict) -> SampleTrace:
    return SampleTrace(
        tokens=tuple(row["tokens"]),
        log_probs=tuple(row["log_probs"]),
        entropies=tuple(row["entropies"]),
        final_hidden=_list_to_tensor(row["final_hidden"]),
        stage=row["stage"],
        seed_hidden=_list_to_tensor(row["seed_hidden"]),
        beam_index=row["beam_index"],
    )


@dataclass
class BeamArchive:
    stages: dict[int, list[Candidate]] = field(default_factory=dict)

    def save(self, stage: int, entries: list[Candidate]) -> None:
        self.stages[stage] = list(entries)

    def beams(self, stage: int) -> list[Candidate]:
        if stage not in self.stages:
            raise ConfigError(f"no beams saved for stage {stage}")
        return self.stages[stage]

    def best(self, stage: int | None = None) -> Candidate:
        stage = max(self.stages) if stage is None else stage
        return self.beams(stage)[0]

    def to_dict(self) -> dict:
        return {
            str(stage): [
                {
                    "tokens": entry.genotype.tokens(),
                    "trace": trace_to_dict(entry.trace),
                    "reward": entry.reward,
                    "index": entry.index,
                    "genotype": str(entry.genotype),
                }
                for entry in entries
            ]
            for stage, entries in sorted(self.stages.items())
        }

    @classmethod
    def from_dict(cls, data: dict, geometry: dict) -> "BeamArchive":
        archive = cls()
        for stage, rows in data.items():
            archive.stages[int(stage)] = [
                Candidate(
                    genotype_from_tokens(row["tokens"], **geometry),
                    trace_from_dict(row["trace"]),
                    float(row["reward"]),
                    int(row["index"]),
                )
                for row in rows
            ]
        return archive

    def to_text(self) -> str:
        blocks = []
        for stage, entries in sorted(self.stages.items()):
            for rank, entry in enumerate(entries):
                blocks.append(f"# stage={stage} rank={rank} reward={entry.reward:.6f} sample={entry.index}\n"
                              + format_genotype(entry.genotype))
        return "\n".join(blocks)


def sample_genotype(
    ctrl: ControllerState,
    archive: BeamArchive,
    geometry: dict,
    rng: torch.Generator,
    beam_index: int | None = None,
) -> tuple[Genotype, SampleTrace]:
    """
    One candidate from a controller. Past stage 0 the candidate extends a beam
    of the previous stage (picked uniformly unless `beam_index` is given) and
    the controller starts from that beam's final hidden vector.
    """
    prefix, seed, picked = (), None, None
    if ctrl.stage > 0:
        beams = archive.beams(ctrl.stage - 1)
        picked = int(torch.randint(0, len(beams), (1,), generator=rng).item()) if beam_index is None else beam_index
        prefix = beams[picked].genotype.cells
        seed = seed_from_beam(beams[picked].trace)
    trace = sample_cell(ctrl, seed, rng)
    trace.beam_index = picked
    cells = prefix + tuple(decode(group, cell) for cell, group in zip(ctrl.cell_indices, ctrl.split_tokens(trace.tokens)))
    return Genotype(cells, **geometry), trace


# ---------------------------------------------------------------------------
# Search state and phases
# ---------------------------------------------------------------------------

@dataclass
class SearchState:
    config: SearchConfig
    supernet: SupernetWeights
    disc: DiscriminatorNet
    controllers: list[ControllerState]
    agent: ReinforceAgent
    streams: dict[str, torch.Generator]
    window_g: LossWindow
    window_d: LossWindow
    archive: BeamArchive = field(default_factory=BeamArchive)
    iteration: int = 0
    gan_steps: int = 0
    finished: bool = False

    @property
    def stage(self) -> int:
        return self.supernet.num_cells - 1

    @property
    def controller(self) -> ControllerState:
        return self.agent.controller

    @property
    def geometry(self) -> dict:
        return self.supernet.geometry()

    def clear_windows(self) -> None:
        self.window_g.clear()
        self.window_d.clear()


def new_controller(config: SearchConfig, stage: int, rng: torch.Generator) -> ControllerState:
    if config.search_mode == "slas":
        return new_stage_controller(0, config.hidden_size, rng, cell_indices=tuple(range(config.num_cells)))
    return new_stage_controller(stage, config.hidden_size, rng)


def initial_state(config: SearchConfig, image_channels: int, seed: int) -> SearchState:
    streams = make_streams(seed)
    cells = config.num_cells if config.search_mode == "slas" else 1
    supernet = build_supernet(
        cells, config.base_channels, config.z_dim, streams["init"], config.base_resolution, image_channels,
        max_cells=config.num_cells,
    )
    disc = build_discriminator(
        cells, config.base_channels, streams["init"], config.base_resolution, image_channels,
        max_stages=config.num_cells,
    )
    ctrl = new_controller(config, supernet.num_cells - 1, streams["controller"])
    agent = ReinforceAgent(ctrl, config.entropy_weight, config.lr_ctrl, config.baseline_decay)
    return SearchState(
        config, supernet, disc, [ctrl], agent, streams, LossWindow(config.window_len), LossWindow(config.window_len)
    )


def adversarial_hparams(config: SearchConfig) -> AdversarialHParams:
    return AdversarialHParams(config.lr_g, config.lr_d, GAN_BETAS, config.g_batch_size)


def shared_gan_phase(state: SearchState, dataset, gan_step: GanStep = gan_train_step) -> tuple[bool, int]:
    """Returns (collapse flag, minibatch steps taken). Reinitialization is left to the caller."""
    config = state.config
    hparams = adversarial_hparams(config)
    steps = 0
    for _ in range(config.shared_epochs_per_iter):
        for _ in range(config.shared_steps_per_epoch):
            genotype, _ = sample_genotype(state.controller, state.archive, state.geometry, state.streams["controller"])
            real = dataset.sample_batch(config.batch_size, state.streams["data"], state.disc.resolution)
            d_loss, g_loss = gan_step(state.supernet, state.disc, genotype, real, state.streams["noise"], hparams)
            if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
                raise TrainingStepError(f"non-finite adversarial loss (d={d_loss}, g={g_loss}) for {genotype}")
            steps += 1
            state.gan_steps += 1
            state.window_g.push(g_loss)
            state.window_d.push(d_loss)
            if config.dynamic_reset and dynamic_reset_check(state.window_g, state.window_d, config.reset_threshold):
                log.info("[SearchAgent] loss windows flat, shared training stopped", steps=steps,
                         std_g=state.window_g.std(), std_d=state.window_d.std())
                return True, steps
    return False, steps


def controller_phase(
    state: SearchState, reward_fn: RewardFn, recorder: RunRecorder, iteration: int
) -> list[dict]:
    """REINFORCE steps on the frozen shared weights; one log row per step."""
    rows = []
    ctrl = state.controller
    for step in range(state.config.ctrl_steps_per_iter):
        genotype, trace = sample_genotype(ctrl, state.archive, state.geometry, state.streams["controller"])
        reward = float(reward_fn(state.supernet, genotype))
        outcome = state.agent.record(trace, reward)
        rows.append(
            recorder.controller_step(
                iteration=iteration,
                stage=state.stage,
                step=step,
                genotype=str(genotype),
                tokens=genotype.tokens(),
                beam_index=trace.beam_index,
                reward=reward,
                baseline=outcome.baseline.value,
                advantage=outcome.advantage,
                log_prob=outcome.total_log_prob,
                entropy=outcome.total_entropy,
                surrogate_loss=outcome.surrogate_loss,
                entropy_weight=state.agent.entropy_weight,
            )
        )
    return rows


def save_stage(state: SearchState, reward_fn: RewardFn) -> list[Candidate]:
    """Sample M candidates from the current controller, keep the top K as this stage's beams."""
    config = state.config
    candidates = []
    for index in range(config.num_candidates):
        genotype, trace = sample_genotype(state.controller, state.archive, state.geometry, state.streams["controller"])
        candidates.append(Candidate(genotype, trace, float(reward_fn(state.supernet, genotype)), index))
    entries = select_top_k(candidates, config.top_k)
    state.archive.save(state.stage, entries)
    return entries


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _baseline_to_dict(baseline: BaselineState) -> dict:
    return asdict(baseline)


def save_search_state(state: SearchState, directory: str, recorder: RunRecorder) -> None:
    tensors, steps = store_tensors(state.supernet.params, "g/")
    d_tensors, d_steps = store_tensors(state.disc.params, "d/")
    tensors.update(d_tensors)
    steps.update(d_steps)
    for name, u in state.disc.u_vectors.items():
        tensors[f"u/{name}"] = u
    controllers = []
    for k, ctrl in enumerate(state.controllers):
        c_tensors, c_steps = store_tensors(ctrl.params, f"c{k}/")
        tensors.update(c_tensors)
        steps.update(c_steps)
        controllers.append({"stage": ctrl.stage, "cell_indices": list(ctrl.cell_indices), "hidden_size": ctrl.hidden_size})

    meta = {
        "iteration": state.iteration,
        "finished": state.finished,
        "gan_steps": state.gan_steps,
        "num_cells": state.supernet.num_cells,
        "image_channels": state.supernet.image_channels,
        "controllers": controllers,
        "baseline": _baseline_to_dict(state.agent.baseline),
        "window_g": list(state.window_g.values),
        "window_d": list(state.window_d.values),
        "record_counts": recorder.counts(),
        "steps": steps,
        "archive": state.archive.to_dict(),
        "geometry": state.geometry,
    }
    save_checkpoint(tensors, meta, directory, state.streams, config_hash(state.config))


def load_search_state(config: SearchConfig, directory: str) -> tuple[SearchState, dict]:
    tensors, manifest = load_checkpoint(directory)
    if manifest.config_hash != config_hash(config):
        raise ConfigError(f"checkpoint in {directory} was written with a different configuration")
    meta = manifest.meta
    steps = meta["steps"]

    g_params = restore_store(tensors, steps, "g/")
    d_params = restore_store(tensors, steps, "d/")
    u_vectors = {key[2:]: value.clone() for key, value in tensors.items() if key.startswith("u/")}
    cells = meta["num_cells"]
    supernet = SupernetWeights(
        g_params, cells, config.num_cells, config.base_channels, config.z_dim, config.base_resolution,
        meta["image_channels"],
    )
    disc = DiscriminatorNet(
        d_params, u_vectors, cells, config.num_cells, config.base_channels, config.base_resolution,
        meta["image_channels"],
    )
    controllers = [
        ControllerState(restore_store(tensors, steps, f"c{k}/"), c["hidden_size"], c["stage"], tuple(c["cell_indices"]))
        for k, c in enumerate(meta["controllers"])
    ]
    agent = ReinforceAgent(controllers[-1], config.entropy_weight, config.lr_ctrl, config.baseline_decay)
    agent.baseline = BaselineState(**meta["baseline"])

    streams = make_streams(config.seed)
    for name, state_hex in manifest.rng_states.items():
        restore_generator(streams[name], state_hex)

    state = SearchState(
        config=config,
        supernet=supernet,
        disc=disc,
        controllers=controllers,
        agent=agent,
        streams=streams,
        window_g=LossWindow(config.window_len, deque(meta["window_g"])),
        window_d=LossWindow(config.window_len, deque(meta["window_d"])),
        archive=BeamArchive.from_dict(meta["archive"], meta["geometry"]),
        iteration=meta["iteration"],
        gan_steps=meta["gan_steps"],
        finished=meta["finished"],
    )
    return state, meta["record_counts"]


# ---------------------------------------------------------------------------
# The agent
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    archive: BeamArchive
    recorder: RunRecorder
    state: SearchState

    @property
    def controllers(self) -> list[ControllerState]:
        return self.state.controllers

    @property
    def supernet(self) -> SupernetWeights:
        return self.state.supernet

    @property
    def gan_steps(self) -> int:
        return self.state.gan_steps


class SearchAgent:
    """
    Owns one search run.
      - `run()` executes the loop and returns the archive, the records and the final state.
      - `gan_step` and `reward_fn` can be swapped for stubs; by default the
        adversarial step is `gan_train_step` and the reward is the evaluator's.
    """

    def __init__(
        self,
        config: SearchConfig,
        dataset,
        evaluator: ProxyEvaluator | None = None,
        out_dir: str | None = None,
        gan_step: GanStep = gan_train_step,
        reward_fn: RewardFn | None = None,
    ):
        """
        :param config: validated search configuration
        :param dataset: LabeledImageSet of real images at resolution >= the output resolution
        :param evaluator: proxy evaluator (rewards, periodic IS/FID rows)
        :param out_dir: run directory for records and checkpoints; None runs in memory
        :param gan_step: adversarial step (generator, disc, genotype, real, rng, hparams) -> (d_loss, g_loss)
        :param reward_fn: (generator, genotype) -> reward; defaults to the evaluator
        """
        config.validate()
        if dataset.resolution < config.output_resolution:
            raise ConfigError(f"dataset resolution {dataset.resolution} < output resolution {config.output_resolution}")
        if reward_fn is None and evaluator is None:
            raise ConfigError("a search needs either an evaluator or a reward function")
        self.config = config
        self.dataset = dataset
        self.evaluator = evaluator
        self.out_dir = out_dir
        self.gan_step = gan_step
        self.reward_fn = reward_fn or evaluator
        self.recorder = RunRecorder(out_dir)
        self._sample_z = torch.randn(SAMPLE_GRID_SIZE, config.z_dim, generator=torch.Generator().manual_seed(config.seed))

    # -- persistence --------------------------------------------------------

    def _checkpoint(self, state: SearchState, subdir: str = CHECKPOINT_DIR) -> None:
        if self.out_dir:
            save_search_state(state, os.path.join(self.out_dir, subdir), self.recorder)

    def _write_archive(self, state: SearchState) -> None:
        if not self.out_dir:
            return
        with open(os.path.join(self.out_dir, "archive.json"), "w", encoding="utf-8") as f:
            json.dump(state.archive.to_dict(), f, indent=1)
        with open(os.path.join(self.out_dir, "archive.txt"), "w", encoding="utf-8") as f:
            f.write(state.archive.to_text())

    def _dump_samples(self, state: SearchState, genotype: Genotype, name: str) -> None:
        if self.out_dir:
            images = generate_images(state.supernet, genotype, self._sample_z)
            save_sample_grid(images, os.path.join(self.out_dir, "samples", f"{name}.ppm"), columns=4)

    def _clear_previous_run(self) -> None:
        removed = []
        for name in STALE_OUTPUTS:
            path = os.path.join(self.out_dir, name)
            if os.path.isdir(path):
                shutil.rmtree(path)
            elif os.path.exists(path):
                os.remove(path)
            else:
                continue
            removed.append(name)
        had_records = os.path.exists(os.path.join(self.out_dir, EVENTS_FILE))
        self.recorder.clear()
        if removed or had_records:
            log.warning("[SearchAgent] fresh run in a used directory, previous outputs removed",
                        out_dir=self.out_dir, removed=removed)

    def _start(self, resume: bool) -> SearchState:
        checkpoint = os.path.join(self.out_dir, CHECKPOINT_DIR) if self.out_dir else None
        if resume:
            if not checkpoint or not os.path.exists(os.path.join(checkpoint, "manifest.txt")):
                raise ConfigError(f"nothing to resume in {self.out_dir}")
            state, counts = load_search_state(self.config, checkpoint)
            self.recorder.restore(counts)
            log.info("[SearchAgent] resumed", iteration=state.iteration, stage=state.stage)
            return state
        if self.out_dir:
            self._clear_previous_run()
            with open(os.path.join(self.out_dir, "config.txt"), "w", encoding="utf-8") as f:
                f.write(format_config(self.config))
        return initial_state(self.config, self.dataset.image_channels, self.config.seed)

    # -- loop ---------------------------------------------------------------

    def _periodic_eval(self, state: SearchState, iteration: int, genotype: Genotype) -> None:
        every = self.config.eval_every
        if self.evaluator is None or not every or (iteration + 1) % every:
            return
        report = self.evaluator.report(state.supernet, genotype)
        self.recorder.metrics(
            "search", iteration, str(genotype), report.is_mean, report.is_std, report.fid,
            report.reward(self.evaluator.metric, self.evaluator.eps_r), report.n_samples,
        )

    def _grow(self, state: SearchState, iteration: int) -> None:
        entries = save_stage(state, self.reward_fn)
        self.recorder.event("save", iteration, stage=state.stage, rewards=[e.reward for e in entries])
        self._dump_samples(state, entries[0].genotype, f"stage{state.stage}")
        state.supernet, state.disc = grow(state.supernet, state.disc, state.streams["init"])
        self.recorder.event("grow", iteration, stage=state.stage, resolution=state.disc.resolution)
        ctrl = new_controller(self.config, state.stage, state.streams["controller"])
        state.controllers.append(ctrl)
        state.agent = ReinforceAgent(ctrl, self.config.entropy_weight, self.config.lr_ctrl, self.config.baseline_decay)
        self.recorder.event("new_controller", iteration, stage=state.stage)
        state.clear_windows()

    def _reset(self, state: SearchState, iteration: int) -> None:
        controller_before = parameter_checksum(state.controller.params)
        omega_before = parameter_checksum(state.supernet.params)
        state.supernet, state.disc = reinitialize(state.supernet, state.disc, state.streams["init"])
        state.clear_windows()
        self.recorder.event(
            "reset",
            iteration,
            stage=state.stage,
            controller_checksum_before=controller_before,
            controller_checksum_after=parameter_checksum(state.controller.params),
            omega_checksum_before=omega_before,
            omega_checksum_after=parameter_checksum(state.supernet.params),
        )

    def _iterate(self, state: SearchState, iteration: int) -> None:
        config = self.config
        flag, steps = shared_gan_phase(state, self.dataset, self.gan_step)
        self.recorder.event("train_shared", iteration, stage=state.stage, steps=steps, collapse=flag)

        rows = controller_phase(state, self.reward_fn, self.recorder, iteration)
        self.recorder.event("train_controller", iteration, stage=state.stage, steps=len(rows))
        if rows:
            best_row = max(rows, key=lambda r: (r["reward"], -r["step"]))
            self._periodic_eval(state, iteration, genotype_from_tokens(best_row["tokens"], **state.geometry))

        if (
            config.search_mode == "mlas"
            and (iteration + 1) % config.stage_length == 0
            and state.stage < config.num_cells - 1
        ):
            self._grow(state, iteration)
        if flag:
            self._reset(state, iteration)
        state.iteration = iteration + 1

    def run(self, resume: bool = False) -> SearchResult:
        state = self._start(resume)
        config = self.config
        log.info("[SearchAgent] search started", mode=config.search_mode, total_iters=config.total_iters,
                 u_stage=config.stage_length, num_cells=config.num_cells, metric=config.metric)
        try:
            while state.iteration < config.total_iters:
                self._iterate(state, state.iteration)
                self._checkpoint(state)
            if not state.finished:
                last = config.total_iters - 1
                entries = save_stage(state, self.reward_fn)
                self.recorder.event("save", last, stage=state.stage, rewards=[e.reward for e in entries])
                self._dump_samples(state, entries[0].genotype, f"stage{state.stage}")
                state.finished = True
                self._checkpoint(state)
        except (TrainingStepError, OptimizerError, RewardError, DegenerateBatchError) as e:
            log.error("[SearchAgent] numerical abort", iteration=state.iteration, error=str(e))
            self._checkpoint(state, ABORT_DIR)
            raise
        self._write_archive(state)
        log.info("[SearchAgent] search finished", gan_steps=state.gan_steps,
                 best_reward=state.archive.best().reward, best=str(state.archive.best().genotype))
        return SearchResult(state.archive, self.recorder, state)


def run_search(
    config: SearchConfig,
    dataset,
    evaluator: ProxyEvaluator | None = None,
    out_dir: str | None = None,
    resume: bool = False,
    **hooks,
) -> SearchResult:
    return SearchAgent(config, dataset, evaluator, out_dir, **hooks).run(resume)
