"""
Command-line shell.

  search       run the architecture search            search --config cfg.txt --seed 0 --out runs/a
  derive       pick the final architecture of a run   derive --run runs/a
  retrain      train one genotype from scratch        retrain --genotype g.txt --out runs/g
  eval         score a retrained child checkpoint     eval --checkpoint runs/g/child --metric is
  baseline     random-search baseline                 baseline --mode shared|earlystop --out runs/b
  proxy-study  proxy reward vs from-scratch score     proxy-study --run runs/a
  serve        browse run directories over HTTP       serve --port 8080

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical abort.
"""

import argparse
import json
import os
import sys

import structlog
import torch

from Agents.DerivationAgent import DerivationAgent, final_latents, load_child
from Agents.RandomSearchAgent import RandomSearchAgent
from Agents.SearchAgent import CHECKPOINT_DIR, ProxyEvaluator, SearchAgent, SearchResult, load_search_state
from utils.checkpoint import load_parameters, save_parameters
from utils.config import SearchConfig, load_environment, parse_config
from utils.datasets import gen_synthetic_dataset, load_cifar10_bin
from utils.errors import AutoGanError, ConfigError
from utils.genotype import parse_genotype, random_genotype
from utils.metrics import SurrogateScorer, train_surrogate
from utils.run_logging import RunRecorder, configure_logging

log = structlog.get_logger(__name__)

BASELINE_MODE_ALIASES = {"shared": "shared_weights", "earlystop": "early_stop",
                         "shared_weights": "shared_weights", "early_stop": "early_stop"}
SCORER_DIR = "scorer"


# ---------------------------------------------------------------------------
# Shared setup
# ---------------------------------------------------------------------------

def load_datasets(config: SearchConfig):
    if config.dataset == "cifar10":
        if not config.data_dir:
            raise ConfigError("dataset=cifar10 needs data_dir")
        return load_cifar10_bin(config.data_dir, "train"), load_cifar10_bin(config.data_dir, "test")
    train = gen_synthetic_dataset(config.synthetic_train, config.resolution, config.num_classes, config.seed)
    held_out = gen_synthetic_dataset(config.synthetic_eval, config.resolution, config.num_classes, config.seed + 7919)
    return train, held_out


def scorer_provenance(config: SearchConfig, train) -> dict:
    """What a saved scorer must have been trained on to be reused."""
    return {"num_classes": train.num_classes, "resolution": train.resolution, "dataset": config.dataset,
            "seed": config.seed, "surrogate_epochs": config.surrogate_epochs}


def save_scorer(scorer, directory: str, provenance: dict | None = None) -> None:
    save_parameters(scorer.params, directory, meta={
        **(provenance or {}),
        "num_classes": scorer.num_classes, "feature_dim": scorer.feature_dim,
        "resolution": scorer.resolution, "held_out_accuracy": scorer.held_out_accuracy,
    })


def load_scorer(directory: str, expected: dict | None = None):
    """The saved scorer, or None when its meta disagrees with `expected`."""
    params, manifest = load_parameters(directory)
    meta = manifest.meta
    mismatched = {k: (meta.get(k), v) for k, v in (expected or {}).items() if meta.get(k) != v}
    if mismatched:
        log.warning("[cli] saved scorer does not match the configuration", directory=directory, mismatched=mismatched)
        return None
    for param in params.values():
        param.value.requires_grad_(False)
    return SurrogateScorer(params, meta["num_classes"], meta["feature_dim"], meta["resolution"],
                           meta["held_out_accuracy"])


def prepare_evaluator(config: SearchConfig, out_dir: str | None, scorer_dir: str | None = None):
    """Datasets, the frozen surrogate (trained once, then reused from disk) and the proxy evaluator."""
    train, held_out = load_datasets(config)
    provenance = scorer_provenance(config, train)
    scorer = None
    if scorer_dir:
        # an explicitly named scorer only has to fit the images
        scorer = load_scorer(scorer_dir, {k: provenance[k] for k in ("num_classes", "resolution")})
        if scorer is None:
            raise ConfigError(f"scorer in {scorer_dir} does not fit {config.dataset} images at {train.resolution}px")
    elif out_dir and os.path.exists(os.path.join(out_dir, SCORER_DIR, "manifest.txt")):
        scorer = load_scorer(os.path.join(out_dir, SCORER_DIR), provenance)
    if scorer is None:
        rng = torch.Generator().manual_seed(config.seed + 11)
        scorer = train_surrogate(train, config.surrogate_epochs, rng, eval_set=held_out)
        if out_dir:
            save_scorer(scorer, os.path.join(out_dir, SCORER_DIR), provenance)
    evaluator = ProxyEvaluator.build(scorer, held_out, config, config.seed + 13)
    return train, evaluator


def _config(args) -> SearchConfig:
    config = parse_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        config = config.with_overrides(seed=args.seed)
    return config


def _run_config(run_dir: str) -> SearchConfig:
    return parse_config(os.path.join(run_dir, "config.txt"))


def _print(payload: dict) -> None:
    print(json.dumps(payload, indent=1, default=str))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_search(args) -> int:
    config = _run_config(args.out) if args.resume else _config(args)
    os.makedirs(args.out, exist_ok=True)
    dataset, evaluator = prepare_evaluator(config, args.out)
    result = SearchAgent(config, dataset, evaluator, out_dir=args.out).run(resume=args.resume)
    best = result.archive.best()
    payload = {"best_genotype": str(best.genotype), "best_reward": best.reward, "gan_steps": result.gan_steps}
    if args.derive:
        genotype, report = DerivationAgent(config, dataset, evaluator, args.out).derive(result)
        payload.update(derived=str(genotype), derived_is=report.best.is_mean)
    _print(payload)
    return 0


def _load_result(run_dir: str, config: SearchConfig):
    state, _ = load_search_state(config, os.path.join(run_dir, CHECKPOINT_DIR))
    if not state.finished:
        raise ConfigError(f"search in {run_dir} has not finished; resume it first")
    return SearchResult(state.archive, RunRecorder(None), state)


def cmd_derive(args) -> int:
    config = _run_config(args.run)
    dataset, evaluator = prepare_evaluator(config, args.run)
    result = _load_result(args.run, config)
    genotype, report = DerivationAgent(config, dataset, evaluator, args.run, workers=args.workers).derive(result)
    _print({"derived": str(genotype), **report.to_dict()["best"]})
    return 0


def cmd_retrain(args) -> int:
    config = _config(args)
    with open(args.genotype, "r", encoding="utf-8") as f:
        text = f.read()
    genotype = parse_genotype(text, base_resolution=config.base_resolution, base_channels=config.base_channels,
                              z_dim=config.z_dim)
    dataset, evaluator = prepare_evaluator(config, args.out)
    agent = DerivationAgent(config, dataset, evaluator, args.out)
    child, report = agent.retrain(genotype, config.seed, args.steps)
    agent.save_child(child, report, "child")
    agent.recorder.metrics("retrain", 0, str(genotype), report.is_mean, report.is_std, report.fid,
                           report.is_mean, report.n_samples)
    _print({"genotype": str(genotype), "is_mean": report.is_mean, "is_std": report.is_std, "fid": report.fid})
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    child = load_child(args.checkpoint)
    config = config.with_overrides(z_dim=child.genotype.z_dim, base_channels=child.genotype.base_channels,
                                   base_resolution=child.genotype.base_resolution)
    _, evaluator = prepare_evaluator(config, None, args.scorer)
    report = evaluator.report(child, child.genotype, final_latents(config, config.seed, args.samples))
    value = report.is_mean if args.metric == "is" else report.fid
    _print({"metric": args.metric, "value": value, "is_mean": report.is_mean, "is_std": report.is_std,
            "fid": report.fid, "n_samples": report.n_samples})
    return 0


def cmd_baseline(args) -> int:
    config = _config(args)
    os.makedirs(args.out, exist_ok=True)
    dataset, evaluator = prepare_evaluator(config, args.out)
    mode = BASELINE_MODE_ALIASES[args.mode]
    genotype, report = RandomSearchAgent(config, dataset, evaluator, args.out).run(mode, args.budget)
    _print({"genotype": str(genotype), **report.to_dict()["best"], "retrained_is": report.retrained_is})
    return 0


def cmd_proxy_study(args) -> int:
    config = _run_config(args.run)
    dataset, evaluator = prepare_evaluator(config, args.run)
    result = _load_result(args.run, config)
    rng = torch.Generator().manual_seed(config.seed + 5)
    count = args.count or config.proxy_study_genotypes
    genotypes = [random_genotype(config.num_cells, rng, **result.supernet.geometry()) for _ in range(count)]
    study = DerivationAgent(config, dataset, evaluator, args.run, workers=args.workers).study(genotypes, result.supernet)
    _print({"spearman": study.coefficient, "table": study.table})
    return 0


def cmd_serve(args) -> int:
    from app import app

    env = load_environment()
    app.run(host="0.0.0.0", port=args.port or env.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autogan", description="Architecture search for GAN generators")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--json-logs", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue the run in --out from its last checkpoint")
    p.add_argument("--derive", action="store_true", help="derive the final architecture when the search ends")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive")
    p.add_argument("--run", required=True)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("retrain")
    p.add_argument("--genotype", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=("is", "fid"), default="is")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--scorer", help="directory of a saved surrogate scorer")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline")
    p.add_argument("--mode", choices=sorted(BASELINE_MODE_ALIASES), default="shared")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int, help="generator steps; defaults to a full search's")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("proxy-study")
    p.add_argument("--run", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_proxy_study)

    p = sub.add_parser("serve")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.json_logs)
    try:
        load_environment()
        return args.func(args)
    except AutoGanError as e:
        log.error("[cli] command failed", command=args.command, error=str(e), exit_code=e.exit_code)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
