import os
import sys

from dotenv import load_dotenv
load_dotenv()

from Agents.DerivationAgent import DerivationAgent
from Agents.SearchAgent import SearchAgent
from cli import prepare_evaluator
from utils.config import SearchConfig, load_environment
from utils.run_logging import configure_logging

# A tiny end-to-end run, checked by hand: 16x16 output, a few iterations,
# small networks. Takes a couple of CPU minutes.
SMOKE_CONFIG = SearchConfig(
    total_iters=4,
    num_cells=2,
    shared_epochs_per_iter=1,
    shared_steps_per_epoch=5,
    ctrl_steps_per_iter=3,
    top_k=2,
    num_candidates=4,
    window_len=10,
    eval_every=2,
    eval_samples=100,
    final_eval_samples=200,
    base_channels=16,
    z_dim=16,
    hidden_size=16,
    resolution=16,
    synthetic_train=1000,
    synthetic_eval=200,
    surrogate_epochs=3,
    retrain_generator_steps=20,
    batch_size=16,
    g_batch_size=16,
)


def main(out_dir: str) -> None:
    configure_logging("INFO")
    load_environment()
    config = SMOKE_CONFIG.validate()

    # 1) Surrogate scorer and proxy evaluator
    dataset, evaluator = prepare_evaluator(config, out_dir)
    print(f"[smoke] surrogate held-out accuracy: {evaluator.scorer.held_out_accuracy:.3f}")

    # 2) Search
    result = SearchAgent(config, dataset, evaluator, out_dir=out_dir).run()
    print("[smoke] event trace:")
    for event, iteration in result.recorder.event_trace():
        print(f"    {iteration:3d} {event}")
    best = result.archive.best()
    print(f"[smoke] best beam: {best.genotype} (reward {best.reward:.4f})")

    # 3) Derivation
    genotype, report = DerivationAgent(config, dataset, evaluator, out_dir).derive(result)
    print(f"[smoke] derived: {genotype}, IS {report.best.is_mean:.3f}, FID {report.best.fid:.3f}")
    print(f"[smoke] outputs in {os.path.abspath(out_dir)}")


main(sys.argv[1] if len(sys.argv) > 1 else os.path.join("runs", "smoke"))
