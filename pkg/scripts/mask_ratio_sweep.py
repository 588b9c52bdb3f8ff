#!/usr/bin/env python3
"""Sweep the mask ratio on the planted task (the configuration axis from the
upstream ablation grid) and print accuracy per ratio as JSON lines.

    python scripts/mask_ratio_sweep.py --epochs 20
"""
import argparse
import json
import sys
import time

from xadapter.adapter import V_EXPERT, default_positions, make_insertion_plan
from xadapter.adaptation import AdaptationRun, run_adaptation
from xadapter.planted import build_world, evaluate_zero_shot

GRID = (0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=20)
    args = parser.parse_args()

    world = build_world(seed=args.seed)
    for ratio in GRID:
        t0 = time.perf_counter()
        plan = make_insertion_plan(
            default_positions(V_EXPERT, world.model.cfg.n_layers), V_EXPERT,
            world.adapter_config, n_layers=world.model.cfg.n_layers,
            seed=world.seed)
        run = AdaptationRun(corpus=list(world.train_captions), expert=V_EXPERT,
                            epochs=args.epochs, lr=3e-3, mask_ratio=ratio,
                            seed=args.seed, fixed_clock=True)
        run_adaptation(world.model, plan, run, world.provider, world.bank)
        result = evaluate_zero_shot(world, plan)
        print(json.dumps({
            "mask_ratio": ratio,
            "steps": len(run.loss_history),
            "final_loss": run.loss_history[-1],
            "zero_shot_accuracy": result["accuracy"],
            "wall_seconds": round(time.perf_counter() - t0, 1),
        }), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
