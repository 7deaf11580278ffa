"""How the learned pseudo-label threshold moves during refinement.

Trains a small segmenter on the toy world without any translator, then
refines it with weighted pseudo-labels on unlabeled rainy images. The
printed table follows alpha and the fraction of target pixels that receive
a pseudo-label. The balancing term pulls alpha down against the weighted
CE, so coverage grows over the refinement phase.

Run with ``python demos/threshold_dynamics.py`` (about a minute on one core).
"""

from __future__ import annotations

import numpy as np
import torch

from domainbridge.datasets import ToyWorldConfig, generate_toy_dataset
from domainbridge.uda import UdaConfig, coverage_expansion, run_uda_training
from domainbridge.wpl import balancing_loss, compute_weights


def main() -> None:
    # A single pixel first: confidence 0.9 at alpha 0.8 gets half weight,
    # and the balancing loss at the initial threshold is log(0.2)^2.
    p = torch.tensor([[[0.9]], [[0.1]]], dtype=torch.float64)
    print(f"w(0.9; 0.8) = {float(compute_weights(p, 0.8)[0, 0]):.3f}")
    print(f"L_b(0.8)    = {balancing_loss(0.8):.4f}\n")

    world = ToyWorldConfig(seed=0)
    src = generate_toy_dataset(world, 150, "source_clear")
    tgt = generate_toy_dataset(world, 150, "target_rain")
    cfg = UdaConfig.toy(epochs=2, refine_epochs=4, seed=0)
    run = run_uda_training(src, tgt, None, cfg)

    refine = [s for s in run.steps if s["phase"] == "refine"]
    # alpha only moves on steps where the self-supervised path fired
    fired = [s for s in refine if s["ss_fired"]]
    print(f"{'step':>5} {'alpha':>7} {'coverage':>9} {'L_w':>7} {'L_b':>7}")
    for s in fired[:: max(1, len(fired) // 15)]:
        print(f"{s['step']:>5} {s['alpha']:>7.4f} {s['coverage']:>9.3f} {s['l_w']:>7.4f} {s['l_b']:>7.4f}")

    first, last = coverage_expansion(run.coverages(), 0.1)
    print(f"\ncoverage, first 10% of fired steps {first:.3f}, last 10% {last:.3f}")
    print(f"fired on {np.mean([s['ss_fired'] for s in refine]):.2f} of refinement steps")


if __name__ == "__main__":
    main()
