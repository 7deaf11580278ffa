"""The toy adaptation pipeline end to end, at reduced size.

1. Render a clear source domain and a rainy target domain. Two bridge
   domains share a camera setup (a tube) and differ only in weather.
2. Bridge: merge the bridge sets into source and target, after checking that
   their weather tags are compatible.
3. Train the style/content translator on the bridged pair and inspect a few
   translated images for rain droplets.
4. Train the segmenter twice: source only, and with online multimodal
   translation plus weighted pseudo-labels on the target.
5. Compare target mIoU on held-out labeled rainy images.

The default sizes finish in about two minutes; pass ``--full`` for the sizes used
by the acceptance suite (roughly a quarter of an hour).
"""

from __future__ import annotations

import argparse
import time
from dataclasses import replace

import numpy as np
import torch

from domainbridge.datasets import (
    ToyWorldConfig,
    assemble_bridged_dataset,
    detect_droplets,
    generate_toy_dataset,
)
from domainbridge.i2i import I2iTrainConfig, sample_style, train_i2i, translate
from domainbridge.uda import UdaConfig, run_uda_training


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--full", action="store_true", help="acceptance-suite sizes")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.full:
        n_src, n_tgt, n_eval, n_bridge, iters, epochs, refine = 500, 500, 200, 300, 3000, 12, 6
    else:
        n_src, n_tgt, n_eval, n_bridge, iters, epochs, refine = 150, 150, 60, 100, 600, 4, 3
    t0 = time.perf_counter()

    world = ToyWorldConfig(seed=args.seed)
    A = generate_toy_dataset(world, n_src, "source_clear")
    target = generate_toy_dataset(world, n_tgt + n_eval, "target_rain")
    B = target.subset(range(n_tgt))
    E = target.subset(range(n_tgt, len(target)), "target_eval")
    C = generate_toy_dataset(world, n_bridge, "bridge_clear")
    D = generate_toy_dataset(world, n_bridge, "bridge_rain")
    A2, B2 = assemble_bridged_dataset(A, B, C, D)
    print(f"source {len(A)} -> {len(A2)} bridged, target {len(B)} -> {len(B2)} bridged")

    translator, _ = train_i2i(A2, B2, I2iTrainConfig.toy(iterations=iters, seed=args.seed))
    x = torch.from_numpy(np.stack([s.image_data for s in A.samples[:20]])).permute(0, 3, 1, 2)
    y = translate(x, sample_style(8, torch.Generator().manual_seed(args.seed), n=len(x)), translator)
    rate = np.mean([len(detect_droplets(im.permute(1, 2, 0).numpy())) > 0 for im in y])
    print(f"translator: {iters} iterations, droplets in {rate:.0%} of translated clear images")

    cfg = UdaConfig.toy(epochs=epochs, refine_epochs=refine, seed=args.seed)
    base = run_uda_training(A, B, None, replace(cfg, strategy="none"), eval_set=E)
    full = run_uda_training(A, B, translator, replace(cfg, strategy="wpl"), eval_set=E)
    print(f"target mIoU, source only        {base.report.miou:.4f}")
    print(f"target mIoU, bridge + OMS + WPL {full.report.miou:.4f}")
    print(f"final alpha {float(full.theta.alpha.detach()):.3f}, {time.perf_counter() - t0:.0f}s total")


if __name__ == "__main__":
    main()
