"""Planted-interaction benchmark: linear fused baseline vs jointly trained
factored-shared bilinear model, plus the posterior-averaging protocol.

Usage: python scripts/run_benchmark.py [--quick]

--quick cuts the flagship training to 200 epochs for a fast look; the full
run mirrors the acceptance settings.
"""

import argparse
import time

from bimodalnet.data import SynthSpec, generate_synthetic
from bimodalnet.fusion import Ensemble
from bimodalnet.training import (
    TrainConfig,
    build_model,
    evaluate,
    train_joint,
    train_model,
)


def row(tag, metrics):
    print(f"  {tag:34s} leaf_err={metrics.leaf_error:6.3f}  "
          f"group_err={metrics.group_error:6.3f}  nll={metrics.nll:7.4f}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true")
    parser.add_argument("--seed", type=int, default=7, help="dataset seed")
    args = parser.parse_args()

    spec = SynthSpec(d1=20, d2=20, num_classes=8, num_groups=4,
                     n_train=10000, n_test=2000, noise_std=0.1,
                     interaction_rank=2, seed=args.seed)
    train, test = generate_synthetic(spec)
    print(f"dataset: {train.n} train / {test.n} test, C={spec.num_classes}, "
          f"G={spec.num_groups}, d=({spec.d1},{spec.d2})")

    t0 = time.monotonic()
    baseline_cfg = TrainConfig(mode="fused", dims_a=(20, 24, 12), dims_v=(20, 24, 12),
                               epochs=15, learning_rate=0.5, init_scale=1.0, seed=5)
    baseline, _ = train_joint(baseline_cfg, train)
    row("linear fused softmax (frozen init)", evaluate(baseline, test))

    flagship_cfg = TrainConfig(mode="bilinear", variant="factored-shared",
                               dims_a=(20, 16), dims_v=(20, 16), fused_dim=16,
                               epochs=200 if args.quick else 1000,
                               learning_rate=0.15, init_scale=0.5,
                               minibatch_size=32, seed=5, lam=8.0)
    flagship, _ = train_joint(flagship_cfg, train)
    row("factored-shared bilinear (joint)", evaluate(flagship, test))

    members = []
    for dims, fused_dim, seed in [((20, 24, 12), 8, 22), ((20, 20, 12), 8, 24),
                                  ((20, 28, 14), 6, 25)]:
        cfg = TrainConfig(mode="bilinear", variant="factored-shared",
                          dims_a=dims, dims_v=dims, fused_dim=fused_dim,
                          epochs=40 if args.quick else 120, learning_rate=0.5,
                          init_scale=0.5, minibatch_size=32, seed=seed, lam=2.0)
        members.append(train_joint(cfg, train)[0])
    warm = []
    for mode, seed in (("audio", 31), ("visual", 32)):
        cfg = TrainConfig(mode=mode, dims_a=(20, 16, 8), dims_v=(20, 16, 8),
                          epochs=20, learning_rate=0.5, init_scale=1.0, seed=seed)
        warm.append(train_joint(cfg, train)[0].tower)
    fused_cfg = TrainConfig(mode="fused", fusion_top=(24,), epochs=40,
                            learning_rate=0.5, init_scale=0.5, seed=33)
    fused = build_model(fused_cfg, 20, 20, 8, train.tree, warm_towers=tuple(warm))
    train_model(fused, fused_cfg, train)
    members.append(fused)

    print("posterior-averaging protocol:")
    for i, member in enumerate(members):
        tag = f"member {i + 1} " + ("(fused)" if member.kind == "fused" else "(bilinear)")
        row(tag, evaluate(member, test))
    row("ensemble (average of 4)", evaluate(Ensemble(members), test))
    print(f"total {time.monotonic() - t0:.0f}s")


if __name__ == "__main__":
    main()
