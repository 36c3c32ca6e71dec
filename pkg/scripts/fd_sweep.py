"""Finite-difference step sweep: the gradient-check error should shrink
roughly with h^2 until float round-off takes over.

Usage: python scripts/fd_sweep.py
"""

import numpy as np

from bimodalnet.bilinear import LabelTree
from bimodalnet.training import TrainConfig, build_model, grad_check


def main():
    cfg = TrainConfig(mode="bilinear", variant="factored-shared",
                      dims_a=(3, 4, 2), dims_v=(3, 4, 2), fused_dim=2,
                      epochs=0, init_scale=0.8, seed=4)
    model = build_model(cfg, 3, 3, 4, LabelTree.balanced(4, 2))
    rng = np.random.default_rng(2)
    sample = (rng.standard_normal(3), rng.standard_normal(3), 3)
    print(f"{'h':>8s}  {'max_rel_error':>14s}  worst parameter")
    for h in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7):
        report = grad_check(model, sample, h=h)
        print(f"{h:8.0e}  {report.max_rel_error:14.3e}  "
              f"{report.worst_param}{list(report.worst_index)}")


if __name__ == "__main__":
    main()
