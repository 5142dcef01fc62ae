"""A reduced Monte Carlo study; prints the aggregated table.

Run with ``python demos/small_simulation.py [reps] [jobs]``.
"""

from __future__ import annotations

import sys

from boundary_infer import SimConfig, run_study


def main(reps: int = 40, jobs: int = 1) -> None:
    cfg = SimConfig(n_grid=(200, 400), reps=reps, predictors=(1, 3), M=300, n_jobs=jobs)
    report = run_study(cfg, progress=print)
    cols = ("n", "predictor", "method", "rmse", "rejection_0.05", "coverage", "mean_width")
    print(" ".join(f"{c:>14}" for c in cols))
    for row in report.rows:
        print(" ".join(f"{row[c]:>14.3f}" if isinstance(row[c], float) else f"{row[c]:>14}"
                       for c in cols))


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
