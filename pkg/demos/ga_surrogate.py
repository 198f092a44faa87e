"""Genetic search against an exhaustive grid on a cheap quadratic fitness.

The surrogate peaks at learning rate 3e-3 and dropout 0.4, so both the
grid optimum and the GA answer can be checked by eye.

    python3 demos/ga_surrogate.py
"""

import numpy as np

from screenpipe import gatune


def surrogate(g):
    return -(g.learning_rate - 3e-3) ** 2 - (g.dropout - 0.4) ** 2


if __name__ == "__main__":
    axes = {"base": gatune.Genome(1e-3, 1e-5, 0.9, 8, 0.5),
            "learning_rate": np.geomspace(1e-4, 1e-2, 50), "dropout": np.linspace(0.1, 0.8, 50)}
    opt, _ = gatune.grid_search(surrogate, axes)
    print(f"grid (2500 evaluations): lr={opt.learning_rate:.5f} dropout={opt.dropout:.3f}")
    for seed in range(5):
        best, rec = gatune.run_ga(surrogate, gatune.GaConfig(population=20, parents=5, generations=30, seed=seed))
        print(f"GA seed {seed} ({rec.evaluations} evaluations): lr={best.learning_rate:.5f} "
              f"dropout={best.dropout:.3f}")
