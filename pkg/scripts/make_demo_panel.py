"""Regenerate src/scinterf/data/demo_weekly.csv (synthetic, 9 units, 98 + 48 weeks)."""

from pathlib import Path

import numpy as np

from scinterf.panel import Panel, write_panel
from scinterf.simulation import ar2_noise

T0, T1 = 98, 48
LOADINGS = np.array(
    [[6.0, 2.0], [1.5, 3.0], [4.0, -1.0], [5.0, 4.0], [2.0, 2.5], [3.5, -2.0], [6.5, 1.0], [3.0, 5.0], [2.5, -3.0]]
)
LEVEL = np.array([60.0, 12.0, 35.0, 80.0, 20.0, 30.0, 90.0, 45.0, 25.0])


def main():
    rng = np.random.default_rng(20171206)
    T = T0 + T1
    X = (np.arange(T) >= T0).astype(float)
    F = np.outer([1.0, 0.5], X) + ar2_noise(rng, 2, T)
    Y = LEVEL[:, None] + LOADINGS @ F + 2.0 * ar2_noise(rng, 9, T)
    Y[0] += 6.0 * X  # treated unit
    Y[1] += 3.0 * X  # one interfered neighbour
    labels = [f"unit{i + 1}" for i in range(9)]
    periods = [f"w{t + 1:03d}" for t in range(T)]
    panel = Panel(np.round(Y, 4), T0, labels, periods)
    out = Path(__file__).resolve().parents[1] / "src" / "scinterf" / "data" / "demo_weekly.csv"
    write_panel(panel, out)
    print(out)


if __name__ == "__main__":
    main()
