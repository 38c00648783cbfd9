"""Smoke test for the trendfdr Python bindings.

Build and install the extension first, e.g.

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import json
import math
import random
import tempfile
from pathlib import Path

import trendfdr as tf


def write_grid(path, side=8, years=25, seed=7):
    rng = random.Random(seed)
    lines = ["pixel_id,col,row,year,period,ndvi"]
    for row in range(side):
        for col in range(side):
            pid = row * side + col + 1
            rising = col < side // 2 and row < side // 2
            level = 0.3 + 0.1 * rng.random()
            for year in range(years):
                for period in range(1, 25):
                    trend = 0.012 * year if rising and period <= 6 else 0.0
                    v = level + trend + 0.02 * rng.gauss(0.0, 1.0)
                    lines.append(f"{pid},{col},{row},{year},{period},{v:.4f}")
    path.write_text("\n".join(lines) + "\n")


def main():
    assert abs(tf.two_sided_pvalue(1.96) - 0.04999579) < 1e-7

    r = tf.trend_test([0.01 * t + 0.005 * math.sin(t) for t in range(25)])
    assert r.direction_sign == 1 and r.p_value < 1e-6

    s, rejected = tf.bh_stepup([0.001, 0.02, 0.04, 0.2], 0.05)
    assert (s, rejected) == (2, [0, 1])

    panel = tf.TestPanel([
        [(1, [0.0001, 0.4, 0.6, 0.9], [1, 1, -1, 1]),
         (2, [0.3, 0.5, 0.7, 0.8], [1, -1, 1, 1])],
        [(3, [0.2, 0.5, 0.7, 0.8], [1, 1, 1, 1])],
    ])
    for proc in ("three_stage", "adaptive", "by"):
        table = panel.run(proc, 0.05)
        print(f"{proc:12s} S={table.S} rejections={table.rejections}")

    sc = tf.SimScenario(9, 3.0, 0.9, -0.3, 0.2, replicates=20, seed=1)
    res = sc.run()
    assert res == sc.run(), "simulation must be reproducible"
    print("simulation:", {k: v for k, v in res.items() if k != "scenario"})

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        write_grid(d / "grid.csv")
        summary = json.loads(tf.analyze(d / "grid.csv", d / "dec.csv", d / "sum.json", block_size=4))
        assert summary["pixels_tested"] == 64
        up = summary["seasons"][0]
        print("analyze: rejections", summary["rejections"], "season 1", up)
        assert summary["rejections"] > 0

    print("smoke test OK")


if __name__ == "__main__":
    main()
