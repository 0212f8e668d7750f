"""Smoke test for the splatocc extension module."""

import math
import os
import tempfile

import splatocc


def main():
    c = 0.5 * math.sqrt(2.0)
    cov = splatocc.covariance_of([1.0, 2.0, 3.0], [c, 0.0, 0.0, c])
    assert abs(cov[0][0] - 4.0) < 1e-12 and abs(cov[1][1] - 1.0) < 1e-12 and abs(cov[2][2] - 9.0) < 1e-12

    means = [[0.1, 0.1, 0.1], [0.2, 0.3, 0.1], [1.6, 0.2, 0.2]]
    g = splatocc.GaussianSet(
        means,
        [[0.3, 0.3, 0.3]] * 3,
        [[1.0, 0.0, 0.0, 0.0]] * 3,
        [0.9] * 3,
        [[4.0, 0.0], [4.0, 0.0], [0.0, 4.0]],
    )
    assert len(g) == 3 and g.num_classes == 2

    s = splatocc.sample(g, 0.5, [-2.0, -2.0, -2.0], [2.0, 2.0, 2.0], seed=1)
    assert len(s) == 2

    grid, probs = splatocc.render_grid(s, [8, 8, 8], [-2.0, -2.0, -2.0], 0.5)
    assert grid.dims == [8, 8, 8]
    assert len(probs) == 8 * 8 * 8 * 3
    for i in range(0, len(probs), 3):
        assert abs(sum(probs[i : i + 3]) - 1.0) < 1e-5
    assert splatocc.iou(grid, grid) == (1.0, 1.0)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "s.gsb")
        s.save(path)
        back = splatocc.GaussianSet.load(path)
        assert len(back) == len(s)

        summary = splatocc.run_pipeline(os.path.join(d, "run"), seed=2)
        assert summary["sampled"] < summary["initialized"]
        pred = splatocc.OccupancyGrid.load(os.path.join(d, "run", "pred.occ"))
        gt = splatocc.OccupancyGrid.load(os.path.join(d, "run", "gt.occ"))
        print("pipeline", summary, "iou/miou", splatocc.iou(pred, gt))

    print("ok")


if __name__ == "__main__":
    main()
