import pathlib

import numpy as np
import pytest

from plotviz.figures import heatmap_grids, render_grid_heatmap, render_jsd_curves
from plotviz.loader import (
    GridDistribution,
    RunCurve,
    load_grid_distributions,
    load_metrics_csv,
)

DATA = pathlib.Path(__file__).parent / "data"


def uniform_dist(H=4, name="uniform"):
    return GridDistribution(name, H, 2, np.full(H * H, 1.0 / (H * H)))


def point_mass(H=4, cell=5, name="point"):
    p = np.zeros(H * H)
    p[cell] = 1.0
    return GridDistribution(name, H, 2, p)


class TestHeatmapGrids:
    def test_uniform_is_constant(self):
        (grid,) = heatmap_grids([uniform_dist()], 4)
        assert np.all(grid == grid[0, 0])

    def test_point_mass_single_cell(self):
        (grid,) = heatmap_grids([point_mass(cell=6)], 4)
        assert grid[1, 2] == 1.0  # row-major rank 6 = (row 1, col 2)
        assert grid.sum() == 1.0

    def test_target_fixture_has_corner_modes(self):
        dists = load_grid_distributions(str(DATA / "off_tb_seed0.dist.json") +
                                        ":target", 8)
        (grid,) = heatmap_grids(dists, 8)
        peak = grid.max()
        # the four sharpest mode cells sit one step in from each corner
        for i, j in [(1, 1), (1, 6), (6, 1), (6, 6)]:
            assert grid[i, j] == pytest.approx(peak)
        assert grid[3, 4] < peak / 10


class TestRenderDeterminism:
    def test_heatmap_byte_identical(self, tmp_path):
        dists = [uniform_dist(name="a"), point_mass(name="b")]
        p1, p2 = tmp_path / "one.png", tmp_path / "two.png"
        render_grid_heatmap(dists, 4, str(p1))
        render_grid_heatmap(dists, 4, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_curves_byte_identical(self, tmp_path):
        runs = [load_metrics_csv(str(DATA / f"off_tb_seed{s}.csv"), "off-policy TB")
                for s in range(3)]
        p1, p2 = tmp_path / "one.png", tmp_path / "two.png"
        render_jsd_curves(runs, str(p1))
        render_jsd_curves(runs, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_inputs_differ(self, tmp_path):
        p1, p2 = tmp_path / "one.png", tmp_path / "two.png"
        render_grid_heatmap([uniform_dist()], 4, str(p1))
        render_grid_heatmap([point_mass()], 4, str(p2))
        assert p1.read_bytes() != p2.read_bytes()


class TestRenderSmoke:
    def test_single_run_single_curve(self, tmp_path):
        run = load_metrics_csv(str(DATA / "on_tb_seed0.csv"), "on-policy TB")
        out = tmp_path / "curve.png"
        render_jsd_curves([run], str(out))
        assert out.stat().st_size > 1000

    def test_empty_inputs_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            render_jsd_curves([], str(tmp_path / "x.png"))
        with pytest.raises(ValueError):
            render_grid_heatmap([], 4, str(tmp_path / "x.png"))

    def test_svg_supported_unknown_rejected(self, tmp_path):
        render_grid_heatmap([uniform_dist()], 4, str(tmp_path / "x.svg"))
        with pytest.raises(ValueError, match="format"):
            render_grid_heatmap([uniform_dist()], 4, str(tmp_path / "x.bmp"))
