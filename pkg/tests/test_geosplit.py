import itertools
import math

import numpy as np
import pytest

from vecmap.map_model import RigidTransform
from vecmap.geosplit import (
    CoverageRaster,
    InfeasibleSplitError,
    Trajectory,
    coverage,
    overlap,
    propose_split,
    split_overlap_ratio,
    total_variation,
    write_pgm,
)


def traj(scene_id, city, points, attributes=None):
    poses = tuple(
        (float(i), RigidTransform.from_xytheta(float(x), float(y), 0.0))
        for i, (x, y) in enumerate(points)
    )
    return Trajectory(scene_id, city, poses, attributes or {})


def rect_raster(city, origin, n_rows, n_cols, resolution, offset_cols=0, total_cols=None):
    """Rectangular occupancy block, optionally inside a wider empty frame."""
    total_cols = total_cols or (offset_cols + n_cols)
    occ = np.zeros((n_rows, total_cols), dtype=bool)
    occ[:, offset_cols:offset_cols + n_cols] = True
    return CoverageRaster(occ, origin, resolution, city)


class TestCoverage:
    def test_single_pose_disk_area(self):
        cov = coverage([traj("s", "a", [(0, 0)])], radius=30.0, resolution=0.5)
        area = cov["a"].area_m2
        assert abs(area - math.pi * 900) / (math.pi * 900) < 0.02

    def test_two_distant_poses(self):
        cov = coverage([traj("s", "a", [(0, 0), (100, 0)])], radius=30.0, resolution=0.5)
        expected = 2 * math.pi * 900
        assert abs(cov["a"].area_m2 - expected) / expected < 0.02

    def test_no_trajectories(self):
        assert coverage([], radius=30.0, resolution=0.5) == {}

    def test_monotone_in_trajectories(self):
        one = coverage([traj("a", "c", [(0, 0)])], 30, 1.0)["c"].area_m2
        two = coverage([traj("a", "c", [(0, 0)]), traj("b", "c", [(15, 0)])], 30, 1.0)
        assert two["c"].area_m2 >= one

    def test_resolution_convergence(self):
        # resolution r/60 = 0.5 at radius 30 keeps the error under 2%
        for res, tol in ((2.0, 0.08), (0.5, 0.02), (0.25, 0.01)):
            cov = coverage([traj("s", "a", [(0, 0)])], 30.0, res)
            err = abs(cov["a"].area_m2 - math.pi * 900) / (math.pi * 900)
            assert err < tol

    def test_cities_kept_separate(self):
        cov = coverage([traj("s1", "a", [(0, 0)]), traj("s2", "b", [(0, 0)])], 10, 1.0)
        assert set(cov) == {"a", "b"}


class TestOverlap:
    def test_identical_sets(self):
        cov = coverage([traj("s", "a", [(0, 0)])], 20, 1.0)
        result = overlap(cov, cov)
        assert result["ratio"] == 1.0
        assert result["overlap_km2"] == pytest.approx(result["area_b_km2"])

    def test_disjoint(self):
        a = coverage([traj("s", "a", [(0, 0)])], 10, 1.0)
        b = coverage([traj("t", "a", [(100, 0)])], 10, 1.0)
        result = overlap(a, b)
        assert result["overlap_km2"] == 0.0
        assert result["ratio"] == 0.0

    def test_appendix_style_areas_54_percent(self):
        # 10 m cells: 34600 / 10400 / 5600 cells = 3.46 / 1.04 / 0.56 km^2
        res = 10.0
        train = rect_raster("a", (0.0, 0.0), 100, 346, res)
        val = rect_raster("a", (2900.0, 0.0), 100, 104, res)  # columns 290..393
        result = overlap({"a": train}, {"a": val})
        assert result["area_a_km2"] == pytest.approx(3.46)
        assert result["area_b_km2"] == pytest.approx(1.04)
        assert result["overlap_km2"] == pytest.approx(0.56)
        assert abs(result["ratio"] * 100 - 54.0) <= 1.0

    def test_appendix_style_areas_85_percent(self):
        res = 10.0
        train = rect_raster("a", (0.0, 0.0), 100, 200, res)
        val = rect_raster("a", (1210.0, 0.0), 100, 92, res)  # 79 columns overlap
        result = overlap({"a": train}, {"a": val})
        assert result["area_a_km2"] == pytest.approx(2.00)
        assert result["area_b_km2"] == pytest.approx(0.92)
        assert result["overlap_km2"] == pytest.approx(0.79)
        assert 84.0 <= result["ratio"] * 100 <= 87.0

    def test_resolution_mismatch_errors(self):
        a = {"a": rect_raster("a", (0, 0), 4, 4, 1.0)}
        b = {"a": rect_raster("a", (0, 0), 4, 4, 2.0)}
        with pytest.raises(ValueError, match="resolution"):
            overlap(a, b)

    def test_cross_city_overlap_is_zero(self):
        a = coverage([traj("s", "a", [(0, 0)])], 10, 1.0)
        b = coverage([traj("t", "b", [(0, 0)])], 10, 1.0)
        assert overlap(a, b)["overlap_km2"] == 0.0

    def test_overlap_bounded_by_min_area(self):
        a = coverage([traj("s", "a", [(0, 0), (20, 0)])], 15, 1.0)
        b = coverage([traj("t", "a", [(10, 0)])], 15, 1.0)
        result = overlap(a, b)
        assert result["overlap_km2"] <= min(result["area_a_km2"], result["area_b_km2"]) + 1e-12


def district_scenes(n_districts=4, per_district=10, gap=400.0):
    scenes = []
    for d in range(n_districts):
        for i in range(per_district):
            x0 = d * gap
            scenes.append(traj(
                f"d{d}s{i:02d}", "city",
                [(x0 + 8 * i, 0), (x0 + 8 * i + 15, 10)],
                {"weather": "rain" if i % 2 else "sun"},
            ))
    return scenes


class TestProposeSplit:
    def test_disjoint_clusters_reach_zero(self):
        scenes = district_scenes(2, 5, gap=500)
        result = propose_split(scenes, 5, 5, radius=30, resolution=2.0, seed=0)
        assert result.report["overlap_ratio"] == 0.0
        assert set(result.train) | set(result.val) == {s.scene_id for s in scenes}
        assert not set(result.train) & set(result.val)

    def test_single_shared_trajectory_reports_full_overlap(self):
        scenes = [traj(f"s{i}", "a", [(0, 0)]) for i in range(4)]
        result = propose_split(scenes, 2, 2, radius=20, resolution=2.0, seed=0)
        assert result.report["overlap_ratio"] == 1.0

    def test_small_exhaustive_optimum(self):
        scenes = district_scenes(3, 3, gap=300)[:8]
        n_val = 3
        result = propose_split(scenes, len(scenes) - n_val, n_val,
                               radius=30, resolution=2.0, seed=1)
        best = math.inf
        ids = [s.scene_id for s in scenes]
        for combo in itertools.combinations(ids, n_val):
            best = min(best, split_overlap_ratio(scenes, combo, 30, 2.0))
        assert result.report["overlap_ratio"] == pytest.approx(best, abs=1e-9)

    def test_deterministic_given_seed(self):
        scenes = district_scenes(3, 4, gap=250)
        a = propose_split(scenes, 8, 4, radius=30, resolution=2.0,
                          balance_keys=("weather",), seed=7)
        b = propose_split(scenes, 8, 4, radius=30, resolution=2.0,
                          balance_keys=("weather",), seed=7)
        assert a.train == b.train and a.val == b.val and a.report == b.report

    def test_infeasible_counts(self):
        scenes = district_scenes(1, 3)
        with pytest.raises(InfeasibleSplitError):
            propose_split(scenes, 1, 1)

    def test_partition_exact(self):
        scenes = district_scenes(2, 4, gap=300)
        result = propose_split(scenes, 6, 2, radius=30, resolution=2.0, seed=0)
        assert len(result.train) == 6 and len(result.val) == 2
        assert sorted(result.train + result.val) == sorted(s.scene_id for s in scenes)

    def test_ratio_consistent_with_overlap_op(self):
        scenes = district_scenes(2, 3, gap=120)  # districts close enough to touch
        result = propose_split(scenes, 4, 2, radius=30, resolution=2.0, seed=0)
        audited = split_overlap_ratio(scenes, result.val, 30, 2.0)
        assert result.report["overlap_ratio"] == pytest.approx(audited, abs=1e-12)


class TestBalance:
    def test_total_variation(self):
        from collections import Counter
        p = Counter({"sun": 2, "rain": 2})
        q = Counter({"sun": 4})
        assert total_variation(p, q) == pytest.approx(0.5)
        assert total_variation(p, p) == 0.0

    def test_balance_reported(self):
        scenes = district_scenes(2, 4, gap=300)
        result = propose_split(scenes, 4, 4, radius=30, resolution=2.0,
                               balance_keys=("weather",), seed=0)
        assert "weather" in result.report["balance"]
        assert 0.0 <= result.report["balance"]["weather"]["tv"] <= 1.0


class TestPgm:
    def test_header_and_flip(self, tmp_path):
        img = np.zeros((2, 3), dtype=np.uint8)
        img[0, 0] = 255  # lowest-y row, must land at the bottom of the file
        path = tmp_path / "cov.pgm"
        write_pgm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n3 2\n255\n")
        pixels = raw[len(b"P5\n3 2\n255\n"):]
        assert pixels[3] == 255 and pixels[0] == 0
