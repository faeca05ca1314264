import json
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odformer.data import (ODPair, ODSeries, RegionGraph, RegionPartition, Trajectory, build_od_series, clip_outliers,
                           fill_missing, generate_synthetic, load_series, log_denormalize, log_normalize,
                           read_edge_list, read_matrix_records, read_trajectories, save_series, segment_trajectory,
                           split_series)
from odformer.exceptions import DataError, IntegrityError, LengthError, ShapeError
from odformer.tensor import autocorrelation_fft


@pytest.fixture
def strip():
    # three unit cells along the longitude axis
    return RegionPartition.grid(0.0, 0.0, 3.0, 1.0, 3, 1)


def series_of(values, n=None, n_prime=None, og=None, dg=None):
    v = np.asarray(values, dtype=float)
    return ODSeries(v, 1.0, og, dg)


class TestSegmentation:
    def test_same_region(self, strip):
        t = Trajectory([(0.0, (0.2, 0.5)), (30.0, (0.8, 0.5))])
        assert segment_trajectory(t, strip, 60) == []

    def test_departure_slot(self, strip):
        t = Trajectory([(0.0, (0.5, 0.5)), (100.0, (1.5, 0.5))])
        assert segment_trajectory(t, strip, 60) == [ODPair(0, 1, 0, 1.0)]

    def test_zigzag(self, strip):
        t = Trajectory([(0.0, (0.5, 0.5)), (50.0, (1.5, 0.5)), (130.0, (0.5, 0.5)), (200.0, (2.5, 0.5))])
        # by hand: 0->1 departs at 0s, 1->0 at 50s, 0->2 at 130s; 60 s slots
        expected = [ODPair(0, 1, 0, 1.0), ODPair(1, 0, 0, 1.0), ODPair(0, 2, 2, 1.0)]
        assert segment_trajectory(t, strip, 60) == expected

    def test_outside_point_splits(self, strip):
        t = Trajectory([(0.0, (0.5, 0.5)), (10.0, (9.0, 9.0)), (20.0, (1.5, 0.5))])
        assert segment_trajectory(t, strip, 60) == []

    def test_entirely_outside(self, strip):
        t = Trajectory([(0.0, (9.0, 9.0)), (10.0, (8.0, 8.0))])
        assert segment_trajectory(t, strip, 60) == []

    def test_timestamps_must_increase(self):
        with pytest.raises(DataError):
            Trajectory([(5.0, (0, 0)), (5.0, (1, 1))])

    def test_shared_edge_resolves_once(self, strip):
        assert strip.locate(1.0, 0.5) in (0, 1)


class TestBinning:
    def test_empty(self):
        s = build_od_series([], 2, 2, 1)
        assert s.values.shape == (1, 2, 2, 1)
        assert not s.values.any()

    def test_additive(self):
        s = build_od_series([ODPair(0, 1, 0, 2.0), ODPair(0, 1, 0, 3.0)], 2, 2, 1)
        assert s.values[0, 0, 1, 0] == 5.0

    def test_random_pairs_match_dict_accumulation(self):
        rng = np.random.default_rng(5)
        pairs = [ODPair(int(rng.integers(3)), int(rng.integers(4)), int(rng.integers(5)), float(rng.uniform(0, 9)))
                 for _ in range(10)]
        acc = defaultdict(float)
        for p in pairs:
            acc[(p.timeslot, p.origin, p.destination)] += p.flow
        s = build_od_series(pairs, 3, 4, 5)
        for t in range(5):
            for i in range(3):
                for j in range(4):
                    assert s.values[t, i, j, 0] == acc.get((t, i, j), 0.0)
        assert s.values.sum() == pytest.approx(sum(p.flow for p in pairs), abs=1e-12)

    def test_out_of_range_slot(self):
        with pytest.raises(IndexError):
            build_od_series([ODPair(0, 0, 3, 1.0)], 1, 1, 2)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 3), st.integers(0, 100)), max_size=40))
    def test_flow_conservation(self, raw):
        pairs = [ODPair(o, d, t, float(f)) for o, d, t, f in raw]
        s = build_od_series(pairs, 3, 3, 4)
        assert s.values.sum() == sum(p.flow for p in pairs)


class TestClip:
    def test_constant_unchanged(self):
        s = series_of(np.full((3, 2, 2), 4.0))
        np.testing.assert_array_equal(clip_outliers(s).values, s.values)

    def test_one_to_hundred(self):
        s = series_of(np.arange(1, 101, dtype=float).reshape(100, 1, 1))
        out = clip_outliers(s, 98).values.ravel()
        # nearest rank: ceil(0.98 * 100) = 98th smallest = 98
        np.testing.assert_array_equal(out[:98], np.arange(1, 99))
        np.testing.assert_array_equal(out[98:], [98, 98])

    def test_single_entry(self):
        s = series_of(np.array([[[7.5]]]))
        np.testing.assert_array_equal(clip_outliers(s).values, s.values)

    def test_bad_percentile(self):
        with pytest.raises(ValueError):
            clip_outliers(series_of(np.ones((1, 1, 1))), 100)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=60), st.floats(1, 99))
    def test_never_increases(self, vals, pct):
        s = series_of(np.asarray(vals).reshape(-1, 1, 1))
        out = clip_outliers(s, pct)
        thr = out.meta["clip_threshold"]
        assert np.all(out.values <= s.values)
        keep = s.values <= thr
        np.testing.assert_array_equal(out.values[keep], s.values[keep])


class TestFillMissing:
    def test_no_missing(self):
        s = series_of(np.random.default_rng(0).uniform(size=(2, 3, 3)), og=RegionGraph.ring(3), dg=RegionGraph.ring(3))
        out = fill_missing(s, np.zeros((2, 3, 3), bool))
        np.testing.assert_array_equal(out.values, s.values)

    def test_mean_of_two_neighbours(self):
        # origin path 0-1, destination graph edgeless: cell (0, 0) sees only (1, 0)
        og = RegionGraph(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]))
        v = np.zeros((1, 3, 1))
        v[0, 0, 0] = 2.0
        v[0, 2, 0] = 4.0
        v[0, 1, 0] = np.nan
        s = series_of(v, og=og, dg=RegionGraph.edgeless(1))
        mask = np.isnan(v)
        assert fill_missing(s, mask).values[0, 1, 0, 0] == 3.0

    def test_row_and_column_neighbours(self):
        v = np.array([[[9.0, 2.0], [4.0, 7.0]]])
        mask = np.zeros_like(v, bool)
        mask[0, 0, 0] = True
        s = series_of(v, og=RegionGraph.ring(2), dg=RegionGraph.ring(2))
        # neighbours of (0, 0): (1, 0) = 4 via origin graph, (0, 1) = 2 via destination graph
        assert fill_missing(s, mask).values[0, 0, 0, 0] == 3.0

    def test_no_neighbours_at_first_step(self):
        v = np.array([[[5.0]], [[6.0]]])
        mask = np.array([[[True]], [[False]]])
        assert fill_missing(series_of(v), mask).values[0, 0, 0, 0] == 0.0

    def test_no_neighbours_uses_previous_step(self):
        v = np.array([[[5.0]], [[6.0]]])
        mask = np.array([[[False]], [[True]]])
        assert fill_missing(series_of(v), mask).values[1, 0, 0, 0] == 5.0

    def test_present_entries_untouched(self):
        rng = np.random.default_rng(1)
        v = rng.uniform(size=(4, 3, 3))
        mask = rng.uniform(size=v.shape) < 0.3
        s = series_of(v, og=RegionGraph.ring(3), dg=RegionGraph.ring(3))
        out = fill_missing(s, mask).values[..., 0]
        np.testing.assert_array_equal(out[~mask], v[~mask])

    def test_mask_shape(self):
        with pytest.raises(ShapeError):
            fill_missing(series_of(np.ones((2, 2, 2))), np.zeros((2, 2), bool))


class TestLogNormalize:
    def test_zero(self):
        s = series_of(np.zeros((1, 1, 1)))
        assert log_normalize(s).values.item() == 0.0
        assert log_denormalize(log_normalize(s)).values.item() == 0.0

    def test_e_minus_one(self):
        s = series_of(np.full((1, 1, 1), math.e - 1))
        assert log_normalize(s).values.item() == pytest.approx(1.0, abs=1e-15)
        assert log_denormalize(log_normalize(s)).values.item() == pytest.approx(math.e - 1, rel=1e-12)

    def test_round_trip(self):
        v = np.random.default_rng(2).exponential(50.0, size=(5, 3, 4))
        s = series_of(v)
        back = log_denormalize(log_normalize(s)).values[..., 0]
        np.testing.assert_allclose(back, v, rtol=1e-12)
        fwd = log_normalize(log_denormalize(series_of(np.log1p(v)))).values[..., 0]
        np.testing.assert_allclose(fwd, np.log1p(v), rtol=1e-12)

    def test_negative(self):
        with pytest.raises(ValueError):
            log_normalize(series_of(-np.ones((1, 1, 1))))


class TestSplit:
    @pytest.mark.parametrize("length, sizes", [(10, (6, 2, 2)), (11, (6, 2, 3)), (100, (60, 20, 20))])
    def test_sizes(self, length, sizes):
        parts = split_series(series_of(np.arange(length, dtype=float).reshape(length, 1, 1)))
        assert tuple(len(p) for p in parts) == sizes

    @pytest.mark.parametrize("length", [10, 13, 57, 101])
    def test_partition_preserves_order(self, length):
        v = np.arange(length, dtype=float).reshape(length, 1, 1)
        parts = split_series(series_of(v))
        np.testing.assert_array_equal(np.concatenate([p.values for p in parts]), series_of(v).values)
        assert [p.slot0 for p in parts] == [0, len(parts.train), len(parts.train) + len(parts.validation)]

    def test_too_short(self):
        with pytest.raises(LengthError):
            split_series(series_of(np.ones((9, 1, 1))))


class TestSynthetic:
    def test_noiseless_peak_at_period(self):
        s = generate_synthetic(2, 3, 96, [24], noise=0.0, seed=4)
        for i in range(2):
            for j in range(3):
                x = s.values[:, i, j, 0]
                r = autocorrelation_fft(x - x.mean())
                assert int(np.argmax(r[1:])) + 1 in (24, 48, 72)
                assert r[24] == pytest.approx(r[1:].max(), rel=1e-9)

    def test_deterministic(self):
        a = generate_synthetic(3, 3, 50, [5, 10], noise=0.3, seed=9)
        b = generate_synthetic(3, 3, 50, [5, 10], noise=0.3, seed=9)
        assert a.values.tobytes() == b.values.tobytes()

    def test_degenerate_size(self):
        s = generate_synthetic(1, 1, 20, [4], seed=0)
        assert s.values.shape == (20, 1, 1, 1)
        assert s.origin_graph.region_count == 1

    def test_invalid_period(self):
        with pytest.raises(ValueError):
            generate_synthetic(2, 2, 20, [11])

    def test_nonnegative(self):
        s = generate_synthetic(3, 3, 60, [6], noise=2.0, seed=1, offset=0.5)
        assert (s.values >= 0).all()


class TestGraphs:
    def test_asymmetric_rejected(self):
        with pytest.raises(DataError):
            RegionGraph(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_ring(self):
        g = RegionGraph.ring(4)
        assert list(g.neighbors(0)) == [1, 3]


class TestFiles:
    def test_series_round_trip(self, tmp_path):
        s = generate_synthetic(3, 2, 30, [5], noise=0.1, seed=0)
        save_series(s, tmp_path / "series")
        back = load_series(tmp_path / "series")
        assert back.values.tobytes() == s.values.tobytes()
        np.testing.assert_array_equal(back.origin_graph.adjacency, s.origin_graph.adjacency)
        np.testing.assert_array_equal(back.destination_graph.adjacency, s.destination_graph.adjacency)
        meta = json.loads((tmp_path / "series" / "metadata.json").read_text())
        assert (meta["n"], meta["n_prime"], meta["f"]) == (3, 2, 1)

    def test_truncated_series(self, tmp_path):
        s = generate_synthetic(2, 2, 20, [4], seed=0)
        d = save_series(s, tmp_path / "s")
        blob = (d / "values.bin").read_bytes()
        (d / "values.bin").write_bytes(blob[:-8])
        with pytest.raises(IntegrityError):
            load_series(d)

    def test_trajectory_csv(self, tmp_path):
        p = tmp_path / "traj.csv"
        p.write_text("traj_id,timestamp,lon,lat\na,10,0.5,0.5\na,0,1.5,0.5\nb,3,2.5,0.5\n")
        trajs = read_trajectories(p)
        assert [pt[0] for pt in trajs["a"].points] == [0.0, 10.0]

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "traj.csv"
        p.write_text("traj_id,timestamp,lon,lat\na,0,0.5,0.5\na,oops,0.5,0.5\n")
        with pytest.raises(DataError, match="line 3"):
            read_trajectories(p)

    def test_matrix_csv_missing_values(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("timeslot,origin,destination,value\n0,0,1,2.5\n0,1,0,\n")
        recs = read_matrix_records(p)
        assert recs[0] == (0, 0, 1, 2.5)
        assert math.isnan(recs[1][3])

    def test_edge_list(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text("u,v,weight\n0,1,1.0\n1,2,0.5\n")
        g = read_edge_list(p, 3)
        assert g.adjacency[2, 1] == 0.5
