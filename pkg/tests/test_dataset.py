import numpy as np
import pytest

from anisotse.dataset import (SamplePair, build_samples, grid_for_trajectories,
                              load_samples, rasterize, rasterize_partial,
                              save_samples, select_probes)
from anisotse.grid import GridSpec, encode_partial
from anisotse.microsim import Demand, TrajectorySet, scenario_for, simulate


def make_trajs(samples_by_vid):
    return TrajectorySet({vid: np.asarray(rows, dtype=np.float64)
                          for vid, rows in samples_by_vid.items()})


def binning_oracle(trajs, spec):
    """Nested-loop per-sample binning: per-cell (sum, count)."""
    sums = np.zeros((spec.nx, spec.nt))
    counts = np.zeros((spec.nx, spec.nt))
    for arr in trajs.vehicles.values():
        for t, x, v in arr:
            i = min(int(x // spec.dx), spec.nx - 1)
            j = min(int(t // spec.dt), spec.nt - 1)
            sums[i, j] += v
            counts[i, j] += 1
    return sums, counts


class TestRasterize:
    def test_constant_speed_vehicle(self):
        # a constant-v line fills its cells with v; empty cells copy along rows
        spec = GridSpec(nx=4, nt=10, dx=10, dt=1, v_max=30)
        rows = [(float(t), 2.0 * t, 2.0) for t in range(10)]  # crosses rows slowly
        trajs = make_trajs({0: rows})
        f = rasterize(trajs, spec)
        for t in range(10):
            i = min(int(2.0 * t // 10), 3)
            assert f.values[i, t] == 2.0
        # rows the vehicle visited fill entirely with v via the nearest rule
        assert (f.values[0] == 2.0).all()
        # untouched row falls back to v_max
        assert (f.values[3] == spec.v_max).all()

    def test_two_samples_average(self):
        spec = GridSpec(nx=1, nt=1, v_max=30)
        trajs = make_trajs({0: [(0.1, 1.0, 10.0)], 1: [(0.2, 5.0, 20.0)]})
        f = rasterize(trajs, spec)
        assert f.values[0, 0] == 15.0

    def test_matches_binning_oracle(self):
        spec = GridSpec(nx=8, nt=20, dx=10, dt=1, v_max=30)
        rng = np.random.default_rng(0)
        trajs = make_trajs({
            vid: sorted((rng.uniform(0, 20), rng.uniform(0, 80), rng.uniform(0, 30))
                        for _ in range(40))
            for vid in range(5)})
        # fix monotone x per vehicle to satisfy invariants
        for arr in trajs.vehicles.values():
            arr[:, 1] = np.sort(arr[:, 1])
        f = rasterize(trajs, spec)
        sums, counts = binning_oracle(trajs, spec)
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        mask = counts > 0
        assert np.allclose(f.values[mask], means[mask])

    def test_row_fill_prefers_earlier_on_ties(self):
        spec = GridSpec(nx=1, nt=5, v_max=30)
        # observed at t=0 (v=5) and t=4 (v=9); t=2 is equidistant
        trajs = make_trajs({0: [(0.5, 1.0, 5.0)], 1: [(4.5, 1.0, 9.0)]})
        f = rasterize(trajs, spec)
        assert np.array_equal(f.values[0], [5.0, 5.0, 5.0, 9.0, 9.0])

    def test_empty_input_all_vmax(self):
        spec = GridSpec(nx=3, nt=3)
        f = rasterize(TrajectorySet({}), spec)
        assert (f.values == spec.v_max).all()

    def test_out_of_span_rejected(self):
        spec = GridSpec(nx=2, nt=2, dx=10, dt=1)
        trajs = make_trajs({0: [(0.0, 25.0, 5.0)]})
        with pytest.raises(ValueError):
            rasterize(trajs, spec)

    def test_permutation_invariance(self):
        spec = GridSpec(nx=5, nt=10)
        rng = np.random.default_rng(3)
        vehicles = {}
        for vid in range(6):
            t = np.sort(rng.uniform(0, 10, 20))
            x = np.sort(rng.uniform(0, 50, 20))
            v = rng.uniform(0, 30, 20)
            vehicles[vid] = np.column_stack([t, x, v])
        a = rasterize(TrajectorySet(vehicles), spec)
        shuffled = {9 - vid: arr for vid, arr in vehicles.items()}
        b = rasterize(TrajectorySet(shuffled), spec)
        assert np.allclose(a.values, b.values)


class TestRasterizePartial:
    def test_no_probes_all_missing(self):
        spec = GridSpec(nx=3, nt=4)
        pf = rasterize_partial(TrajectorySet({}), spec)
        assert not pf.observed.any()

    def test_single_probe_line(self):
        spec = GridSpec(nx=5, nt=10, dx=10, dt=1, v_max=30)
        rows = [(t * 1.0, 5.0 * t, 5.0) for t in range(10)]
        pf = rasterize_partial(make_trajs({0: rows}), spec)
        expected_cells = {(min(int(5.0 * t // 10), 4), t) for t in range(10)}
        got = {tuple(c) for c in np.argwhere(pf.observed)}
        assert got == expected_cells

    def test_observed_count_matches_oracle(self):
        spec = GridSpec(nx=6, nt=15)
        rng = np.random.default_rng(1)
        vehicles = {}
        for vid in range(4):
            t = np.sort(rng.uniform(0, 15, 30))
            x = np.sort(rng.uniform(0, 60, 30))
            v = rng.uniform(0, 30, 30)
            vehicles[vid] = np.column_stack([t, x, v])
        trajs = TrajectorySet(vehicles)
        pf = rasterize_partial(trajs, spec)
        _, counts = binning_oracle(trajs, spec)
        assert pf.n_observed == int((counts > 0).sum())

    def test_observed_subset_of_full_nonempty(self):
        trajs = simulate(scenario_for(Demand.FREE_FLOW, duration=120, seed=2))
        spec = grid_for_trajectories(trajs, road_len=800, duration=120)
        probes = select_probes(trajs, 0.3, seed=5)
        pf = rasterize_partial(probes, spec)
        _, full_counts = binning_oracle(trajs, spec)
        assert not (pf.observed & (full_counts == 0)).any()


class TestSelectProbes:
    def _trajs(self, n):
        return TrajectorySet({vid: np.array([[0.0, 0.0, 1.0]]) for vid in range(n)})

    def test_zero_coverage(self):
        assert select_probes(self._trajs(50), 0.0, seed=0).n_vehicles == 0

    def test_full_coverage(self):
        trajs = self._trajs(50)
        out = select_probes(trajs, 1.0, seed=0)
        assert out.ids() == trajs.ids()
        assert out.vehicles[3] is trajs.vehicles[3]  # retained unmodified

    def test_binomial_fraction(self):
        out = select_probes(self._trajs(10_000), 0.05, seed=11)
        assert 0.045 <= out.n_vehicles / 10_000 <= 0.055

    def test_deterministic(self):
        trajs = self._trajs(200)
        a = select_probes(trajs, 0.3, seed=9)
        b = select_probes(trajs, 0.3, seed=9)
        assert a.ids() == b.ids()

    def test_bad_coverage(self):
        with pytest.raises(ValueError):
            select_probes(self._trajs(5), 1.5)


class TestBuildSamples:
    def _pair_fields(self, nx=50, nt=120, seed=0):
        spec = GridSpec(nx=nx, nt=nt)
        rng = np.random.default_rng(seed)
        from anisotse.grid import SpeedField
        full = SpeedField(spec, rng.uniform(0, 30, (nx, nt)))
        speeds = np.where(rng.random((nx, nt)) < 0.05,
                          rng.uniform(0, 30, (nx, nt)), np.nan)
        return full, encode_partial(speeds, spec)

    def test_single_window(self):
        full, probes = self._pair_fields(10, 12)
        pairs = build_samples(full, probes, 10, 12)
        assert len(pairs) == 1
        assert np.array_equal(pairs[0].target.values, full.values)

    def test_count_formula(self):
        full, probes = self._pair_fields(50, 120)
        pairs = build_samples(full, probes, 50, 60, stride_x=10, stride_t=10)
        assert len(pairs) == (0 // 10 + 1) * ((120 - 60) // 10 + 1)
        assert len(pairs) == 7

    def test_windows_match_window_op(self):
        full, probes = self._pair_fields(30, 40, seed=4)
        pairs = build_samples(full, probes, 20, 25, stride_x=5, stride_t=7)
        k = 0
        for x0 in range(0, 11, 5):
            for t0 in range(0, 16, 7):
                assert np.array_equal(pairs[k].target.values,
                                      full.window(x0, t0, 20, 25).values)
                assert np.array_equal(pairs[k].input.observed,
                                      probes.window(x0, t0, 20, 25).observed)
                k += 1
        assert k == len(pairs)

    def test_window_too_large(self):
        full, probes = self._pair_fields(10, 10)
        with pytest.raises(IndexError):
            build_samples(full, probes, 11, 5)

    def test_mismatched_pair_rejected(self):
        full, _ = self._pair_fields(10, 10)
        _, probes = self._pair_fields(12, 10, seed=2)
        with pytest.raises(ValueError):
            SamplePair(probes, full)


class TestSampleIO:
    def test_roundtrip_directory(self, tmp_path):
        full, probes = TestBuildSamples()._pair_fields(20, 30, seed=6)
        pairs = build_samples(full, probes, 10, 15, stride_x=10, stride_t=15)
        save_samples(pairs, tmp_path)
        back = load_samples(tmp_path)
        assert len(back) == len(pairs)
        for a, b in zip(pairs, back):
            assert np.array_equal(a.input.observed, b.input.observed)
            assert np.allclose(a.input.rgb, b.input.rgb, atol=1e-7)
            assert np.allclose(a.target.values, b.target.values, atol=1e-5)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_samples(tmp_path / "nope")
