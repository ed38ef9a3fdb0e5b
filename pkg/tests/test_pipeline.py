import numpy as np
import pytest

from anisotse.grid import GridSpec, SpeedField, encode_partial
from anisotse.microsim import TrajectorySet
from anisotse.model import build_model, default_config
from anisotse.pipeline import (EvalReport, _bilinear, _power_iteration_pca,
                               baseline_nearest, embed_and_score, estimate,
                               evaluate, fifo_violations, infer_trajectories,
                               silhouette_values, write_embedding_csv)
from test_model import random_partial, tiny_config


class TestEstimate:
    def test_all_missing_zero_weight_model(self):
        from anisotse.nn import layer_params
        spec = GridSpec(nx=6, nt=8, v_max=30.0)
        model = build_model(tiny_config(v_max=30.0), seed=0)
        for layer in model.layers:
            for p in layer_params(layer):
                p[...] = 0.0
        out = estimate(model, random_partial(spec, density=0.0))
        assert np.allclose(out.values, 15.0)

    def test_output_dims_follow_input(self):
        model = build_model(tiny_config(), seed=1)
        for nx, nt in [(50, 60), (50, 600)]:
            spec = GridSpec(nx=nx, nt=nt)
            out = estimate(model, random_partial(spec, seed=nt))
            assert out.values.shape == (nx, nt)

    def test_matches_forward_plus_clamp(self):
        model = build_model(tiny_config(), seed=2)
        spec = GridSpec(nx=9, nt=11)
        for seed in range(20):
            pf = random_partial(spec, density=0.2, seed=seed)
            est = estimate(model, pf)
            ref = np.clip(model.forward(pf).values, 0, spec.v_max)
            assert np.array_equal(est.values, ref)

    def test_grid_mismatch_rejected(self):
        model = build_model(tiny_config(v_max=30.0), seed=0)
        pf = random_partial(GridSpec(nx=5, nt=5, v_max=25.0))
        with pytest.raises(ValueError, match="v_max"):
            estimate(model, pf)


class TestBaseline:
    def test_all_missing_fills_vmax(self):
        spec = GridSpec(nx=4, nt=4)
        out = baseline_nearest(random_partial(spec, density=0.0))
        assert (out.values == spec.v_max).all()

    def test_nearest_assignment(self):
        spec = GridSpec(nx=3, nt=3, v_max=30.0)
        speeds = np.full((3, 3), np.nan)
        speeds[0, 0] = 10.0
        speeds[2, 2] = 20.0
        out = baseline_nearest(encode_partial(speeds, spec))
        got10 = abs(out.values - 10.0) < 0.1
        got20 = abs(out.values - 20.0) < 0.1
        assert got10[0, 0] and got20[2, 2]
        assert (got10 | got20).all()
        assert got10[0, 1] and got10[1, 0] and got20[2, 1] and got20[1, 2]


class TestEvaluate:
    def _field(self, values, v_max=30.0):
        a = np.asarray(values, dtype=np.float64)
        return SpeedField(GridSpec(nx=a.shape[0], nt=a.shape[1], v_max=v_max), a)

    def test_identical_fields(self):
        rng = np.random.default_rng(0)
        f = self._field(rng.uniform(5, 25, (6, 7)))
        rep = evaluate(f, f)
        assert rep.rmse_kmph == 0.0

    def test_constant_offset_unit_conversion(self):
        rng = np.random.default_rng(1)
        truth = self._field(rng.uniform(5, 20, (8, 9)))
        est = self._field(truth.values + 2.0)
        rep = evaluate(est, truth)
        assert abs(rep.rmse_kmph - 7.2) < 1e-9  # 2 m/s = 7.2 km/h
        assert abs(rep.relative_rmse - 2.0 / truth.values.mean()) < 1e-12

    def test_matches_flat_loop_oracle(self):
        rng = np.random.default_rng(2)
        truth = self._field(rng.uniform(0, 30, (10, 12)))
        est = self._field(rng.uniform(0, 30, (10, 12)))
        rep = evaluate(est, truth)
        sse = 0.0
        for i in range(10):
            for j in range(12):
                sse += (est.values[i, j] - truth.values[i, j]) ** 2
        ref = (sse / 120.0) ** 0.5 * 3.6
        assert abs(rep.rmse_kmph - ref) < 1e-10

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = self._field(rng.uniform(0, 30, (5, 5)))
        b = self._field(rng.uniform(0, 30, (5, 5)))
        assert evaluate(a, b).rmse_kmph == evaluate(b, a).rmse_kmph

    def test_observed_only_rmse(self):
        rng = np.random.default_rng(4)
        truth = self._field(rng.uniform(5, 25, (6, 6)))
        est = self._field(truth.values)
        err = np.zeros((6, 6))
        err[0, 0] = 3.0
        est2 = self._field(np.clip(truth.values + err, 0, 30))
        mask = np.zeros((6, 6), dtype=bool)
        mask[0, 0] = True
        rep = evaluate(est2, truth, observed=mask)
        assert abs(rep.observed_rmse_kmph - 3.0 * 3.6) < 1e-9
        assert evaluate(est2, truth).observed_rmse_kmph is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            evaluate(self._field(np.zeros((3, 3))), self._field(np.zeros((3, 4))))

    def test_zero_mean_truth_flagged(self):
        z = self._field(np.zeros((4, 4)))
        rep = evaluate(z, z)
        assert not rep.relative_defined
        assert np.isnan(rep.relative_rmse)
        assert "relative_rmse_defined=false" in rep.to_text()


def uniform_field(v, nx=40, nt=80, dx=10.0, dt=1.0, v_max=30.0):
    spec = GridSpec(nx=nx, nt=nt, dx=dx, dt=dt, v_max=v_max)
    return SpeedField(spec, np.full((nx, nt), v))


class TestInferTrajectories:
    def test_uniform_field_exact(self):
        f = uniform_field(20.0)
        trajs = infer_trajectories(f, [5.0])
        arr = trajs.vehicles[0]
        assert arr[0, 0] == 5.0 and arr[0, 1] == 0.0
        for t, x, v in arr:
            assert abs(x - 20.0 * (t - 5.0)) < 1e-9
            assert v == 20.0

    def test_zero_field_stays_at_entry(self):
        spec = GridSpec(nx=5, nt=30)
        f = SpeedField(spec, np.zeros((5, 30)))
        trajs = infer_trajectories(f, [0.0])
        arr = trajs.vehicles[0]
        assert (arr[:, 1] == 0.0).all()
        assert arr[-1, 0] == spec.duration

    def test_linear_field_vs_rk4(self):
        # dx/dt = v(x) linear in x; compare against RK4 at step h/100
        spec = GridSpec(nx=200, nt=70, dx=10.0, dt=1.0, v_max=30.0)
        centers = (np.arange(200) + 0.5) * 10.0
        values = np.tile(10.0 + 0.002 * centers, (70, 1)).T
        f = SpeedField(spec, values)
        trajs = infer_trajectories(f, [0.0], substeps=10)
        arr = trajs.vehicles[0]

        def rk4_position(t_end, h):
            x, t = 0.0, 0.0
            while t < t_end - 1e-12:
                step = min(h, t_end - t)
                k1 = _bilinear(f.values, spec, x, t)
                k2 = _bilinear(f.values, spec, x + step * k1 / 2, t + step / 2)
                k3 = _bilinear(f.values, spec, x + step * k2 / 2, t + step / 2)
                k4 = _bilinear(f.values, spec, x + step * k3, t + step)
                x += step * (k1 + 2 * k2 + 2 * k3 + k4) / 6
                t += step
            return x

        row = arr[arr[:, 0] == 60.0]
        assert len(row) == 1
        assert abs(row[0, 1] - rk4_position(60.0, 0.001)) < 0.1

    def test_positions_nondecreasing(self):
        rng = np.random.default_rng(5)
        spec = GridSpec(nx=30, nt=60)
        f = SpeedField(spec, rng.uniform(0, 30, (30, 60)))
        trajs = infer_trajectories(f, [0.0, 10.0, 20.0])
        for arr in trajs.vehicles.values():
            assert (np.diff(arr[:, 1]) >= 0).all()

    def test_entry_time_validation(self):
        f = uniform_field(10.0)
        with pytest.raises(ValueError):
            infer_trajectories(f, [1e6])
        with pytest.raises(ValueError):
            infer_trajectories(f, [10.0, 5.0])


class TestFifoViolations:
    def test_single_vehicle(self):
        f = uniform_field(15.0)
        trajs = infer_trajectories(f, [0.0])
        assert fifo_violations(trajs) == (0, [])

    def test_two_vehicles_uniform_field(self):
        f = uniform_field(15.0)
        trajs = infer_trajectories(f, [0.0, 5.0])
        count, pairs = fifo_violations(trajs)
        assert count == 0 and pairs == []

    def test_detects_crossing(self):
        # hand-built crossing trajectories
        a = np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [2.0, 2.0, 1.0]])
        b = np.array([[0.0, 0.0, 5.0], [1.0, 5.0, 5.0], [2.0, 10.0, 5.0]])
        count, pairs = fifo_violations(TrajectorySet({0: a, 1: b}))
        assert count == 2
        assert pairs == [(0, 1)]


class TestPcaPowerIteration:
    def test_matches_svd_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((200, 16)) * np.linspace(3, 0.1, 16)
        xc = x - x.mean(axis=0)
        comps, variances = _power_iteration_pca(xc)
        _, s, vt = np.linalg.svd(xc, full_matrices=False)
        for k in range(2):
            assert min(np.linalg.norm(comps[k] - vt[k]),
                       np.linalg.norm(comps[k] + vt[k])) < 1e-6
            assert abs(variances[k] - s[k] ** 2 / len(xc)) < 1e-8

    def test_orthonormal(self):
        rng = np.random.default_rng(7)
        xc = rng.standard_normal((50, 8))
        xc -= xc.mean(axis=0)
        comps, _ = _power_iteration_pca(xc)
        assert abs(np.linalg.norm(comps[0]) - 1) < 1e-8
        assert abs(np.linalg.norm(comps[1]) - 1) < 1e-8
        assert abs(comps[0] @ comps[1]) < 1e-8

    def test_rank_one_data(self):
        # points exactly on a line: first component takes all the variance
        rng = np.random.default_rng(8)
        direction = rng.standard_normal(32)
        direction /= np.linalg.norm(direction)
        coeffs = rng.standard_normal(100)
        x = np.outer(coeffs, direction)
        xc = x - x.mean(axis=0)
        comps, variances = _power_iteration_pca(xc)
        assert min(np.linalg.norm(comps[0] - direction),
                   np.linalg.norm(comps[0] + direction)) < 1e-6
        assert variances[1] < 1e-8


class TestSilhouette:
    def test_two_blobs_match_sklearn(self):
        from sklearn.metrics import silhouette_score
        rng = np.random.default_rng(9)
        a = rng.standard_normal((40, 2)) + (10, 0)
        b = rng.standard_normal((40, 2)) - (10, 0)
        pts = np.vstack([a, b])
        labels = np.array([0] * 40 + [1] * 40)
        mine = silhouette_values(pts, labels).mean()
        ref = silhouette_score(pts, labels)
        assert abs(mine - ref) < 1e-10
        assert mine > 0.8

    def test_three_clusters_match_sklearn(self):
        from sklearn.metrics import silhouette_score
        rng = np.random.default_rng(10)
        pts = np.vstack([rng.standard_normal((30, 2)) + c
                         for c in [(0, 0), (4, 4), (-3, 5)]])
        labels = np.repeat(["a", "b", "c"], 30)
        mine = silhouette_values(pts, labels).mean()
        assert abs(mine - silhouette_score(pts, labels)) < 1e-10


class TestEmbedAndScore:
    def test_degenerate_identical_vectors(self):
        from anisotse.nn import layer_params
        spec = GridSpec(nx=6, nt=6)
        model = build_model(tiny_config(), seed=0)
        for p in layer_params(model.layers[0]):
            p[...] = 0.0  # zero encoder: all hidden vectors identical
        partials = [random_partial(spec, density=0.2, seed=s) for s in range(6)]
        labels = ["x", "x", "x", "y", "y", "y"]
        rep = embed_and_score(model, partials, labels)
        assert rep.degenerate
        assert rep.silhouette == 0.0

    def test_distinct_inputs_get_coordinates(self):
        spec = GridSpec(nx=8, nt=8)
        model = build_model(tiny_config(), seed=4)
        partials = [random_partial(spec, density=d, seed=s)
                    for s, d in enumerate([0.0, 0.05, 0.3, 0.4, 0.8, 0.9])]
        labels = ["sparse"] * 2 + ["mid"] * 2 + ["dense"] * 2
        rep = embed_and_score(model, partials, labels)
        assert rep.coords.shape == (6, 2)
        assert not rep.degenerate
        assert set(rep.label_silhouette) == {"sparse", "mid", "dense"}
        assert abs(np.linalg.norm(rep.components[0]) - 1) < 1e-8

    def test_validation(self):
        spec = GridSpec(nx=4, nt=4)
        model = build_model(tiny_config(), seed=0)
        pf = random_partial(spec)
        with pytest.raises(ValueError):
            embed_and_score(model, [pf, pf], ["a", "b"])
        with pytest.raises(ValueError):
            embed_and_score(model, [pf, pf, pf], ["a", "a", "a"])

    def test_csv_export(self, tmp_path):
        spec = GridSpec(nx=6, nt=6)
        model = build_model(tiny_config(), seed=4)
        partials = [random_partial(spec, density=0.1 * (s + 1), seed=s)
                    for s in range(4)]
        rep = embed_and_score(model, partials, ["a", "a", "b", "b"])
        path = tmp_path / "emb.csv"
        write_embedding_csv(rep, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "sample_id,pc1,pc2,label"
        assert len(lines) == 5
        assert lines[1].startswith("0,") and lines[1].endswith(",a")
