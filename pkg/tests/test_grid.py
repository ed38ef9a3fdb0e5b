import numpy as np
import pytest

from anisotse.grid import (FormatError, GridSpec, PartialField, SpeedField,
                           colormap_decode, colormap_encode, encode_partial,
                           load_field, load_partial, save_field, save_partial,
                           window)


def test_gridspec_invariants():
    GridSpec(nx=10, nt=20)
    with pytest.raises(ValueError):
        GridSpec(nx=0, nt=5)
    with pytest.raises(ValueError):
        GridSpec(nx=5, nt=5, dx=-1)
    with pytest.raises(ValueError):
        GridSpec(nx=5, nt=5, v_max=0)
    with pytest.raises(ValueError):
        GridSpec(nx=5, nt=5, v_cong=2.0)


class TestColormap:
    def test_endpoints(self):
        assert colormap_encode(0.0) == (255, 0, 0)    # congested is pure red
        assert colormap_encode(1.0) == (0, 255, 0)
        assert colormap_encode(0.5) == (255, 255, 0)

    def test_decode_examples(self):
        assert colormap_decode((0, 0, 0)) is None
        assert colormap_decode((255, 0, 0)) == 0.0
        assert colormap_decode((255, 255, 0)) == 0.5
        assert colormap_decode((0, 255, 0)) == 1.0

    def test_roundtrip_exact_on_grid(self):
        # every representable quantized speed comes back exactly
        for k in range(511):
            u = k / 510.0
            assert colormap_decode(colormap_encode(u)) == u

    def test_injective_on_grid(self):
        seen = {colormap_encode(k / 510.0) for k in range(511)}
        assert len(seen) == 511

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            colormap_encode(-0.01)
        with pytest.raises(ValueError):
            colormap_encode(1.01)

    def test_off_curve_rejected(self):
        with pytest.raises(ValueError):
            colormap_decode((10, 10, 200))
        with pytest.raises(ValueError):
            colormap_decode((100, 100, 0))

    def test_near_curve_tolerated(self):
        # one byte per channel off still decodes
        r, g, b = colormap_encode(0.3)
        assert abs(colormap_decode((r, g + 1, b)) - 0.3) < 2 / 510.0

    def test_field_decode_names_bad_cell(self):
        spec = GridSpec(nx=3, nt=3)
        rgb = np.zeros((3, 3, 3))
        obs = np.zeros((3, 3), dtype=bool)
        rgb[1, 2] = (0.3, 0.3, 0.8)  # nowhere near the ramp
        obs[1, 2] = True
        pf = PartialField(spec, rgb, obs)
        with pytest.raises(ValueError, match=r"\(1, 2\)"):
            pf.speeds()


class TestEncodePartial:
    def test_all_missing(self):
        spec = GridSpec(nx=4, nt=5)
        pf = encode_partial(np.full((4, 5), np.nan), spec)
        assert not pf.observed.any()
        assert not pf.rgb.any()

    def test_congested_and_free_cells(self):
        spec = GridSpec(nx=2, nt=2, v_max=30.0)
        speeds = np.full((2, 2), np.nan)
        speeds[0, 0] = 0.0
        speeds[1, 1] = 30.0
        pf = encode_partial(speeds, spec)
        assert tuple(pf.rgb[0, 0]) == (1.0, 0.0, 0.0)
        assert tuple(pf.rgb[1, 1]) == (0.0, 1.0, 0.0)
        assert pf.observed.sum() == 2

    def test_out_of_range_rejected(self):
        spec = GridSpec(nx=1, nt=1, v_max=30.0)
        with pytest.raises(ValueError):
            encode_partial(np.array([[31.0]]), spec)
        with pytest.raises(ValueError):
            encode_partial(np.array([[-0.5]]), spec)

    def test_decode_recovers_speeds(self):
        # every observed cell decodes back within v_max / 510
        spec = GridSpec(nx=10, nt=12, v_max=27.0)
        rng = np.random.default_rng(7)
        speeds = rng.uniform(0, spec.v_max, (10, 12))
        speeds[rng.random((10, 12)) < 0.4] = np.nan
        pf = encode_partial(speeds, spec)
        back = pf.speeds()
        obs = pf.observed
        assert np.array_equal(obs, ~np.isnan(speeds))
        assert np.nanmax(np.abs(back[obs] - speeds[obs])) <= spec.v_max / 510.0

    def test_unobserved_cells_must_be_black(self):
        spec = GridSpec(nx=1, nt=2)
        rgb = np.zeros((1, 2, 3))
        rgb[0, 1] = (0.5, 0.5, 0.0)
        with pytest.raises(ValueError):
            PartialField(spec, rgb, np.array([[True, False]]))


class TestWindow:
    def _field(self, nx=4, nt=4, seed=0):
        spec = GridSpec(nx=nx, nt=nt, v_max=30.0)
        rng = np.random.default_rng(seed)
        return SpeedField(spec, rng.uniform(0, 30, (nx, nt)))

    def test_identity_window(self):
        f = self._field()
        w = window(f, 0, 0, 4, 4)
        assert np.array_equal(w.values, f.values)

    def test_bottom_right_block(self):
        f = self._field()
        w = window(f, 2, 2, 2, 2)
        assert np.array_equal(w.values, f.values[2:, 2:])
        assert (w.spec.nx, w.spec.nt) == (2, 2)

    def test_against_loop_slices(self):
        # brute-force slice copy oracle over every 3x3 window of a 10x10 field
        f = self._field(10, 10, seed=3)
        for x0 in range(8):
            for t0 in range(8):
                w = window(f, x0, t0, 3, 3)
                ref = np.array([[f.values[x0 + i, t0 + j] for j in range(3)]
                                for i in range(3)])
                assert np.array_equal(w.values, ref)

    def test_out_of_bounds(self):
        f = self._field()
        with pytest.raises(IndexError):
            window(f, 3, 0, 2, 4)
        with pytest.raises(IndexError):
            window(f, 0, -1, 2, 2)

    def test_composition(self):
        # window of a window equals a single window at composed offsets
        f = self._field(12, 12, seed=5)
        a = window(f, 2, 3, 8, 7)
        b = a.window(1, 2, 4, 3)
        direct = window(f, 3, 5, 4, 3)
        assert np.array_equal(b.values, direct.values)

    def test_partial_window(self):
        spec = GridSpec(nx=6, nt=6)
        rng = np.random.default_rng(1)
        speeds = rng.uniform(0, spec.v_max, (6, 6))
        speeds[rng.random((6, 6)) < 0.5] = np.nan
        pf = encode_partial(speeds, spec)
        w = pf.window(1, 2, 3, 4)
        assert np.array_equal(w.rgb, pf.rgb[1:4, 2:6])
        assert np.array_equal(w.observed, pf.observed[1:4, 2:6])


class TestFieldFiles:
    def test_sfld_roundtrip(self, tmp_path):
        spec = GridSpec(nx=7, nt=9, dx=5.0, dt=2.0, v_max=25.0, v_cong=-4.5)
        values = np.random.default_rng(0).uniform(0, 25, (7, 9)).astype(np.float32)
        f = SpeedField(spec, values.astype(np.float64))
        path = tmp_path / "x.sfld"
        save_field(f, path)
        g = load_field(path)
        assert g.spec == spec
        assert np.array_equal(g.values, f.values.astype(np.float32).astype(np.float64))

    def test_sfld3_roundtrip(self, tmp_path):
        spec = GridSpec(nx=5, nt=6)
        rng = np.random.default_rng(2)
        speeds = rng.uniform(0, spec.v_max, (5, 6))
        speeds[rng.random((5, 6)) < 0.5] = np.nan
        pf = encode_partial(speeds, spec)
        path = tmp_path / "x.sfld3"
        save_partial(pf, path)
        back = load_partial(path)
        assert back.spec == spec
        assert np.array_equal(back.observed, pf.observed)
        assert np.allclose(back.rgb, pf.rgb, atol=1e-7)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sfld"
        path.write_bytes(b"NOPE" + b"\x00" * 60)
        with pytest.raises(FormatError, match="byte 0"):
            load_field(path)

    def test_truncated(self, tmp_path):
        spec = GridSpec(nx=3, nt=3)
        f = SpeedField(spec, np.zeros((3, 3)))
        path = tmp_path / "t.sfld"
        save_field(f, path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(FormatError, match="byte"):
            load_field(path)

    def test_no_partial_file_left_on_error(self, tmp_path):
        # nothing written for a path in a read-only dir
        spec = GridSpec(nx=2, nt=2)
        f = SpeedField(spec, np.zeros((2, 2)))
        target = tmp_path / "sub" / "x.sfld"
        with pytest.raises(FileNotFoundError):
            save_field(f, target)
        assert not (tmp_path / "sub").exists()
