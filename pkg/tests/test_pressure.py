import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pressure_motion.pressure import (
    Calibration, cop_to_world, grid_positional_encoding, pixel_cop, pixel_cop_sequence, temporal_diff,
)

maps_strategy = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
                       elements=st.floats(0, 100, allow_nan=False))


def _loop_cop(pmap):
    total = sx = sz = 0.0
    for r in range(pmap.shape[0]):
        for c in range(pmap.shape[1]):
            total += pmap[r, c]
            sx += c * pmap[r, c]
            sz += r * pmap[r, c]
    return (sx / total, sz / total) if total > 0 else None


class TestPixelCoP:
    def test_single_pixel(self):
        m = np.zeros((5, 7))
        m[3, 4] = 2.5
        assert pixel_cop(m) == (4.0, 3.0)

    def test_empty_map_has_no_cop(self):
        assert pixel_cop(np.zeros((4, 4))) is None

    @given(maps_strategy)
    def test_matches_double_loop(self, m):
        want = _loop_cop(m)
        got = pixel_cop(m)
        if want is None:
            assert got is None
        else:
            assert abs(got[0] - want[0]) < 1e-9 and abs(got[1] - want[1]) < 1e-9

    @given(maps_strategy)
    def test_cop_lies_inside_grid(self, m):
        got = pixel_cop(m)
        if got is not None:
            assert 0 <= got[0] <= m.shape[1] - 1 + 1e-9
            assert 0 <= got[1] <= m.shape[0] - 1 + 1e-9

    def test_sequence_agrees_with_single(self):
        rng = np.random.default_rng(0)
        maps = rng.random((6, 8, 10))
        maps[2] = 0
        cop, contact = pixel_cop_sequence(maps)
        assert contact.tolist() == [True, True, False, True, True, True]
        assert np.isnan(cop[2]).all()
        for n in (0, 1, 3, 4, 5):
            assert np.allclose(cop[n], pixel_cop(maps[n]), atol=1e-12)


class TestCalibration:
    def test_roundtrip(self):
        cal = Calibration((0.02, 0.03), (-1.0, 0.5))
        xz = np.array([[0.3, -0.7], [1.1, 2.0]])
        world = cop_to_world(cal.to_pixel(xz), cal)
        assert np.allclose(world[:, [0, 2]], xz)
        assert np.array_equal(world[:, 1], [0, 0])

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            Calibration((0.0, 0.02))

    def test_dict_roundtrip(self):
        cal = Calibration((0.06, 0.06), (0.25, -1.5))
        assert Calibration.from_dict(cal.to_dict()) == cal

    def test_shifted(self):
        cal = Calibration((0.06, 0.06), (0.1, 0.2)).shifted(0.3, -0.2)
        assert np.allclose(cal.offset, (0.4, 0.0))


class TestTemporalDiff:
    def test_first_frame_zero(self):
        maps = np.arange(24, dtype=float).reshape(3, 2, 4)
        d = temporal_diff(maps)
        assert np.array_equal(d[0], np.zeros((2, 4)))
        assert np.array_equal(d[1:], maps[1:] - maps[:-1])

    @settings(max_examples=30)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3), st.just(3)),
                  elements=st.floats(-10, 10, allow_nan=False)))
    def test_cumsum_recovers_maps(self, maps):
        rec = maps[0] + np.cumsum(temporal_diff(maps), axis=0)
        assert np.allclose(rec, maps, atol=1e-9)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            temporal_diff(np.zeros((0, 3, 3)))


class TestGridEncoding:
    def test_shape_and_readonly(self):
        enc = grid_positional_encoding(8, 12, 16)
        assert enc.shape == (8, 12, 16)
        with pytest.raises(ValueError):
            enc[0, 0, 0] = 1.0

    def test_first_channels(self):
        enc = grid_positional_encoding(5, 9, 8)
        u = np.arange(9) / 8
        assert np.allclose(enc[0, :, 0], np.sin(np.pi * u))
        assert np.allclose(enc[0, :, 1], np.cos(np.pi * u))
        # row half is constant along columns
        assert np.allclose(enc[:, 0, 4:], enc[:, 5, 4:])

    def test_pixels_distinct(self):
        enc = grid_positional_encoding(16, 16, 32).reshape(-1, 32)
        assert len(np.unique(np.round(enc, 9), axis=0)) == 256

    @pytest.mark.parametrize("dim", [0, 3])
    def test_bad_width(self, dim):
        with pytest.raises(ValueError):
            grid_positional_encoding(4, 4, dim)
