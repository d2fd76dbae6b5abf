"""Volume container, trilinear sampling, and intensity preprocessing."""

import numpy as np
import pytest

from voxreg.errors import DataError, GeometryError
from voxreg.volume import (
    GridGeometry,
    Volume3,
    as_volume_array,
    identity_coords,
    preprocess_ct,
    preprocess_mri,
    resample,
    sample_trilinear,
    trilinear,
)


def _reference_trilinear(data, pos):
    """Scalar, loop-free-of-cleverness oracle for one clamped sample."""
    out = []
    for p in pos:
        c = [min(max(float(v), 0.0), n - 1.0) for v, n in zip(p, data.shape)]
        cell = []
        frac = []
        for v, n in zip(c, data.shape):
            i0 = int(np.ceil(v)) - 1
            i0 = min(max(i0, 0), n - 2)
            cell.append(i0)
            frac.append(v - i0)
        acc = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = 1.0
                    for d, f in zip((dx, dy, dz), frac):
                        w *= f if d else (1.0 - f)
                    acc += w * data[cell[0] + dx, cell[1] + dy, cell[2] + dz]
        out.append(acc)
    return np.array(out)


class TestGridGeometry:
    def test_defaults(self):
        g = GridGeometry((4, 5, 6))
        assert g.spacing == (1.0, 1.0, 1.0)
        assert g.voxel_count == 120

    def test_rejects_tiny_axes(self):
        with pytest.raises(GeometryError):
            GridGeometry((1, 5, 5))

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(GeometryError):
            GridGeometry((4, 4, 4), (1.0, 0.0, 1.0))

    def test_equality_is_value_based(self):
        assert GridGeometry((3, 3, 3)) == GridGeometry((3, 3, 3))
        assert GridGeometry((3, 3, 3)) != GridGeometry((3, 3, 4))


class TestVolume3:
    def test_flat_input_uses_x_fastest_order(self):
        g = GridGeometry((2, 3, 4))
        flat = np.arange(24, dtype=np.float32)
        arr = as_volume_array(flat, g)
        # x varies fastest in the flat stream
        assert arr[0, 0, 0] == 0
        assert arr[1, 0, 0] == 1
        assert arr[0, 1, 0] == 2
        assert arr[0, 0, 1] == 6

    def test_shape_mismatch_raises(self):
        g = GridGeometry((2, 3, 4))
        with pytest.raises(GeometryError):
            as_volume_array(np.zeros(23, dtype=np.float32), g)

    def test_nonfinite_rejected(self):
        g = GridGeometry((2, 2, 2))
        bad = np.zeros((2, 2, 2), dtype=np.float32)
        bad[1, 1, 1] = np.nan
        with pytest.raises(DataError):
            Volume3(g, bad)

    def test_data_is_read_only(self):
        g = GridGeometry((2, 2, 2))
        vol = Volume3(g, np.zeros((2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            vol.data[0, 0, 0] = 1.0


class TestTrilinear:
    def test_exact_at_grid_nodes(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(4, 5, 6))
        gx, gy, gz = identity_coords((4, 5, 6))
        vals = trilinear(data, gx, gy, gz)
        np.testing.assert_array_almost_equal(vals, data, decimal=12)

    def test_linear_function_reproduced_exactly(self):
        # trilinear interpolation is exact for functions linear in each axis
        gx, gy, gz = identity_coords((5, 5, 5))
        data = 2.0 * gx - 3.0 * gy + 0.5 * gz + 1.0
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 4, 50)
        y = rng.uniform(0, 4, 50)
        z = rng.uniform(0, 4, 50)
        vals = trilinear(data, x, y, z)
        np.testing.assert_allclose(vals, 2 * x - 3 * y + 0.5 * z + 1, atol=1e-12)

    def test_matches_reference_at_random_points(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(4, 6, 5))
        pos = rng.uniform(-1.5, 7.0, size=(200, 3))  # includes out-of-bounds
        got = trilinear(data, pos[:, 0], pos[:, 1], pos[:, 2])
        want = _reference_trilinear(data, pos)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_clamps_beyond_border(self):
        data = np.arange(27, dtype=np.float64).reshape(3, 3, 3)
        far = trilinear(data, np.array([10.0]), np.array([10.0]), np.array([10.0]))
        assert far[0] == data[2, 2, 2]
        neg = trilinear(data, np.array([-4.0]), np.array([0.0]), np.array([0.0]))
        assert neg[0] == data[0, 0, 0]

    def test_sample_trilinear_scalar_and_batch(self):
        g = GridGeometry((3, 3, 3))
        vol = Volume3(g, np.arange(27, dtype=np.float32).reshape(3, 3, 3, order="F"))
        v = sample_trilinear(vol, (1, 1, 1))
        assert isinstance(v, float)
        batch = sample_trilinear(vol, np.zeros((4, 3)))
        assert batch.shape == (4,)


class TestResample:
    def test_identity_geometry_is_passthrough(self):
        g = GridGeometry((4, 4, 4))
        vol = Volume3(g, np.random.default_rng(3).normal(size=(4, 4, 4)).astype(np.float32))
        out = resample(vol, g)
        np.testing.assert_array_equal(out.data, vol.data)

    def test_halved_spacing_doubles_resolution_of_linear_ramp(self):
        g = GridGeometry((5, 4, 4), (2.0, 2.0, 2.0))
        gx, _, _ = identity_coords((5, 4, 4))
        vol = Volume3(g, gx.astype(np.float32))  # value = x index = physical/2
        target = GridGeometry((9, 4, 4), (1.0, 2.0, 2.0))
        out = resample(vol, target)
        # physical position x*1.0 maps to source index x/2
        np.testing.assert_allclose(out.data[:, 0, 0], np.arange(9) / 2.0, atol=1e-6)


class TestPreprocessing:
    def test_mri_maps_to_unit_range(self):
        rng = np.random.default_rng(4)
        g = GridGeometry((12, 12, 12))
        vol = Volume3(g, (rng.normal(50, 10, size=(12, 12, 12))).astype(np.float32))
        out = preprocess_mri(vol)
        assert out.data.min() >= 0.0
        assert out.data.max() <= 1.0
        # the bulk of values must not be squashed to the extremes
        assert 0.2 < float(out.data.mean()) < 0.8

    def test_mri_clips_extreme_tails(self):
        g = GridGeometry((8, 8, 8))
        data = np.full((8, 8, 8), 100.0, dtype=np.float32)
        data[0, 0, 0] = 1e6  # single hot voxel
        out = preprocess_mri(Volume3(g, data))
        # the hot voxel saturates at 1 and everything else collapses near 0
        assert out.data[0, 0, 0] == 1.0

    def test_mri_constant_volume_is_zeroed(self):
        g = GridGeometry((6, 6, 6))
        out = preprocess_mri(Volume3(g, np.full((6, 6, 6), 7.0, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_ct_window_maps_bounds(self):
        g = GridGeometry((4, 4, 4))
        data = np.full((4, 4, 4), -1000.0, dtype=np.float32)
        data[0] = 1000.0
        data[1] = 0.0
        out = preprocess_ct(Volume3(g, data))
        assert out.data[3, 0, 0] == 0.0
        assert out.data[0, 0, 0] == 1.0
        np.testing.assert_allclose(out.data[1], 0.5, atol=1e-6)
