"""Overlap and deformation-regularity metrics."""

import json

import numpy as np
import pytest

from voxreg.errors import DataError, GeometryError
from voxreg.fields import DisplacementField, zero_field
from voxreg.metrics import (
    LabelVolume,
    MetricsReport,
    dice,
    evaluate,
    jacobian_stats,
    read_report,
    report_as_dict,
    warp_labels,
    write_report,
)
from voxreg.volume import GridGeometry, identity_coords


def _labels(geometry, arr):
    return LabelVolume(geometry, np.asarray(arr, dtype=np.int32))


class TestDice:
    def test_perfect_overlap(self):
        g = GridGeometry((3, 3, 3))
        arr = np.zeros((3, 3, 3), dtype=np.int32)
        arr[1] = 1
        per, mean = dice(_labels(g, arr), _labels(g, arr))
        assert per == {1: 1.0}
        assert mean == 1.0

    def test_half_overlap_hand_computed(self):
        g = GridGeometry((4, 2, 2))
        a = np.zeros((4, 2, 2), dtype=np.int32)
        b = np.zeros((4, 2, 2), dtype=np.int32)
        a[0:2] = 1  # 8 voxels
        b[1:3] = 1  # 8 voxels, 4 shared
        per, mean = dice(_labels(g, a), _labels(g, b))
        assert per[1] == pytest.approx(2 * 4 / 16)

    def test_label_missing_from_one_scores_zero(self):
        g = GridGeometry((2, 2, 2))
        a = np.zeros((2, 2, 2), dtype=np.int32)
        a[0, 0, 0] = 3
        b = np.zeros((2, 2, 2), dtype=np.int32)
        per, mean = dice(_labels(g, a), _labels(g, b))
        assert per == {3: 0.0}
        assert mean == 0.0

    def test_background_only_gives_empty_report(self):
        g = GridGeometry((2, 2, 2))
        z = np.zeros((2, 2, 2), dtype=np.int32)
        per, mean = dice(_labels(g, z), _labels(g, z))
        assert per == {}
        assert mean == 0.0

    def test_mean_over_union_of_labels(self):
        g = GridGeometry((4, 2, 2))
        a = np.zeros((4, 2, 2), dtype=np.int32)
        b = np.zeros((4, 2, 2), dtype=np.int32)
        a[0] = 1  # only in a
        b[1] = 2  # only in b
        a[2] = 3
        b[2] = 3  # shared, perfect
        per, mean = dice(_labels(g, a), _labels(g, b))
        assert per == {1: 0.0, 2: 0.0, 3: 1.0}
        assert mean == pytest.approx(1 / 3)

    def test_geometry_mismatch(self):
        a = _labels(GridGeometry((2, 2, 2)), np.zeros((2, 2, 2), dtype=np.int32))
        b = _labels(GridGeometry((3, 3, 3)), np.zeros((3, 3, 3), dtype=np.int32))
        with pytest.raises(GeometryError):
            dice(a, b)

    def test_negative_labels_rejected(self):
        g = GridGeometry((2, 2, 2))
        with pytest.raises(DataError):
            _labels(g, np.full((2, 2, 2), -1))


class TestWarpLabels:
    def test_identity_is_noop(self):
        g = GridGeometry((4, 4, 4))
        rng = np.random.default_rng(0)
        seg = _labels(g, rng.integers(0, 3, size=(4, 4, 4)))
        out = warp_labels(seg, zero_field(g))
        np.testing.assert_array_equal(out.labels, seg.labels)

    def test_integer_shift_moves_labels(self):
        g = GridGeometry((5, 3, 3))
        arr = np.zeros((5, 3, 3), dtype=np.int32)
        arr[3] = 7  # plane at x=3
        seg = _labels(g, arr)
        vec = np.zeros((3, 5, 3, 3), dtype=np.float32)
        vec[0] = 1.0  # output(x) = seg(x + 1)
        out = warp_labels(seg, DisplacementField(g, vec))
        assert np.all(out.labels[2] == 7)
        assert np.all(out.labels[3] == 0)

    def test_rounding_to_nearest_source_voxel(self):
        g = GridGeometry((4, 2, 2))
        arr = np.zeros((4, 2, 2), dtype=np.int32)
        arr[2] = 9
        seg = _labels(g, arr)
        vec = np.zeros((3, 4, 2, 2), dtype=np.float32)
        vec[0] = 0.6  # x=1 samples 1.6 -> rounds to 2
        out = warp_labels(seg, DisplacementField(g, vec))
        assert np.all(out.labels[1] == 9)

    def test_out_of_bounds_clamps_to_border(self):
        g = GridGeometry((3, 2, 2))
        arr = np.zeros((3, 2, 2), dtype=np.int32)
        arr[2] = 4
        seg = _labels(g, arr)
        vec = np.full((3, 3, 2, 2), 50.0, dtype=np.float32)
        out = warp_labels(seg, DisplacementField(g, vec))
        np.testing.assert_array_equal(out.labels, 4)


class TestJacobian:
    def test_identity_field(self):
        g = GridGeometry((8, 8, 8))
        sdlogj, folding = jacobian_stats(zero_field(g))
        assert sdlogj == pytest.approx(0.0, abs=1e-12)
        assert folding == 0.0

    def test_uniform_expansion_determinant(self):
        # u = 0.1 * x gives dphi/dx = diag(1.1): det = 1.331 exactly
        g = GridGeometry((9, 9, 9))
        gx, gy, gz = identity_coords(g.dims)
        vec = np.stack([0.1 * gx, 0.1 * gy, 0.1 * gz]).astype(np.float32)
        field = DisplacementField(g, vec)
        sdlogj, folding = jacobian_stats(field)
        assert folding == 0.0
        assert sdlogj == pytest.approx(0.0, abs=1e-5)

    def test_strong_contraction_folds_everywhere(self):
        # u = -2 * x maps phi(x) = -x: Jacobian diag(-1), det = -1 < 0
        g = GridGeometry((7, 7, 7))
        gx, gy, gz = identity_coords(g.dims)
        vec = np.stack([-2.0 * gx, -2.0 * gy, -2.0 * gz]).astype(np.float32)
        sdlogj, folding = jacobian_stats(DisplacementField(g, vec))
        assert folding == 100.0

    def test_folding_percentage_counts_interior_only(self):
        # fold exactly one interior voxel's neighborhood
        g = GridGeometry((8, 8, 8))
        vec = np.zeros((3, 8, 8, 8), dtype=np.float32)
        vec[0, 4, 4, 4] = -30.0  # sharp sign flip around x=4
        sdlogj, folding = jacobian_stats(DisplacementField(g, vec))
        interior = 6 ** 3
        assert folding > 0.0
        # the spike affects central differences at x=3 and x=5 columns only
        assert folding <= 100.0 * 4 / interior

    def test_too_small_volume_raises(self):
        g = GridGeometry((2, 5, 5))
        with pytest.raises(GeometryError):
            jacobian_stats(zero_field(g))


class TestReport:
    def _report(self):
        g = GridGeometry((6, 6, 6))
        truth = np.zeros((6, 6, 6), dtype=np.int32)
        truth[2:4, 2:4, 2:4] = 1
        moved = np.roll(truth, 1, axis=0)
        return evaluate(_labels(g, truth), _labels(g, moved), zero_field(g))

    def test_evaluate_fields(self):
        rep = self._report()
        assert isinstance(rep, MetricsReport)
        assert rep.evaluated_label_count == 1
        assert 0.0 <= rep.dice_mean <= 1.0
        assert rep.folding_pct == 0.0

    def test_json_round_trip(self, tmp_path):
        rep = self._report()
        path = tmp_path / "report.json"
        write_report(rep, path)
        parsed = json.loads(path.read_text())
        assert set(parsed) == {
            "dice_per_label",
            "dice_mean",
            "sdlogj",
            "folding_pct",
            "evaluated_label_count",
        }
        back = read_report(path)
        assert back.dice_per_label == rep.dice_per_label
        assert back.dice_mean == rep.dice_mean
        assert back.sdlogj == rep.sdlogj

    def test_report_as_dict_is_json_ready(self):
        rep = self._report()
        d = report_as_dict(rep)
        json.dumps(d)  # must not raise
        assert all(isinstance(k, str) for k in d["dice_per_label"])
