import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualfpn import boxes

from oracles import iou_ref, nms_ref


def random_boxes(rng, n, lo=0.0, hi=64.0, min_side=0.1):
    x1 = rng.uniform(lo, hi - min_side, n)
    y1 = rng.uniform(lo, hi - min_side, n)
    w = rng.uniform(min_side, (hi - lo) / 2, n)
    h = rng.uniform(min_side, (hi - lo) / 2, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


# side lengths bounded so scale ratios stay inside the decode clamp (1000/16)
box_strategy = st.tuples(
    st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 30), st.floats(0.5, 30)
).map(lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]])


class TestIoU:
    def test_identity(self):
        assert boxes.iou([1, 2, 5, 6], [1, 2, 5, 6]) == 1.0

    def test_disjoint(self):
        assert boxes.iou([0, 0, 1, 1], [5, 5, 6, 6]) == 0.0

    def test_hand_value(self):
        assert boxes.iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, rel=1e-12)

    def test_zero_union(self):
        assert boxes.iou([1, 1, 1, 1], [1, 1, 1, 1]) == 0.0

    @given(box_strategy, box_strategy)
    def test_symmetry_and_range(self, a, b):
        v = boxes.iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == boxes.iou(b, a)

    def test_matrix_matches_scalar(self, rng):
        a = random_boxes(rng, 7)
        b = random_boxes(rng, 5)
        m = boxes.iou_matrix(a, b)
        for i in range(7):
            for j in range(5):
                assert m[i, j] == pytest.approx(iou_ref(a[i], b[j]), abs=1e-12)


class TestNMS:
    def test_empty(self):
        assert boxes.nms(np.zeros((0, 4)), np.zeros(0), 0.5).tolist() == []

    def test_singleton(self):
        assert boxes.nms([[0, 0, 1, 1]], [0.3], 0.5).tolist() == [0]

    def test_basic_suppression(self):
        bx = [[0, 0, 10, 10], [1, 1, 11, 11]]
        assert boxes.iou(bx[0], bx[1]) > 0.5
        assert boxes.nms(bx, [0.9, 0.5], 0.5).tolist() == [0]

    def test_tie_breaks_by_lower_index(self):
        bx = [[0, 0, 10, 10], [100, 100, 110, 110], [0, 0, 10, 10]]
        keep = boxes.nms(bx, [0.7, 0.7, 0.7], 0.5)
        assert keep.tolist() == [0, 1]

    def test_iou_equal_threshold_kept(self):
        a, b = [0, 0, 2, 2], [1, 0, 3, 2]  # IoU = 2/6 = 1/3
        keep = boxes.nms([a, b], [0.9, 0.8], 1 / 3)
        assert keep.tolist() == [0, 1]

    def test_matches_brute_force_oracle(self, rng):
        for trial in range(5):
            n = 200
            bx = random_boxes(rng, n, hi=32.0)
            sc = np.round(rng.random(n), 2)  # rounding forces score ties
            for thr in (0.3, 0.5, 0.7):
                assert boxes.nms(bx, sc, thr).tolist() == nms_ref(bx, sc, thr)

    def test_output_is_antichain(self, rng):
        bx = random_boxes(rng, 100, hi=20.0)
        keep = boxes.nms(bx, rng.random(100), 0.4)
        kept = bx[keep]
        m = boxes.iou_matrix(kept, kept)
        np.fill_diagonal(m, 0.0)
        assert m.max() <= 0.4 + 1e-12


class TestEncodeDecode:
    def test_identity(self):
        d = boxes.encode([[0, 0, 10, 10]], [[0, 0, 10, 10]])
        np.testing.assert_array_equal(d, [[0, 0, 0, 0]])

    def test_hand_value(self):
        d = boxes.encode([[0, 0, 10, 10]], [[2, 0, 12, 10]])
        np.testing.assert_allclose(d, [[0.2, 0, 0, 0]], atol=1e-12)

    def test_round_trip_1000(self, rng):
        a = random_boxes(rng, 1000, min_side=1.0)
        g = random_boxes(rng, 1000, min_side=1.0)
        back = boxes.decode(a, boxes.encode(a, g))
        assert np.abs(back - g).max() < 1e-9

    def test_decode_clamps_scale(self):
        out = boxes.decode([[0, 0, 1, 1]], [[0, 0, 50.0, 50.0]])
        w = out[0, 2] - out[0, 0]
        assert w == pytest.approx(1000 / 16, rel=1e-9)

    def test_decode_clips_to_image(self):
        # dx=1 moves the center by one full anchor width: [10,0,20,10] pre-clip
        out = boxes.decode([[0, 0, 10, 10]], [[1.0, 0, 0, 0]], image_size=(12, 12))
        np.testing.assert_allclose(out, [[10, 0, 12, 10]])

    def test_degenerate_anchor_rejected(self):
        with pytest.raises(ValueError):
            boxes.encode([[0, 0, 0, 10]], [[0, 0, 1, 1]])
        with pytest.raises(ValueError):
            boxes.decode([[5, 5, 5, 5]], [[0, 0, 0, 0]])

    @settings(max_examples=50)
    @given(box_strategy, box_strategy)
    def test_round_trip_property(self, a, g):
        back = boxes.decode([a], boxes.encode([a], [g]))[0]
        np.testing.assert_allclose(back, g, atol=1e-9)
