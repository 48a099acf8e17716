import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yoloob.boxcodec import (GridCell, activate, assign_positive_cells, box_iou, decode, decode_grid, encode,
                             encode_at, paired_iou, scales_for)

SCALES = scales_for(416)
S32, S16, S8 = SCALES


def random_boxes(n: int, seed: int = 0, size: float = 416.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = rng.uniform(2, size * 0.8, n)
    h = rng.uniform(2, size * 0.8, n)
    x1 = rng.uniform(0, size - w)
    y1 = rng.uniform(0, size - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def test_scale_table():
    assert [(s.grid, s.stride, s.multiplier) for s in SCALES] == [(13, 32, 16), (26, 16, 4), (52, 8, 2)]
    assert all(s.image_size == 416 for s in SCALES)
    with pytest.raises(ValueError):
        scales_for(100)


def test_assignment_examples():
    cells = assign_positive_cells((10, 10, 30, 30), SCALES)
    assert [(c.scale.stride, c.cx, c.cy) for c in cells] == [(32, 0, 0), (16, 1, 1), (8, 2, 2)]
    cells = assign_positive_cells((415.8, 415.8, 416.0, 416.0), SCALES)
    assert [(c.cx, c.cy) for c in cells] == [(12, 12), (25, 25), (51, 51)]


def test_assignment_rejects_degenerate_and_outside():
    with pytest.raises(ValueError, match="degenerate"):
        assign_positive_cells((5, 5, 5, 9), SCALES)
    with pytest.raises(ValueError, match="outside"):
        assign_positive_cells((410, 410, 430, 430), SCALES)


def test_center_on_boundary_uses_floor():
    cells = assign_positive_cells((24, 24, 40, 40), SCALES)
    assert (cells[2].cx, cells[1].cx, cells[0].cx) == (4, 2, 1)


def test_encode_examples():
    assert encode((16, 16, 24, 24), S8) == pytest.approx((1, 1, 1, 1), abs=1e-9)
    assert encode((16, 16, 24, 24), S32) == pytest.approx((0.5, 0.5, 0.75, 0.75), abs=1e-9)
    assert encode((0, 0, 416, 416), S32) == pytest.approx((7, 7, 7, 7), abs=1e-9)


def test_decode_examples():
    assert decode((1, 1, 1, 1), GridCell(S8, 2, 2)) == pytest.approx((16, 16, 24, 24), abs=1e-9)
    assert decode((7, 7, 7, 7), GridCell(S32, 6, 6)) == pytest.approx((0, 0, 416, 416), abs=1e-9)


def test_decode_flags_and_clips_outside_box(caplog):
    with caplog.at_level(logging.WARNING):
        box = decode((-3, 1, 5, 1), GridCell(S8, 51, 3))
    assert "outside" in caplog.text
    assert box[0] == 416 and box[2] == 416


def test_activate_examples():
    assert activate(np.zeros(4), S32) == pytest.approx(np.full(4, 8.0))
    assert activate(np.zeros(4), S8) == pytest.approx(np.full(4, 1.0))
    assert activate(np.full(4, 40.0), S16) == pytest.approx(np.full(4, 4.0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=2))
def test_activate_bounded_monotone(logits):
    a, b = sorted(logits)
    for sc in SCALES:
        va, vb = activate(np.array([a, b]), sc)
        assert 0 <= va <= vb <= sc.multiplier


def test_roundtrip_1000_boxes_all_scales():
    boxes = random_boxes(1000, seed=1)
    worst = 0.0
    for b in boxes:
        cells = assign_positive_cells(b, SCALES)
        assert len(cells) == 3
        assert [c.scale for c in cells] == list(SCALES)
        for c in cells:
            enc = encode(b, c.scale)
            assert min(enc) > 0
            worst = max(worst, float(np.max(np.abs(np.subtract(decode(enc, c, clip=False), b)))))
    assert worst < 1e-3


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 380), st.floats(0, 380), st.floats(1, 200), st.floats(1, 200))
def test_roundtrip_property(x1, y1, w, h):
    box = (x1, y1, min(x1 + w, 416.0), min(y1 + h, 416.0))
    for c in assign_positive_cells(box, SCALES):
        back = decode(encode(box, c.scale), c, clip=False)
        assert np.allclose(back, box, atol=1e-6)


def test_translation_equivariance():
    for b in random_boxes(200, seed=2, size=300):
        for sc in SCALES:
            shifted = b + sc.stride
            c0 = assign_positive_cells(b, [sc])[0]
            c1 = assign_positive_cells(shifted, [sc])[0]
            assert (c1.cx, c1.cy) == (c0.cx + 1, c0.cy + 1)
            np.testing.assert_allclose(encode(shifted, sc), encode(b, sc), atol=1e-9)


def test_one_positive_per_scale_regardless_of_size():
    for size in (2, 10, 50, 200, 400):
        box = (208 - size / 2, 208 - size / 2, 208 + size / 2, 208 + size / 2)
        assert len(assign_positive_cells(box, SCALES)) == 3


def test_encode_at_matches_encode():
    boxes = random_boxes(50, seed=3)
    for sc in SCALES:
        cx = np.floor((boxes[:, 0] + boxes[:, 2]) / 2 / sc.stride)
        cy = np.floor((boxes[:, 1] + boxes[:, 3]) / 2 / sc.stride)
        vec = encode_at(boxes, cx, cy, sc.stride)
        ref = np.array([encode(b, sc) for b in boxes])
        np.testing.assert_allclose(vec, ref, atol=1e-12)


def test_decode_grid_matches_decode():
    rng = np.random.default_rng(4)
    dist = rng.uniform(0.1, 2, (4, 52, 52))
    grid = decode_grid(dist, S8)
    for cy, cx in [(0, 0), (10, 40), (51, 51)]:
        ref = decode(dist[:, cy, cx], GridCell(S8, cx, cy), clip=False)
        np.testing.assert_allclose(grid[cy, cx], ref)


def test_iou_helpers():
    a = np.array([[0, 0, 10, 10.0]])
    b = np.array([[5, 0, 15, 10.0], [20, 20, 30, 30], [0, 0, 10, 10]])
    np.testing.assert_allclose(box_iou(a, b)[0], [50 / 150, 0, 1])
    np.testing.assert_allclose(paired_iou(np.repeat(a, 3, 0), b), [50 / 150, 0, 1])
    assert box_iou(a, np.array([[3, 3, 3, 8.0]]))[0, 0] == 0
