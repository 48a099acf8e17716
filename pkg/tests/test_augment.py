import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yoloob.augment import (PAD_VALUE, Affine, AnnotatedImage, center_fill_square, draw_boxes, letterbox,
                            mosaic4, quadrant_layout, resize_square, sample_layout, to_chw)
from yoloob.boxcodec import box_iou
from yoloob.synthetic import ellipse_mask, mask_bbox


def blank(h, w, boxes=(), value=0, sid="img"):
    return AnnotatedImage(np.full((h, w, 3), value, np.uint8), np.array(boxes, dtype=np.float64), sid)


def test_center_fill_square_unchanged():
    img = blank(50, 50, [[1, 2, 3, 4]])
    out, tf = center_fill_square(img)
    assert out is img
    assert tf == Affine()


def test_center_fill_1080p():
    img = blank(1080, 1920, [[0, 0, 10, 10]], value=7)
    out, tf = center_fill_square(img)
    assert out.pixels.shape == (1920, 1920, 3)
    assert tf.dy == 420 and tf.dx == 0
    np.testing.assert_array_equal(out.boxes, [[0, 420, 10, 430]])
    assert np.all(out.pixels[:420] == PAD_VALUE)
    assert np.all(out.pixels[420:1500] == 7)


def test_center_fill_area_ratio():
    img = blank(1080, 1920, [[100, 100, 300, 250]])
    out, _ = center_fill_square(img)
    def frac(im):
        b = im.boxes[0]
        return (b[2] - b[0]) * (b[3] - b[1]) / (im.width * im.height)
    assert frac(out) / frac(img) == pytest.approx(1080 * 1920 / 1920 ** 2, rel=1e-12)
    assert 1080 * 1920 / 1920 ** 2 == 0.5625


def test_letterbox_affine_invertible():
    img = blank(300, 200, [[10, 20, 110, 220]])
    out, tf = letterbox(img, 128)
    assert out.pixels.shape == (128, 128, 3)
    np.testing.assert_allclose(tf.invert(out.boxes), img.boxes, atol=1e-12)


def test_resize_square_requires_square():
    with pytest.raises(ValueError):
        resize_square(blank(10, 20), 8)


def test_mosaic_quadrant_example():
    imgs = [blank(416, 416, [[10, 10, 20, 20]], sid=f"s{i}") for i in range(4)]
    out = mosaic4(imgs, layout=quadrant_layout(416))
    assert out.pixels.shape == (416, 416, 3)
    np.testing.assert_allclose(out.boxes[1], [213, 5, 218, 10])


def test_mosaic_rejects_few_images():
    with pytest.raises(ValueError):
        mosaic4([blank(8, 8)] * 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.lists(st.integers(0, 4), min_size=4, max_size=4))
def test_mosaic_keeps_every_box(seed, counts):
    rng = np.random.default_rng(seed)
    imgs = []
    for i, c in enumerate(counts):
        xy = rng.uniform(0, 80, (c, 2))
        wh = rng.uniform(1, 40, (c, 2))
        imgs.append(blank(128, 128, np.concatenate([xy, np.minimum(xy + wh, 128)], 1), sid=str(i)))
    out = mosaic4(imgs, rng_seed=seed, canvas=128)
    assert len(out.boxes) == sum(counts)
    assert np.all(out.boxes >= 0) and np.all(out.boxes <= 128)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_layout_scales_in_range_and_disjoint(seed):
    lay = sample_layout(np.random.default_rng(seed), 416, 416)
    assert sorted(lay.indices) == [0, 1, 2, 3]
    for s in lay.scales:
        assert 0.4 - 1e-3 <= s <= 0.6 + 1e-3
    occ = np.zeros((416, 416), int)
    for (ox, oy), n in zip(lay.offsets, lay.sizes):
        assert ox >= 0 and oy >= 0 and ox + n <= 416 and oy + n <= 416
        occ[oy:oy + n, ox:ox + n] += 1
    assert occ.max() == 1


def test_mosaic_boxes_follow_pixels_affine():
    rng = np.random.default_rng(3)
    imgs = [blank(200, 200, [[20 * i, 30, 20 * i + 50, 90]], sid=str(i)) for i in range(4)]
    lay = sample_layout(rng, 200, 416)
    out = mosaic4(imgs, layout=lay)
    for q in range(4):
        src = imgs[lay.indices[q]]
        s = lay.sizes[q] / 200
        ox, oy = lay.offsets[q]
        np.testing.assert_allclose(out.boxes[q], src.boxes[0] * s + [ox, oy, ox, oy])


def test_mosaic_seeded_determinism():
    rng = np.random.default_rng(4)
    imgs = [AnnotatedImage(rng.integers(0, 255, (96, 96, 3), dtype=np.uint8), [[5, 5, 40, 40]], str(i))
            for i in range(4)]
    a = mosaic4(imgs, rng_seed=11, canvas=128)
    b = mosaic4(imgs, rng_seed=11, canvas=128)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.boxes.tobytes() == b.boxes.tobytes()


def test_mosaic_pixel_label_consistency():
    """Render ellipses, mosaic them, re-measure each blob: IoU with its label >= 0.99."""
    # Large blobs keep the one-pixel nearest-neighbour edge error small relative to the box.
    rng = np.random.default_rng(5)
    side, canvas = 640, 1280
    for trial in range(10):
        imgs = []
        for i in range(4):
            a, b = rng.uniform(200, 300, 2)
            cx, cy = rng.uniform(a + 5, side - a - 5), rng.uniform(b + 5, side - b - 5)
            m = ellipse_mask(side, side, cx, cy, a, b, rng.uniform(0, np.pi))
            px = np.zeros((side, side, 3), np.uint8)
            px[m] = 255
            imgs.append(AnnotatedImage(px, [mask_bbox(m)], str(i)))
        out = mosaic4(imgs, rng_seed=trial, canvas=canvas)
        lay = sample_layout(np.random.default_rng(trial), side, canvas)
        for q in range(4):
            ox, oy = lay.offsets[q]
            n = lay.sizes[q]
            sub = out.pixels[oy:oy + n, ox:ox + n, 0] == 255
            rows, cols = np.nonzero(sub.any(1))[0], np.nonzero(sub.any(0))[0]
            measured = np.array([[cols[0] + ox, rows[0] + oy, cols[-1] + 1 + ox, rows[-1] + 1 + oy]], float)
            assert box_iou(measured, out.boxes[q:q + 1])[0, 0] >= 0.99


def test_to_chw_range_and_layout():
    px = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    out = to_chw(px)
    assert out.shape == (3, 2, 3) and out.dtype == np.float32
    assert out[1, 0, 2] == pytest.approx(px[0, 2, 1] / 255.0, rel=1e-6)


def test_draw_boxes_writes_png(tmp_path):
    path = tmp_path / "o" / "x.png"
    draw_boxes(blank(32, 32, [[2, 2, 20, 20]]), path, np.array([[4, 4, 10, 10.0]]), [0.9])
    assert path.exists() and path.stat().st_size > 0
