import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yoloob.boxcodec import encode, scales_for
from yoloob.loss import (C_EPS, LossWeights, anchor_loss, objectbox_loss, objectness_targets, sdiou,
                         sdiou_grad, valid_boxes)

SCALES416 = scales_for(416)
TOY = scales_for(64)     # grids 2 / 4 / 8, enough for one box


# ------------------------------------------------------------------ SDIoU

def test_sdiou_exact_match():
    val, t = sdiou([1, 1, 1, 1], [1, 1, 1, 1])
    assert float(t.S) == 0
    assert float(t.w_I) == float(t.h_I) == 1
    assert float(t.I) == 2 and float(t.C) == 2
    assert abs(float(val) - 1.0) < 1e-9
    assert abs(float(t.loss_box)) < 1e-9


def test_sdiou_hand_value_minus_one_ninth():
    val, t = sdiou([1, 1, 1, 1], [2, 2, 2, 2])
    assert (float(t.S), float(t.I), float(t.w_C), float(t.h_C), float(t.C)) == (4, 2, 3, 3, 18)
    assert abs(float(val) + 1 / 9) < 1e-9
    assert abs(float(t.loss_box) - 10 / 9) < 1e-9


def test_sdiou_doubling_pin():
    val, t = sdiou([2, 2, 2, 2], [4, 4, 4, 4])
    assert (float(t.S), float(t.I), float(t.C)) == (16, 18, 98)
    assert abs(float(val) - 2 / 98) < 1e-9


def test_sdiou_symmetric_and_vectorised():
    rng = np.random.default_rng(0)
    p, g = rng.uniform(0.5, 4, (2, 50, 4))
    a, _ = sdiou(p, g)
    b, _ = sdiou(g, p)
    np.testing.assert_allclose(a, b)
    assert a.shape == (50,)


def test_sdiou_clamps_are_flagged():
    # sub-cell boxes make the covering width non-positive
    val, t = sdiou([0.2, 0.6, 0.3, 0.6], [0.1, 0.6, 0.2, 0.6])
    assert bool(t.c_clamped)
    assert float(t.w_C) == C_EPS
    assert float(t.w_I) == 0
    assert np.isfinite(val)


def _fd(f, x, h):
    g = np.zeros(4)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_sdiou_grad_at_hand_point():
    g = np.array([2.0, 2, 2, 2])
    p = np.array([1.0, 1, 1, 1])
    num = _fd(lambda q: float(sdiou(q, g)[0]), p, 1e-4)
    ana = sdiou_grad(p, g)
    assert np.max(np.abs(num - ana) / np.maximum(np.abs(num), 1e-12)) < 1e-4


def test_sdiou_grad_at_match_has_no_distance_term():
    g = np.array([1.5, 1.2, 2.0, 0.9])
    ana = sdiou_grad(g, g)
    _, t = sdiou(g, g)
    # only the I and C branches contribute; S is stationary
    C, I = float(t.C), float(t.I)
    wI, hI = float(t.w_I), float(t.h_I)
    dI = 2 * np.array([wI, hI, wI, hI])
    np.testing.assert_allclose(ana, dI / C - I * dI / C ** 2, atol=1e-12)


def random_nontie_pairs(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        g = rng.uniform(0.6, 5, 4)
        p = rng.uniform(0.6, 5, 4)
        ok = np.all(np.abs(p - g) > 1e-3)
        for mn in (np.minimum(p, g), np.maximum(p, g)):
            ok &= abs(mn[0] + mn[2] - 1) > 1e-3 and abs(mn[1] + mn[3] - 1) > 1e-3
        if ok:
            out.append((p, g))
    return out


def test_sdiou_grad_200_random_points():
    worst = 0.0
    for p, g in random_nontie_pairs(200, seed=1):
        num = _fd(lambda q: float(sdiou(q, g)[0]), p, 1e-6)
        ana = sdiou_grad(p, g)
        worst = max(worst, float(np.max(np.abs(num - ana) / np.maximum(np.abs(num), 1e-8))))
    assert worst < 1e-3


def _encodable(rng, stride=8.0, size=416.0):
    """Distance vector of a real box at its center cell (so L+R > 1, T+B > 1)."""
    w, h = rng.uniform(4, 200, 2)
    x1, y1 = rng.uniform(0, size - w), rng.uniform(0, size - h)
    return np.array(encode((x1, y1, x1 + w, y1 + h), scales_for(416)[[32, 16, 8].index(stride)]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sdiou_upper_bound(seed):
    rng = np.random.default_rng(seed)
    g = _encodable(rng)
    p = g * rng.uniform(0.2, 3, 4)
    val, t = sdiou(p, g)
    assert float(val) <= 1 + 1e-12
    if not np.allclose(p, g):
        assert float(val) < 1


def test_loss_box_monotone_toward_gt():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        g = _encodable(rng, stride=float(rng.choice([8, 16, 32])))
        p = np.maximum(g * rng.uniform(0.1, 3, 4) + rng.uniform(-1, 1, 4), 0.01)
        lb = [float(sdiou(p + a * (g - p), g)[1].loss_box) for a in np.linspace(0, 1, 10)]
        assert all(x >= 0 for x in lb)
        assert all(b <= a + 1e-9 for a, b in zip(lb, lb[1:]))


# ------------------------------------------------------------- total loss

def _heads(B, scales, fill=0.0, seed=None):
    if seed is None:
        return [np.full((B, 6, s.grid, s.grid), fill) for s in scales]
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((B, 6, s.grid, s.grid)) for s in scales]


def test_zero_gt_zero_logits_closed_form():
    br, grads = objectbox_loss(_heads(1, SCALES416), [np.zeros((0, 4))], SCALES416)
    assert br.loss_box == 0
    assert br.loss_total == pytest.approx(np.log(2) * (13 ** 2 + 26 ** 2 + 52 ** 2), rel=1e-12)
    assert br.num_positives == 0


def test_perfect_predictor_total_tends_to_zero():
    # small enough that every scale can represent it
    box = np.array([[130.0, 141.0, 150.0, 159.0]])
    heads = _heads(1, SCALES416, fill=0.0)
    for h, sc in zip(heads, SCALES416):
        h[:, 4] = -60.0
        h[:, 5] = 60.0
        t = np.asarray(encode(box[0], sc))
        cx = int(140 // sc.stride)
        cy = int(150 // sc.stride)
        z = t / sc.multiplier
        h[0, :4, cy, cx] = np.log(z / (1 - z))
        h[0, 4, cy, cx] = 60.0
    targets = [np.zeros((1, s.grid, s.grid)) for s in SCALES416]
    for o, sc in zip(targets, SCALES416):
        o[0, int(150 // sc.stride), int(140 // sc.stride)] = 1.0
    br, _ = objectbox_loss(heads, [box], SCALES416, obj_targets=targets)
    assert br.loss_total < 1e-9
    # the computed IoU targets agree with the frozen ones for a perfect predictor
    for o, ref in zip(objectness_targets(heads, [box], SCALES416), targets):
        np.testing.assert_allclose(o, ref, atol=1e-9)


def test_three_positives_per_box():
    br, _ = objectbox_loss(_heads(1, SCALES416), [np.array([[10.0, 10, 90, 60]])], SCALES416)
    assert br.num_positives == 3


def test_lambda_box_zero_kills_distance_gradient():
    gts = [np.array([[10.0, 12, 40, 50]])]
    _, grads = objectbox_loss(_heads(1, TOY, seed=3), gts, TOY, LossWeights(box=0.0, obj=1.0))
    for g in grads:
        assert np.all(g[:, :4] == 0)


def _fd_total(heads, gts, scales, targets, idx_list, weights=LossWeights(), h=1e-6, **kw):
    out = []
    for si, ix in idx_list:
        old = heads[si][ix]
        heads[si][ix] = old + h
        fp = objectbox_loss(heads, gts, scales, weights, obj_targets=targets, **kw)[0].loss_total
        heads[si][ix] = old - h
        fm = objectbox_loss(heads, gts, scales, weights, obj_targets=targets, **kw)[0].loss_total
        heads[si][ix] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize("box_cells", ["positives", "all"])
def test_total_loss_gradcheck_one_box_toy_grid(box_cells):
    gts = [np.array([[9.0, 14.0, 41.0, 37.0]])]
    heads = _heads(1, TOY, seed=4)
    targets = objectness_targets(heads, gts, TOY, box_cells)
    _, grads = objectbox_loss(heads, gts, TOY, obj_targets=targets, box_cells=box_cells)
    idx = [(si, ix) for si, h in enumerate(heads) for ix in np.ndindex(h.shape)]
    num = _fd_total(heads, gts, TOY, targets, idx, box_cells=box_cells)
    ana = np.array([grads[si][ix] for si, ix in idx])
    big = np.abs(num) > 1e-7
    assert np.max(np.abs(num[big] - ana[big]) / np.abs(num[big])) < 1e-3
    assert np.max(np.abs(num[~big] - ana[~big])) < 1e-6


def test_gradient_step_descends():
    rng = np.random.default_rng(5)
    for trial in range(20):
        gts = [np.array([[rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(30, 60), rng.uniform(30, 60)]])]
        heads = _heads(1, TOY, seed=100 + trial)
        targets = objectness_targets(heads, gts, TOY)
        br, grads = objectbox_loss(heads, gts, TOY, obj_targets=targets)
        stepped = [h - 1e-3 * g for h, g in zip(heads, grads)]
        br2, _ = objectbox_loss(stepped, gts, TOY, obj_targets=targets)
        assert br2.loss_total < br.loss_total


def test_smaller_box_wins_shared_cell():
    from yoloob.loss import _assign

    big = [0.0, 0.0, 64.0, 64.0]
    small = [28.0, 28.0, 36.0, 36.0]
    coarse = TOY[0]
    for order in ([big, small], [small, big]):
        a = _assign([np.array(order)], coarse, "positives")
        np.testing.assert_array_equal(a.gt_box[0, 1, 1], small)
        np.testing.assert_allclose(a.target[0, :, 1, 1], encode(small, coarse))


def test_invalid_boxes_dropped():
    b = valid_boxes(np.array([[0, 0, 0, 5], [10, 10, 20, 20], [500, 500, 510, 510.0]]), 416)
    np.testing.assert_array_equal(b, [[10, 10, 20, 20]])


def test_class_loss_switch():
    gts = [np.array([[5.0, 5, 40, 40]])]
    on, g_on = objectbox_loss(_heads(1, TOY), gts, TOY, class_loss=True)
    off, g_off = objectbox_loss(_heads(1, TOY), gts, TOY, class_loss=False)
    assert on.loss_cls == pytest.approx(3 * np.log(2))
    assert off.loss_cls == 0
    assert all(np.all(g[:, 5] == 0) for g in g_off)


def test_bad_arguments_rejected():
    with pytest.raises(ValueError):
        objectbox_loss(_heads(1, TOY), [np.zeros((0, 4))], TOY, box_cells="some")
    with pytest.raises(ValueError):
        objectbox_loss(_heads(2, TOY), [np.zeros((0, 4))], TOY)
    with pytest.raises(ValueError):
        LossWeights(box=-1.0)


def test_anchor_loss_gradcheck():
    from yoloob.arch import build_network

    g = build_network(head="anchor", input_size=64)
    anchors = g.anchors
    rng = np.random.default_rng(6)
    heads = [rng.standard_normal((1, 18, s.grid, s.grid)) * 0.5 for s in TOY]
    gts = [np.array([[8.0, 10.0, 30.0, 44.0], [40.0, 40.0, 50.0, 47.0]])]
    br, grads = anchor_loss(heads, gts, TOY, anchors)
    assert br.num_positives == 2
    for si, h in enumerate(heads):
        for ix in list(np.ndindex(h.shape))[::7]:
            old = h[ix]
            h[ix] = old + 1e-6
            fp = anchor_loss(heads, gts, TOY, anchors)[0].loss_total
            h[ix] = old - 1e-6
            fm = anchor_loss(heads, gts, TOY, anchors)[0].loss_total
            h[ix] = old
            num = (fp - fm) / 2e-6
            assert abs(num - grads[si][ix]) <= 1e-3 * max(abs(num), 1e-4)
