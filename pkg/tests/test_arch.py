import numpy as np
import pytest

from yoloob import tensor as T
from yoloob.arch import (Network, build_network, count_multiadds, count_params, head_channels,
                         summary_table)
from yoloob.tensor import ShapeError

# Frozen once from this implementation (seed 0, reduced preset, uniform input seed 0).
GOLDEN_HEAD_SUMS = (-72.10315726837143, -288.5012363124588, -1149.5867050735537)


@pytest.fixture(scope="module")
def full_graph():
    return build_network()


def test_full_taps_match_backbone_table(full_graph):
    g = full_graph
    assert g.tap_shape("F52") == (256, 52, 52)
    assert g.tap_shape("F26") == (512, 26, 26)
    assert g.tap_shape("F13") == (1024, 13, 13)
    assert g.tap_shape("SPP.concat") == (2048, 13, 13)
    assert g.tap_shape("SPP") == (1024, 13, 13)
    assert g.tap_shape("F'13") == (1024, 13, 13)
    assert g.tap_shape("F'26") == (512, 26, 26)
    assert g.tap_shape("F'52") == (256, 52, 52)
    for lvl, s in (("13", 13), ("26", 26), ("52", 52)):
        assert g.tap_shape(f"head{lvl}") == (6, s, s)


def test_first_layer_output(full_graph):
    first_conv = next(s for s in full_graph.layers if s.kind == "conv")
    assert full_graph.shapes()[first_conv.id] == (32, 416, 416)


def test_backbone_param_count_near_40_6m(full_graph):
    n = sum(c.params for c in count_params(full_graph).per_layer if c.name.startswith("backbone"))
    assert n == pytest.approx(40.6e6, rel=0.005)


@pytest.mark.parametrize("kw,params_m,madds_g", [
    (dict(), 78.01, 593.68),
    (dict(bispfpn_layers=2, head="anchor"), 105.23, 770.79),
    (dict(model="yolov3-baseline", head="anchor"), 61.52, 522.32),
])
def test_accounting_matches_reported_totals(kw, params_m, madds_g):
    g = build_network(**kw)
    assert count_params(g).params_m == pytest.approx(params_m, rel=0.02)
    assert count_multiadds(g, 16).multi_adds_g == pytest.approx(madds_g, rel=0.03)


def test_anchor_head_gap_is_small():
    ob = count_params(build_network()).learnable_params
    an = count_params(build_network(head="anchor")).learnable_params
    assert 0.01e6 < an - ob < 0.05e6


def test_multiadds_linear_in_batch(full_graph):
    assert count_multiadds(full_graph, 16).multi_adds == 16 * count_multiadds(full_graph, 1).multi_adds


def test_totals_equal_per_layer_sums(full_graph):
    r = count_multiadds(full_graph, 4)
    assert r.learnable_params == sum(c.params for c in r.per_layer)
    assert r.multi_adds == sum(c.multi_adds for c in r.per_layer)


def test_accounting_is_weight_independent():
    a, b = build_network(), build_network()
    assert a.signature() == b.signature()
    assert count_params(a).learnable_params == count_params(b).learnable_params


def test_network_params_agree_with_accounting():
    g = build_network(preset="reduced")
    net = Network(g, seed=0)
    assert sum(p.data.size for p in net.parameters()) == count_params(g).learnable_params


def test_bispfpn_stacking_rejected_below_one():
    with pytest.raises(ValueError):
        build_network(bispfpn_layers=0)


def test_bispfpn_two_layers_same_taps():
    g = build_network(bispfpn_layers=2)
    assert g.tap_shape("F'13") == (1024, 13, 13)
    assert g.tap_shape("F'26") == (512, 26, 26)
    assert g.tap_shape("F'52") == (256, 52, 52)
    assert count_params(g).learnable_params > count_params(build_network()).learnable_params


def test_head_kinds():
    assert head_channels("objectbox") == 6
    assert head_channels("anchor") == 18
    with pytest.raises(ValueError):
        head_channels("centernet")
    g = build_network(head="anchor")
    assert g.tap_shape("head13") == (18, 13, 13)
    assert g.tap_shape("head52") == (18, 52, 52)


def test_unknown_model_and_preset_rejected():
    with pytest.raises(ValueError):
        build_network(model="yolov4")
    with pytest.raises(ValueError):
        build_network(preset="tiny")


def test_summary_table_lists_taps(full_graph):
    text = summary_table(full_graph)
    assert text.splitlines()[0].split()[:3] == ["Layer", "Filter", "size"]
    assert "52x52x256" in text and "F52" in text
    assert "13x13x1024" in text and "F13" in text


# -------------------------------------------------------------- forward

@pytest.fixture(scope="module")
def reduced_net():
    return Network(build_network(preset="reduced"), seed=0)


def _img(n, size=128, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size), dtype=np.float32)


def test_full_forward_shapes():
    net = Network(build_network(), seed=0)
    heads, taps = net.forward(_img(1, 416), return_taps=True)
    assert [h.shape for h in heads] == [(1, 6, 13, 13), (1, 6, 26, 26), (1, 6, 52, 52)]
    assert taps["F52"].shape == (1, 256, 52, 52)
    assert taps["F26"].shape == (1, 512, 26, 26)
    assert taps["F13"].shape == (1, 1024, 13, 13)
    assert taps["SPP"].shape == (1, 1024, 13, 13)
    assert all(np.isfinite(h.data).all() for h in heads)


def test_reduced_forward_grids(reduced_net):
    heads = reduced_net.forward(_img(2))
    assert [h.shape for h in heads] == [(2, 6, 4, 4), (2, 6, 8, 8), (2, 6, 16, 16)]


def test_forward_rejects_wrong_input(reduced_net):
    with pytest.raises(ShapeError):
        reduced_net.forward(np.zeros((1, 3, 96, 96), np.float32))
    with pytest.raises(ShapeError):
        reduced_net.forward(np.zeros((3, 128, 128), np.float32))


def test_batch_invariance_eval(reduced_net):
    x = _img(2, seed=1)
    both = reduced_net.forward(x)
    for i in range(2):
        one = reduced_net.forward(x[i:i + 1])
        for a, b in zip(both, one):
            np.testing.assert_allclose(a.data[i:i + 1], b.data, rtol=1e-4, atol=1e-4)


def test_golden_head_sums(reduced_net):
    heads = reduced_net.forward(_img(1))
    got = tuple(float(h.data.astype(np.float64).sum()) for h in heads)
    np.testing.assert_allclose(got, GOLDEN_HEAD_SUMS, rtol=1e-4)
    again = reduced_net.forward(_img(1))
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(heads, again))


def test_zero_fusion_convs_zero_the_fused_taps():
    net = Network(build_network(preset="reduced"), seed=0)
    for name, p in net.params.items():
        if name.startswith("bispfpn") and name.endswith(".weight"):
            p.data[...] = 0
    _, taps = net.forward(_img(1), return_taps=True)
    for name in ("F'13", "F'26", "F'52"):
        assert np.all(taps[name].data == 0)


def test_zero_head_weights_emit_bias():
    net = Network(build_network(preset="reduced"), seed=0)
    bias = np.arange(6, dtype=np.float32)
    for lvl in ("13", "26", "52"):
        net.params[f"head.out{lvl}.weight"].data[...] = 0
        net.params[f"head.out{lvl}.bias"].data[...] = bias
    for h in net.forward(_img(1)):
        np.testing.assert_array_equal(h.data[0].reshape(6, -1), np.repeat(bias[:, None], h.shape[2] ** 2, 1))


def test_constant_input_spp_branches_equal_bottleneck():
    x = T.Tensor(np.full((1, 4, 13, 13), 2.5))
    for k in (5, 9, 13):
        np.testing.assert_array_equal(T.max_pool(x, k).data, x.data)


def test_training_step_gradients_reach_every_parameter():
    from yoloob.boxcodec import scales_for
    from yoloob.loss import objectbox_loss

    net = Network(build_network(preset="reduced"), seed=0)
    heads = net.forward(_img(2, seed=3), train=True)
    gts = [np.array([[20.0, 30.0, 60.0, 70.0]]), np.zeros((0, 4))]
    br, grads = objectbox_loss([h.data for h in heads], gts, scales_for(128))
    T.custom(br.loss_total, heads, grads).backward()
    missing = [n for n, p in net.params.items() if p.grad is None]
    assert not missing
