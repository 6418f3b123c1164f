import numpy as np
import pytest

from npusr import builders, graph as G, ops, reparam
from npusr.errors import FusionError
from npusr.graph import Graph
from npusr.ops import NONE, RELU, ConvSpec, conv2d
from npusr.tensor import TensorF32

from cases import CASES, EXACT_PASSES, probe, spec
from conftest import rand_tensor


def rel_div(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12))


def inputs(rng, n=6, c=3):
    return [probe(rng, i, c=c) for i in range(n)]


# -- spec algebra -------------------------------------------------------------------


def test_conv_then_identity_1x1(rng):
    c1 = spec(rng, 3, 3, 4)
    f = reparam.fuse_conv_then_1x1(c1, ConvSpec(np.eye(4).reshape(4, 1, 1, 4)))
    np.testing.assert_allclose(f.weights, c1.weights, atol=1e-7)
    np.testing.assert_allclose(f.bias, c1.bias, atol=1e-7)


def test_conv_then_1x1_scalar_algebra(rng):
    k = rng.normal(size=(1, 3, 3, 1))
    f = reparam.fuse_conv_then_1x1(ConvSpec(k, [0.25]), ConvSpec(np.full((1, 1, 1, 1), 2.0), [1.0]))
    np.testing.assert_allclose(f.weights, (2 * k).astype(np.float32))
    assert f.bias[0] == pytest.approx(1.5)


def test_conv_then_1x1_equivalence(rng):
    c1, c2 = spec(rng, 5, 3, 6), spec(rng, 1, 6, 4, RELU)
    f = reparam.fuse_conv_then_1x1(c1, c2)
    for x in inputs(rng, 50):
        assert rel_div(conv2d(conv2d(x, c1), c2).data, conv2d(x, f).data) <= 1e-4


def test_fusions_refuse_nonlinear_first(rng):
    with pytest.raises(FusionError):
        reparam.fuse_conv_then_1x1(spec(rng, 3, 3, 4, RELU), spec(rng, 1, 4, 2))
    with pytest.raises(FusionError):
        reparam.fuse_1x1_then_conv(spec(rng, 1, 3, 4, RELU, bias=False), spec(rng, 3, 4, 2))


def test_1x1_then_conv_identity_and_equivalence(rng):
    c2 = spec(rng, 3, 4, 5)
    f = reparam.fuse_1x1_then_conv(ConvSpec(np.eye(4).reshape(4, 1, 1, 4)), c2)
    np.testing.assert_allclose(f.weights, c2.weights, atol=1e-7)
    c1 = spec(rng, 1, 3, 4, bias=False)
    f = reparam.fuse_1x1_then_conv(c1, c2)
    for x in inputs(rng, 20):
        assert rel_div(conv2d(conv2d(x, c1), c2).data, conv2d(x, f).data) <= 1e-4


def test_1x1_then_conv_refuses_bias_at_borders(rng):
    with pytest.raises(FusionError, match="border"):
        reparam.fuse_1x1_then_conv(spec(rng, 1, 3, 4), spec(rng, 3, 4, 5))
    # the refusal is warranted: a folded bias would be wrong on the frame edge
    c1, c2 = spec(rng, 1, 3, 4), spec(rng, 3, 4, 5)
    w = np.einsum("ouvm,mi->ouvi", c2.weights, c1.weights[:, 0, 0, :])
    b = c2.bias + c2.weights.sum(axis=(1, 2)) @ c1.bias
    naive = ConvSpec(w, b)
    x = rand_tensor(rng, 6, 6, 3)
    d = np.abs(conv2d(conv2d(x, c1), c2).data - conv2d(x, naive).data)
    assert d[2:-2, 2:-2].max() < 1e-3 and d[0].max() > 1e-2


def test_1x1_then_1x1_folds_bias(rng):
    c1, c2 = spec(rng, 1, 3, 4), spec(rng, 1, 4, 2)
    f = reparam.fuse_1x1_then_conv(c1, c2)
    x = rand_tensor(rng, 5, 5, 3)
    assert rel_div(conv2d(conv2d(x, c1), c2).data, conv2d(x, f).data) <= 1e-5


def test_merge_identical_branches(rng):
    s = spec(rng, 3, 3, 4)
    m = reparam.merge_parallel_branches([s, s])
    np.testing.assert_allclose(m.weights, 2 * s.weights, rtol=1e-6)
    np.testing.assert_allclose(m.bias, 2 * s.bias, rtol=1e-6)


def test_merge_pads_1x1_to_centre(rng):
    a, b = spec(rng, 3, 2, 2, bias=False), spec(rng, 1, 2, 2, bias=False)
    m = reparam.merge_parallel_branches([a, b])
    expect = a.weights.astype(np.float64).copy()
    expect[:, 1, 1, :] += b.weights[:, 0, 0, :]
    np.testing.assert_allclose(m.weights, expect, rtol=1e-6)


def test_merge_three_branches_equivalence(rng):
    specs = [spec(rng, k, 3, 4) for k in (1, 3, 5)]
    m = reparam.merge_parallel_branches(specs)
    for x in inputs(rng, 10):
        ref = sum(conv2d(x, s).data.astype(np.float64) for s in specs)
        assert rel_div(ref, conv2d(x, m).data) <= 1e-4


def test_merge_channel_mismatch(rng):
    with pytest.raises(FusionError):
        reparam.merge_parallel_branches([spec(rng, 3, 3, 4), spec(rng, 3, 3, 5)])


def test_skip_to_identity(rng):
    zero = ConvSpec(np.zeros((3, 3, 3, 3)))
    ident = reparam.skip_to_identity_conv(zero)
    x = rand_tensor(rng, 5, 4, 3)
    np.testing.assert_array_equal(conv2d(x, ident).data, x.data)
    c = spec(rng, 3, 3, 3)
    f = reparam.skip_to_identity_conv(c)
    for x in inputs(rng, 10):
        assert rel_div(conv2d(x, c).data + x.data, conv2d(x, f).data) <= 1e-4
    with pytest.raises(FusionError):
        reparam.skip_to_identity_conv(spec(rng, 3, 3, 4))


def test_anchor_conv_weights_and_pixel(rng):
    s = reparam.anchor_to_conv(9)
    np.testing.assert_array_equal(s.weights[:, 0, 0, :], np.vstack([np.eye(3)] * 9))
    assert not s.bias.any()
    px = TensorF32(np.array([[[10.0, 20.0, 30.0]]], np.float32))
    np.testing.assert_array_equal(conv2d(px, s).data.ravel(), [10, 20, 30] * 9)
    x = TensorF32(rng.integers(0, 256, (6, 7, 3)).astype(np.float32))
    np.testing.assert_array_equal(ops.depth_to_space(conv2d(x, s), 3).data, ops.resize_nearest(x, 3).data)
    with pytest.raises(FusionError):
        reparam.anchor_to_conv(8)


# -- graph passes -------------------------------------------------------------------


def test_reorder_clip_swaps_and_is_exact(rng):
    g = CASES["reorder_clip_before_d2s"](rng)
    h = reparam.reorder_clip_before_d2s(g)
    assert h[h.output_id].op == "depth_to_space"
    assert h[h[h.output_id].inputs[0]].op == "clip"
    for x in inputs(rng):
        np.testing.assert_array_equal(G.execute(g, x).data, G.execute(h, x).data)


def test_reorder_clip_noop_without_pattern():
    g = builders.build_abpn()
    h, ids = reparam.PASSES["reorder_clip_before_d2s"](g)
    assert ids == [] and G.graphs_equal(g, h)


def test_concat_conv_split_weights_reassemble(rng):
    g = CASES["concat_conv_to_sum"](rng)
    h = reparam.concat_conv_to_sum(g)
    parts = sorted((n for n in h.convs() if ".part" in n.id), key=lambda n: n.id)
    w = np.concatenate([p.spec.weights for p in parts], axis=3)
    np.testing.assert_array_equal(w, g["mix"].spec.weights)
    assert "cat" not in h


def test_concat_conv_bias_counted_once(rng):
    c = 3
    nodes = (
        G.conv("f0", "input", ConvSpec(np.zeros((c, 3, 3, 3)))),
        G.concat("cat", "input", "f0"),
        G.conv("mix", "cat", spec(rng, 1, 3 + c, 3)),
    )
    g = Graph(nodes, "mix", scale=1)
    h = reparam.concat_conv_to_sum(g)
    y = G.execute(h, TensorF32.zeros(4, 4, 3)).data
    np.testing.assert_array_equal(y, np.broadcast_to(g["mix"].spec.bias, y.shape))


def test_concat_conv_noop_without_pattern():
    g = builders.build_abpn()
    assert reparam.PASSES["concat_conv_to_sum"](g)[1] == []


@pytest.mark.parametrize("name", sorted(CASES))
def test_pass_equivalence_sample(rng, name):
    for i in range(25):
        g = CASES[name](rng)
        h, ids = reparam.PASSES[name](g)
        assert ids, f"{name} did not fire on case {i}"
        G.validate(h)
        x = probe(rng, i)
        a, b = G.execute(g, x).data, G.execute(h, x).data
        if name in EXACT_PASSES:
            np.testing.assert_array_equal(a, b)
        else:
            assert rel_div(a, b) <= 1e-4


def test_clb_chain_collapses_to_single_3x3(rng):
    cin, mid, cout = 3, 12, 5
    nodes = (
        G.conv("expand", "input", spec(rng, 1, cin, mid, bias=False)),
        G.conv("k3", "expand", spec(rng, 3, mid, mid)),
        G.conv("project", "k3", spec(rng, 1, mid, cout)),
        G.conv("out", "project", spec(rng, 3, cout, 3, RELU)),
    )
    g = Graph(nodes, "out", scale=1)
    h, report = reparam.collapse_graph(g)
    assert [n.op for n in h.topo_order()] == ["conv2d", "conv2d"]
    assert h["project"].spec.kernel == 3
    assert h["project"].spec.in_channels == cin and h["project"].spec.out_channels == cout
    assert report.max_rel_divergence <= 1e-4


@pytest.mark.parametrize("arch", sorted(builders.BUILDERS))
def test_collapse_builders(arch):
    g = builders.BUILDERS[arch](seed=11)
    h, report = reparam.collapse_graph(g)
    assert report.node_count_after <= report.node_count_before
    assert report.max_rel_divergence <= 1e-4
    assert not [n for n in h.nodes if n.op == "input_repeat"]
    again, r2 = reparam.collapse_graph(h)
    assert G.graphs_equal(h, again) and r2.passes_applied == []


def test_collapse_abpn_only_anchor_rewrite():
    g = builders.build_abpn()
    h, report = reparam.collapse_graph(g)
    assert [p for p, _ in report.passes_applied] == ["anchor_to_conv"]
    assert len(h) == len(g)
    assert report.unfused == ["residual"]
    for n in g.nodes:
        if n.op != "input_repeat":
            assert n.same_as(h[n.id])


def test_collapse_training_forms_shrink():
    for g in (builders.build_scsrn_training(seed=2), builders.build_clb_net(seed=2)):
        h, report = reparam.collapse_graph(g)
        assert report.node_count_after < report.node_count_before
        assert report.max_rel_divergence <= 1e-4
        assert not [n for n in h.nodes if n.op == "add"]


def test_scsrn_training_collapses_to_inference_topology(rng):
    t = builders.build_scsrn_training(seed=4)
    h, _ = reparam.collapse_graph(t)
    inf = builders.build_scsrn_inference(seed=4)
    assert sorted(n.id for n in h.nodes) == sorted(n.id for n in inf.nodes)
    for n in inf.nodes:
        assert h[n.id].op == n.op and h[n.id].inputs == n.inputs


def test_block_soup_strictly_reduced(rng):
    for _ in range(10):
        nodes = [G.conv("stem", "input", spec(rng, 3, 3, 4, RELU))]
        prev = "stem"
        for j in range(3):
            kind = rng.integers(3)
            if kind == 0:
                nodes += [G.conv(f"p{j}", prev, spec(rng, 3, 4, 6)), G.conv(f"b{j}", f"p{j}", spec(rng, 1, 6, 4, RELU))]
            elif kind == 1:
                nodes += [G.conv(f"x{j}", prev, spec(rng, 3, 4, 4)), G.conv(f"y{j}", prev, spec(rng, 1, 4, 4)),
                          G.add(f"b{j}", f"x{j}", f"y{j}", RELU)]
            else:
                nodes += [G.conv(f"x{j}", prev, spec(rng, 3, 4, 4)), G.add(f"b{j}", f"x{j}", prev, RELU)]
            prev = f"b{j}"
        nodes.append(G.conv("out", prev, spec(rng, 3, 4, 3)))
        g = Graph(tuple(nodes), "out", scale=1)
        h, report = reparam.collapse_graph(g)
        assert len(h) < len(g)
        assert report.max_rel_divergence <= 1e-4
        assert len(h.convs()) == 5


def test_report_serialises():
    _, report = reparam.collapse_graph(builders.build_clb_net(seed=1))
    d = report.to_dict()
    assert d["passes_applied"] and {"pass", "nodes"} <= set(d["passes_applied"][0])
    assert '"node_count_before"' in report.to_json()
