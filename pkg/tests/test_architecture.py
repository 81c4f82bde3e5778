import numpy as np
import pytest

from fndetect.assign import GroundTruthBoxes, detection_loss
from fndetect.cost import graph_cost
from fndetect.errors import ConfigError, DimensionError, ParseError
from fndetect.layers import PSA, SPPF, ConvBN, CSPStage, FasterNetBlock, RepConv, partial_channels
from fndetect.model import ABLATIONS, Detector, GraphConfig, Neck, ablation_config, anchor_grid
from fndetect.ops import count_ops, maxpool2d
from fndetect.tensor import Tensor, no_grad, parameter

from oracles import maxpool_loops


def randomize_bn(model, seed=0):
    """Give every batchnorm non-trivial running statistics and affine terms."""
    rng = np.random.default_rng(seed)
    for name, bn, attr in model.named_buffers():
        v = getattr(bn, attr)
        setattr(bn, attr, rng.uniform(0.5, 1.5, v.shape) if attr == "running_var" else rng.normal(0, 0.1, v.shape))
    for name, p in model.named_parameters():
        if name.endswith("gamma"):
            p.data[:] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("beta"):
            p.data[:] = rng.normal(0, 0.1, p.shape)


# -- config -----------------------------------------------------------------

def test_config_text_roundtrip(tmp_path):
    cfg = GraphConfig(stage_widths=(8, 16, 32, 64), neck="pan", block="c2f", use_p2=False)
    path = tmp_path / "cfg.txt"
    cfg.save(path)
    assert GraphConfig.load(path) == cfg


def test_config_parses_fraction_and_comments():
    cfg = GraphConfig.from_text("# desk\npconv_ratio = 1/2\nuse_psa=false\n")
    assert cfg.pconv_ratio == 0.5 and cfg.use_psa is False


def test_config_parse_error_has_line():
    with pytest.raises(ParseError) as exc:
        GraphConfig.from_text("neck=bifpn\nstage_widths=a,b\n", "x.txt")
    assert exc.value.line == 2
    with pytest.raises(ParseError):
        GraphConfig.from_text("nonsense\n")
    with pytest.raises(ParseError):
        GraphConfig.from_text("colour=red\n")


@pytest.mark.parametrize("kw", [
    dict(pconv_ratio=0.3),
    dict(stage_widths=(32, 16, 64, 128)),
    dict(input_size=(60, 64)),
    dict(strides=(2, 4, 8, 16)),
    dict(neck="fpn"),
    dict(fusion="weighted", neck="pan"),
])
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        GraphConfig(**kw)


def test_partial_channels():
    assert partial_channels(64, 0.25) == 16
    with pytest.raises(ConfigError):
        partial_channels(6, 0.25)


def test_unknown_ablation():
    with pytest.raises(ConfigError):
        ablation_config("m9")


# -- blocks -------------------------------------------------------------------

def test_fasternet_block_zero_pw2_is_identity():
    block = FasterNetBlock(16, rng=np.random.default_rng(0))
    block.pw2.weight.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(2, 16, 5, 5))
    out = block(x)
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("c,ratio", [(8, 0.25), (16, 0.5), (12, 0.25), (4, 1.0)])
def test_fasternet_block_shape_and_flops(c, ratio):
    block = FasterNetBlock(c, ratio, rng=np.random.default_rng(c))
    x = np.random.default_rng(2).normal(size=(1, c, 6, 6))
    with count_ops() as counter:
        out = block(x)
    assert out.shape == x.shape
    specs = block.plan("b", 6, 6)[0]
    assert counter.macs == graph_cost(specs).flops
    assert graph_cost(specs).params == block.num_params()


def test_fasternet_block_rejects_fractional_cp():
    with pytest.raises(ConfigError):
        FasterNetBlock(6, 0.25)


def test_backbone_taps():
    model = Detector(GraphConfig())
    taps = model.backbone(np.zeros((1, 3, 64, 64)))
    assert [t.shape for t in taps] == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4), (1, 128, 2, 2)]
    specs = model.backbone.plan("backbone.", 64, 64)[0]
    assert graph_cost(specs).params == model.backbone.num_params()


def test_sppf_constant_and_shape():
    sppf = SPPF(4, rng=np.random.default_rng(0))
    x = np.full((1, 4, 6, 6), 2.5)
    for f in sppf.pooled(x):
        np.testing.assert_array_equal(f.data, x)
    assert sppf(np.random.default_rng(1).normal(size=(2, 4, 7, 5))).shape == (2, 4, 7, 5)


def test_sppf_serial_pools_equal_direct_9_and_13():
    sppf = SPPF(3, 5)
    x = np.random.default_rng(3).normal(size=(2, 3, 11, 9))
    _, p1, p2, p3 = sppf.pooled(x)
    np.testing.assert_array_equal(p1.data, maxpool_loops(x, 5, 1, 2))
    np.testing.assert_array_equal(p2.data, maxpool_loops(x, 9, 1, 4))
    np.testing.assert_array_equal(p3.data, maxpool_loops(x, 13, 1, 6))
    np.testing.assert_array_equal(p3.data, maxpool2d(x, 13, 1, 6).data)


def test_psa_shape_and_softmax_rows():
    psa = PSA(16, rng=np.random.default_rng(0))
    out = psa(np.random.default_rng(1).normal(size=(2, 16, 4, 3)))
    assert out.shape == (2, 16, 4, 3)
    assert psa.last_attention.shape == (2, 12, 12)
    np.testing.assert_allclose(psa.last_attention.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_psa_single_position_reduces_to_value_chain():
    psa = PSA(8, rng=np.random.default_rng(2))
    b = Tensor(np.random.default_rng(3).normal(size=(1, 4, 1, 1)))
    attended = psa.attend(b)
    np.testing.assert_array_equal(psa.last_attention, np.ones((1, 1, 1)))
    np.testing.assert_allclose(attended.data, psa.proj(psa.v(b)).data, rtol=0, atol=1e-15)


def test_psa_rejects_odd_channels():
    with pytest.raises(ConfigError):
        PSA(7)


def test_cspstage_zero_blocks_is_split_concat_fuse():
    csp = CSPStage(6, 8, 0, rng=np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(1, 6, 4, 4)))
    from fndetect.ops import concat_channels

    expected = csp.conv3(concat_channels([csp.conv1(x), csp.conv2(x)]))
    np.testing.assert_array_equal(csp(x).data, expected.data)


@pytest.mark.parametrize("n_blocks", [0, 1, 3])
def test_cspstage_shape_and_params(n_blocks):
    csp = CSPStage(12, 8, n_blocks, rng=np.random.default_rng(n_blocks))
    out = csp(np.random.default_rng(4).normal(size=(2, 12, 5, 5)))
    assert out.shape == (2, 8, 5, 5)
    assert graph_cost(csp.plan("c", 5, 5)[0]).params == csp.num_params()


def test_cspstage_rejects_odd_split():
    with pytest.raises(ConfigError):
        CSPStage(8, 7)


# -- fusion -----------------------------------------------------------------

def test_repconv_fusion_preserves_output():
    rep = RepConv(6, 6, rng=np.random.default_rng(0))
    randomize_bn(rep, 1)
    rep.eval()
    x = np.random.default_rng(2).normal(size=(2, 6, 7, 5))
    ref = rep(x).data
    rep.fuse()
    got = rep(x).data
    assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.abs(ref).max())


def test_convbn_fusion_preserves_output():
    cb = ConvBN(4, 6, 3, 2, rng=np.random.default_rng(3))
    randomize_bn(cb, 4)
    cb.eval()
    x = np.random.default_rng(5).normal(size=(1, 4, 9, 9))
    ref = cb(x).data
    got = cb.fuse()(x).data
    assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.abs(ref).max())


def test_full_model_fusion_preserves_output():
    model = Detector(GraphConfig(), seed=3)
    randomize_bn(model, 6)
    model.eval()
    x = np.random.default_rng(7).uniform(size=(2, 3, 64, 64))
    with no_grad():
        ref = model(x)
        fused = model.fuse()(x)
    for branch in ("o2o", "o2m"):
        for (c0, b0), (c1, b1) in zip(ref.branch(branch), fused.branch(branch)):
            for a, b in ((c0.data, c1.data), (b0.data, b1.data)):
                assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, np.abs(a).max())


# -- neck ---------------------------------------------------------------------

@pytest.mark.parametrize("name", list(ABLATIONS))
def test_neck_pyramid_shapes(name):
    cfg = ablation_config(name)
    model = Detector(cfg).eval()
    with no_grad():
        pyramid = model.features(np.zeros((1, 3, 64, 64)))
    expected = [(1, cfg.stage_widths[l], 64 // s, 64 // s) for l, s in zip(cfg.levels, cfg.active_strides)]
    assert [p.shape for p in pyramid] == expected
    assert all(np.all(np.isfinite(p.data)) for p in pyramid)


def test_bifpn_nodes_have_two_inputs_and_same_level_taps():
    cfg = GraphConfig()
    nodes = Neck.topology(cfg)
    top, bottom = cfg.levels[-1], cfg.levels[0]
    for node in nodes:
        assert len(node.inputs) >= 2, node
        if node.name.startswith("td"):
            assert f"in{node.level}" in node.inputs
        elif node.level not in (top, bottom):
            assert f"in{node.level}" in node.inputs
            assert f"td{node.level}" in node.inputs
    assert {n.name for n in nodes} == {"td2", "td1", "td0", "out1", "out2", "out3"}


def test_pan_keeps_single_input_nodes():
    nodes = Neck.topology(GraphConfig(neck="pan"))
    singles = [n.name for n in nodes if len(n.inputs) == 1]
    assert singles == ["td3", "out0"]


def test_bifpn_has_fewer_params_than_pan():
    pan = Detector(ablation_config("m4_p2")).num_params()
    bifpn = Detector(ablation_config("m5_bifpn_paths")).num_params()
    assert bifpn < pan


# -- heads / whole graph --------------------------------------------------------

def test_desk_forward_four_scales_340_anchors():
    model = Detector(GraphConfig()).eval()
    with no_grad():
        heads = model(np.zeros((1, 3, 64, 64)))
    assert heads.strides == (4, 8, 16, 32)
    for branch in ("o2o", "o2m"):
        pairs = heads.branch(branch)
        assert [c.shape for c, _ in pairs] == [(1, 1, 16, 16), (1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2)]
        assert [b.shape for _, b in pairs] == [(1, 4, 16, 16), (1, 4, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2)]
        assert sum(c.shape[2] * c.shape[3] for c, _ in pairs) == 340
    points, strides = anchor_grid(heads.strides, 64, 64)
    assert len(points) == 340
    np.testing.assert_array_equal(points[0], [2.0, 2.0])
    np.testing.assert_array_equal(points[-1], [48.0, 48.0])


def test_multiclass_head_shapes():
    model = Detector(GraphConfig(num_classes=3)).eval()
    with no_grad():
        heads = model.predict(np.zeros((2, 3, 64, 64)))
    assert heads.o2m is None
    assert [c.shape for c, _ in heads.o2o] == [(2, 3, 16, 16), (2, 3, 8, 8), (2, 3, 4, 4), (2, 3, 2, 2)]


def test_heads_share_structure():
    model = Detector(GraphConfig())
    o2m = sum(h.num_params() for h in model.heads_o2m)
    o2o = sum(h.num_params() for h in model.heads_o2o)
    assert o2m == o2o > 0
    assert [p.shape for h in model.heads_o2m for p in h.parameters()] == \
           [p.shape for h in model.heads_o2o for p in h.parameters()]


def test_total_params_match_ledger():
    model = Detector(GraphConfig())
    assert model.num_params() == graph_cost(model.cfg).params == 708200


def test_dropping_one_to_many_leaves_inference_bit_identical():
    model = Detector(GraphConfig(), seed=5)
    randomize_bn(model, 5)
    model.eval()
    x = np.random.default_rng(6).uniform(size=(2, 3, 64, 64))
    with no_grad():
        full = model(x).branch("o2o")
        model.drop_o2m()
        deployed = model.predict(x).branch("o2o")
    for (c0, b0), (c1, b1) in zip(full, deployed):
        assert c0.data.tobytes() == c1.data.tobytes()
        assert b0.data.tobytes() == b1.data.tobytes()


def test_rejects_bad_input():
    model = Detector(GraphConfig())
    with pytest.raises(DimensionError):
        model(np.zeros((1, 1, 64, 64)))
    with pytest.raises(DimensionError):
        model(np.zeros((1, 3, 48, 64)))


def test_forward_backward_finite_for_100_seeds():
    targets = [GroundTruthBoxes([[6, 6, 30, 40]], [0])]
    for seed in range(100):
        model = Detector(GraphConfig(), seed=seed)
        x = Tensor(np.random.default_rng(seed).uniform(size=(1, 3, 64, 64)))
        loss, _ = detection_loss(model(x), targets)
        loss.backward()
        assert np.isfinite(loss.item())
        assert all(np.all(np.isfinite(p.grad)) for p in model.parameters() if p.grad is not None)
