import numpy as np
import pytest

from contracts import shape_contract, wiring_oracles
from ditcod import functional as F
from ditcod.aggregation import AggConfig, BranchAggregator
from ditcod.backbone import BackboneConfig, EfficientSelfAttention, Encoder, StreamHead, stream_head
from ditcod.boundary import BoundaryGenerator, BoundaryHeads, boundary_level_head
from ditcod.dtit import CMSALayer, DtitConfig, DualTaskDecoder, PredictHead, TokenSeq, cmsa, decoder_variant
from ditcod.gradcheck import gradcheck
from ditcod.gradsuite import CHECKS, run_suite
from ditcod.model import CODNet, ModelConfig
from ditcod.tensor import ShapeError, Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


@pytest.mark.parametrize("name, ok, detail", shape_contract())
def test_shape_contract(name, ok, detail):
    assert ok, detail


@pytest.mark.parametrize("name, ok, detail", wiring_oracles())
def test_wiring_oracles(name, ok, detail):
    assert ok, detail


# -- backbone ---------------------------------------------------------------------


def test_pyramid_strides_on_64px():
    enc = Encoder(np.random.default_rng(0), BackboneConfig())
    pyr = enc(rand(np.random.default_rng(1), 1, 3, 64, 64))
    assert pyr.shapes == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4), (1, 128, 2, 2)]


def test_indivisible_image_rejected():
    enc = Encoder(np.random.default_rng(0), BackboneConfig())
    with pytest.raises(ShapeError, match="divisible by 32"):
        enc(Tensor(np.zeros((1, 3, 48, 40))))


@pytest.mark.parametrize(
    "kwargs",
    [dict(patch_strides=[4, 2, 2, 1]), dict(patch_kernels=[4, 3, 3, 3]), dict(heads=[3, 2, 4, 8])],
)
def test_backbone_config_validation(kwargs):
    with pytest.raises(ValueError):
        BackboneConfig(**kwargs)


def test_streams_with_different_seeds_differ():
    x = rand(np.random.default_rng(2), 1, 3, 64, 64)
    a = Encoder(np.random.default_rng(0), BackboneConfig())(x)
    b = Encoder(np.random.default_rng(1), BackboneConfig())(x)
    assert a.shapes == b.shapes
    assert not np.allclose(a[3].data, b[3].data)


def test_encoder_train_and_eval_agree():
    enc = Encoder(np.random.default_rng(0), BackboneConfig())
    x = rand(np.random.default_rng(3), 2, 3, 64, 64)
    a = enc.train()(x)
    b = enc.eval()(x)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.data, v.data)


def test_reduction_ratio_one_is_plain_attention():
    rng = np.random.default_rng(4)
    attn = EfficientSelfAttention(rng, 8, 2, 1)
    for p in attn.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    x = rng.standard_normal((1, 6, 8))
    out = attn(Tensor(x), (2, 3)).data

    def lin(m, z):
        return z @ m.weight.data + m.bias.data

    q, k, v = lin(attn.q, x), lin(attn.k, x), lin(attn.v, x)
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        logits = q[0, :, sl] @ k[0, :, sl].T / 2.0
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        heads.append((w / w.sum(axis=1, keepdims=True)) @ v[0, :, sl])
    expected = lin(attn.proj, np.concatenate(heads, axis=1))
    np.testing.assert_allclose(out[0], expected, atol=1e-12)


def test_reduced_attention_keeps_shape():
    rng = np.random.default_rng(5)
    x = rand(rng, 1, 16, 8)
    full = EfficientSelfAttention(rng, 8, 2, 1)(x, (4, 4))
    red = EfficientSelfAttention(rng, 8, 2, 2)
    assert red(x, (4, 4)).shape == full.shape
    assert red.last_weights.shape[-1] == 4


def test_single_stage_encoder_gradcheck():
    rng = np.random.default_rng(6)
    cfg = BackboneConfig(stage_channels=[4, 4, 4, 4], heads=[1, 1, 1, 1], mlp_ratio=2)
    enc = Encoder(rng, cfg)
    stage = enc.stage1
    for p in stage.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    x = Tensor(rng.standard_normal((1, 3, 32, 32)), requires_grad=True)
    r = rng.standard_normal(stage(x).shape)
    rep = gradcheck(lambda: (stage(x) * r).sum(), {"x": x, **dict(stage.named_parameters())}, max_coords=8, rng=rng)
    assert rep.passed, rep


def test_stream_head_shape_and_range():
    head = StreamHead(np.random.default_rng(0), 128, 32)
    out = stream_head(rand(np.random.default_rng(1), 1, 128, 2, 2), head, (64, 64))
    assert out.shape == (1, 1, 64, 64)
    assert np.all((out.data > 0) & (out.data < 1))
    with pytest.raises(ShapeError):
        stream_head(rand(np.random.default_rng(1), 1, 128, 2, 2), head, (32, 32))


# -- boundary features ------------------------------------------------------------


def test_boundary_level_shapes():
    rng = np.random.default_rng(0)
    cfg = BackboneConfig()
    gen = BoundaryGenerator(rng, cfg.stage_channels, 32)
    x = rand(rng, 1, 3, 64, 64)
    fo, fb = Encoder(rng, cfg)(x), Encoder(rng, cfg)(x)
    fe = gen(fo, fb)
    assert fe.shapes == [(1, 32, 16, 16), (1, 32, 8, 8), (1, 32, 4, 4), (1, 32, 2, 2)]
    maps = BoundaryHeads(rng, 32)(fe)
    assert [m.shape for m in maps] == [(1, 1, 64, 64)] * 4
    assert all(np.all((m.data > 0) & (m.data < 1)) for m in maps)
    boundary_level_head(fe[2], BoundaryHeads(rng, 32).level3, (64, 64))


def test_boundary_level_mismatch_rejected():
    rng = np.random.default_rng(0)
    gen = BoundaryGenerator(rng, [4] * 4, 4)
    with pytest.raises(ShapeError):
        gen.level1(rand(rng, 1, 4, 8, 8), rand(rng, 1, 4, 4, 4))


def test_difference_separates_certain_from_uncertain():
    # fo ~ 1 inside a disc, fb = 1 - fo, with a soft transition band
    yy, xx = np.mgrid[:32, :32]
    r = np.hypot(yy - 15.5, xx - 15.5)
    fo = 1.0 / (1.0 + np.exp((r - 9.0) * 2.0))
    gen = BoundaryGenerator(np.random.default_rng(0), [1] * 4, 1).use_identity()
    diff = np.abs(gen.level1(Tensor(fo[None, None]), Tensor((1.0 - fo)[None, None])).data[0, 0])
    band = np.abs(r - 9.0) < 0.75
    assert diff[band].max() < 0.7
    assert diff[r < 4].min() > 0.99 and diff[r > 14].min() > 0.99
    assert np.unravel_index(diff.argmin(), diff.shape) in set(zip(*np.nonzero(band)))


# -- aggregation -----------------------------------------------------------------


def test_aggregation_shapes_per_branch():
    rng = np.random.default_rng(0)
    obj = BranchAggregator(rng, [16, 32, 64, 128], AggConfig())
    bnd = BranchAggregator(rng, [32] * 4, AggConfig())
    fo = [rand(rng, 1, c, 16 >> i, 16 >> i) for i, c in enumerate([16, 32, 64, 128])]
    fe = [rand(rng, 1, 32, 16 >> i, 16 >> i) for i in range(4)]
    a, b = obj(fo), bnd(fe)
    assert a.shape == b.shape == (1, 32, 16, 16)


def test_non_nested_levels_rejected():
    rng = np.random.default_rng(0)
    agg = BranchAggregator(rng, [4] * 4, AggConfig(c_f=4, c_out=4))
    with pytest.raises(ShapeError, match="factor of 2"):
        agg([rand(rng, 1, 4, s, s) for s in (16, 8, 8, 2)])


# -- dual-task decoder ------------------------------------------------------------


def test_embed_zero_input_gives_bias():
    cfg = DtitConfig(layers=1, dim=8, heads=2, patch=2, mlp_ratio=2, head_channels=4)
    dec = DualTaskDecoder(np.random.default_rng(0), 3, (4, 4), cfg)
    dec.obj.pos.data[:] = 0.0
    dec.obj.embed.bias.data[:] = np.arange(8.0)
    z = dec.obj.embed_tokens(Tensor(np.zeros((1, 3, 8, 8))))
    assert z.tokens.shape == (1, 16, 8)
    np.testing.assert_array_equal(z.tokens.data, np.broadcast_to(np.arange(8.0), (1, 16, 8)))


def test_embed_rejects_indivisible_extent():
    cfg = DtitConfig(layers=1, dim=8, heads=2, patch=2, mlp_ratio=2, head_channels=4)
    dec = DualTaskDecoder(np.random.default_rng(0), 3, (4, 4), cfg)
    with pytest.raises(ShapeError):
        dec.obj.embed_tokens(Tensor(np.zeros((1, 3, 7, 8))))


def test_dtit_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        DtitConfig(dim=10, heads=4)


def _layer(seed, dim=8, heads=2):
    rng = np.random.default_rng(seed)
    layer = CMSALayer(rng, dim, heads, 2)
    for p in layer.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    return layer


def test_cmsa_symmetric_when_inputs_and_weights_match():
    layer = _layer(0)
    z = rand(np.random.default_rng(1), 1, 5, 8)
    a = cmsa(z, Tensor(z.data.copy()), layer).data
    b = cmsa(Tensor(z.data.copy()), z, layer).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_cmsa_uniform_attention_closed_form():
    layer = _layer(2)
    layer.q.weight.data[:] = 0.0
    rng = np.random.default_rng(3)
    zo, ze = rng.standard_normal((1, 5, 8)), rng.standard_normal((1, 5, 8))
    out = cmsa(Tensor(zo), Tensor(ze), layer).data
    ln = lambda z: layer.norm1(Tensor(z)).data  # noqa: E731
    v = np.concatenate([ln(zo), ln(ze)], axis=1) @ layer.v.weight.data
    expected = v.mean(axis=1, keepdims=True) @ layer.proj.weight.data + layer.proj.bias.data
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)
    np.testing.assert_allclose(layer.last_weights.data, 0.1, atol=1e-15)


def test_cmsa_permutation_covariance():
    layer = _layer(4)
    rng = np.random.default_rng(5)
    zo, ze = rng.standard_normal((1, 6, 8)), rng.standard_normal((1, 6, 8))
    perm = rng.permutation(6)
    out = cmsa(Tensor(zo), Tensor(ze), layer).data
    out_p = cmsa(Tensor(zo[:, perm]), Tensor(ze[:, perm]), layer).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_cmsa_shape_mismatch():
    layer = _layer(0)
    with pytest.raises(ShapeError):
        cmsa(rand(np.random.default_rng(0), 1, 5, 8), rand(np.random.default_rng(0), 1, 4, 8), layer)


def test_predict_head_desk_resolution():
    head = PredictHead(np.random.default_rng(0), 64, 64, 8)
    out = head(TokenSeq(rand(np.random.default_rng(1), 1, 64, 64), (8, 8)))
    assert out.shape == (1, 1, 64, 64)
    assert np.all((out.data > 0) & (out.data < 1))
    with pytest.raises(ShapeError):
        TokenSeq(rand(np.random.default_rng(1), 1, 60, 64), (8, 8))


@pytest.mark.parametrize("mode, kv", [("DTIT", 128), ("LateFuse", 64), ("EarlyFuse", 64)])
def test_decoder_modes(mode, kv):
    rng = np.random.default_rng(0)
    dec = DualTaskDecoder(rng, 32, (8, 8), DtitConfig.desk(), mode)
    fo, fe = rand(rng, 1, 32, 16, 16), rand(rng, 1, 32, 16, 16)
    s_obj, s_bnd = decoder_variant(mode, fo, fe, dec)
    assert s_obj.shape == (1, 1, 64, 64)
    assert (s_bnd is None) == (mode == "EarlyFuse")
    assert dec.kv_length() == kv


def test_unknown_decoder_mode():
    with pytest.raises(ValueError, match="unknown decoder mode"):
        DualTaskDecoder(np.random.default_rng(0), 4, (2, 2), DtitConfig.desk(), "Sideways")


def test_late_fuse_branches_match_plain_stacks():
    rng = np.random.default_rng(1)
    cfg = DtitConfig(layers=2, dim=8, heads=2, patch=2, mlp_ratio=2, head_channels=4)
    dec = DualTaskDecoder(rng, 3, (2, 2), cfg, "LateFuse")
    fo, fe = rand(rng, 1, 3, 4, 4), rand(rng, 1, 3, 4, 4)
    _, s_bnd = dec(fo, fe)
    # boundary path alone: embed -> own-only layers -> head
    t = dec.bnd.embed_tokens(fe).tokens
    for i in range(2):
        t = dec.bnd.layer(i)(t)
    expected = dec.bnd.head(TokenSeq(t, (2, 2)))
    np.testing.assert_array_equal(s_bnd.data, expected.data)


def test_early_fuse_parameter_difference():
    rng = np.random.default_rng(0)
    cfg = DtitConfig.desk()
    dtit = DualTaskDecoder(rng, 32, (8, 8), cfg, "DTIT")
    early = DualTaskDecoder(rng, 32, (8, 8), cfg, "EarlyFuse")
    extra_embed = cfg.patch**2 * 32 * cfg.dim  # EarlyFuse embeds 2*C_F channels
    assert dtit.num_parameters() - early.num_parameters() == dtit.bnd.num_parameters() - extra_embed


# -- full model ------------------------------------------------------------------


def test_state_dict_names_are_stable():
    names = set(CODNet(ModelConfig.desk()).state_dict())
    for prefix in (
        "fg.stage1.", "bg.stage4.", "bnd.level1.a.", "bnd.level4.c.", "agg.obj.enh.level1.",
        "agg.bnd.agg.level3.", "agg.obj.fuse.level1.", "dtit.obj.layer1.", "dtit.bnd.layer2.",
        "dtit.obj.embed.",
    ):
        assert any(n.startswith(prefix) for n in names), prefix
    assert "dtit.obj.pos" in names and "dtit.bnd.pos" in names


def test_boundary_encoding_variant_has_no_background_stream():
    model = CODNet(ModelConfig.desk(boundary_variant="BoundaryEncoding"))
    out = model.predict(Tensor(np.random.default_rng(0).random((1, 3, 64, 64))))
    assert out.bg is None and out.bnd.shape == (1, 1, 64, 64)
    assert not any(n.startswith("bg.") for n in model.state_dict())


def test_model_forward_is_deterministic():
    x = Tensor(np.random.default_rng(0).random((2, 3, 64, 64)))
    a = CODNet(ModelConfig.desk(), seed=3).predict(x)
    b = CODNet(ModelConfig.desk(), seed=3).predict(x)
    np.testing.assert_array_equal(a.obj.data, b.obj.data)
    np.testing.assert_array_equal(a.bnd.data, b.bnd.data)


def test_model_rejects_wrong_size():
    with pytest.raises(ShapeError):
        CODNet(ModelConfig.desk()).predict(Tensor(np.zeros((1, 3, 32, 32))))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=48)
    with pytest.raises(ValueError):
        ModelConfig(decoder_variant="Nope")


def test_model_config_round_trip():
    cfg = ModelConfig.paper(decoder_variant="LateFuse")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.dtit.layers == 6 and cfg.dtit.dim == 768 and cfg.dtit.heads == 12 and cfg.dtit.patch == 2


# -- gradient suite ----------------------------------------------------------------


def test_suite_covers_required_composites():
    for name in ("bconv", "backbone_block", "boundary_level", "enhance_aggregate_fuse", "dtit_layer",
                 "dtit_decoder", "predict_head", "ppa_loss", "bce_loss"):
        assert name in CHECKS


@pytest.mark.parametrize("name", ["matmul", "dtit_layer", "enhance_aggregate_fuse"])
def test_suite_checks_pass(name):
    results = run_suite(seeds=(0,), names=[name])
    assert all(r.passed for r in results), [str(r) for r in results]


def test_kink_guard_redraws_near_zero_relu_inputs(monkeypatch):
    import ditcod.gradsuite as gs

    calls = []

    def build(rng):
        calls.append(1)
        # first draw sits exactly on the kink, the second does not
        x = Tensor(np.array([0.0 if len(calls) == 1 else 0.5]), requires_grad=True)
        return (lambda: F.relu(x).sum()), {"x": x}

    monkeypatch.setitem(gs.CHECKS, "kinky", build)
    (fn, inputs), redraws = gs._build("kinky", np.random.default_rng(0))
    assert redraws == 1 and inputs["x"].data[0] == 0.5
