from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvt import tensor as T
from mmvt.model import (
    CheckpointError,
    GeometryError,
    MMModel,
    ModelConfig,
    adapt_rgb_kernel,
    aggregate,
    cross_view_attend,
    embed_view,
    encode_views,
    extract_tubelets,
    factorised_block,
    forward,
    init_params,
    load_checkpoint,
    multihead_attention,
    param_count,
    save_checkpoint,
    self_attention,
    tiny_config,
    tubelet_tokenize,
)
from mmvt.model_spec import parse_model_spec, token_geometry
from oracles import param_count_closed_form, single_head_cross_attention, tubelets_loops


def t64(x, grad=False):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def randomized(m, rng, sd=0.3):
    """Same model with every parameter jittered, so zero-initialised parts do real work."""
    params = OrderedDict((k, T.Tensor(v.data + rng.normal(0, sd, v.shape).astype(v.dtype), requires_grad=True))
                         for k, v in m.params.items())
    return replace(m, params=params)


def tiny(spec="Ti/2:R+Ti/4:F", dtype=np.float64, **kw):
    args = dict(hidden=16, layers=2, heads=2, frames=4, resolution=(32, 32), n_verbs=5, n_nouns=7)
    args.update(kw)
    return init_params(tiny_config(spec, **args), 0, dtype=dtype)


def random_inputs(cfg, rng, batch=None):
    lead = () if batch is None else (batch,)
    return [rng.uniform(-1, 1, lead + cfg.input_dims(i)) for i in range(len(cfg.spec.views))]


# ------------------------------------------------------------- tubelets


def test_tubelets_match_loop_oracle(rng):
    x = rng.uniform(-1, 1, (4, 32, 32, 3))
    kernel, bias = rng.normal(size=(8, 2 * 16 * 16 * 3)), rng.normal(size=8)
    got = tubelet_tokenize(t64(x[None]), t64(kernel), t64(bias), 2).data[0]
    np.testing.assert_allclose(got, tubelets_loops(x, kernel, bias, 2, 16), atol=1e-6)


def test_zero_kernel_gives_bias_everywhere(rng):
    bias = rng.normal(size=6)
    tok = tubelet_tokenize(t64(rng.uniform(size=(1, 4, 32, 16, 2))), t64(np.zeros((6, 4 * 256 * 2))), t64(bias), 4).data
    assert tok.shape == (1, 1, 2, 6)
    np.testing.assert_array_equal(tok, np.broadcast_to(bias, tok.shape))


def test_full_size_b2_view_geometry():
    v = parse_model_spec("B/2:R").views[0]
    x = T.Tensor(np.zeros((1, 64, 224, 224, 3), np.float32))
    tok = tubelet_tokenize(x, T.Tensor(np.zeros((768, 2 * 256 * 3), np.float32)), None, 2)
    assert tok.shape == (1, 32, 196, 768)
    assert tok.shape[1:3] == token_geometry(v, 64, 224, 224)


def test_tubelets_reject_indivisible_input():
    with pytest.raises(GeometryError):
        extract_tubelets(t64(np.zeros((1, 3, 32, 32, 3))), 2)
    with pytest.raises(GeometryError):
        extract_tubelets(t64(np.zeros((1, 2, 30, 32, 3))), 2)


# ---------------------------------------------------- kernel adaptation


def test_adapt_ones_kernel():
    np.testing.assert_array_equal(adapt_rgb_kernel(np.ones((4, 2 * 256 * 3)), 2), np.ones((4, 2 * 256 * 2)))


def test_adapt_single_channel_weight_is_averaged(rng):
    k = np.zeros((3, 256, 3))
    k[..., 0] = rng.normal(size=(3, 256))
    out = adapt_rgb_kernel(k.reshape(3, -1), 2).reshape(3, 256, 2)
    np.testing.assert_allclose(out, np.repeat(k[..., :1] / 3, 2, axis=-1), atol=1e-15)


def test_adapt_rejects_non_rgb_width():
    with pytest.raises(ValueError):
        adapt_rgb_kernel(np.ones((2, 256 * 2)), 1)


def test_adapted_embedding_identity(rng):
    rgb = rng.normal(size=(8, 2 * 256 * 3))
    x = rng.uniform(-1, 1, (1, 4, 32, 32, 1))
    spec = tubelet_tokenize(t64(x), t64(adapt_rgb_kernel(rgb, 1)), None, 2).data
    rep = tubelet_tokenize(t64(np.repeat(x, 3, axis=-1)), t64(rgb), None, 2).data
    np.testing.assert_allclose(spec, rep / 3, atol=1e-6)


# ------------------------------------------------------ factorised block


def test_single_token_attention_is_value_path(rng):
    m = randomized(tiny("Ti/2:R"), rng)
    x = t64(rng.normal(size=(1, 3, 1, 16)))
    got = self_attention(m, "view0/block0/attn", x, 2).data
    qkv = x.data @ m["view0/block0/attn/qkv/w"].data.T + m["view0/block0/attn/qkv/b"].data
    want = qkv[..., 32:] @ m["view0/block0/attn/out/w"].data.T + m["view0/block0/attn/out/b"].data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_factorisation_locality_pre_fusion(rng):
    m = randomized(tiny(layers=4), rng)
    cfg = m.config
    x = random_inputs(cfg, rng, batch=1)
    tok = embed_view(m, 0, t64(x[0]))
    bumped = tok.data.copy()
    bumped[:, 1] += rng.normal(size=bumped[:, 1].shape)

    def stack(z):
        z = T.Tensor(z)
        for l in range(cfg.fusion_at(0)):
            z = factorised_block(m, f"view0/block{l}", z, 2)
        return z.data

    a, b = stack(tok.data), stack(bumped)
    assert cfg.fusion_at(0) == 2
    assert a[:, 0].tobytes() == b[:, 0].tobytes()
    assert not np.array_equal(a[:, 1], b[:, 1])


def test_unfused_encoders_are_local_across_the_whole_stack(rng):
    m = randomized(tiny(), rng)
    x = random_inputs(m.config, rng, batch=1)
    toks = [embed_view(m, i, t64(v)) for i, v in enumerate(x)]
    bumped = [T.Tensor(t.data.copy()) for t in toks]
    bumped[0].data[:, 1] += 1.0
    a = encode_views(m, toks, fuse=False)
    b = encode_views(m, bumped, fuse=False)
    assert a[0].data[:, 0].tobytes() == b[0].data[:, 0].tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(5)), st.integers(0, 1000))
def test_block_is_permutation_equivariant(perm, seed):
    r = np.random.default_rng(seed)
    m = randomized(tiny("Ti/2:R"), r)
    x = r.normal(size=(1, 2, 5, 16))
    out = factorised_block(m, "view0/block0", t64(x), 2).data
    out_p = factorised_block(m, "view0/block0", t64(x[:, :, list(perm)]), 2).data
    np.testing.assert_allclose(out_p, out[:, :, list(perm)], atol=1e-12)


def test_block_rejects_bad_head_count(rng):
    m = tiny("Ti/2:R")
    with pytest.raises(GeometryError):
        factorised_block(m, "view0/block0", t64(rng.normal(size=(1, 1, 2, 16))), 3)


# ------------------------------------------------------ cross attention


def fusion_params(m):
    return {k.split("/", 1)[1]: v.data for k, v in m.params.items() if k.startswith("fusion0/")}


def test_cross_attention_matches_dense_oracle(rng):
    m = randomized(tiny(hidden=8, heads=1), rng)
    rec, don = rng.normal(size=(2, 8)), rng.normal(size=(3, 8))
    got = cross_view_attend(m, "fusion0", t64(rec[None, None]), t64(don[None, None]), 1).data[0, 0]
    np.testing.assert_allclose(got, single_head_cross_attention(rec, don, fusion_params(m)), atol=1e-6)


def test_zero_output_projection_leaves_receiver(rng):
    m = randomized(tiny(), rng)
    m.params["fusion0/out/w"] = t64(np.zeros((16, 16)))
    m.params["fusion0/out/b"] = t64(np.zeros(16))
    rec = rng.normal(size=(1, 2, 3, 16))
    out = cross_view_attend(m, "fusion0", t64(rec), t64(rng.normal(size=(1, 1, 4, 16))), 2).data
    assert out.tobytes() == rec.tobytes()


def test_single_donor_token_broadcasts_its_value(rng):
    m = randomized(tiny(), rng)
    rec = rng.normal(size=(1, 2, 3, 16))
    delta = cross_view_attend(m, "fusion0", t64(rec), t64(rng.normal(size=(1, 1, 1, 16))), 2).data - rec
    np.testing.assert_allclose(delta, np.broadcast_to(delta[0, 0, 0], delta.shape), atol=1e-12)


def test_zeroed_fusion_equals_no_fusion(rng):
    m = randomized(tiny("Ti/2:R+Ti/4:F+Ti/4:R"), rng)
    for i in range(2):
        m.params[f"fusion{i}/out/w"] = t64(np.zeros((16, 16)))
        m.params[f"fusion{i}/out/b"] = t64(np.zeros(16))
    x = random_inputs(m.config, rng, batch=2)
    toks = [embed_view(m, i, t64(v)) for i, v in enumerate(x)]
    fused = encode_views(m, toks, fuse=True)
    plain = encode_views(m, toks, fuse=False)
    for a, b in zip(fused, plain):
        assert a.data[:, :, 0].tobytes() == b.data[:, :, 0].tobytes()


def test_fusion_is_the_only_cross_view_path(rng):
    m = randomized(tiny(), rng)
    x = random_inputs(m.config, rng, batch=1)
    toks = [embed_view(m, i, t64(v)) for i, v in enumerate(x)]
    bumped = [toks[0], T.Tensor(toks[1].data + 1.0)]
    assert not np.array_equal(encode_views(m, toks)[0].data, encode_views(m, bumped)[0].data)
    assert np.array_equal(encode_views(m, toks, fuse=False)[0].data, encode_views(m, bumped, fuse=False)[0].data)


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("spec", ["Ti/2:R", "Ti/2:R+Ti/4:F", "Ti/2:R+Ti/4:S+Ti/4:F"])
def test_forward_shapes_determinism_finiteness(spec, rng):
    m = tiny(spec, dtype=np.float32)
    x = random_inputs(m.config, rng)
    v1, n1 = forward(m, x)
    v2, n2 = forward(m, x)
    assert v1.shape == (5,) and n1.shape == (7,)
    assert v1.data.tobytes() == v2.data.tobytes() and n1.data.tobytes() == n2.data.tobytes()
    assert np.isfinite(v1.data).all() and np.isfinite(n1.data).all()
    vb, nb = forward(m, [a[None] for a in x])
    assert vb.shape == (1, 5) and nb.shape == (1, 7)


def test_train_mode_needs_rng_and_is_seeded(rng):
    m = tiny(droplayer=0.5)
    x = random_inputs(m.config, rng, batch=4)
    with pytest.raises(ValueError):
        forward(m, x, train=True)
    a = forward(m, x, train=True, rng=np.random.default_rng(1))[0].data
    b = forward(m, x, train=True, rng=np.random.default_rng(1))[0].data
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_bad_inputs(rng):
    m = tiny()
    x = random_inputs(m.config, rng)
    with pytest.raises(GeometryError):
        forward(m, x[:1])
    with pytest.raises(GeometryError):
        forward(m, [x[0], x[0]])


@given(st.floats(-1e3, 1e3))
@settings(max_examples=25, deadline=None)
def test_argmax_is_shift_invariant(c):
    m = tiny("Ti/2:R")
    x = random_inputs(m.config, np.random.default_rng(0))
    verb, _ = forward(m, x)
    assert np.argmax(verb.data + c) == np.argmax(verb.data)


# --------------------------------------------------------------- params


def closed_form(cfg):
    views = []
    for v, size in zip(cfg.spec.views, cfg.view_sizes):
        n_t, n_s = cfg.geometry(v)
        views.append((size.hidden, size.layers, size.mlp_dim, v.tubelet_t, v.modality.channels, n_t, n_s))
    g = cfg.global_size
    return param_count_closed_form(views, (g.hidden, g.layers, g.mlp_dim), cfg.frames, cfg.resolution, cfg.patch,
                                   cfg.n_verbs, cfg.n_nouns)


@pytest.mark.parametrize("spec", ["Ti/2:R", "Ti/2:R+Ti/4:F", "Ti/2:R+Ti/4:S+Ti/8:F"])
def test_param_count_matches_closed_form(spec):
    m = tiny(spec, frames=8)
    assert m.n_params() == param_count(m.config) == closed_form(m.config)


def test_full_size_param_count_matches_closed_form():
    cfg = ModelConfig(parse_model_spec("B/2:R+S/4:S+Ti/8:F"), frames=64, resolution=(224, 224))
    assert param_count(cfg) == closed_form(cfg)


def test_hand_counted_single_view():
    # hidden 4, 1 layer, mlp 8, Ti/2:R over 2 frames of 16x16, 1 global layer, 2 + 3 classes
    cfg = tiny_config("Ti/2:R", hidden=4, layers=1, heads=1, mlp_dim=8, frames=2, resolution=(16, 16),
                      n_verbs=2, n_nouns=3)
    embed = 4 * 1536 + 4
    pos_cls = 4 + 4
    block = 8 + (48 + 12) + (16 + 4) + 8 + (32 + 8) + (32 + 4)
    view = embed + pos_cls + block + 8
    glob = (16 + 4) + 4 + block + 8
    heads = (8 + 2) + (12 + 3)
    assert param_count(cfg) == view + glob + heads


def test_init_is_deterministic_with_zero_biases():
    cfg = tiny_config("Ti/2:R+Ti/4:F", frames=4, resolution=(32, 32))
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a.params)
    assert not init_params(cfg, 4)["view0/cls"].data.tolist() == a["view0/cls"].data.tolist()
    for k, v in a.params.items():
        if k.endswith("/b") or k.endswith("/bias") or k.endswith("/beta") or k.endswith("/pos"):
            assert not v.data.any(), k
    w = a["view0/embed/kernel"].data
    assert np.abs(w).max() <= 0.04 and 0.015 < w.std() < 0.025


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(rng):
    m = randomized(tiny(dtype=np.float32), rng)
    back = load_checkpoint(save_checkpoint(m), "Ti/2:R+Ti/4:F")
    x = random_inputs(m.config, rng)
    assert forward(m, x)[0].data.tobytes() == forward(back, x)[0].data.tobytes()
    assert back.config == m.config


def test_checkpoint_errors():
    data = save_checkpoint(tiny())
    with pytest.raises(CheckpointError):
        load_checkpoint(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(data, "Ti/2:R+Ti/8:F")
    with pytest.raises(CheckpointError):
        load_checkpoint(data[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(data + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(data.replace(b'"format_version": 1', b'"format_version": 9'))
