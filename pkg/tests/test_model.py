import numpy as np
import pytest

from streamfuse import nn, optim, vocab
from streamfuse import tensor as T
from streamfuse.gradcheck import check_gradients
from streamfuse.model import (
    FUSION_MODES, FusionModel, ModelConfig, early_stack, fuse_mid_cc, fuse_mid_ws, tie_check,
)
from streamfuse.nn import ConfigError

from oracles import attention_per_head


def tiny(mode="baseline_mag", **kw):
    base = dict(d_model=8, heads=2, enc_blocks=1, dec_blocks=1, feat_dim=12,
                cnn_channels=(2, 2, 3, 3), fusion_mode=mode)
    base.update(kw)
    return ModelConfig(**base)


def feats(rng, B=2, Tn=12, F=12):
    return {"mag": rng.standard_normal((B, Tn, F)).astype(np.float32),
            "phase": rng.standard_normal((B, Tn, F)).astype(np.float32)}


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=9, heads=3, fusion_mode="mid_cc")
    with pytest.raises(ConfigError):
        ModelConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        ModelConfig(fusion_mode="fusion_late")


def test_config_text_round_trip():
    c = tiny("mel_t_phase", alpha=0.8)
    assert ModelConfig.from_text(c.to_text()) == c
    with pytest.raises(ConfigError):
        ModelConfig.from_text("bogus=1\n")


def test_encoder_stack_counts():
    for mode in FUSION_MODES:
        m = FusionModel(tiny(mode))
        n_train = len({k.split(".")[0] for k in m.params if k.startswith("enc_")})
        n_inf = len(m.inference_model().encoder_streams(inference=True))
        assert n_train == (2 if mode in ("mid_ws", "mid_cc", "t_mid_ws", "mel_t_mag", "mel_t_phase") else 1)
        assert n_inf == (2 if mode in ("mid_ws", "mid_cc", "t_mid_ws") else 1)


def test_shape_mismatch_on_load():
    m = FusionModel(tiny())
    state = m.state_dict()
    state["dec.out.w"] = np.zeros((3, 3), np.float32)
    with pytest.raises(ConfigError):
        FusionModel.from_state(m.config, state)
    with pytest.raises(ConfigError):
        FusionModel.from_state(tiny("mid_ws"), m.state_dict())


# ---------------------------------------------------------------- early fusion

def test_early_stack():
    rng = np.random.default_rng(0)
    o = rng.standard_normal((2, 5, 83))
    u = rng.standard_normal((2, 5, 83))
    x = early_stack(o, u)
    assert x.shape == (2, 2, 5, 83)
    assert np.array_equal(x[:, 0], o) and np.array_equal(x[:, 1], u)
    same = early_stack(o, o)
    assert np.array_equal(same[:, 0], same[:, 1])
    with pytest.raises(ValueError):
        early_stack(o, u[:, :4])


def test_early_with_zeroed_phase_kernels_equals_baseline(rng):
    with T.default_dtype(np.float64):
        base = FusionModel(tiny("baseline_mag"), seed=1)
        early = FusionModel(tiny("early"), seed=2)
        for k, v in base.params.items():
            if k.startswith("enc_mag."):
                k2 = "enc_early." + k[len("enc_mag."):]
                if k2.endswith("conv0.w"):
                    early.params[k2].data[:] = 0.0
                    early.params[k2].data[:, :1] = v.data
                else:
                    early.params[k2].data[:] = v.data
        f = {k: v.astype(np.float64) for k, v in feats(rng).items()}
        a, _ = base.encode(f["mag"], [12, 9], "mag")
        b, _ = early.encode(early_stack(f["mag"], f["phase"]), [12, 9], "early")
    assert np.max(np.abs(a.data - b.data)) < 1e-12


# ---------------------------------------------------------------- encoder

def test_encode_shapes_determinism_and_zero_input(rng):
    m = FusionModel(tiny(), seed=3)
    x = rng.standard_normal((1, 8, 12)).astype(np.float32)
    e1, km = m.encode(x, [8], "mag")
    e2, _ = m.encode(x, [8], "mag")
    assert e1.shape == (1, 2, 8) and km.shape == (1, 2)
    assert np.array_equal(e1.data, e2.data)
    z, _ = m.encode(np.zeros((3, 8, 12), np.float32), [8, 8, 8], "mag")
    assert np.isfinite(z.data).all()
    assert np.array_equal(z.data[0], z.data[1]) and np.array_equal(z.data[1], z.data[2])
    with pytest.raises(ValueError):
        m.encode(np.zeros((1, 0, 12), np.float32), [0], "mag")


@pytest.mark.parametrize("scale", [7.0, 300.0])
def test_encoder_invariant_to_projection_scale(scale, rng):
    # the positional table must keep its weight however large the CNN output grows
    m = FusionModel(tiny(d_model=16, heads=2), seed=3)
    x = rng.standard_normal((1, 16, 12)).astype(np.float32)
    with T.default_dtype(np.float64):
        m64 = FusionModel.from_state(m.config, m.state_dict(), dtype=np.float64)
        for k in ("enc_mag.proj.w", "enc_mag.proj.b"):
            m64.params[k].data *= 10.0  # well clear of the layer-norm epsilon
        ref, _ = m64.encode(x, [16], "mag")
        for k in ("enc_mag.proj.w", "enc_mag.proj.b"):
            m64.params[k].data *= scale
        out, _ = m64.encode(x, [16], "mag")
    assert np.allclose(out.data, ref.data, atol=1e-4)


def test_padding_does_not_leak(rng):
    m = FusionModel(tiny(), seed=3)
    x = rng.standard_normal((1, 10, 12)).astype(np.float32)
    alone, _ = m.encode(x, [10], "mag")
    padded = np.concatenate([x, 100 * np.ones((1, 6, 12), np.float32)], axis=1)
    pair = np.concatenate([padded, rng.standard_normal((1, 16, 12)).astype(np.float32)])
    both, km = m.encode(pair, [10, 16], "mag")
    n = km[0].sum()
    assert n == alone.shape[1]
    assert np.allclose(both.data[0, :n], alone.data[0], atol=1e-5)


# ---------------------------------------------------------------- decoder block

def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_block(p, pre, y, enc, heads, src):
    """Plain-numpy pre-LN decoder block used as the reference."""
    P = lambda k: p[pre + k].data
    attn = lambda s: {k: P(s + k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    L = y.shape[1]
    a = _np_layer_norm(y, P("ln1.g"), P("ln1.b"))
    causal = np.broadcast_to(np.tril(np.ones((L, L), bool)), (y.shape[0], L, L))
    h = y + attention_per_head(a, a, attn("self_attn."), heads, causal)
    q = _np_layer_norm(h, P("ln2.g"), P("ln2.b"))
    mid = h + attention_per_head(q, enc, attn(src), heads)
    f = _np_layer_norm(mid, P("ln3.g"), P("ln3.b"))
    ff = np.maximum(f @ P("ffn.w1") + P("ffn.b1"), 0) @ P("ffn.w2") + P("ffn.b2")
    return mid + ff


def test_single_encoder_block_is_standard_decoder_block(rng):
    with T.default_dtype(np.float64):
        m = FusionModel(tiny(), seed=4)
        y = rng.standard_normal((2, 3, 8))
        enc = rng.standard_normal((2, 4, 8))
        out = m.decode_block(0, T.Tensor(y), {"mag": (T.Tensor(enc), np.ones((2, 4), bool))},
                             nn.causal_mask(3)[None, None]).data
    ref = _np_block(m.params, "dec.block0.", y, enc, 2, "src_attn.")
    assert np.max(np.abs(out - ref)) < 1e-10


def test_tied_mid_ws_equal_inputs_independent_of_alpha(rng):
    with T.default_dtype(np.float64):
        y = T.Tensor(rng.standard_normal((2, 3, 8)))
        enc = T.Tensor(rng.standard_normal((2, 4, 8)))
        km = np.ones((2, 4), bool)
        outs = []
        base = FusionModel(tiny("t_mid_ws"), seed=5)
        for alpha in (0.0, 0.3, 0.9, 1.0):
            m = FusionModel(tiny("t_mid_ws", alpha=alpha), params=base.params)
            outs.append(m.decode_block(0, y, {"mag": (enc, km), "phase": (enc, km)},
                                       nn.causal_mask(3)[None, None]).data)
    for o in outs[1:]:
        assert np.allclose(o, outs[0], atol=1e-12)


@pytest.mark.parametrize("mode", ["baseline_mag", "mid_ws", "mid_cc", "t_mid_ws", "mel_t_phase"])
def test_decoder_block_gradients(mode):
    rng = np.random.default_rng(22)  # keeps every ReLU input clear of 0 by > 1e-3
    with T.default_dtype(np.float64):
        m = FusionModel(tiny(mode, alpha=0.7), seed=6)
        for k, p in m.params.items():
            if k.startswith("dec.block0."):
                p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        names = sorted(k for k in m.params if k.startswith("dec.block0."))
        y = T.Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
        e1 = T.Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True)
        e2 = T.Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
        km1 = np.ones((2, 4), bool)
        km2 = np.array([[True] * 5, [True] * 3 + [False] * 2])
        dual = len(m.encoder_streams()) == 2

        def fn(y, e1, e2, *ps):
            encs = {"mag": (e1, km1)} if not dual else {"mag": (e1, km1), "phase": (e2, km2)}
            if mode == "mel_t_phase":
                encs = {"mag": (e1, km1), "phase": (e2, km2)}
            return m.decode_block(0, y, encs, nn.causal_mask(3)[None, None])

        inputs = [y, e1, e2] + [m.params[k] for k in names]
        if not dual:
            e2.requires_grad = False
        err = check_gradients(fn, inputs)
    T.clear_tape()
    assert err < 1e-4


def test_mode_input_mismatch():
    m = FusionModel(tiny("mid_ws"))
    y = T.Tensor(np.zeros((1, 2, 8), np.float32))
    enc = (T.Tensor(np.zeros((1, 3, 8), np.float32)), np.ones((1, 3), bool))
    with pytest.raises(ConfigError):
        m.decode_block(0, y, {"mag": enc}, nn.causal_mask(2)[None, None])
    with pytest.raises(ConfigError):
        m.encode_all({"mag": np.zeros((1, 8, 12), np.float32)}, [8])


# ---------------------------------------------------------------- fusion functions

def test_fuse_mid_ws_endpoints_and_value(rng):
    a = T.Tensor(rng.standard_normal((2, 3, 4)))
    b = T.Tensor(rng.standard_normal((2, 3, 4)))
    assert np.array_equal(fuse_mid_ws(a, b, 1.0).data, a.data)
    assert np.array_equal(fuse_mid_ws(a, b, 0.0).data, b.data)
    with T.default_dtype(np.float64):
        v = fuse_mid_ws(T.Tensor(2.0), T.Tensor(-1.0), 0.9).data
    assert abs(float(v) - 1.7) < 1e-7
    with pytest.raises(ConfigError):
        fuse_mid_ws(a, b, -0.1)


def test_fuse_mid_cc(rng):
    res = T.Tensor(rng.standard_normal((2, 3, 4)))
    z = T.Tensor(np.zeros((2, 3, 2)))
    assert np.array_equal(fuse_mid_cc(z, z, res).data, res.data)
    hm = rng.standard_normal((2, 3, 2))
    hp = rng.standard_normal((2, 3, 2))
    with T.default_dtype(np.float64):
        r64 = T.Tensor(res.data.astype(np.float64))
        out = fuse_mid_cc(T.Tensor(hm), T.Tensor(hp), r64).data
    ref = np.empty((2, 3, 4))
    for i in range(2):
        for j in range(3):
            for k in range(4):
                ref[i, j, k] = (hm[i, j, k] if k < 2 else hp[i, j, k - 2]) + r64.data[i, j, k]
    assert np.array_equal(out, ref)
    assert np.allclose((out - r64.data)[..., :2], hm) and np.allclose((out - r64.data)[..., 2:], hp)
    with pytest.raises(ConfigError):
        fuse_mid_cc(T.Tensor(np.zeros((1, 1, 3))), T.Tensor(np.zeros((1, 1, 2))), T.Tensor(np.zeros((1, 1, 4))))


# ---------------------------------------------------------------- full forward

def _dec_in(B=2, L=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.integers(2, vocab.SIZE, (B, L))
    x[:, 0] = vocab.BOS
    return x


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_forward_normalised(mode, rng):
    m = FusionModel(tiny(mode))
    logp = m.forward_train(feats(rng), [12, 10], _dec_in(), training=True, rng=np.random.default_rng(0))
    lse = np.log(np.exp(logp.data.astype(np.float64)).sum(-1))
    assert logp.shape == (2, 4, vocab.SIZE)
    assert np.max(np.abs(lse)) < 1e-5
    T.clear_tape()


def test_mel_alpha_one_equals_baseline(rng):
    mel = FusionModel(tiny("mel_t_mag", alpha=1.0), seed=8)
    base = FusionModel.from_state(
        tiny("baseline_mag"), {k: v for k, v in mel.state_dict().items() if not k.startswith("enc_phase.")})
    f = feats(rng)
    a = mel.forward_train(f, [12, 11], _dec_in(), training=False).data
    b = base.forward_train(f, [12, 11], _dec_in(), training=False).data
    assert np.array_equal(a, b)
    T.clear_tape()


def test_batch_permutation_equivariance(rng):
    m = FusionModel(tiny("mid_ws"), seed=2)
    f = feats(rng, B=3)
    d = _dec_in(B=3)
    perm = [2, 0, 1]
    a = m.forward_train(f, [12, 12, 12], d, training=False).data
    b = m.forward_train({k: v[perm] for k, v in f.items()}, [12, 12, 12], d[perm], training=False).data
    assert np.allclose(a[perm], b, atol=1e-6)
    T.clear_tape()


def test_forward_step_matches_forward_train(rng):
    m = FusionModel(tiny("mid_cc"), seed=2)
    f = {k: v[:1] for k, v in feats(rng).items()}
    d = _dec_in(B=1, L=5)
    full = m.forward_train(f, [12], d, training=False).data
    encs = m.encode_all(f, [12])
    first = m.forward_step(encs, [[vocab.BOS]])
    assert np.allclose(first[0], full[0, 0], atol=1e-5)
    third = m.forward_step(encs, d[:, :3])
    assert np.allclose(third[0], full[0, 2], atol=1e-5)
    with pytest.raises(ValueError):
        m.forward_step(encs, [[vocab.BOS, vocab.EOS]])
    with pytest.raises(ValueError):
        m.forward_step(encs, [[3, 4]])
    T.clear_tape()


@pytest.mark.parametrize("mode", ["mel_t_mag", "mel_t_phase"])
def test_mel_inference_bit_identical_to_subset_baseline(mode, rng):
    mel = FusionModel(tiny(mode), seed=11)
    stream = "mag" if mode == "mel_t_mag" else "phase"
    other = "phase" if stream == "mag" else "mag"
    subset = {k: v.copy() for k, v in mel.state_dict().items() if not k.startswith(f"enc_{other}.")}
    base = FusionModel.from_state(tiny(f"baseline_{stream}"), subset)
    inf = mel.inference_model()
    assert inf.mode == f"baseline_{stream}"
    f = feats(rng)
    a = inf.forward_train(f, [12, 9], _dec_in(), training=False, inference=True).data
    b = base.forward_train(f, [12, 9], _dec_in(), training=False).data
    assert np.array_equal(a, b)
    ea = inf.encode_all({stream: f[stream][:1]}, [12], inference=True)
    eb = base.encode_all({stream: f[stream][:1]}, [12])
    pre = [[vocab.BOS, 5, 7]]
    assert np.array_equal(inf.forward_step(ea, pre), base.forward_step(eb, pre))


# ---------------------------------------------------------------- tying

def _one_step(m, rng, lr=1e-2):
    f = feats(rng)
    logp = m.forward_train(f, [12, 12], _dec_in(), training=True, rng=rng)
    loss = T.mul(T.tsum(logp), -1.0 / logp.size)
    for p in m.params.values():
        p.grad = None
    T.backward(loss)
    st = getattr(m, "_adam", None) or optim.AdamState()
    m._adam = st
    optim.adam_step(m.params, st, lr)


def test_tie_check_and_alias_survives_steps(rng):
    m = FusionModel(tiny("t_mid_ws"))
    assert tie_check(m)["aliased"]
    for _ in range(3):
        _one_step(m, rng)
    tie_check(m)
    mag, phase = m.branch_params(0)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(mag, phase))


def test_untied_branches_diverge(rng):
    m = FusionModel(tiny("mid_ws"))
    mag, phase = m.branch_params(0)
    for a, b in zip(mag, phase):
        b.data[...] = a.data
    with pytest.raises(ConfigError):
        tie_check(m)
    _one_step(m, rng)
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(mag, phase))


def test_copied_branches_fail_tie_check():
    m = FusionModel(tiny("t_mid_ws"))
    k = "dec.block0.src_attn.wq"
    orig = m.src_attn_prefix
    m.src_attn_prefix = lambda b, s, dual: orig(b, s, dual) if s == "mag" else "copy."
    m.params["copy.wq"] = T.Tensor(m.params[k].data.copy())
    for name in ("bq", "wk", "bk", "wv", "bv", "wo", "bo"):
        m.params["copy." + name] = m.params["dec.block0.src_attn." + name]
    with pytest.raises(AssertionError):
        tie_check(m)


def test_parameter_counts_analytic():
    for d, blocks in ((8, 1), (64, 2)):
        kw = dict(d_model=d, heads=2, dec_blocks=blocks)
        mid = FusionModel(ModelConfig(fusion_mode="mid_ws", **kw)).parameter_count()
        tied = FusionModel(ModelConfig(fusion_mode="t_mid_ws", **kw)).parameter_count()
        mel = FusionModel(ModelConfig(fusion_mode="mel_t_mag", **kw)).parameter_count()
        one_set = 4 * d * d + 4 * d
        assert tied == mid - blocks * one_set
        assert tied < mid and mel == tied
