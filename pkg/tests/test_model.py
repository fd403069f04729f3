import math

import numpy as np
import pytest

from dap import numcore as nc
from dap.model import (
    CLS, MASK, PAD, EncoderConfig, IntegrityError, checkpoint_bytes, encode, init_params, load_checkpoint,
    param_shapes, rtl_forward, save_checkpoint, tlm_forward,
)


def tiny(**kw):
    base = dict(L=2, d=8, n_heads=2, d_ff=16, V=20, S_max=8, K=1, n_langs=3, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


def closed_form_count(L, d, f, V, S_max, K, n_langs, tied, final_ln=False):
    block = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    return V * d + 2 * (2 * S_max) * d + n_langs * d + L * block + (2 * d if final_ln else 0) + K * block + (0 if tied else d * V)


# ---------------------------------------------------------------- init


def test_init_deterministic():
    a, b = init_params(tiny()), init_params(tiny())
    for name in a.names():
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_layer_norm_gains():
    p = init_params(tiny(final_ln_gain=0.25))
    gains = [n for n in p.names() if ".ln" in n and n.endswith(".g") and n != "enc.ln_f.g"]
    assert gains
    for n in gains:
        np.testing.assert_array_equal(p[n].data, 1.0)
    np.testing.assert_array_equal(p["enc.ln_f.g"].data, 0.25)


def test_weights_truncated_and_biases_zero():
    p = init_params(tiny())
    assert np.abs(p["enc.0.attn.Wq"].data).max() <= 0.04
    np.testing.assert_array_equal(p["enc.0.ffn.b1"].data, 0.0)


@pytest.mark.parametrize("tied", [True, False])
@pytest.mark.parametrize("final_ln", [True, False])
def test_parameter_count_closed_form(tied, final_ln):
    cfg = tiny(L=2, K=1, tie_vocab_head=tied, final_ln=final_ln)
    expected = closed_form_count(2, 8, 16, 20, 8, 1, 3, tied, final_ln)
    assert init_params(cfg).n_params() == expected


def test_invalid_config():
    with pytest.raises(ValueError):
        init_params(tiny(d=7, n_heads=2))


def test_k_deeper_than_encoder_warns():
    with pytest.warns(UserWarning):
        tiny(L=1, K=2).validate()


# ---------------------------------------------------------------- encode


def batch_ids():
    return np.array([[5, 6, 7, 0], [8, 9, 0, 0], [10, 11, 12, 13]])


def test_encode_shapes():
    p = init_params(tiny())
    enc = encode(p, batch_ids())
    assert enc.cls.shape == (3, 8)
    assert enc.tokens.shape == (3, 4, 8)


def test_cls_is_position_zero():
    p = init_params(tiny())
    enc = encode(p, batch_ids())
    assert enc.cls.data.tobytes() == enc.hidden.data[:, 0].copy().tobytes()


def test_batch_equivariance():
    p = init_params(tiny())
    ids = batch_ids()
    perm = np.array([2, 0, 1])
    a = encode(p, ids)
    b = encode(p, ids[perm])
    np.testing.assert_allclose(b.cls.data, a.cls.data[perm], rtol=0, atol=1e-13)
    np.testing.assert_allclose(b.tokens.data, a.tokens.data[perm], rtol=0, atol=1e-13)


def test_pad_content_does_not_leak():
    p = init_params(tiny())
    ids = batch_ids()
    pad = ids == PAD
    before = encode(p, ids, pad)
    changed = ids.copy()
    changed[pad] = 17
    after = encode(p, changed, pad)
    np.testing.assert_array_equal(after.cls.data, before.cls.data)
    np.testing.assert_array_equal(after.tokens.data[~pad], before.tokens.data[~pad])


def test_overlong_sequence_rejected():
    p = init_params(tiny(S_max=4))
    with pytest.raises(nc.ContractError):
        encode(p, np.full((1, 4), 5))


# ---------------------------------------------------------------- RTL head


def test_rtl_full_reconstruction_shape():
    p = init_params(tiny())
    src = nc.Tensor(np.random.default_rng(0).standard_normal((2, 3, 8)))
    logits = rtl_forward(p, src, [3, 3], [4, 4], [range(4), range(4)])
    assert logits.shape == (2 * 4, 20)
    assert logits.data.reshape(2, 4, 20).shape == (2, 4, 20)


def test_rtl_residual_identity_with_zeroed_projections():
    p = init_params(tiny(K=2))
    for i in range(2):
        p[f"rtl.{i}.attn.Wo"].data[:] = 0.0
        p[f"rtl.{i}.ffn.W2"].data[:] = 0.0
    src = nc.Tensor(np.random.default_rng(1).standard_normal((1, 3, 8)))
    logits = rtl_forward(p, src, [3], [2], [[0, 1]]).data
    slots = p["tok_emb"].data[MASK] + p["rtl_pos_emb"].data[[3, 4]]
    np.testing.assert_allclose(logits, slots @ p["tok_emb"].data.T, rtol=0, atol=1e-15)


def _ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _ref_block(P, pre, x, n_heads, eps):
    """Straight-line pre-norm block for a single unpadded sequence."""
    s, d = x.shape
    dh = d // n_heads
    a = _ln(x, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"], eps)
    q = a @ P[f"{pre}.attn.Wq"] + P[f"{pre}.attn.bq"]
    k = a @ P[f"{pre}.attn.Wk"] + P[f"{pre}.attn.bk"]
    v = a @ P[f"{pre}.attn.Wv"] + P[f"{pre}.attn.bv"]
    ctx = np.zeros((s, d))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(s):
            sc = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(s)])
            w = np.exp(sc - sc.max())
            w /= w.sum()
            ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(s))
    x = x + ctx @ P[f"{pre}.attn.Wo"] + P[f"{pre}.attn.bo"]
    f = _ln(x, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"], eps) @ P[f"{pre}.ffn.W1"] + P[f"{pre}.ffn.b1"]
    f = 0.5 * f * (1 + np.tanh(math.sqrt(2 / math.pi) * (f + 0.044715 * f**3)))
    return x + f @ P[f"{pre}.ffn.W2"] + P[f"{pre}.ffn.b2"]


def test_rtl_matches_straight_line_reference():
    cfg = EncoderConfig(L=2, d=4, n_heads=2, d_ff=8, V=6, S_max=4, K=2, n_langs=2, seed=3, tie_vocab_head=False)
    p = init_params(cfg)
    rng = np.random.default_rng(9)
    for t in p.values():  # move away from the near-zero init so every term matters
        t.data[:] = rng.standard_normal(t.shape) * 0.5
    P = {k: v.data for k, v in p.tensors.items()}
    h = rng.standard_normal((1, 3, 4))
    got = rtl_forward(p, nc.Tensor(h), [3], [2], [[0, 1]], lang_ids=[1]).data

    g0 = np.vstack([h[0], P["tok_emb"][[MASK, MASK]]])
    g0 = g0 + P["rtl_pos_emb"][:5] + P["lang_emb"][1]
    x = g0
    for i in range(2):
        x = _ref_block(P, f"rtl.{i}", x, 2, cfg.ln_eps)
    want = x[3:] @ P["head.W"]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_rtl_requires_leak_when_partial():
    p = init_params(tiny())
    src = nc.Tensor(np.zeros((1, 3, 8)) + 0.1)
    with pytest.raises(nc.ContractError):
        rtl_forward(p, src, [3], [3], [[1]])


def test_rtl_partial_uses_leaked_target():
    p = init_params(tiny())
    rng = np.random.default_rng(0)
    src = nc.Tensor(rng.standard_normal((1, 3, 8)))
    leak = rng.standard_normal((1, 3, 8))
    a = rtl_forward(p, src, [3], [3], [[1]], nc.Tensor(leak)).data
    leak[0, 0] += 1.0
    b = rtl_forward(p, src, [3], [3], [[1]], nc.Tensor(leak)).data
    assert np.abs(a - b).max() > 0


def test_rtl_full_reconstruction_ignores_leaked_target():
    p = init_params(tiny())
    rng = np.random.default_rng(0)
    src = nc.Tensor(rng.standard_normal((2, 3, 8)))
    a = rtl_forward(p, src, [3, 2], [3, 2], [range(3), range(2)], nc.Tensor(rng.standard_normal((2, 3, 8)))).data
    b = rtl_forward(p, src, [3, 2], [3, 2], [range(3), range(2)], nc.Tensor(rng.standard_normal((2, 3, 8)))).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- TLM head


def test_tlm_single_masked_shape():
    p = init_params(tiny())
    ids = np.array([[CLS, 5, MASK, 9, 10], [CLS, 6, 7, MASK, 11]])
    logits = tlm_forward(p, ids, [[2], [3]])
    assert logits.data.reshape(2, 1, 20).shape == (2, 1, 20)


def test_tlm_empty_mask_rejected():
    p = init_params(tiny())
    with pytest.raises(nc.ContractError):
        tlm_forward(p, np.array([[CLS, 5, 6]]), [[]])


def test_tlm_equals_encode_then_project():
    p = init_params(tiny())
    ids = np.array([[CLS, 5, MASK, 9, 10, 0], [CLS, 6, 7, MASK, 11, 12]])
    got = tlm_forward(p, ids, [[2, 4], [3]]).data
    enc = encode(p, ids[:, 1:])
    h = enc.hidden.data
    want = np.vstack([h[0, [2, 4]], h[1, [3]]]) @ p["tok_emb"].data.T
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- gradients


def test_encode_rtl_gradient_check():
    p = init_params(tiny(L=1, K=1, d=4, n_heads=2, d_ff=8, V=10))
    rng = np.random.default_rng(2)
    for t in p.values():
        t.data[:] = rng.standard_normal(t.shape) * 0.3
    ids = np.array([[4, 5, 6], [7, 8, 0]])
    tgt = np.array([[3, 4], [5, 0]])

    def loss():
        enc = encode(p, ids)
        logits = rtl_forward(p, enc.tokens, [3, 2], [2, 1], [[0, 1], [0]])
        return nc.cross_entropy(logits, [3, 4, 5])

    assert nc.grad_check(loss, p.values(), eps=1e-4) <= 1e-3


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    p = init_params(tiny(tie_vocab_head=False))
    save_checkpoint(p, p.config, tmp_path / "m.ckpt")
    q, cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg == p.config
    assert q.names() == p.names()
    for n in p.names():
        assert q[n].data.tobytes() == p[n].data.tobytes()


def test_checkpoint_size_accounting(tmp_path):
    p = init_params(tiny())
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, None, path)
    import json
    from dataclasses import asdict

    cfg_len = len(json.dumps(asdict(p.config), sort_keys=True).encode())
    shapes = param_shapes(p.config)
    header = 8 + 4 + cfg_len + sum(4 + len(n.encode()) + 4 + 8 * len(s) for n, s in shapes.items()) + 4
    assert path.stat().st_size == header + 8 * p.n_params()


def test_truncated_checkpoint_rejected(tmp_path):
    raw = checkpoint_bytes(init_params(tiny()))
    path = tmp_path / "bad.ckpt"
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(IntegrityError) as info:
        load_checkpoint(path)
    assert info.value.offset > 0


def test_flipped_byte_rejected(tmp_path):
    raw = bytearray(checkpoint_bytes(init_params(tiny())))
    raw[-100] ^= 0xFF
    path = tmp_path / "bad.ckpt"
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="CRC32"):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    p = init_params(tiny())
    save_checkpoint(p, None, tmp_path / "m.ckpt")
    with pytest.raises(nc.ShapeError):
        load_checkpoint(tmp_path / "m.ckpt", expected=tiny(d=16, n_heads=2))
