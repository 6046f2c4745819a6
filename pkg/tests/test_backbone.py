import math

import numpy as np
import pytest

from jtoklab import backbone as bb
from jtoklab import numerics as nx
from jtoklab.numerics import Tensor

from conftest import randomize_plugins, tiny


def frozen(params):
    return {k: Tensor(v.data.copy()) for k, v in params.items()}


def rms(x, w, eps):
    return w * x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def rope_ref(x):
    # x: (T, hd), rotate pairs (i, i+half) by angle t * base**(-i/half)
    t_len, hd = x.shape
    half = hd // 2
    out = x.copy()
    for t in range(t_len):
        for i in range(half):
            ang = t * 10000.0 ** (-i / half)
            a, b = x[t, i], x[t, i + half]
            out[t, i] = a * math.cos(ang) - b * math.sin(ang)
            out[t, i + half] = a * math.sin(ang) + b * math.cos(ang)
    return out


def attention_ref(h, p, layer, cfg):
    """Explicit-loop causal attention for one sequence (T, d)."""
    pre = f"l{layer}."
    x = rms(h, p[pre + "attn_norm"].data, cfg.norm_eps)
    T, d = h.shape
    out = np.zeros((T, d))
    for head in range(cfg.n_heads):
        q = rope_ref(x @ p[pre + "wq"].data[:, head, :])
        k = rope_ref(x @ p[pre + "wk"].data[:, head, :])
        v = x @ p[pre + "wv"].data[:, head, :]
        for i in range(T):
            scores = [q[i] @ k[j] / math.sqrt(cfg.head_dim) for j in range(i + 1)]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            ctx = sum(w[j] / z * v[j] for j in range(i + 1))
            out[i] += ctx @ p[pre + "wo"].data[head]
    return out


def test_attention_matches_loop_oracle(rng):
    cfg = tiny(hidden_dim=4, n_heads=2, seq_len=2)
    params = bb.init_params(cfg)
    for _ in range(10):
        h = rng.normal(size=(1, 2, 4))
        da, a = bb.attention_sublayer(Tensor(h), params, 0, cfg)
        ref = attention_ref(h[0], params, 0, cfg)
        assert np.allclose(da.data[0], ref, rtol=1e-12, atol=1e-14)
        assert np.allclose(a.data, h + da.data, rtol=0, atol=0)


def test_attention_zero_weights_and_single_token(rng):
    cfg = tiny()
    params = bb.init_params(cfg)
    for name in ("wq", "wk", "wv", "wo"):
        params[f"l0.{name}"].data[:] = 0
    h = rng.normal(size=(1, 3, 4))
    da, a = bb.attention_sublayer(Tensor(h), params, 0, cfg)
    assert np.array_equal(da.data, np.zeros_like(h))
    assert np.array_equal(a.data, h)

    params = bb.init_params(cfg)
    h1 = rng.normal(size=(1, 1, 4))
    da, _ = bb.attention_sublayer(Tensor(h1), params, 0, cfg)
    x = rms(h1[0, 0], params["l0.attn_norm"].data, cfg.norm_eps)
    v = np.einsum("d,dhk->hk", x, params["l0.wv"].data)
    assert np.allclose(da.data[0, 0], np.einsum("hk,hkd->d", v, params["l0.wo"].data), rtol=1e-13)


def test_attention_needs_positions():
    cfg = tiny()
    with pytest.raises(ValueError):
        bb.attention_sublayer(Tensor(np.zeros((1, 0, 4))), bb.init_params(cfg), 0, cfg)


def silu(x):
    return x / (1.0 + np.exp(-x))


def test_dense_ffn_zero():
    cfg = tiny()
    params = bb.init_params(cfg)
    for name in ("w1", "w3", "w2"):
        params[f"l1.{name}"].data[:] = 0
    dm, mask = bb.ffn_sublayer(Tensor(np.ones((1, 3, 4))), params, 1, cfg)
    assert mask is None and np.array_equal(dm.data, np.zeros((1, 3, 4)))


def test_moe_matches_enumeration(rng):
    cfg = tiny(ffn_kind="moe", moe_n_experts=4, moe_top_k=2, moe_n_shared=1, hidden_dim=4, ffn_dim=3)
    params = bb.init_params(cfg)
    a = rng.normal(size=(1, 3, 4))
    dm, mask = bb.ffn_sublayer(Tensor(a), params, 0, cfg)
    p = {k: v.data for k, v in params.items() if k.startswith("l0.")}
    for t in range(3):
        x = rms(a[0, t], p["l0.ffn_norm"], cfg.norm_eps)
        logits = x @ p["l0.moe_router"]
        chosen = sorted(sorted(range(4), key=lambda i: (-logits[i], i))[:2])
        z = sum(math.exp(logits[i]) for i in chosen)
        want = np.zeros(4)
        for i in chosen:
            y = (silu(x @ p["l0.ew1"][i]) * (x @ p["l0.ew3"][i])) @ p["l0.ew2"][i]
            want += math.exp(logits[i]) / z * y
        want += (silu(x @ p["l0.sw1"][0]) * (x @ p["l0.sw3"][0])) @ p["l0.sw2"][0]
        assert np.allclose(dm.data[0, t], want, rtol=1e-12, atol=1e-15)
        assert sorted(np.flatnonzero(mask[0, t])) == chosen


def test_moe_single_expert_is_dense(rng):
    moe = tiny(ffn_kind="moe", moe_n_experts=1, moe_top_k=1, moe_n_shared=0)
    dense = tiny()
    pm, pd = bb.init_params(moe), bb.init_params(dense)
    for a, b in (("ew1", "w1"), ("ew3", "w3"), ("ew2", "w2")):
        pd[f"l0.{b}"].data = pm[f"l0.{a}"].data[0].copy()
    pd["l0.ffn_norm"].data = pm["l0.ffn_norm"].data
    x = rng.normal(size=(1, 3, 4))
    dm_m, _ = bb.ffn_sublayer(Tensor(x), pm, 0, moe)
    dm_d, _ = bb.ffn_sublayer(Tensor(x), pd, 0, dense)
    assert np.allclose(dm_m.data, dm_d.data, rtol=1e-14, atol=0)


def test_moe_gate_mass(rng):
    cfg = tiny(ffn_kind="moe", moe_n_experts=4, moe_top_k=3)
    params = bb.init_params(cfg)
    x = nx.rmsnorm(Tensor(rng.normal(size=(2, 3, 4))), params["l0.ffn_norm"], cfg.norm_eps)
    logits = nx.einsum("btd,de->bte", x, params["l0.moe_router"])
    gates = nx.softmax(logits, mask=nx.topk_mask(logits.data, 3)).data
    assert np.allclose(gates.sum(-1), 1.0, rtol=1e-15)
    assert np.all((gates > 0).sum(-1) == 3)


def test_uniform_logits_give_ln_v():
    cfg = tiny(vocab_size=16)
    params = bb.init_params(cfg)
    for p in params.values():
        p.data[:] = 0.0
    res = bb.forward_loss(np.array([1, 5, 2, 9]), cfg, params)
    assert math.isclose(res.loss.item(), math.log(16), rel_tol=1e-15)


def test_zero_sublayers_are_identity(rng):
    for n_layers in (1, 2, 3):
        cfg = tiny(n_layers=n_layers)
        params = bb.init_params(cfg)
        for k, p in params.items():
            if k.startswith("l") and not k.endswith("norm"):
                p.data[:] = 0
        tokens = rng.integers(0, 8, size=(1, 3))
        h, *_ = bb.forward_hidden(tokens, cfg, params)
        assert np.array_equal(h.data, params["tok_emb"].data[tokens])


@pytest.mark.parametrize("ffn_kind", ["dense", "moe"])
def test_identity_start(ffn_kind, rng):
    tokens = rng.integers(0, 8, size=(2, 4))
    base = tiny(ffn_kind=ffn_kind, plugin="none")
    ref = bb.forward_loss(tokens, base, bb.init_params(base))
    for plugin in ("jtok", "jtok_m"):
        cfg = base.replace(plugin=plugin)
        res = bb.forward_loss(tokens, cfg, bb.init_params(cfg))
        assert res.loss.item() == ref.loss.item()
        assert res.layer_std == ref.layer_std


def test_zero_tables_match_backbone(rng):
    tokens = rng.integers(0, 8, size=(1, 4))
    base = tiny()
    cfg = tiny(plugin="jtok")
    params = randomize_plugins(bb.init_params(cfg), rng)
    for k, p in params.items():
        if k.endswith("jtok_table"):
            p.data[:] = 0
    assert bb.forward_loss(tokens, cfg, params).loss.item() == \
        bb.forward_loss(tokens, base, bb.init_params(base)).loss.item()


def test_token_errors():
    cfg = tiny()
    params = bb.init_params(cfg)
    with pytest.raises(ValueError):
        bb.forward_loss(np.array([0, 8]), cfg, params)
    with pytest.raises(ValueError):
        bb.forward_loss(np.array([-1, 2]), cfg, params)
    with pytest.raises(TypeError):
        bb.forward_loss(np.array([0.0, 1.0]), cfg, params)
    with pytest.raises(ValueError):
        bb.forward_loss(np.array([3]), cfg, params)


def model_grad_check(cfg, rng):
    params = randomize_plugins(bb.init_params(cfg, rng=rng), rng)
    tokens = rng.integers(0, cfg.vocab_size, size=(1, cfg.seq_len + 1))
    pin = bb.forward_loss(tokens, cfg, frozen(params)).selections

    def f(p):
        return bb.forward_loss(tokens, cfg, p, pin=pin).objective

    return nx.grad_check(f, {k: v.data for k, v in params.items()}, oracle_dtype=np.longdouble)


@pytest.mark.parametrize("kw", [
    dict(), dict(ffn_kind="moe"), dict(plugin="jtok"), dict(plugin="jtok", plugin_norm=False),
    dict(plugin="jtok_m", aux_coef=0.3), dict(plugin="jtok_m", ffn_kind="moe"),
    dict(plugin="jtok_m", scale_factor=False, plugin_norm=False),
], ids=["dense", "moe", "jtok", "jtok_nonorm", "jtokm", "jtokm_moe", "jtokm_raw"])
def test_model_gradients(kw):
    rng = np.random.default_rng(99)
    cfg = tiny(**kw)
    for _ in range(2):
        assert model_grad_check(cfg, rng) < 1e-5


def test_two_layer_d8_v16_gradients():
    cfg = tiny(vocab_size=16, hidden_dim=8, n_heads=2, ffn_dim=8, seq_len=3)
    assert model_grad_check(cfg, np.random.default_rng(5)) < 1e-5


def test_init_is_deterministic():
    cfg = tiny(plugin="jtok_m")
    a, b = bb.init_params(cfg), bb.init_params(cfg)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_count_params():
    cfg = tiny(plugin="jtok_m")
    counts = bb.count_params(bb.init_params(cfg))
    assert counts["token_indexed"] == cfg.n_layers * cfg.n_e * cfg.vocab_size * cfg.hidden_dim
    assert counts["total"] == counts["backbone"] + counts["token_indexed"]
