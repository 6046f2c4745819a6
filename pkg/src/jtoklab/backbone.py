"""Pre-norm Transformer language model with optional token-indexed plugins.

Layer ``l`` computes, per token,

    da = Attn(RMSNorm(h));  a = h + da
    dm = FFN(RMSNorm(a));   h' = a + dm

and the plugins change only the last write-back: JTok gates ``dm``
elementwise, JTok-M adds a routed, normalized table mixture next to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import jtok as jt
from . import jtok_m as jm
from . import numerics as nx
from .config import ModelConfig
from .numerics import Tensor

Params = dict[str, Tensor]

# parameters excluded from weight decay
NO_DECAY_SUFFIXES = ("norm", "scaler", "tok_emb", "jtok_table", "jtokm_pool")


@dataclass
class ForwardResult:
    loss: Tensor
    aux: Tensor
    layer_std: list[float]
    selections: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def objective(self) -> Tensor:
        return nx.add(self.loss, self.aux)


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> Params:
    """Backbone parameters first, then plugin parameters, from one init stream.

    Drawing in this order keeps the backbone identical across plugin choices
    for a given seed.
    """
    rng = rng if rng is not None else nx.make_rng(cfg.seed, "init")
    d, f, h, hd, L = cfg.hidden_dim, cfg.ffn_dim, cfg.n_heads, cfg.head_dim, cfg.n_layers
    std = cfg.init_std
    out_std = std / math.sqrt(2 * L)
    arrays: dict[str, np.ndarray] = {"tok_emb": rng.normal(0, std, (cfg.vocab_size, d))}
    for i in range(L):
        p = f"l{i}."
        arrays[p + "attn_norm"] = np.ones(d)
        arrays[p + "wq"] = rng.normal(0, std, (d, h, hd))
        arrays[p + "wk"] = rng.normal(0, std, (d, h, hd))
        arrays[p + "wv"] = rng.normal(0, std, (d, h, hd))
        arrays[p + "wo"] = rng.normal(0, out_std, (h, hd, d))
        arrays[p + "ffn_norm"] = np.ones(d)
        if cfg.ffn_kind == "dense":
            arrays[p + "w1"] = rng.normal(0, std, (d, f))
            arrays[p + "w3"] = rng.normal(0, std, (d, f))
            arrays[p + "w2"] = rng.normal(0, out_std, (f, d))
        else:
            e, s = cfg.moe_n_experts, cfg.moe_n_shared
            arrays[p + "moe_router"] = rng.normal(0, std, (d, e))
            arrays[p + "ew1"] = rng.normal(0, std, (e, d, f))
            arrays[p + "ew3"] = rng.normal(0, std, (e, d, f))
            arrays[p + "ew2"] = rng.normal(0, out_std, (e, f, d))
            if s:
                arrays[p + "sw1"] = rng.normal(0, std, (s, d, f))
                arrays[p + "sw3"] = rng.normal(0, std, (s, d, f))
                arrays[p + "sw2"] = rng.normal(0, out_std, (s, f, d))
    arrays["final_norm"] = np.ones(d)
    arrays["lm_head"] = rng.normal(0, std, (d, cfg.vocab_size))
    for i in range(L):
        p = f"l{i}."
        if cfg.plugin == "jtok":
            arrays[p + "jtok_table"] = rng.normal(0, cfg.table_init_std, (cfg.vocab_size, d))
            arrays[p + "jtok_scaler"] = np.zeros(d)
        elif cfg.plugin == "jtok_m":
            arrays[p + "jtokm_pool"] = rng.normal(0, cfg.table_init_std, (cfg.n_e, cfg.vocab_size, d))
            arrays[p + "jtokm_router"] = rng.normal(0, 1 / math.sqrt(d), (d, cfg.n_e))
            arrays[p + "jtokm_scaler"] = np.zeros(d)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def _causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def attention_sublayer(h: Tensor, params: Params, layer: int, cfg: ModelConfig,
                       hn: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Causal multi-head attention on the normalized state; returns ``(da, a)``."""
    if h.shape[1] == 0:
        raise ValueError("attention needs at least one position")
    p = f"l{layer}."
    if hn is None:
        hn = nx.rmsnorm(h, params[p + "attn_norm"], cfg.norm_eps)
    q = nx.rope(nx.einsum("btd,dhk->bthk", hn, params[p + "wq"]))
    k = nx.rope(nx.einsum("btd,dhk->bthk", hn, params[p + "wk"]))
    v = nx.einsum("btd,dhk->bthk", hn, params[p + "wv"])
    scores = nx.scale(nx.einsum("bqhk,bshk->bhqs", q, k), 1.0 / math.sqrt(cfg.head_dim))
    probs = nx.softmax(scores, mask=_causal_mask(h.shape[1]))
    ctx = nx.einsum("bhqs,bshk->bqhk", probs, v)
    da = nx.einsum("bqhk,hkd->bqd", ctx, params[p + "wo"])
    return da, nx.add(h, da)


def _gated_mlp(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    a = nx.einsum("btd,df->btf", x, w1)
    b = nx.einsum("btd,df->btf", x, w3)
    return nx.einsum("btf,fd->btd", nx.mul(nx.silu(a), b), w2)


def _expert_mlps(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    """All experts on all tokens: (B, T, E, d)."""
    a = nx.einsum("btd,edf->btef", x, w1)
    b = nx.einsum("btd,edf->btef", x, w3)
    return nx.einsum("btef,efd->bted", nx.mul(nx.silu(a), b), w2)


def ffn_sublayer(a: Tensor, params: Params, layer: int, cfg: ModelConfig,
                 selection: np.ndarray | None = None) -> tuple[Tensor, np.ndarray | None]:
    """FFN on the normalized state; returns ``(dm, routing mask or None)``.

    The MoE variant evaluates every expert densely and weights them with a
    softmax over the top-k router logits, which is exact at toy scale.
    """
    p = f"l{layer}."
    x = nx.rmsnorm(a, params[p + "ffn_norm"], cfg.norm_eps)
    if cfg.ffn_kind == "dense":
        return _gated_mlp(x, params[p + "w1"], params[p + "w3"], params[p + "w2"]), None
    logits = nx.einsum("btd,de->bte", x, params[p + "moe_router"])
    mask = nx.topk_mask(logits.data, cfg.moe_top_k) if selection is None else selection
    gates = nx.softmax(logits, mask=mask)
    experts = _expert_mlps(x, params[p + "ew1"], params[p + "ew3"], params[p + "ew2"])
    dm = nx.einsum("bte,bted->btd", gates, experts)
    if cfg.moe_n_shared:
        shared = _expert_mlps(x, params[p + "sw1"], params[p + "sw3"], params[p + "sw2"])
        dm = nx.add(dm, nx.sum_axis(shared, 2))
    return dm, mask


def forward_hidden(tokens: np.ndarray, cfg: ModelConfig, params: Params,
                   pin: dict[str, np.ndarray] | None = None):
    """Run the layer stack on (B, T) ids; returns ``(h_final, aux, stats, selections)``."""
    pin = pin or {}
    selections: dict[str, np.ndarray] = {}
    h = nx.gather_rows(params["tok_emb"], tokens)
    aux_terms: list[Tensor] = []
    stats: list[float] = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        hn = nx.rmsnorm(h, params[p + "attn_norm"], cfg.norm_eps)
        if cfg.plugin == "jtok_m":
            # routing reads the attention input, so the lookup is issuable before the layer runs
            dr, aux, info = jm.jtok_m_tensor(
                params[p + "jtokm_pool"], params[p + "jtokm_router"], params[p + "jtokm_scaler"],
                hn, tokens, cfg.top_k,
                jm.residual_scale(cfg.n_layers) if cfg.scale_factor else 1.0,
                cfg.plugin_eps, cfg.plugin_norm, cfg.aux_coef, pin.get(p + "jtokm"))
            selections[p + "jtokm"] = info["mask"]
            aux_terms.append(aux)
        _, a = attention_sublayer(h, params, i, cfg, hn=hn)
        dm, moe_mask = ffn_sublayer(a, params, i, cfg, pin.get(p + "moe"))
        if moe_mask is not None:
            selections[p + "moe"] = moe_mask
        if cfg.plugin == "jtok":
            gate = jt.gate_tensor(params[p + "jtok_table"], params[p + "jtok_scaler"], tokens,
                                  cfg.plugin_eps, cfg.plugin_norm)
            h = nx.add(a, nx.mul(dm, gate))
        elif cfg.plugin == "jtok_m":
            h = nx.add(nx.add(a, dm), dr)
        else:
            h = nx.add(a, dm)
        stats.append(float(np.std(h.data)))
    if aux_terms:
        aux = nx.scale(nx.sum_all(nx.stack_scalars(aux_terms)), 1.0 / len(aux_terms))
    else:
        aux = Tensor(np.array(0.0))
    return h, aux, stats, selections


def forward_loss(tokens, cfg: ModelConfig, params: Params,
                 pin: dict[str, np.ndarray] | None = None) -> ForwardResult:
    """Next-token cross-entropy on (B, T+1) or (T+1,) ids."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.dtype.kind not in "iu":
        raise TypeError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    if tokens.shape[1] < 2:
        raise ValueError("need at least two tokens per sequence")
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    h, aux, stats, selections = forward_hidden(inputs, cfg, params, pin)
    hf = nx.rmsnorm(h, params["final_norm"], cfg.norm_eps)
    logits = nx.einsum("btd,dv->btv", hf, params["lm_head"])
    b, t, v = logits.shape
    loss = nx.cross_entropy(nx.reshape(logits, (b * t, v)), targets.reshape(-1))
    return ForwardResult(loss, aux, stats, selections)


def count_params(params: Params) -> dict[str, int]:
    token_indexed = sum(t.data.size for k, t in params.items()
                        if k.endswith(("jtok_table", "jtokm_pool")))
    total = sum(t.data.size for t in params.values())
    return {"total": total, "token_indexed": token_indexed, "backbone": total - token_indexed}
