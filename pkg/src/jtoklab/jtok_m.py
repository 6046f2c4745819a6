"""Mixture of token-indexed tables with a sigmoid top-K router.

Each layer holds ``n_e`` tables of shape (V, d). A linear router scores the
RMS-normalized layer input, the top-K tables are mixed with sigmoid weights
renormalized over the selection, and the mixture is normalized, scaled by a
learnable per-dimension vector and by ``1/sqrt(2 N_l)``, then added to the
residual next to the FFN increment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor, _sigmoid

DEFAULT_N_E = 5
DEFAULT_K = 2
DEFAULT_AUX_COEF = 1e-4


@dataclass
class RoutingDecision:
    selected: list[int]
    weights: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("selected experts must be distinct")
        if np.any(self.weights <= 0) or abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("routing weights must be positive and sum to one")


@dataclass
class JTokMLayer:
    pool: np.ndarray  # (n_e, V, d)
    router: np.ndarray  # (d, n_e)
    scaler: np.ndarray  # (d,)
    top_k: int = DEFAULT_K
    n_layers: int = 1
    eps: float = nx.DEFAULT_EPS
    norm_weight: np.ndarray | None = None
    norm_eps: float = nx.DEFAULT_EPS
    normalize: bool = True
    scale_factor: bool = True

    def __post_init__(self):
        self.pool = np.asarray(self.pool, dtype=np.float64)
        self.router = np.asarray(self.router, dtype=np.float64)
        self.scaler = np.asarray(self.scaler, dtype=np.float64)
        n_e, _, d = self.pool.shape
        if self.router.shape != (d, n_e) or self.scaler.shape != (d,):
            raise ValueError("router must be (d, n_e) and scaler (d,)")
        if not 1 <= self.top_k <= n_e:
            raise ValueError(f"top_k={self.top_k} outside [1, {n_e}]")
        if self.norm_weight is None:
            self.norm_weight = np.ones(d)

    @property
    def n_e(self) -> int:
        return self.pool.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.pool.shape[1]

    @property
    def coef(self) -> float:
        return residual_scale(self.n_layers) if self.scale_factor else 1.0

    @classmethod
    def init(cls, vocab_size: int, dim: int, n_e: int, top_k: int, n_layers: int,
             rng: np.random.Generator, std: float = 0.01, **kw) -> "JTokMLayer":
        pool = rng.normal(0.0, std, size=(n_e, vocab_size, dim))
        router = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, n_e))
        return cls(pool, router, np.zeros(dim), top_k, n_layers, **kw)


def residual_scale(n_layers: int) -> float:
    return 1.0 / math.sqrt(2 * n_layers)


def _rms(h: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(h * h, axis=-1, keepdims=True)
    if eps == 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(ms > 0, weight * h / np.sqrt(ms), 0.0)
    return weight * h / np.sqrt(ms + eps)


def decide(logits: np.ndarray, k: int) -> RoutingDecision:
    """Top-K selection and sigmoid weights renormalized over the selection."""
    logits = np.asarray(logits, dtype=np.float64)
    sel = nx.topk(logits, k)
    sig = _sigmoid(logits[sel])
    return RoutingDecision(sel, sig / sig.sum(), logits)


def route(layer: JTokMLayer, h: np.ndarray) -> RoutingDecision:
    g = _rms(np.asarray(h, dtype=np.float64), layer.norm_weight, layer.norm_eps) @ layer.router
    return decide(g, layer.top_k)


def mix(layer: JTokMLayer, decision: RoutingDecision, x: int) -> np.ndarray:
    if not 0 <= x < layer.vocab_size:
        raise IndexError(f"token id {x} outside [0, {layer.vocab_size})")
    e = np.zeros(layer.pool.shape[2])
    for i, w in zip(decision.selected, decision.weights):
        e = e + w * layer.pool[i, x]
    return e


def injection(layer: JTokMLayer, e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    v = e / (np.linalg.norm(e) + layer.eps) if layer.normalize else e
    return layer.coef * layer.scaler * v


def inject(layer: JTokMLayer, e: np.ndarray, dm: np.ndarray, a_tilde: np.ndarray) -> np.ndarray:
    dm, a_tilde = np.asarray(dm, dtype=np.float64), np.asarray(a_tilde, dtype=np.float64)
    if not (np.shape(e) == dm.shape == a_tilde.shape):
        raise ValueError("inject: shape mismatch")
    return a_tilde + dm + injection(layer, e)


def aux_loss(probs: np.ndarray, selected: np.ndarray, n_e: int, k: int,
             coef: float = DEFAULT_AUX_COEF) -> float:
    """Load-balancing penalty ``coef * n_e * sum_i p_i f_i`` for one layer.

    ``probs`` is (T, n_e) routing probabilities; ``selected`` is a (T, n_e)
    boolean mask or a (T, K) integer array of chosen experts.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("aux_loss needs at least one token")
    t = probs.shape[0]
    if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("aux_loss: routing probabilities must sum to one per token")
    counts = _load_counts(selected, t, n_e)
    if counts.sum() != t * k:
        raise ValueError("aux_loss: every token must select exactly K experts")
    p = probs.sum(axis=0) / t
    f = counts / (t * k)
    # since sum(p) = sum(f) = 1, n_e*sum(p*f) = 1 + n_e*sum((p-u)*(f-u)); the
    # centered form returns coef exactly when the load is uniform
    u = 1.0 / n_e
    return float(coef * (1.0 + n_e * np.sum((p - u) * (f - u))))


def _load_counts(selected, t: int, n_e: int) -> np.ndarray:
    sel = np.asarray(selected)
    if sel.dtype == bool:
        return sel.sum(axis=0).astype(np.float64)
    counts = np.zeros(n_e)
    np.add.at(counts, sel.reshape(-1), 1.0)
    return counts


def pool_probabilities(logits: np.ndarray) -> np.ndarray:
    """Sigmoid scores normalized over the whole pool, per token."""
    s = _sigmoid(np.asarray(logits, dtype=np.float64))
    return s / s.sum(axis=-1, keepdims=True)


# ------------------------------------------------------- batched, hand-derived

def jtok_m_forward(layer: JTokMLayer, h: np.ndarray, tokens: np.ndarray, dm: np.ndarray,
                   a_tilde: np.ndarray, selection: np.ndarray | None = None):
    """Layer write-back for T tokens; returns ``(h_next, cache)``.

    ``selection`` (T, n_e bool) pins the routing set, as needed when probing
    the function with finite differences.
    """
    h = np.asarray(h, dtype=np.float64)
    ms = np.mean(h * h, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + layer.norm_eps)
    hn = h * r * layer.norm_weight
    g = hn @ layer.router
    mask = nx.topk_mask(g, layer.top_k) if selection is None else np.asarray(selection, dtype=bool)
    sig = _sigmoid(g)
    num = sig * mask
    den = num.sum(axis=-1, keepdims=True)
    w = num / den
    rows = layer.pool[:, tokens, :]  # (n_e, T, d)
    e = np.einsum("te,etd->td", w, rows)
    n = np.linalg.norm(e, axis=-1, keepdims=True)
    v = e / (n + layer.eps) if layer.normalize else e
    dr = layer.coef * layer.scaler * v
    h_next = a_tilde + dm + dr
    cache = dict(h=h, r=r, hn=hn, g=g, mask=mask, sig=sig, den=den, w=w, tokens=np.asarray(tokens),
                 rows=rows, e=e, n=n, v=v, dr=dr)
    return h_next, cache


def jtok_m_aux(layer: JTokMLayer, cache: dict, coef: float) -> float:
    return aux_loss(pool_probabilities(cache["g"]), cache["mask"], layer.n_e, layer.top_k, coef)


def jtok_m_backward(layer: JTokMLayer, upstream: np.ndarray, cache: dict,
                    aux_coef: float = 0.0) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * h_next) + aux`` at fixed routing selection.

    The selection mask is treated as a constant, including inside the aux term.
    """
    gy = np.asarray(upstream, dtype=np.float64)
    c = layer.coef
    gs = c * np.sum(gy * cache["v"], axis=0)
    gv = c * gy * layer.scaler
    if layer.normalize:
        e, n = cache["e"], cache["n"]
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = np.where(n > 0, e * np.sum(e * gv, axis=-1, keepdims=True)
                              / (n * (n + layer.eps) ** 2), 0.0)
        ge = gv / (n + layer.eps) - radial
    else:
        ge = gv
    w, mask, sig, den = cache["w"], cache["mask"], cache["sig"], cache["den"]
    gpool = np.zeros_like(layer.pool)
    contrib = np.einsum("te,td->etd", w, ge)
    for i in range(layer.n_e):
        np.add.at(gpool[i], cache["tokens"], contrib[i])
    gw = np.einsum("etd,td->te", cache["rows"], ge)
    gg = mask * sig * (1.0 - sig) * (gw - np.sum(gw * w, axis=-1, keepdims=True)) / den
    if aux_coef:
        t = gg.shape[0]
        f = mask.sum(axis=0) / (t * layer.top_k)
        full = sig.sum(axis=-1, keepdims=True)
        probs = sig / full
        gp = np.broadcast_to(aux_coef * layer.n_e * f / t, probs.shape)
        gg = gg + sig * (1.0 - sig) * (gp - np.sum(gp * probs, axis=-1, keepdims=True)) / full
    grouter = cache["hn"].T @ gg
    ghn = gg @ layer.router.T
    gxn = ghn * layer.norm_weight
    xn = cache["h"] * cache["r"]
    gh = cache["r"] * (gxn - xn * np.mean(gxn * xn, axis=-1, keepdims=True))
    return {"pool": gpool, "router": grouter, "scaler": gs, "h": gh, "dm": gy.copy(),
            "a_tilde": gy.copy()}


# ----------------------------------------------------------------- graph path

def jtok_m_tensor(pool: Tensor, router: Tensor, scaler: Tensor, hn: Tensor, ids: np.ndarray,
                  top_k: int, coef: float, eps: float, normalize: bool = True,
                  aux_coef: float = 0.0, selection: np.ndarray | None = None):
    """Graph version over (B, T) ids. Returns ``(dr, aux, info)``.

    ``hn`` is the normalized layer input (the attention input).
    """
    g = nx.einsum("btd,de->bte", hn, router)
    mask = nx.topk_mask(g.data, top_k) if selection is None else selection
    w = nx.sigmoid_weights(g, mask)
    rows = nx.gather_rows(pool, ids, axis=1)  # (n_e, B, T, d)
    e = nx.einsum("bte,ebtd->btd", w, rows)
    v = nx.l2norm_eps(e, eps) if normalize else e
    dr = nx.scale(nx.einsum("d,btd->btd", scaler, v), coef)
    n_e = pool.shape[0]
    tokens = mask.shape[0] * mask.shape[1]
    probs = nx.sigmoid_weights(g)
    f = mask.reshape(tokens, n_e).sum(axis=0) / (tokens * top_k)
    # sum_i p_i f_i with p_i the token mean of the pool-normalized probabilities
    p_mean = nx.scale(nx.sum_axis(probs, (0, 1)), 1.0 / tokens)
    aux = nx.scale(nx.einsum("e,e->", p_mean, Tensor(f)), aux_coef * n_e)
    return dr, aux, {"mask": mask, "weights": w.data, "logits": g.data}
