"""Per-layer token-indexed gate on the FFN residual.

For token ``x`` the layer looks up ``E[x]``, normalizes it onto the unit ball
and forms ``p = 1 + s * E[x] / (||E[x]|| + eps)``; the FFN increment is then
multiplied elementwise by ``p`` before the residual write-back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class JTokLayer:
    table: np.ndarray  # (V, d)
    scaler: np.ndarray  # (d,)
    eps: float = nx.DEFAULT_EPS
    normalize: bool = True

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        self.scaler = np.asarray(self.scaler, dtype=np.float64)
        if self.table.ndim != 2 or self.scaler.shape != (self.table.shape[1],):
            raise ValueError(f"table {self.table.shape} and scaler {self.scaler.shape} disagree")

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: np.random.Generator, std: float = 0.01,
             eps: float = nx.DEFAULT_EPS, normalize: bool = True) -> "JTokLayer":
        return cls(rng.normal(0.0, std, size=(vocab_size, dim)), np.zeros(dim), eps, normalize)


def _row(layer: JTokLayer, x: int) -> np.ndarray:
    if not 0 <= x < layer.vocab_size:
        raise IndexError(f"token id {x} outside [0, {layer.vocab_size})")
    return layer.table[x]


def _normalize(u: np.ndarray, eps: float) -> np.ndarray:
    return u / (np.linalg.norm(u) + eps)


def gate_vector(layer: JTokLayer, x: int) -> np.ndarray:
    u = _row(layer, x)
    v = _normalize(u, layer.eps) if layer.normalize else u
    return 1.0 + layer.scaler * v


def apply_gate(dm: np.ndarray, p: np.ndarray, a_tilde: np.ndarray) -> np.ndarray:
    dm, p, a_tilde = (np.asarray(v, dtype=np.float64) for v in (dm, p, a_tilde))
    if not dm.shape == p.shape == a_tilde.shape:
        raise ValueError(f"apply_gate: shapes {dm.shape}, {p.shape}, {a_tilde.shape}")
    return a_tilde + dm * p


def jtok_forward(layer: JTokLayer, x: int, dm: np.ndarray, a_tilde: np.ndarray):
    """Gate one token's FFN increment; returns ``(h_next, cache)``."""
    u = _row(layer, x).copy()
    norm = float(np.linalg.norm(u))
    v = u / (norm + layer.eps) if layer.normalize else u
    p = 1.0 + layer.scaler * v
    cache = {"x": x, "u": u, "norm": norm, "v": v, "p": p, "dm": np.asarray(dm, dtype=np.float64),
             "scaler": layer.scaler.copy(), "eps": layer.eps, "normalize": layer.normalize}
    return apply_gate(dm, p, a_tilde), cache


def jtok_backward(upstream: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
    """Hand-derived gradients of ``h_next`` w.r.t. ``E[x]``, ``s``, ``dm`` and ``a_tilde``."""
    g = np.asarray(upstream, dtype=np.float64)
    gp = g * cache["dm"]
    gv = gp * cache["scaler"]
    if cache["normalize"]:
        u, n, eps = cache["u"], cache["norm"], cache["eps"]
        radial = u * (u @ gv) / (n * (n + eps) ** 2) if n > 0 else np.zeros_like(u)
        gu = gv / (n + eps) - radial
    else:
        gu = gv
    return {"row": gu, "scaler": gp * cache["v"], "dm": g * cache["p"], "a_tilde": g.copy()}


def gate_tensor(table: Tensor, scaler: Tensor, ids: np.ndarray, eps: float,
                normalize: bool = True) -> Tensor:
    """Batched gate ``p`` for an id array of any shape; output is ``ids.shape + (d,)``."""
    rows = nx.gather_rows(table, ids)
    v = nx.l2norm_eps(rows, eps) if normalize else rows
    idx = "abcdefgh"[: ids.ndim]
    return nx.add_const(nx.einsum(f"z,{idx}z->{idx}z", scaler, v), 1.0)
