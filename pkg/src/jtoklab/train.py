"""Deterministic toy training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import numerics as nx
from .config import ModelConfig
from .sys_sim import markov_corpus


class AdamW:
    def __init__(self, params: bb.Params, lr: float, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            if self.wd and not k.endswith(bb.NO_DECAY_SUFFIXES):
                p.data *= 1.0 - lr * self.wd
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def lr_at(step: int, cfg: ModelConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr``."""
    warm = max(1, int(round(cfg.warmup_ratio * cfg.steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, cfg.steps - warm)
    floor = cfg.min_lr_ratio
    return cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def split_point(corpus: np.ndarray, cfg: ModelConfig) -> int:
    """Training uses ``corpus[:split]``; the tail is held out for evaluation."""
    return corpus.size - int(corpus.size * cfg.eval_fraction)


class Batches:
    """Random windows from the training part of the corpus, drawn from the data stream of ``seed``."""

    def __init__(self, corpus: np.ndarray, cfg: ModelConfig):
        self.corpus = corpus[:split_point(corpus, cfg)]
        self.cfg = cfg
        self.rng = nx.make_rng(cfg.seed, "data")

    def next(self) -> np.ndarray:
        n = self.cfg.seq_len + 1
        starts = self.rng.integers(0, self.corpus.size - n, size=self.cfg.batch_size)
        return np.stack([self.corpus[s:s + n] for s in starts])


def corpus_for(cfg: ModelConfig) -> np.ndarray:
    return markov_corpus(cfg.vocab_size, cfg.corpus_zipf, cfg.corpus_tokens, cfg.corpus_seed,
                         cfg.corpus_order)


@dataclass
class StepMetrics:
    step: int
    train_loss: float
    aux_loss: float
    layer_std: list[float]
    lr: float
    grad_norm: float
    expert_load: list[float] = field(default_factory=list)


def train(cfg: ModelConfig, params: bb.Params | None = None, corpus: np.ndarray | None = None,
          callback=None) -> tuple[bb.Params, list[StepMetrics]]:
    params = params if params is not None else bb.init_params(cfg)
    corpus = corpus if corpus is not None else corpus_for(cfg)
    batches = Batches(corpus, cfg)
    opt = AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    history: list[StepMetrics] = []
    for step in range(cfg.steps):
        tokens = batches.next()
        for p in params.values():
            p.grad = None
        res = bb.forward_loss(tokens, cfg, params)
        res.objective.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in params.items()}
        gnorm = clip_global_norm(grads, cfg.grad_clip)
        lr = lr_at(step, cfg)
        load = _expert_load(res.selections, cfg)
        m = StepMetrics(step, res.loss.item(), res.aux.item(), res.layer_std, lr, gnorm, load)
        history.append(m)
        if callback is not None:
            callback(m)
        opt.step(grads, lr)
    return params, history


def _expert_load(selections: dict[str, np.ndarray], cfg: ModelConfig) -> list[float]:
    """Fraction of routing slots per JTok-M table, averaged over layers."""
    masks = [v for k, v in selections.items() if k.endswith("jtokm")]
    if not masks:
        return []
    counts = sum(m.reshape(-1, cfg.n_e).sum(axis=0) for m in masks)
    total = counts.sum()
    return [float(c / total) for c in counts]


def evaluate(cfg: ModelConfig, params: bb.Params, corpus: np.ndarray, chunk: int = 32) -> float:
    """Mean next-token loss over consecutive non-overlapping windows of the held-out tail."""
    held = corpus[split_point(corpus, cfg):]
    n = cfg.seq_len + 1
    count = min(cfg.eval_windows, held.size // n)
    windows = held[:count * n].reshape(count, n)
    frozen = {k: nx.Tensor(p.data) for k, p in params.items()}
    total = 0.0
    for i in range(0, count, chunk):
        toks = windows[i:i + chunk]
        total += bb.forward_loss(toks, cfg, frozen).loss.item() * len(toks)
    return total / count
