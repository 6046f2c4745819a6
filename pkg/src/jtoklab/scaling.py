"""Kaplan-form loss surfaces, isoFLOPs profiles and efficient-frontier fits.

Conventions: compute budgets use ``C = 6 * N_c * D``; frontier regressions are
``log2(L) = slope * log10(C) + intercept``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class BracketError(RuntimeError):
    """The minimum of a loss profile is not inside the search interval."""


class ConvexityError(ValueError):
    """A fitted valley quadratic opens downward, so it has no minimum."""


class FrontierFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ScalingParams:
    A: float
    B: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("A", "B", "alpha", "beta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a positive finite real, got {v}")

    @property
    def frontier_exponent(self) -> float:
        """``alpha*beta/(alpha+beta)``: the frontier falls as ``C**-exponent``."""
        return self.alpha * self.beta / (self.alpha + self.beta)

    def with_A(self, A: float) -> "ScalingParams":
        return ScalingParams(A, self.B, self.alpha, self.beta)


# Kaplan et al. (2020) constants in this parameterization: A = N_c, B = D_c,
# alpha = alpha_N, beta = alpha_D.
KAPLAN_2020 = ScalingParams(A=8.8e13, B=5.4e13, alpha=0.076, beta=0.095)


@dataclass(frozen=True)
class JTokMScalingConfig:
    eta: float
    rho: float = 0.25
    gamma_hat: float = 0.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.gamma_hat < 0:
            raise ValueError("gamma_hat must be non-negative")

    @property
    def capacity_multiplier(self) -> float:
        return 1.0 + self.eta * self.gamma_hat


@dataclass(frozen=True)
class FrontierPoint:
    C: float
    L_star: float

    def __post_init__(self):
        if not (self.C > 0 and self.L_star > 0):
            raise ValueError("frontier points need C > 0 and L_star > 0")


@dataclass(frozen=True)
class LogFit:
    slope: float
    intercept: float
    r_squared: float

    def predict(self, C: float) -> float:
        return 2.0 ** (self.slope * math.log10(C) + self.intercept)

    def as_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ loss model

def kaplan_loss(params: ScalingParams, N_c: float, D: float) -> float:
    """``[(A/N_c)^(alpha/beta) + B/D]^beta``; ``D=inf`` drops the data term."""
    if not (N_c > 0 and D > 0):
        raise ValueError("N_c and D must be positive")
    data_term = 0.0 if math.isinf(D) else params.B / D
    cap_term = 0.0 if math.isinf(N_c) else (params.A / N_c) ** (params.alpha / params.beta)
    return (cap_term + data_term) ** params.beta


def effective_params(N_c: float, cfg: JTokMScalingConfig) -> float:
    return N_c * cfg.capacity_multiplier


def isoflop_sweep(params: ScalingParams, C: float, grid: Sequence[float]) -> list[tuple[float, float]]:
    grid = list(grid)
    if not grid:
        raise ValueError("isoflop_sweep needs a non-empty grid")
    return [(n, kaplan_loss(params, n, C / (6.0 * n))) for n in grid]


def closed_form_optimum(params: ScalingParams, C: float) -> float:
    """Stationary point in ``N_c`` of the bracketed term along ``6 N_c D = C``."""
    r = params.alpha / params.beta
    return (r * params.A ** r * C / (6.0 * params.B)) ** (1.0 / (r + 1.0))


def quadratic_valley_fit(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares parabola in ``log N_c``; returns the vertex ``(N_c_star, L_star)``.

    ``points`` are ``(ln N_c, L)`` pairs.
    """
    if len(points) < 3:
        raise ValueError("need at least three points")
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    shift = x.mean()
    a, b, c = np.polyfit(x - shift, y, 2)
    scale = max(np.ptp(y), np.abs(y).max(), 1e-300)
    if a <= 1e-12 * scale:
        raise ConvexityError(f"fitted quadratic is not convex (leading coefficient {a:.3e})")
    xv = -b / (2.0 * a)
    return math.exp(xv + shift), float(c - b * b / (4.0 * a))


# --------------------------------------------------------------- frontier fits

def loglog_frontier_fit(points: Sequence[FrontierPoint]) -> LogFit:
    """Ordinary least squares of ``log2(L)`` on ``log10(C)``."""
    if len(points) < 2:
        raise ValueError("need at least two frontier points")
    x = np.array([math.log10(p.C) for p in points])
    y = np.array([math.log2(p.L_star) for p in points])
    if np.unique(x).size < 2:
        raise ValueError("need at least two distinct budgets")
    xc, yc = x - x.mean(), y - y.mean()
    slope = float(xc @ yc / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(yc @ yc)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return LogFit(slope, intercept, r2)


def compute_saving(alpha_slope: float, delta_beta: float) -> tuple[float, float]:
    """Iso-loss compute ratio ``10**(delta_beta/slope)`` and the saving ``1 - ratio``."""
    if alpha_slope == 0:
        raise ValueError("frontier slope must be non-zero")
    if alpha_slope > 0:
        raise ValueError("frontier slope must be negative")
    ratio = 10.0 ** (delta_beta / alpha_slope)
    return ratio, 1.0 - ratio


def frontier_shift_predict(params: ScalingParams, cfg: JTokMScalingConfig) -> float:
    return cfg.capacity_multiplier ** (-params.frontier_exponent)


# --------------------------------------------------------- numeric frontier

def golden_section(f: Callable[[float], float], lo: float, hi: float,
                   tol: float = 1e-10, max_iter: int = 500) -> tuple[float, float]:
    """Minimize a unimodal ``f`` on ``[lo, hi]`` down to an interval of width ``tol``."""
    a, b = lo, hi
    x1 = b - INV_PHI * (b - a)
    x2 = a + INV_PHI * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - INV_PHI * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (b - a)
            f2 = f(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def compute_optimal(params: ScalingParams, C: float, span: float = 1e6,
                    tol: float = 1e-10) -> tuple[float, float]:
    """Numerically minimize the loss over ``N_c`` at budget ``C``; returns ``(N_c*, L*)``.

    The search runs in ``ln N_c`` over ``[A/span, A*span]``; ``tol`` is the
    final interval width in ``ln N_c``, i.e. a relative tolerance on ``N_c``.
    """
    if C <= 0:
        raise ValueError("budget must be positive")
    r = params.alpha / params.beta
    k = 6.0 * params.B / C

    def bracket(log_n: float) -> float:
        n = math.exp(log_n)
        return (params.A / n) ** r + k * n

    lo, hi = math.log(params.A / span), math.log(params.A * span)
    grid = np.linspace(lo, hi, 241)
    vals = [bracket(x) for x in grid]
    i = int(np.argmin(vals))
    if i == 0 or i == len(grid) - 1:
        raise BracketError(f"minimum for C={C:.3e} lies outside [A/{span:g}, A*{span:g}]")
    x, fx = golden_section(bracket, grid[i - 1], grid[i + 1], tol)
    return math.exp(x), fx ** params.beta


def frontier_verify(params: ScalingParams, cfg: JTokMScalingConfig, C: float) -> tuple[float, float, float]:
    """Numeric ``(L*_base, L*_jtokm, ratio)`` at budget ``C``."""
    _, base = compute_optimal(params, C)
    _, boosted = compute_optimal(params.with_A(params.A / cfg.capacity_multiplier), C)
    return base, boosted, boosted / base


def iso_loss_compute_ratio(params: ScalingParams, cfg: JTokMScalingConfig, C_ref: float,
                           search_decades: float = 2.0) -> float:
    """``C_jtokm / C_base`` needed to reach the base frontier loss at ``C_ref``.

    Root-finds the boosted numeric frontier in ``ln C`` over
    ``[C_ref * 10**-search_decades, C_ref]``.
    """
    boosted = params.with_A(params.A / cfg.capacity_multiplier)
    target = compute_optimal(params, C_ref)[1]
    log_ref = math.log(C_ref)

    def gap(log_c: float) -> float:
        return math.log(compute_optimal(boosted, math.exp(log_c))[1]) - math.log(target)

    lo = log_ref - search_decades * math.log(10.0)
    if cfg.capacity_multiplier == 1.0:
        return 1.0
    log_c = brentq(gap, lo, log_ref, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    return math.exp(log_c - log_ref)


@dataclass
class GammaFit:
    gamma_hat: float
    per_budget: list[float]
    max_rel_spread: float
    non_positive: bool


def gamma_from_ratio(loss_ratio: float, params: ScalingParams, eta: float) -> float:
    """Invert the frontier shift: ``((L_base/L_jtokm)**(1/exponent) - 1) / eta``."""
    return (loss_ratio ** (1.0 / params.frontier_exponent) - 1.0) / eta


def gamma_fit(triples: Sequence[tuple[float, float, float]], params: ScalingParams,
              eta: float) -> GammaFit:
    """Per-budget ``gamma_hat`` from ``(C, L_base, L_jtokm)`` triples, then averaged."""
    if not triples:
        raise ValueError("need at least one (C, L_base, L_jtokm) triple")
    if eta <= 0:
        raise ValueError("eta must be positive to identify gamma")
    per = [gamma_from_ratio(lb / lj, params, eta) for _, lb, lj in triples]
    mean = float(np.mean(per))
    non_positive = mean <= 0 or any(lj >= lb for _, lb, lj in triples)
    if non_positive:
        warnings.warn("JTok-M loss is not below the base loss; gamma_hat is non-positive",
                      RuntimeWarning, stacklevel=2)
    spread = 0.0 if mean == 0 else max(abs(g - mean) for g in per) / abs(mean)
    return GammaFit(mean, per, spread, non_positive)


# ------------------------------------------------------------------ frontier io

FRONTIER_COLUMNS = ("C", "L_base", "L_jtokm")


def parse_frontier_csv(text: str) -> list[tuple[float, float, float]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise FrontierFormatError(1, "empty frontier file")
    header = [c.strip() for c in rows[0]]
    if tuple(header) != FRONTIER_COLUMNS:
        raise FrontierFormatError(1, f"expected header {','.join(FRONTIER_COLUMNS)}, got {','.join(header)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not any(c.strip() for c in row):
            continue
        if len(row) != 3:
            raise FrontierFormatError(lineno, f"expected 3 columns, got {len(row)}")
        try:
            c, lb, lj = (float(v) for v in row)
        except ValueError:
            raise FrontierFormatError(lineno, "non-numeric value") from None
        if not (c > 0 and lb > 0 and lj > 0) or not all(map(math.isfinite, (c, lb, lj))):
            raise FrontierFormatError(lineno, "values must be positive and finite")
        out.append((c, lb, lj))
    if not out:
        raise FrontierFormatError(len(rows) + 1, "no data rows")
    return out


def load_frontier_csv(path: str | Path) -> list[tuple[float, float, float]]:
    return parse_frontier_csv(Path(path).read_text(encoding="utf-8"))


def table5() -> list[tuple[float, float, float]]:
    """Compute-optimal losses of the vanilla MoE and JTok-M frontiers (eta=50, rho=0.25)."""
    text = resources.files("jtoklab.data").joinpath("table5.csv").read_text(encoding="utf-8")
    return parse_frontier_csv(text)


def write_frontier_csv(path: str | Path, triples: Sequence[tuple[float, float, float]]) -> None:
    lines = [",".join(FRONTIER_COLUMNS)] + [f"{c!r},{lb!r},{lj!r}" for c, lb, lj in triples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
