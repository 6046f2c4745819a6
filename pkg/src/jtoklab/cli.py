"""Command-line entry point: ``jtoklab {train,ablate,fit,bench}``.

Every command writes into an output directory (``--out``, default
``$JTOKLAB_OUT/<command>``, with ``JTOKLAB_OUT`` defaulting to ``runs``) and
finishes with a ``manifest.json`` that lists every file it wrote.  Wall-clock
times appear only in the manifest; all other outputs are byte-identical on
rerun.  Failures print ``{"error": {...}}`` on stderr and exit non-zero.

Config fields can be overridden as ``--key value`` on train and ablate.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import backbone as bb
from . import checkpoint
from . import jtok as jt
from . import scaling as sc
from . import sys_sim as ss
from . import train as tr
from .config import ConfigError, ModelConfig, coerce_override, load_config, make_config

OUT_ENV = "JTOKLAB_OUT"

# published Appendix C fit values, with the acceptance tolerances
REFERENCE_FITS = {
    "base": {"slope": -0.2016, "intercept": 5.1334, "r_squared": 0.9994},
    "jtokm": {"slope": -0.2009, "intercept": 5.0881, "r_squared": 0.9991},
}
FIT_RANGES = {
    "base": {"slope": (-0.2021, -0.2011), "intercept": (5.131, 5.136)},
    "jtokm": {"slope": (-0.2014, -0.2004), "intercept": (5.086, 5.091)},
}
PAPER_DELTA_BETA = 0.038
PAPER_SLOPE = -0.2016
TABLE5_ETA = 50.0


class CommandError(Exception):
    def __init__(self, kind: str, message: str, **info):
        super().__init__(message)
        self.kind = kind
        self.info = info


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    output_dir: str
    version: str
    start_time: float = 0.0
    end_time: float = 0.0
    files: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"command": self.command, "config_path": self.config_path, "seed": self.seed,
                "output_dir": self.output_dir, "version": self.version,
                "start_time": self.start_time, "end_time": self.end_time,
                "files": sorted(self.files)}


class Output:
    """Writes files under one directory and remembers them for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(dumps(obj), encoding="utf-8")

    def text(self, name: str, text: str) -> None:
        self.path(name).write_text(text, encoding="utf-8")


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return repr(v)
        return v
    return obj


# --------------------------------------------------------------------- train

def metrics_csv(history: list[tr.StepMetrics], n_layers: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "train_loss", "aux_loss"] + [f"layer_std_{i}" for i in range(n_layers)])
    for m in history:
        w.writerow([m.step, repr(m.train_loss), repr(m.aux_loss)] + [repr(s) for s in m.layer_std])
    return buf.getvalue()


def routing_csv(history: list[tr.StepMetrics], n_e: int, aux_coef: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "aux_coef"] + [f"load_{i}" for i in range(n_e)])
    for m in history:
        w.writerow([m.step, repr(aux_coef)] + [repr(x) for x in m.expert_load])
    return buf.getvalue()


def run_one(cfg: ModelConfig, corpus: np.ndarray | None = None):
    params, history = tr.train(cfg, corpus=corpus)
    losses = [m.train_loss for m in history]
    if not all(math.isfinite(x) for x in losses):
        raise CommandError("diverged", "training loss became non-finite", seed=cfg.seed)
    return params, history


def summarize_run(cfg: ModelConfig, params, history, corpus) -> dict:
    tail = max(1, len(history) // 20)
    return {
        "plugin": cfg.plugin,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "first_loss": history[0].train_loss,
        "final_train_loss": history[-1].train_loss,
        "final_train_loss_tail_mean": float(np.mean([m.train_loss for m in history[-tail:]])),
        "final_eval_loss": tr.evaluate(cfg, params, corpus),
        "final_layer_std": history[-1].layer_std,
        "params": bb.count_params(params),
    }


def cmd_train(args, cfg: ModelConfig, out: Output) -> dict:
    corpus = tr.corpus_for(cfg)
    params, history = run_one(cfg, corpus)
    out.text("metrics.csv", metrics_csv(history, cfg.n_layers))
    if cfg.plugin == "jtok_m":
        out.text("routing.csv", routing_csv(history, cfg.n_e, cfg.aux_coef))
    summary = summarize_run(cfg, params, history, corpus)
    summary["config"] = cfg.model_dump()
    out.json("summary.json", summary)
    checkpoint.save(out.path("checkpoint.bin"), params, cfg.model_dump())
    return summary


# -------------------------------------------------------------------- ablate

ABLATIONS = {
    "no_norm": {"plugins": ("jtok", "jtok_m"), "change": {"plugin_norm": False}},
    "no_scale_factor": {"plugins": ("jtok_m",), "change": {"scale_factor": False}},
}


def gate_probe(cfg: ModelConfig) -> dict:
    """Check the un-normalized gate on one probe token: p = 1 + s * E[x]."""
    rng = np.random.default_rng(0)
    row = rng.normal(size=cfg.hidden_dim)
    s = rng.normal(size=cfg.hidden_dim)
    layer = jt.JTokLayer(row[None, :], s, cfg.plugin_eps, normalize=False)
    got = jt.gate_vector(layer, 0)
    err = float(np.max(np.abs(got - (1.0 + s * row))))
    return {"probe_max_abs_err": err, "ok": err == 0.0}


def after_warmup(cfg: ModelConfig) -> int:
    return max(1, int(round(cfg.warmup_ratio * cfg.steps)))


def ablation_pair(cfg: ModelConfig, flag: str, corpus: np.ndarray) -> dict:
    variant = cfg.replace(**ABLATIONS[flag]["change"])
    p0, h0 = run_one(cfg, corpus)
    p1, h1 = run_one(variant, corpus)
    start = after_warmup(cfg)
    std0 = [float(np.mean(m.layer_std)) for m in h0]
    std1 = [float(np.mean(m.layer_std)) for m in h1]
    rec = {
        "seed": cfg.seed,
        "first_loss_identical": h0[0].train_loss == h1[0].train_loss,
        "reference": summarize_run(cfg, p0, h0, corpus),
        "ablated": summarize_run(variant, p1, h1, corpus),
        "warmup_steps": start,
        "std_ablated_ge_after_warmup": all(b >= a for a, b in zip(std0[start:], std1[start:])),
        "loss_ablated_ge": None,
    }
    rec["loss_ablated_ge"] = rec["ablated"]["final_eval_loss"] >= rec["reference"]["final_eval_loss"]
    if flag == "no_scale_factor":
        rec["std_trajectory"] = {"reference": std0, "ablated": std1}
    else:
        rec["loss_trajectory"] = {"reference": [m.train_loss for m in h0],
                                  "ablated": [m.train_loss for m in h1]}
    return rec, (h0, h1, variant)


def cmd_ablate(args, cfg: ModelConfig, out: Output) -> dict:
    flag = args.flag
    if cfg.plugin not in ABLATIONS[flag]["plugins"]:
        raise CommandError("incompatible_flag",
                           f"{flag} needs plugin in {list(ABLATIONS[flag]['plugins'])}, got {cfg.plugin}",
                           field="plugin")
    corpus = tr.corpus_for(cfg)
    runs = []
    for k in range(args.seeds):
        seed_cfg = cfg.replace(seed=cfg.seed + k)
        rec, (h0, h1, variant) = ablation_pair(seed_cfg, flag, corpus)
        out.text(f"metrics_reference_seed{seed_cfg.seed}.csv", metrics_csv(h0, cfg.n_layers))
        out.text(f"metrics_{flag}_seed{seed_cfg.seed}.csv", metrics_csv(h1, cfg.n_layers))
        runs.append(rec)
    if not all(r["first_loss_identical"] for r in runs):
        raise CommandError("postcondition", "matched runs disagree at step 0")
    report = {"flag": flag, "config": cfg.model_dump(), "runs": runs,
              "seeds_loss_ablated_ge": sum(r["loss_ablated_ge"] for r in runs),
              "seeds_std_ablated_ge_after_warmup": sum(r["std_ablated_ge_after_warmup"] for r in runs)}
    if flag == "no_norm":
        report["gate_probe"] = gate_probe(cfg)
        if not report["gate_probe"]["ok"]:
            raise CommandError("postcondition", "un-normalized gate formula mismatch")
    out.json("ablation.json", report)
    return {k: v for k, v in report.items() if k != "runs"}


# ----------------------------------------------------------------------- fit

def fit_report(triples, eta: float = TABLE5_ETA, params: sc.ScalingParams = sc.KAPLAN_2020) -> dict:
    base = sc.loglog_frontier_fit([sc.FrontierPoint(c, lb) for c, lb, _ in triples])
    jm = sc.loglog_frontier_fit([sc.FrontierPoint(c, lj) for c, _, lj in triples])
    fits = {"base": base.as_dict(), "jtokm": jm.as_dict()}
    checks = {}
    for name, fit in fits.items():
        for key, (lo, hi) in FIT_RANGES[name].items():
            checks[f"{name}_{key}"] = {"value": fit[key], "range": [lo, hi],
                                       "ok": lo <= fit[key] <= hi}
        checks[f"{name}_r_squared"] = {"value": fit["r_squared"], "min": 0.999,
                                       "ok": fit["r_squared"] >= 0.999}
    savings = {}
    ratio, saving = sc.compute_saving(PAPER_SLOPE, PAPER_DELTA_BETA)
    savings["published_delta_beta"] = {"delta_beta": PAPER_DELTA_BETA, "slope": PAPER_SLOPE,
                                       "ratio": ratio, "saving": saving,
                                       "target": 0.352, "tolerance": 0.005,
                                       "ok": abs(saving - 0.352) <= 0.005}
    db = base.intercept - jm.intercept
    ratio, saving = sc.compute_saving(base.slope, db)
    savings["fitted_intercept_difference"] = {"delta_beta": db, "slope": base.slope,
                                              "ratio": ratio, "saving": saving}
    ref = REFERENCE_FITS
    db = ref["base"]["intercept"] - ref["jtokm"]["intercept"]
    ratio, saving = sc.compute_saving(ref["base"]["slope"], db)
    savings["published_intercept_difference"] = {"delta_beta": db, "slope": ref["base"]["slope"],
                                                 "ratio": ratio, "saving": saving}
    gfit = sc.gamma_fit(triples, params, eta)
    cfg = sc.JTokMScalingConfig(eta=eta, gamma_hat=max(gfit.gamma_hat, 0.0))
    cross = []
    for c, lb, lj in triples:
        b, m, r = sc.frontier_verify(params, cfg, c)
        pred = sc.frontier_shift_predict(params, cfg)
        cross.append({"C": c, "numeric_ratio": r, "predicted_ratio": pred,
                      "rel_err": abs(r - pred) / pred, "ok": abs(r - pred) / pred < 1e-6,
                      "measured_ratio": lj / lb})
    return {
        "n_points": len(triples),
        "fits": fits,
        "reference_fits": ref,
        "checks": checks,
        "savings": savings,
        "gamma_fit": {"eta": eta, "scaling_params": vars(params), "gamma_hat": gfit.gamma_hat,
                      "per_budget": gfit.per_budget, "max_rel_spread": gfit.max_rel_spread,
                      "non_positive": gfit.non_positive},
        "frontier_cross_check": cross,
    }


def cmd_fit(args, cfg, out: Output) -> dict:
    if args.csv:
        try:
            triples = sc.load_frontier_csv(args.csv)
        except sc.FrontierFormatError as exc:
            raise CommandError("malformed_csv", str(exc), line=exc.line) from None
        except OSError as exc:
            raise CommandError("io", str(exc)) from None
    else:
        triples = sc.table5()
    report = fit_report(triples, eta=args.eta)
    report["source"] = args.csv or "bundled:table5"
    if not all(x["ok"] for x in report["frontier_cross_check"]):
        raise CommandError("postcondition", "numeric frontier disagrees with the closed form")
    out.json("fits.json", report)
    return {"fits": report["fits"], "savings": {k: v["saving"] for k, v in report["savings"].items()}}


# --------------------------------------------------------------------- bench

def bench_report(vocab_size: int, tokens: int, zipf: float, dim: int, n_layers: int, n_e: int,
                 top_k: int, n_shards: int, seed: int, trace: ss.AccessTrace | None = None) -> dict:
    if trace is None:
        trace = ss.zipf_generate(vocab_size, zipf, tokens, seed)
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(vocab_size, dim))
    gathered, dedup = ss.dedup_gather(table, trace)
    identical = bool(np.array_equal(gathered, ss.naive_gather(table, trace)))
    n = len(trace)
    report = {
        "trace": {"vocab_size": trace.vocab_size, "tokens": n, "unique": trace.n_unique,
                  "zipf_exponent": zipf, "seed": seed},
        "dedup": dict(dedup.as_dict(ss.BYTES_PER_ELEMENT), bit_identical=identical,
                      read_ratio=dedup.elements_read / dedup.elements_read_naive if n else 1.0,
                      unique_over_tokens=trace.n_unique / n if n else 1.0),
    }
    pool = rng.normal(size=(n_e, vocab_size, dim))
    layout = ss.ShardLayout.expert_sharded(n_e, n_shards, vocab_size)
    sel, w = ss.random_routing(n, n_e, top_k, seed, n_layers=1,
                               co_locate=layout if n_shards > 1 else None)
    mixed, prem = ss.premix_shard(layout, pool, sel[0], w[0], trace)
    ref = ss.unsharded_mix(pool, sel[0], w[0], trace)
    naive = prem.elements_communicated_naive
    report["premix"] = dict(prem.as_dict(ss.BYTES_PER_ELEMENT), n_shards=n_shards, top_k=top_k,
                            bit_identical=bool(np.array_equal(mixed, ref)),
                            comm_ratio=prem.elements_communicated / naive if naive else 0.0)
    sel_l, _ = ss.random_routing(n, n_e, top_k, seed + 1, n_layers=n_layers)
    report["offload"] = {
        "jtok": ss.offload_volume("jtok", trace, dim, n_layers).as_dict(ss.BYTES_PER_ELEMENT),
        "jtok_m": ss.offload_volume("jtok_m", trace, dim, n_layers, sel_l).as_dict(ss.BYTES_PER_ELEMENT),
    }
    report["lookup_schedule"] = {p: ss.lookup_schedule(p, n_layers) for p in ("jtok", "jtok_m")}
    return report


def cmd_bench(args, cfg, out: Output) -> dict:
    for name in ("vocab_size", "tokens", "dim", "n_layers", "n_e", "top_k", "n_shards"):
        if getattr(args, name) < 1:
            raise CommandError("invalid_argument", f"--{name.replace('_', '-')} must be positive",
                               field=name)
    if args.top_k > args.n_e:
        raise CommandError("invalid_argument", "--top-k exceeds --n-e", field="top_k")
    if args.n_shards > args.n_e:
        raise CommandError("invalid_argument", "--n-shards exceeds --n-e", field="n_shards")
    if args.n_shards > 1 and (args.n_e // args.n_shards) < args.top_k:
        raise CommandError("invalid_argument", "each shard must own at least top-k tables",
                           field="n_shards")
    trace = None
    if args.trace:
        try:
            trace = ss.read_trace(args.trace, args.vocab_size)
        except (OSError, ValueError) as exc:
            raise CommandError("invalid_trace", str(exc)) from None
    report = bench_report(args.vocab_size, args.tokens, args.zipf, args.dim, args.n_layers,
                          args.n_e, args.top_k, args.n_shards, args.seed, trace)
    out.json("traffic.json", report)
    return {"unique_over_tokens": report["dedup"]["unique_over_tokens"],
            "comm_ratio": report["premix"]["comm_ratio"]}


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jtoklab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if config:
            sp.add_argument("--config", help="JSON config with schema_version")

    t = sub.add_parser("train", help="toy training run")
    common(t)
    a = sub.add_parser("ablate", help="matched ablation runs")
    common(a)
    a.add_argument("--flag", required=True, choices=sorted(ABLATIONS))
    a.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    f = sub.add_parser("fit", help="frontier regressions and savings")
    common(f, config=False)
    f.add_argument("--csv", help="frontier CSV with header C,L_base,L_jtokm (default: bundled table)")
    f.add_argument("--eta", type=float, default=TABLE5_ETA)
    b = sub.add_parser("bench", help="lookup traffic accounting")
    common(b, config=False)
    b.add_argument("--vocab-size", type=int, default=512)
    b.add_argument("--tokens", type=int, default=4096)
    b.add_argument("--zipf", type=float, default=1.1)
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--n-layers", type=int, default=4)
    b.add_argument("--n-e", type=int, default=4)
    b.add_argument("--top-k", type=int, default=2)
    b.add_argument("--n-shards", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--trace", help="newline-delimited token ids instead of a generated trace")
    return p


def parse_overrides(extra: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError("<argv>", f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            raw = extra[i + 1]
            i += 2
        out[key] = coerce_override(key, raw)
    return out


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "fit": cmd_fit, "bench": cmd_bench}


def _error(kind: str, message: str, **info) -> int:
    print(json.dumps({"error": {"type": kind, "message": message, **info}}, sort_keys=True),
          file=sys.stderr)
    return 2 if kind in ("config", "usage") else 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = None
        if args.command in ("train", "ablate"):
            overrides = parse_overrides(extra)
            if args.config:
                cfg = load_config(args.config, overrides)
            else:
                cfg = make_config({"schema_version": 1, **overrides})
        elif extra:
            return _error("usage", f"unrecognized arguments: {' '.join(extra)}")
    except ConfigError as exc:
        return _error("config", exc.message, field=exc.field)
    except OSError as exc:
        return _error("config", str(exc), field="config")
    root = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out = Output(root)
    manifest = RunManifest(args.command, getattr(args, "config", None),
                           cfg.seed if cfg is not None else getattr(args, "seed", None),
                           str(root), __version__, start_time=time.time())
    try:
        result = COMMANDS[args.command](args, cfg, out)
    except CommandError as exc:
        return _error(exc.kind, str(exc), **exc.info)
    except ConfigError as exc:
        return _error("config", exc.message, field=exc.field)
    manifest.end_time = time.time()
    manifest.files = out.files + ["manifest.json"]
    (root / "manifest.json").write_text(dumps(manifest.as_dict()), encoding="utf-8")
    print(dumps(result), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
