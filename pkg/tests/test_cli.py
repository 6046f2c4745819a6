import csv
import json

import numpy as np
import pytest

from jtoklab import cli
from jtoklab import scaling as sc
from jtoklab import sys_sim as ss

SMALL = dict(schema_version=1, vocab_size=16, hidden_dim=8, n_layers=2, n_heads=2, ffn_dim=16,
             seq_len=8, batch_size=2, steps=12, corpus_tokens=2000, n_e=3, top_k=2)


def write_cfg(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **kw}))
    return str(path)


def run(argv, capsys):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def files_of(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.name != "manifest.json"}


def check_manifest(root):
    man = json.loads((root / "manifest.json").read_text())
    assert sorted(man["files"]) == sorted(p.name for p in root.iterdir())
    return man


def test_train_outputs_and_rerun(tmp_path, capsys):
    cfg = write_cfg(tmp_path, plugin="jtok_m")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train", "--config", cfg, "--out", str(a)], capsys)[0] == 0
    assert run(["train", "--config", cfg, "--out", str(b)], capsys)[0] == 0
    assert files_of(a) == files_of(b)
    man = check_manifest(a)
    assert man["command"] == "train" and man["seed"] == 0
    rows = list(csv.reader(open(a / "metrics.csv")))
    assert rows[0] == ["step", "train_loss", "aux_loss", "layer_std_0", "layer_std_1"]
    assert len(rows) == 13
    summary = json.loads((a / "summary.json").read_text())
    assert summary["config"]["plugin"] == "jtok_m"
    assert (a / "routing.csv").exists() and (a / "checkpoint.bin").exists()


def test_train_first_step_identity(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    first = {}
    for plugin in ("none", "jtok", "jtok_m"):
        out = tmp_path / plugin
        assert run(["train", "--config", cfg, "--plugin", plugin, "--out", str(out)], capsys)[0] == 0
        first[plugin] = json.loads((out / "summary.json").read_text())["first_loss"]
    assert first["none"] == first["jtok"] == first["jtok_m"]


def test_train_overrides_without_config(tmp_path, capsys):
    out = tmp_path / "o"
    argv = ["train", "--out", str(out)]
    for k, v in SMALL.items():
        if k != "schema_version":
            argv += [f"--{k}", str(v)]
    code, stdout, _ = run(argv + ["--seed=3"], capsys)
    assert code == 0
    assert json.loads(stdout)["seed"] == 3


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run(["fit"], capsys)[0] == 0
    assert (tmp_path / "env" / "fit" / "fits.json").exists()


@pytest.mark.parametrize("argv,field", [
    (["--hidden_dim", "7"], "hidden_dim"),
    (["--no_such_field", "1"], "no_such_field"),
    (["--lr", "fast"], "lr"),
])
def test_config_errors(argv, field, tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code, _, err = run(["train", "--config", cfg, "--out", str(tmp_path / "x")] + argv, capsys)
    assert code == 2
    obj = json.loads(err)["error"]
    assert obj["type"] == "config" and field in obj["field"]


def test_unknown_config_key_in_file(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({**SMALL, "colour": "red"}))
    code, _, err = run(["train", "--config", str(path), "--out", str(tmp_path / "x")], capsys)
    assert code == 2 and "colour" in json.loads(err)["error"]["field"]


def test_ablate_incompatible_flag(tmp_path, capsys):
    cfg = write_cfg(tmp_path, plugin="jtok")
    code, _, err = run(["ablate", "--config", cfg, "--flag", "no_scale_factor",
                        "--out", str(tmp_path / "x")], capsys)
    assert code == 1
    assert json.loads(err)["error"]["type"] == "incompatible_flag"


@pytest.mark.parametrize("flag,plugin", [("no_norm", "jtok"), ("no_scale_factor", "jtok_m")])
def test_ablate_outputs(flag, plugin, tmp_path, capsys):
    cfg = write_cfg(tmp_path, plugin=plugin)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["ablate", "--config", cfg, "--flag", flag, "--seeds", "2", "--out", str(out)],
                   capsys)[0] == 0
    assert files_of(a) == files_of(b)
    check_manifest(a)
    rep = json.loads((a / "ablation.json").read_text())
    assert [r["seed"] for r in rep["runs"]] == [0, 1]
    assert all(r["first_loss_identical"] for r in rep["runs"])
    if flag == "no_norm":
        assert rep["gate_probe"]["ok"]
        assert "loss_trajectory" in rep["runs"][0]
    else:
        assert len(rep["runs"][0]["std_trajectory"]["ablated"]) == SMALL["steps"]


def test_fit_bundled(tmp_path, capsys):
    code, stdout, _ = run(["fit", "--out", str(tmp_path)], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "fits.json").read_text())
    assert rep["source"] == "bundled:table5" and rep["n_points"] == 5
    s = rep["savings"]["published_delta_beta"]
    assert s["ok"] and abs(s["saving"] - 0.352) < 0.005
    assert set(rep["savings"]) == {"published_delta_beta", "fitted_intercept_difference",
                                   "published_intercept_difference"}
    assert all(x["ok"] for x in rep["frontier_cross_check"])
    assert rep["gamma_fit"]["gamma_hat"] > 0
    check_manifest(tmp_path)


def test_fit_synthetic_round_trip(tmp_path, capsys):
    cfg = sc.JTokMScalingConfig(eta=50, gamma_hat=0.01)
    triples = []
    for c in (1e18, 1e19, 1e20, 1e21):
        b, m, _ = sc.frontier_verify(sc.KAPLAN_2020, cfg, c)
        triples.append((c, b, m))
    path = tmp_path / "f.csv"
    sc.write_frontier_csv(path, triples)
    assert run(["fit", "--csv", str(path), "--out", str(tmp_path / "o")], capsys)[0] == 0
    rep = json.loads((tmp_path / "o" / "fits.json").read_text())
    assert abs(rep["gamma_fit"]["gamma_hat"] - 0.01) < 1e-6
    for row in rep["frontier_cross_check"]:
        assert abs(row["measured_ratio"] - row["predicted_ratio"]) / row["predicted_ratio"] < 1e-6


def test_fit_empty_and_malformed(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    code, _, err = run(["fit", "--csv", str(empty), "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and json.loads(err)["error"]["line"] == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("C,L_base,L_jtokm\n1e19,2.5,2.4\n1e20,2.3\n")
    code, _, err = run(["fit", "--csv", str(bad), "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and json.loads(err)["error"]["line"] == 3


def test_fit_rerun_identical(tmp_path, capsys):
    for d in ("a", "b"):
        run(["fit", "--out", str(tmp_path / d)], capsys)
    assert files_of(tmp_path / "a") == files_of(tmp_path / "b")


def test_bench_defaults(tmp_path, capsys):
    assert run(["bench", "--out", str(tmp_path)], capsys)[0] == 0
    rep = json.loads((tmp_path / "traffic.json").read_text())
    trace = ss.zipf_generate(512, 1.1, 4096, 0)
    assert rep["dedup"]["bit_identical"] and rep["premix"]["bit_identical"]
    assert rep["dedup"]["read_ratio"] == trace.n_unique / 4096
    assert rep["premix"]["comm_ratio"] == 0.5
    assert rep["offload"]["jtok"]["vocab_independent"]
    check_manifest(tmp_path)


def test_bench_single_shard(tmp_path, capsys):
    assert run(["bench", "--n-shards", "1", "--out", str(tmp_path)], capsys)[0] == 0
    rep = json.loads((tmp_path / "traffic.json").read_text())
    assert rep["premix"]["elements_communicated"] == 0


def test_bench_trace_file_vocab_doubling(tmp_path, capsys):
    trace = ss.zipf_generate(128, 1.1, 500, 2)
    ss.write_trace(tmp_path / "t.txt", trace)
    vols = []
    for v in (128, 256):
        out = tmp_path / f"v{v}"
        assert run(["bench", "--trace", str(tmp_path / "t.txt"), "--vocab-size", str(v),
                    "--out", str(out)], capsys)[0] == 0
        rep = json.loads((out / "traffic.json").read_text())
        vols.append((rep["offload"]["jtok"]["elements_transferred_h2d"],
                     rep["offload"]["jtok_m"]["elements_transferred_h2d"]))
    assert vols[0] == vols[1]


def test_bench_rerun_identical(tmp_path, capsys):
    for d in ("a", "b"):
        run(["bench", "--tokens", "300", "--out", str(tmp_path / d)], capsys)
    assert files_of(tmp_path / "a") == files_of(tmp_path / "b")


@pytest.mark.parametrize("argv", [["--top-k", "5"], ["--n-shards", "3"], ["--dim", "0"]])
def test_bench_bad_args(argv, tmp_path, capsys):
    code, _, err = run(["bench", "--out", str(tmp_path)] + argv, capsys)
    assert code == 1 and json.loads(err)["error"]["type"] == "invalid_argument"
    assert not (tmp_path / "traffic.json").exists()


def test_bench_rejects_unknown_flag(tmp_path, capsys):
    code, _, err = run(["bench", "--bogus", "1", "--out", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err)["error"]["type"] == "usage"


def test_json_is_plain():
    assert cli.dumps({"a": np.float64(0.5), "b": np.array([1, 2]), "c": np.bool_(True)}) == \
        '{\n  "a": 0.5,\n  "b": [\n    1,\n    2\n  ],\n  "c": true\n}\n'
