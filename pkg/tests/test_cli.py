import json

import numpy as np
import pytest

from collapsed_ns import cli
from collapsed_ns.errors import ConfigError, DegeneratePrior, NotFound, StuckSampler


def small(tmp_path, *extra):
    return ["--out", str(tmp_path), "--set", "model=eight_schools", "--set", "m=40",
            "--set", "k=8", "--set", "s=2", "--set", "n_boot=10", *extra]


def test_load_config_merges_file_overrides_and_env(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": "sne", "m": 100, "model_params": {"N": 8}}))
    cfg = cli.load_config(p, ["k=10", "model_params.cosmology=wcdm"], env={"ALCS_SEED": "17"})
    assert (cfg.model, cfg.m, cfg.k, cfg.seed) == ("sne", 100, 10, 17)
    assert cfg.model_params == {"N": 8, "cosmology": "wcdm"}


@pytest.mark.parametrize("overrides", [["bogus=1"], ["m=0"], ["k=30", "m=40"], ["mode=laplace"],
                                       ["noequals"], ["other.x=1"], ["grid=[0,1]"],
                                       ["threshold=\"abc\""], ["m=2.5"]])
def test_bad_config_raises(overrides):
    with pytest.raises(ConfigError):
        cli.load_config(None, overrides, env={})


def test_bad_seed_env():
    with pytest.raises(ConfigError):
        cli.load_config(None, [], env={"ALCS_SEED": "x"})


def test_unreadable_config_file(tmp_path):
    with pytest.raises(ConfigError):
        cli.load_config(tmp_path / "missing.json", [], env={})


@pytest.mark.parametrize("x", [0.1, -1e-300, 1 / 3, 123456789.123456789, -np.inf, np.inf])
def test_float_round_trip(x):
    assert json.loads(cli.dumps([x]))[0] == x


def test_dumps_handles_numpy_and_nested():
    text = cli.dumps({"a": np.arange(3), "b": {"c": np.float64(0.5), "d": True}, "e": None})
    assert json.loads(text) == {"a": [0, 1, 2], "b": {"c": 0.5, "d": True}, "e": None}


def test_run_writes_outputs_and_reloads(tmp_path):
    assert cli.main(["run", *small(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema_version"] and summary["config"]["m"] == 40
    lines = (tmp_path / "deadpoints.jsonl").read_text().splitlines()
    assert len(lines) == summary["N_dead"] + 40
    header, rows = cli.read_csv(tmp_path / "posterior.csv")
    assert header == ["mu", "log_tau", "logl", "log_weight", "flags"]
    w = np.exp([r[3] for r in rows])
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    res, _ = cli.load_run(tmp_path)
    assert res.log_z == summary["logZ"]
    np.testing.assert_allclose(res.log_weights, [r[3] for r in rows], atol=1e-12)


def test_same_seed_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", *small(a)])
    cli.main(["run", *small(b)])
    sa = json.loads((a / "summary.json").read_text())
    sb = json.loads((b / "summary.json").read_text())
    assert sa["logZ"] == sb["logZ"]


def test_recover_and_diagnose_after_run(tmp_path):
    cli.main(["run", *small(tmp_path)])
    assert cli.main(["recover", *small(tmp_path, "--set", "S=30")]) == 0
    header, rows = cli.read_csv(tmp_path / "joint_samples.csv")
    assert len(rows) == 30 and header[-1] == "flags" and len(header) == 2 + 8 + 1
    assert cli.main(["diagnose", *small(tmp_path, "--set", "M=10", "--set", "K=100")]) == 0
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["median_ess_fraction"] == pytest.approx(1.0, abs=1e-9)


def test_diagnose_on_grid(tmp_path):
    args = ["diagnose", "--out", str(tmp_path), "--set", "model=tanh_funnel",
            "--set", "grid=[-1,3,5]", "--set", "K=200"]
    assert cli.main(args) == 0
    header, rows = cli.read_csv(tmp_path / "ess_profile.csv")
    assert len(rows) == 5 and header[0] == "theta"
    assert rows[0][2] > rows[-1][2]


def test_diagnose_fresh_runs_sampler(tmp_path):
    assert cli.main(["diagnose", "--fresh", *small(tmp_path, "--set", "M=5", "--set", "K=50")]) == 0
    assert (tmp_path / "summary.json").exists()


def test_missing_run_exits_2(tmp_path, capsys):
    assert cli.main(["recover", "--out", str(tmp_path / "none")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "NotFound" and err["exit_code"] == 2
    with pytest.raises(NotFound):
        cli.load_run(tmp_path / "none")


def test_config_error_exits_2(tmp_path):
    assert cli.main(["run", "--out", str(tmp_path), "--set", "m=-1"]) == 2


def test_model_error_exits_3(tmp_path):
    assert cli.main(["run", "--out", str(tmp_path), "--set", "model=nope"]) == 3
    assert cli.main(["run", "--out", str(tmp_path), "--set", "model=sne",
                     "--set", "model_params.d_block=3"]) == 3


def test_mode_without_reference_exits_3(tmp_path):
    assert cli.main(["run", "--out", str(tmp_path), "--set", "model=sv",
                     "--set", "mode=exact-reference", "--set", "m=20", "--set", "k=2"]) == 3


@pytest.mark.parametrize("exc", [StuckSampler("stuck", {"chain": 0}), DegeneratePrior("flat"),
                                 FloatingPointError("overflow")])
def test_numerical_failure_exits_4(tmp_path, monkeypatch, exc):
    def boom(*a, **k):
        raise exc

    monkeypatch.setattr(cli, "run", boom)
    assert cli.main(["run", *small(tmp_path)]) == 4


def test_bench_hessian(tmp_path):
    assert cli.main(["bench-hessian", "--out", str(tmp_path), "--set", "sizes=[5,12]"]) == 0
    header, rows = cli.read_csv(tmp_path / "bench.csv")
    assert [r[0] for r in rows] == [5, 12]
    assert max(r[3] for r in rows) <= 1e-8


def test_reproduce_reports_pass_and_fail(tmp_path, monkeypatch, capsys):
    def fake():
        return {"checks": [{"name": "a", "passed": True, "value": 1.0, "target": "<= 2",
                            "paper": None},
                           {"name": "b", "passed": False, "value": 3.0, "target": "<= 2",
                            "paper": 0.5}]}

    monkeypatch.setitem(cli.RECIPES, "t1", fake)
    assert cli.main(["reproduce", "t1", "--out", str(tmp_path)]) == 5
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("PASS: a") and out[1].startswith("FAIL: b")
    rep = json.loads((tmp_path / "report.json").read_text())
    assert [r["result"] for r in rep["rows"]] == ["PASS", "FAIL"]
    assert rep["rows"][1]["paper"] == 0.5


def test_unknown_subcommand_is_argparse_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_module_entry_point_runs():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "collapsed_ns", "--help"], capture_output=True,
                         text=True, check=True)
    assert "reproduce" in out.stdout
