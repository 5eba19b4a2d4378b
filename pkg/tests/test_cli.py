import json
import os
import subprocess
import sys

import numpy as np
import pytest

from anckit import cli
from anckit.optimizer import OptimizationResult

SMALL = ["--bins", "128", "--ir-length", "256", "--num-normal", "6", "--num-loose", "2",
         "--num-tight", "2"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate", "--out", str(d / "obs.json"), "-q", *SMALL]) == 0
    for kind in ("norm_bounded", "convex_hull"):
        assert cli.main(["fit", "--observations", str(d / "obs.json"), "--kind", kind,
                         "--out", str(d / f"{kind}.json"), "-q"]) == 0
    assert cli.main(["design", "--observations", str(d / "obs.json"),
                     "--model", str(d / "convex_hull.json"), "--num-taps", "32",
                     "--out", str(d / "ctrl.json"), "-q"]) == 0
    return d


def test_generate_fit_design_outputs(pipeline):
    d = pipeline
    for name in ("obs.json", "obs.config.json", "convex_hull.json", "convex_hull.areas.csv",
                 "convex_hull.config.json", "ctrl.json", "ctrl.trace.csv", "ctrl.config.json"):
        assert (d / name).exists(), name
    trace = (d / "ctrl.trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,mu,loss,max_constraint,step,rho"
    assert len(trace) > 1
    ctrl = json.loads((d / "ctrl.json").read_text())
    assert ctrl["N"] == 32 and ctrl["model_kind"] == "convex_hull"
    echo = json.loads((d / "ctrl.config.json").read_text())
    assert echo["subcommand"] == "design" and echo["arguments"]["num_taps"] == 32
    assert "threads" not in echo["arguments"]


def test_config_echo_reproduces_run(pipeline, tmp_path):
    d = pipeline
    out = tmp_path / "again.json"
    code = cli.main(["design", "--config", str(d / "ctrl.config.json"), "--out", str(out),
                     "--trace", str(tmp_path / "t.csv"), "-q"])
    assert code == 0
    assert out.read_bytes() == (d / "ctrl.json").read_bytes()


def test_verify_writes_report(pipeline, capsys):
    d = pipeline
    out = d / "report"
    code = cli.main(["verify", "--controller", str(d / "ctrl.json"),
                     "--observations", str(d / "obs.json"),
                     "--model", str(d / "convex_hull.json"), "--out-dir", str(out),
                     "--transitions", "-q"])
    assert code == 0
    printed = capsys.readouterr().out
    entry = json.loads((out / "summary.json").read_text())["fit"]["convex_hull"]
    assert f"stable {entry['stable']}/10" in printed
    assert entry["observations"] == entry["transitions"] == 10
    assert entry["stable"] + len(entry["unstable_observations"]) == 10
    for name in ("report.csv", "areas.csv", "sensitivity.svg", "margins.svg", "config.json"):
        assert (out / name).exists(), name

    strict = cli.main(["verify", "--config", str(out / "config.json"), "--strict", "-q"])
    assert strict == (3 if entry["unstable_observations"] else 0)


def test_verify_cross_set(pipeline, tmp_path):
    d = pipeline
    cross = tmp_path / "cross.json"
    assert cli.main(["generate", "--out", str(cross), "--seed", "11", "-q", *SMALL]) == 0
    out = tmp_path / "rep"
    assert cli.main(["verify", "--controller", str(d / "ctrl.json"),
                     "--observations", str(d / "obs.json"), "--cross-observations", str(cross),
                     "--no-simulate", "--out-dir", str(out), "-q"]) == 0
    assert set(json.loads((out / "summary.json").read_text())) == {"fit", "cross"}
    assert (out / "cross" / "report.csv").exists()


def test_missing_required_argument_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["fit", "--kind", "elliptic"])
    assert info.value.code == 2
    assert "--observations" in capsys.readouterr().err


def test_invalid_choice_exits_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["fit", "--observations", "x", "--kind", "blob", "--out", "y"])
    assert info.value.code == 2


def test_missing_file_exits_2(tmp_path, capsys):
    code = cli.main(["verify", "--controller", str(tmp_path / "none.json"),
                     "--observations", str(tmp_path / "none.json"),
                     "--out-dir", str(tmp_path / "o"), "-q"])
    assert code == 2
    assert "no such file" in capsys.readouterr().err


def test_bad_threads_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("ANCKIT_THREADS", "many")
    assert cli.main(["generate", "--out", str(tmp_path / "o.json"), "-q", *SMALL]) == 2


def test_threads_sets_environment(tmp_path, monkeypatch):
    for var in cli.THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    assert cli.main(["generate", "--out", str(tmp_path / "o.json"), "--threads", "2", "-q",
                     *SMALL]) == 0
    assert all(os.environ[v] == "2" for v in cli.THREAD_VARS)


def test_infeasible_design_exits_3(pipeline, tmp_path, monkeypatch, capsys):
    import anckit.optimizer as opt

    def fake_solve(spec, w0=None, on_trace=None, loss_ref=None):
        design = opt.ControllerDesign(q=np.zeros(spec.num_taps), g_hat=spec.g_hat,
                                      grid=spec.grid, weight=spec.weight, loss=1.0)
        return OptimizationResult(design, "infeasible", 0, float("nan"), float("nan"),
                                  infeasible_bins=[3, 4])

    monkeypatch.setattr(opt, "solve", fake_solve)
    out = tmp_path / "c.json"
    code = cli.main(["design", "--observations", str(pipeline / "obs.json"),
                     "--model", str(pipeline / "norm_bounded.json"), "--num-taps", "8",
                     "--out", str(out), "-q"])
    assert code == 3
    assert not out.exists()
    assert "infeasible (2 bins" in capsys.readouterr().err


def test_full_scale_flag_sets_sizes():
    args = cli.parse_args(["generate", "--out", "x.json", "--full-scale"])
    assert args.bins == cli.FULL_SCALE
    args = cli.parse_args(["design", "--observations", "o", "--model", "m", "--out", "c",
                           "--full-scale"])
    assert args.num_taps == cli.FULL_SCALE
    alias = cli.parse_args(["generate", "--out", "x.json", "--paper-scale"])
    assert alias.bins == cli.FULL_SCALE


def test_config_for_other_subcommand_is_rejected(pipeline):
    with pytest.raises(SystemExit) as info:
        cli.main(["fit", "--config", str(pipeline / "ctrl.config.json")])
    assert info.value.code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "anckit", "--help"], capture_output=True,
                         text=True, check=False)
    assert res.returncode == 0
    assert "generate" in res.stdout and "verify" in res.stdout
