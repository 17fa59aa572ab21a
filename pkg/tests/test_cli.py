import json

import numpy as np
import pytest

from nslsysid.cli import main
from nslsysid.datagen import load_dataset
from nslsysid.nslfit import FitResult, eval_nsl, parse_formula
from nslsysid.outcomes import Outcome, Registry


def synthetic_registry(path, delta=-0.4, n=300):
    rng = np.random.default_rng(0)
    reg = Registry(path)
    for i in range(n):
        d = 10 ** rng.uniform(-1, 3)
        e = 2.0 * d**delta * np.exp(0.01 * abs(rng.normal()))
        reg.append(Outcome(key=f"s{i}", status="ok", system="ball", arch="input-affine", seed=0, n_e=2, d_tilde=2,
                           nh_tilde=2, nd_tilde=2, d=d, p=50, c=d * 1e5, nmae=e, nmse=e**2))
    return reg


def test_generate(tmp_path, capsys):
    out = tmp_path / "s.nsld"
    assert main(["generate", "--system", "spring", "--traj", "1", "--seed", "0", "--out", str(out)]) == 0
    assert "K=1000" in capsys.readouterr().out
    assert load_dataset(out).K == 1000
    assert main(["generate", "--system", "ball", "--traj", "0.002", "--out", str(tmp_path / "b.nsld")]) == 0
    assert load_dataset(tmp_path / "b.nsld").K == 2


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["generate", "--system", "pendulum"])
    assert info.value.code == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("this is = = not toml")
    assert main(["sweep", "--config", str(bad), "--registry", str(tmp_path / "r.jsonl")]) == 2


def test_fit_recovers_slope_and_roundtrips(tmp_path, capsys):
    reg = synthetic_registry(tmp_path / "r.jsonl")
    out = tmp_path / "fit.json"
    rc = main(["fit", "--registry", str(reg.path), "--resource", "data", "--breaks", "0", "--out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert printed.startswith("L(d) = ")
    fit = FitResult.load(out)
    assert abs(fit.params.delta0 + 0.4) < 0.05
    exact = json.loads(out.read_text())["formula"]
    r = np.logspace(-1, 3, 50)
    np.testing.assert_allclose(eval_nsl(parse_formula(exact), r), eval_nsl(fit.params, r), rtol=1e-9)


def test_fit_exit_codes(tmp_path, monkeypatch):
    reg = synthetic_registry(tmp_path / "r.jsonl", n=3)
    assert main(["fit", "--registry", str(reg.path), "--system", "motor"]) == 4
    assert main(["fit", "--registry", str(reg.path), "--breaks", "5"]) == 5
    monkeypatch.setenv("NSL_REGISTRY", str(reg.path))
    assert main(["fit", "--breaks", "0"]) == 0


def test_plot_and_io_errors(tmp_path):
    reg = synthetic_registry(tmp_path / "r.jsonl")
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    for target in (a, b):
        assert main(["plot", "--registry", str(reg.path), "--resource", "data", "--envelope", "--out", str(target)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["plot", "--registry", str(reg.path), "--fit", str(tmp_path / "missing.json")]) == 3
    assert main(["plot", "--registry", str(reg.path), "--out", str(tmp_path / "no" / "dir.svg")]) == 3


def test_sweep_and_train(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        'systems = ["ball"]\narchitectures = ["ph"]\nseeds = [0]\nepoch_grid = [2]\n'
        "data_grid = [2]\nhidden_grid = [2]\ndepth_grid = [2]\nn_val_trajectories = 2\n"
    )
    reg = tmp_path / "r.jsonl"
    assert main(["sweep", "--config", str(cfg), "--registry", str(reg)]) == 0
    assert "1 new runs" in capsys.readouterr().out
    assert main(["sweep", "--config", str(cfg), "--registry", str(reg)]) == 0
    assert capsys.readouterr().out.startswith("0 new runs")
    ck = tmp_path / "m.nslm"
    assert main(["train", "--system", "ball", "--config", str(cfg), "--traj", "0.3", "--epochs", "2", "--out", str(ck)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["nmae"] > 0 and ck.exists()
