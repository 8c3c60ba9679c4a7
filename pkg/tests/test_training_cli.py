import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from eegdiff.autodiff import Tensor
from eegdiff.cli import main
from eegdiff.losses import LossWeights
from eegdiff.nn import ConfigError
from eegdiff.training import Adam, RunConfig, format_float, write_csv


# -- optimizer ---------------------------------------------------------------------


def make_params():
    return {"w": Tensor(np.array([1.0, -2.0, 3.0])), "b": Tensor(np.array([0.5]))}


def test_adam_zero_grad_is_identity():
    params = make_params()
    before = {k: p.data.copy() for k, p in params.items()}
    opt = Adam(params, lr=0.1)
    opt.zero_grad()
    opt.step()
    for name, p in params.items():
        np.testing.assert_array_equal(p.data, before[name])


def test_adam_first_step_moves_by_lr():
    params = {"w": Tensor(np.array([0.0]))}
    opt = Adam(params, lr=0.05)
    params["w"].grad = np.array([3.0])
    opt.step()
    # bias-corrected m/sqrt(v) is sign(g) on the first step
    assert params["w"].data[0] == pytest.approx(-0.05, rel=1e-6)


def test_adam_descends_quadratic():
    params = {"w": Tensor(np.array([5.0]))}
    opt = Adam(params, lr=0.2)
    for _ in range(200):
        opt.zero_grad()
        params["w"].grad = 2.0 * params["w"].data
        opt.step()
    assert abs(params["w"].data[0]) < 0.1


def test_adam_validation():
    with pytest.raises(ConfigError):
        Adam(make_params(), lr=0.0)
    with pytest.raises(ConfigError):
        Adam(make_params(), lr=0.1, beta1=1.0)
    with pytest.raises(ConfigError):
        Adam(make_params(), lr=0.1, eps=0.0)


# -- run config --------------------------------------------------------------------


def test_config_dict_round_trip(tmp_path):
    cfg = tiny_config(str(tmp_path / "run"))
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"channels": 4, "bogus_knob": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"loss_weights": {"mse": 1.0, "nope": 2.0}})


def test_config_from_json_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_json(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.from_json(arr)


def test_config_validate_errors(tmp_path):
    base = tiny_config(str(tmp_path)).to_dict()
    for patch in (
        {"batch_size": 1},
        {"drop_prob": 1.5},
        {"num_samples": 1},
        {"sample_steps": 0},
        {"sample_steps": 999},
        {"heads": 3},
    ):
        raw = dict(base, **patch)
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw)


def test_config_json_round_trip(tmp_path):
    cfg = tiny_config(str(tmp_path / "run"))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.from_json(path) == cfg


# -- csv helpers -------------------------------------------------------------------


@given(st.floats(allow_nan=False, allow_infinity=False))
@settings(max_examples=100, deadline=None)
def test_format_float_round_trips(x):
    assert float(format_float(x)) == x


def test_write_csv_layout(tmp_path):
    path = write_csv(tmp_path / "sub" / "t.csv", ["a", "b", "c"], [[1, 0.5, "x"], [2, 0.25, "y"]])
    text = path.read_text()
    assert text == "a,b,c\n1,0.5,x\n2,0.25,y\n"


# -- CLI pipeline ------------------------------------------------------------------


@pytest.fixture(scope="session")
def ws(tmp_path_factory):
    """Full tiny pipeline driven through the CLI entry point, in process."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = tiny_config(str(root / "run"))
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    argv = ["--config", str(cfg_path)]
    assert main(["gen-data", *argv]) == 0
    assert main(["train-stage1", *argv]) == 0
    assert main(["train-stage2", *argv]) == 0
    return SimpleNamespace(root=root, cfg=cfg, argv=argv)


def test_pipeline_writes_artifacts(ws):
    cfg = ws.cfg
    assert (cfg.resolved_data_dir / "dataset.bin").exists()
    assert (cfg.resolved_data_dir / "manifest.json").exists()
    assert cfg.stage1_checkpoint.exists()
    assert cfg.stage2_checkpoint.exists()
    for metrics in (cfg.stage1_metrics, cfg.stage2_metrics):
        lines = metrics.read_text().strip().split("\n")
        assert lines[0] == "epoch,metric,value"
        assert len(lines) > 1
        for line in lines[1:]:
            epoch, metric, value = line.split(",")
            int(epoch)
            float(value)
            assert metric


def test_sample_then_eval_gen(ws, capsys):
    assert main(["sample", *ws.argv, "--scale", "2.0"]) == 0
    path = ws.cfg.samples_path(2.0)
    assert path.exists()
    assert main(["eval-gen", *ws.argv, "--scale", "2.0"]) == 0
    out = capsys.readouterr().out
    assert "agreement" in out and "frechet" in out
    csv = (ws.cfg.eval_dir / "gen_scale_2.0.csv").read_text().strip().split("\n")
    assert csv[0] == "scale,agreement,frechet"
    scale, agree, fd = (float(v) for v in csv[1].split(","))
    assert scale == 2.0
    assert 0.0 <= agree <= 1.0
    assert fd >= 0.0


def test_sample_is_deterministic(ws):
    path = ws.cfg.samples_path(2.0)
    first = path.read_bytes()
    assert main(["sample", *ws.argv, "--scale", "2.0"]) == 0
    assert path.read_bytes() == first


def test_eval_gen_needs_samples(ws, capsys):
    assert main(["eval-gen", *ws.argv, "--scale", "123.0"]) == 1
    assert "error:" in capsys.readouterr().err


def test_eval_retrieval_outputs(ws):
    assert main(["eval-retrieval", *ws.argv]) == 0
    lines = (ws.cfg.eval_dir / "retrieval.csv").read_text().strip().split("\n")
    assert lines[0] == "metric,value"
    metrics = dict(line.split(",") for line in lines[1:])
    assert set(metrics) == {"label_top1", "label_top5", "image_top1", "image_top5"}
    for value in metrics.values():
        assert 0.0 <= float(value) <= 1.0
    emb = (ws.cfg.eval_dir / "test_embeddings.csv").read_text().strip().split("\n")
    assert emb[0].startswith("id,label,e0")
    assert len(emb) == 1 + 8  # header + 2 windows per class in the tiny test split


def test_cfg_sweep(ws):
    assert main(["cfg-sweep", *ws.argv, "--scales", "0,2", "--num", "4"]) == 0
    lines = (ws.cfg.eval_dir / "cfg_sweep.csv").read_text().strip().split("\n")
    assert lines[0] == "scale,agreement,frechet"
    assert len(lines) == 3
    assert [line.split(",")[0] for line in lines[1:]] == ["0.0", "2.0"]


def test_cfg_sweep_rejects_bad_scales(ws, capsys):
    assert main(["cfg-sweep", *ws.argv, "--scales", "abc"]) == 1
    assert main(["cfg-sweep", *ws.argv, "--scales", ","]) == 1
    assert "error:" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["not-a-command"]) == 2
    capsys.readouterr()


def test_invalid_config_exits_1(tmp_path, capsys):
    raw = tiny_config(str(tmp_path)).to_dict()
    raw["batch_size"] = 1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    assert main(["gen-data", "--config", str(path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_gen_data_deterministic_and_seed_sensitive(ws, tmp_path):
    base = ws.cfg.resolved_data_dir / "dataset.bin"
    assert main(["gen-data", *ws.argv, "--out", str(tmp_path / "b")]) == 0
    twin = tmp_path / "b" / "data" / "dataset.bin"
    assert twin.read_bytes() == base.read_bytes()
    assert main(["gen-data", *ws.argv, "--out", str(tmp_path / "c"), "--seed", "99"]) == 0
    assert (tmp_path / "c" / "data" / "dataset.bin").read_bytes() != base.read_bytes()


def test_grad_check_cli(tmp_path, capsys):
    assert main(["grad-check", "--out", str(tmp_path), "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "pass" in out and "FAIL" not in out
    lines = (tmp_path / "eval" / "grad_check.csv").read_text().strip().split("\n")
    assert lines[0] == "target,max_rel_error"
    assert len(lines) > 5
