import filecmp
import json
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from eend import cli
from eend.config import REGISTRY, ConfigError, RunConfig, load_config, parse_text, preset_text
from eend.datagen import ManifestEntry, rttm_read, write_features, write_manifest
from eend.model import build_params, param_count, save_checkpoint

from conftest import tiny_config


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", str(out), "--n", "3", "--seed", "7",
                     "--set", "sim.target_duration=15"]) == 0
    return out


# ---------------------------------------------------------------- config


def test_registry_covers_sections():
    prefixes = {name.split(".")[0] for name in REGISTRY}
    assert prefixes == {"model", "train", "sim", "decode"}
    assert "model.self_cond" in REGISTRY and "sim.num_conversations" in REGISTRY


def test_parse_text_errors():
    with pytest.raises(ConfigError, match="cfg:2:.*unknown"):
        parse_text("model.num_layers = 2\nmodel.bogus = 1\n", "cfg")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("model.heads = 2\nmodel.heads = 4\n")
    with pytest.raises(ConfigError, match="range"):
        parse_text("model.num_layers = 0\n")
    with pytest.raises(ConfigError):
        parse_text("model.inter_loss = maybe\n")


def test_layering_and_round_trip(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("# comment\nmodel.model_dim = 32  # trailing\nmodel.heads = 4\n")
    cfg = load_config(path, "toy", {"model.heads": "8"})
    assert (cfg.model.model_dim, cfg.model.heads, cfg.model.num_layers) == (32, 8, 2)
    again = RunConfig.from_values(parse_text(cfg.to_text()))
    assert again == cfg


def test_presets_load():
    toy, paper = load_config(preset="toy"), load_config(preset="paper")
    assert toy.model.model_dim == 64 and toy.train.max_steps == 2000
    assert paper.model.model_dim == 256 and paper.model.ff_dim == 2048
    assert param_count(paper.model) == 5_678_848
    with pytest.raises(ConfigError):
        preset_text("huge")


def test_cross_field_errors_are_config_errors():
    with pytest.raises(ConfigError):
        load_config(overrides={"model.model_dim": "10", "model.heads": "4"})


def test_help_lists_every_key():
    text = cli.build_parser().format_help()
    for name, key in REGISTRY.items():
        assert re.search(rf"{re.escape(name)}\s+{key.kind}\s+default=", text), name


# ---------------------------------------------------------------- exit codes


def test_unknown_key_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "params", "--set", "model.nope=1")
    assert code == cli.EXIT_CONFIG and "nope" in err
    bad = tmp_path / "bad.conf"
    bad.write_text("model.num_layers = two\n")
    assert run(capsys, "params", "--config", bad)[0] == cli.EXIT_CONFIG


def test_missing_manifest_exit_3(capsys, tmp_path):
    missing = tmp_path / "nowhere.tsv"
    code, _, err = run(capsys, "train", missing, tmp_path / "out", "--preset", "toy")
    assert code == cli.EXIT_IO and str(missing) in err


def test_checkpoint_mismatch_exit_5(capsys, tmp_path, sim_dir):
    cfg = tiny_config()
    save_checkpoint(tmp_path / "m.ckpt", cfg, build_params(cfg))
    code, _, err = run(capsys, "infer", tmp_path / "m.ckpt", sim_dir / "manifest.tsv", tmp_path / "o",
                       "--set", "model.num_layers=3")
    assert code == cli.EXIT_CHECKPOINT and "num_layers" in err


def test_divergence_exit_4(capsys, tmp_path, sim_dir):
    cfg = tiny_config()
    params = build_params(cfg)
    params["frontend.weight"].data[:] = np.nan
    save_checkpoint(tmp_path / "nan.ckpt", cfg, params)
    code, _, _ = run(capsys, "adapt", sim_dir / "manifest.tsv", tmp_path / "o", "--init", tmp_path / "nan.ckpt",
                     "--set", "train.max_steps=2", "--set", "train.segment_seconds=5",
                     "--set", "train.average_last_k=1")
    assert code == cli.EXIT_DIVERGED
    assert (tmp_path / "o" / "divergence_state.npz").exists()


# ---------------------------------------------------------------- simulate


def test_simulate_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(capsys, "simulate", d, "--n", 10, "--seed", 7, "--set", "sim.target_duration=10")[0] == 0
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    for sub in ("feats", "rttm"):
        names = sorted(p.name for p in (a / sub).iterdir())
        assert len(names) == 10
        assert filecmp.cmpfiles(a / sub, b / sub, names, shallow=False)[0] == names
    for f in ("manifest.tsv", "all.rttm", "run.conf"):
        assert filecmp.cmp(a / f, b / f, shallow=False)


def test_simulate_empty(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", tmp_path, "--n", 0)
    assert code == 0 and "conversations: 0" in out
    assert (tmp_path / "manifest.tsv").read_text().strip() == ""


def test_simulate_overlap_summary(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", tmp_path, "--n", 20, "--preset", "toy")
    assert code == 0
    got, target = map(float, re.search(r"overlap ratio: ([\d.]+)% \(target ([\d.]+)%\)", out).groups())
    assert target == 15.0
    assert abs(got - target) / 100 <= 0.05


# ---------------------------------------------------------------- params


@pytest.mark.parametrize("sets, expected", [
    (["model.variant=EDA", "model.self_cond=false", "model.inter_loss=false"], 6_402_305),
    (["model.num_layers=8"], 10_939_136),
])
def test_params_paper_values(capsys, sets, expected):
    argv = ["params", "--preset", "paper", "--verify"]
    for s in sets:
        argv += ["--set", s]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    assert out.splitlines()[0] == f"{expected:,}"
    assert "match" in out


def test_params_toy_verify(capsys):
    code, out, _ = run(capsys, "params", "--preset", "toy", "--verify")
    assert code == 0 and "(match)" in out


# ---------------------------------------------------------------- infer / score


def _silence_checkpoint(path):
    cfg = tiny_config()
    params = build_params(cfg)
    # constant embeddings and opposing attractors: every posterior is near zero
    params["encoder.2.norm2.gain"].data[:] = 0.0
    params["encoder.2.norm2.bias"].data[:] = 1.0
    params["na.attn.wo"].data[:] = 0.0
    params["na.attn.bo"].data[:] = -1.0
    save_checkpoint(path, cfg, params)


def test_infer_silence_gives_empty_rttm(tmp_path, capsys):
    _silence_checkpoint(tmp_path / "s.ckpt")
    write_features(tmp_path / "quiet.feat", np.full((345, 200), np.log(1e-10), dtype=np.float32))
    (tmp_path / "quiet.rttm").write_text("")
    write_manifest(tmp_path / "m.tsv", [ManifestEntry("quiet", tmp_path / "quiet.feat",
                                                      tmp_path / "quiet.rttm")])
    assert run(capsys, "infer", tmp_path / "s.ckpt", tmp_path / "m.tsv", tmp_path / "hyp")[0] == 0
    assert (tmp_path / "hyp" / "quiet.rttm").read_text() == ""


def test_infer_per_layer_and_determinism(tmp_path, capsys, sim_dir):
    cfg = tiny_config(num_layers=8, inter_loss=True)
    save_checkpoint(tmp_path / "deep.ckpt", cfg, build_params(cfg))
    for out in ("h1", "h2"):
        code, _, _ = run(capsys, "infer", tmp_path / "deep.ckpt", sim_dir / "manifest.tsv", tmp_path / out,
                         "--per-layer")
        assert code == 0
    layers = sorted(p.name for p in (tmp_path / "h1").iterdir() if p.is_dir())
    assert layers == sorted(f"layer_{l}" for l in range(1, 9))
    for layer in layers:
        assert len(list((tmp_path / "h1" / layer).glob("*.rttm"))) == 3
    assert not filecmp.dircmp(tmp_path / "h1", tmp_path / "h2").diff_files
    for layer in layers:
        names = sorted(p.name for p in (tmp_path / "h1" / layer).iterdir())
        assert filecmp.cmpfiles(tmp_path / "h1" / layer, tmp_path / "h2" / layer, names,
                                shallow=False)[0] == names


def test_per_layer_needs_taps(tmp_path, capsys, sim_dir):
    cfg = tiny_config()
    save_checkpoint(tmp_path / "m.ckpt", cfg, build_params(cfg))
    code, _, _ = run(capsys, "infer", tmp_path / "m.ckpt", sim_dir / "manifest.tsv", tmp_path / "o",
                     "--per-layer")
    assert code == cli.EXIT_CHECKPOINT


def test_score_self_is_zero(capsys, tmp_path, sim_dir):
    code, out, _ = run(capsys, "score", sim_dir / "rttm", sim_dir / "all.rttm", "--oracle",
                       "--records", tmp_path / "r.jsonl", "--name", "self")
    assert code == 0
    head, _, row, oracle = out.splitlines()
    assert head.split() == ["System", "DER", "Miss", "FA", "CF", "SAD-Miss", "SAD-FA"]
    assert row.split() == ["self"] + ["0.00"] * 6
    assert "delta: 0.0000%" in oracle
    records = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(records) == 4 and records[-1]["name"] == "TOTAL"


def test_score_missing_path(capsys, tmp_path):
    assert run(capsys, "score", tmp_path / "x.rttm", tmp_path / "y.rttm")[0] == cli.EXIT_IO


# ---------------------------------------------------------------- train / bench / threads


def test_train_then_infer(tmp_path, capsys, sim_dir):
    argv = ["--set", "model.num_layers=2", "--set", "model.model_dim=8", "--set", "model.heads=2",
            "--set", "model.ff_dim=16", "--set", "model.inter_loss=true",
            "--set", "train.segment_seconds=5", "--set", "train.batch_size=4", "--set", "train.epochs=3",
            "--set", "train.average_last_k=2", "--set", "train.keep_checkpoints=2"]
    code, out, _ = run(capsys, "train", sim_dir / "manifest.tsv", tmp_path / "run", *argv)
    assert code == 0 and "averaged checkpoint" in out
    run_dir = tmp_path / "run"
    assert sorted(p.name for p in run_dir.glob("epoch_*.ckpt")) == ["epoch_2.ckpt", "epoch_3.ckpt"]
    log = [json.loads(line) for line in (run_dir / "train.log.jsonl").read_text().splitlines()]
    assert log and all(np.isfinite(r["loss"]) for r in log)
    code, _, _ = run(capsys, "infer", run_dir / "averaged.ckpt", sim_dir / "manifest.tsv", tmp_path / "hyp")
    assert code == 0
    assert {a.recording_id for f in (tmp_path / "hyp").glob("*.rttm") for a in rttm_read(f)} <= {
        line.split("\t")[0] for line in (sim_dir / "manifest.tsv").read_text().splitlines()}


def test_bench_format(capsys):
    code, out, _ = run(capsys, "bench", "--steps", 1, "--warmup", 0, "--frames", 20, "--batch", 2,
                       "--set", "model.num_layers=2", "--set", "model.model_dim=8",
                       "--set", "model.heads=2", "--set", "model.ff_dim=16")
    assert code == 0
    lines = out.splitlines()
    for name in ("NA+InterLoss", "EDA+InterLoss", "EDA"):
        assert any(re.match(rf"{re.escape(name)}\s+[\d.]+ batches/s", l) for l in lines)
    assert sum(" / " in l for l in lines) == 3


def test_threads_env(monkeypatch):
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("EEND_THREADS", "3")
    cli._set_threads([])
    assert os.environ["OMP_NUM_THREADS"] == "3"
    cli._set_threads(["bench", "--threads", "2"])
    assert all(os.environ[v] == "2" for v in cli._THREAD_VARS)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "eend", "params", "--preset", "toy"],
                         capture_output=True, text=True, check=True)
    assert res.stdout.strip().replace(",", "").isdigit()
