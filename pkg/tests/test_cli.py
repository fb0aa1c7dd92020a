import csv
import json
from pathlib import Path

import numpy as np
import pytest

import engagekit.cli as cli
from engagekit.cli import dispatch, parse_config_file, resolve_configs, CliUsageError
from engagekit.data import SynthConfig, synth_corpus


def synth_dirs(tmp_path, frames=120, sessions=2):
    train_dir = tmp_path / "train"
    val_dir = tmp_path / "val"
    cfg = SynthConfig(sessions=sessions, num_frames=frames, seed=4)
    synth_corpus(cfg, train_dir)
    synth_corpus(SynthConfig(sessions=1, num_frames=frames, seed=4), val_dir,
                 start_index=sessions)
    return train_dir, val_dir


def fast_flags(tmp_path, out="run"):
    config = tmp_path / "fast.cfg"
    config.write_text(
        "model_dim = 16\nheads = 2\ncore_len = 16\ncontext_len = 4\n"
        "dropout = 0.1\ndtype = float32\n"
        "lr = 1e-3\nbatch_size = 8\nepochs = 2\nema_decay = 0.5\n")
    return ["--config", str(config), "--out", str(tmp_path / out)]


# ---------------------------------------------------------------- config res.

def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nmodel_dim = 64\ndropout = 0.1  # trailing\n"
                    "use_positional = false\nloss = ccc\n\n")
    parsed = parse_config_file(path)
    assert parsed == {"model_dim": 64, "dropout": 0.1,
                      "use_positional": False, "loss": "ccc"}


def test_config_precedence_flags_beat_file_beat_preset(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epochs = 7\nmodel_dim = 64\n")
    model_cfg, train_cfg = resolve_configs("desk", path, {"epochs": 3})
    assert train_cfg.epochs == 3            # flag wins
    assert model_cfg.model_dim == 64        # file beats preset
    assert model_cfg.core_len == 32         # preset survives elsewhere
    assert train_cfg.lr == pytest.approx(1e-3)


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("warp_factor = 9\n")
    with pytest.raises(CliUsageError):
        parse_config_file(path)


def test_paper_presets_carry_published_values():
    model_cfg, train_cfg = resolve_configs("paper-noxi", None, {})
    assert model_cfg.model_dim == 512
    assert model_cfg.core_len == 32 and model_cfg.context_len == 32
    assert model_cfg.dropout == 0.2
    assert train_cfg.lr == pytest.approx(5e-5)
    assert train_cfg.batch_size == 128
    assert train_cfg.epochs == 50
    assert train_cfg.loss == "mse"
    _, mpiigi = resolve_configs("paper-mpiigi", None, {})
    assert mpiigi.loss == "ccc"


# ---------------------------------------------------------------- exit codes

def test_unknown_flag_is_usage_error(capsys):
    assert dispatch(["synth", "--out", "x", "--bogus"]) == 1
    assert "error[usage]" in capsys.readouterr().err


def test_missing_data_dir_is_data_error(tmp_path, capsys):
    code = dispatch(["eval", "--data", str(tmp_path / "nope"), "--ckpt", "oracle"])
    assert code == 2
    assert "error[data]" in capsys.readouterr().err


def test_gradcheck_breach_is_numeric_error(monkeypatch, capsys):
    monkeypatch.setattr(cli, "GRADCHECK_SUITE", (("linear", 0.0),))
    assert dispatch(["gradcheck"]) == 3
    assert "error[numeric]" in capsys.readouterr().err


# ---------------------------------------------------------------- synth

def test_synth_twice_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert dispatch(["synth", "--out", str(tmp_path / name), "--sessions", "2",
                         "--frames", "60", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "resolved synth config" in out and "seed = 7" in out
    files_a = sorted(p.relative_to(tmp_path / "a")
                     for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files_a
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synth_quantize_levels(tmp_path):
    assert dispatch(["synth", "--out", str(tmp_path / "q"), "--sessions", "1",
                     "--frames", "50", "--seed", "1", "--quantize-levels", "25"]) == 0
    from engagekit.data import load_sessions
    (session,) = load_sessions(tmp_path / "q")
    lattice = (np.arange(25) / 24.0).astype(np.float32)
    assert np.all(np.isin(session.roles["target"].labels, lattice))


# ---------------------------------------------------------------- pipeline

def test_train_eval_predict_pipeline(tmp_path, capsys):
    train_dir, val_dir = synth_dirs(tmp_path)
    code = dispatch(["train", "--data", str(train_dir), "--val", str(val_dir)]
                    + fast_flags(tmp_path))
    assert code == 0
    out = capsys.readouterr().out
    assert "resolved train config" in out and "model_dim = 16" in out
    run = tmp_path / "run"
    assert (run / "best.ckpt").exists() and (run / "last.ckpt").exists()
    history = (run / "history.csv").read_text().strip().splitlines()
    assert history[0] == "epoch,train_loss,val_ccc"
    assert len(history) == 3

    report_path = tmp_path / "report.json"
    code = dispatch(["eval", "--data", str(val_dir), "--ckpt", str(run / "best.ckpt"),
                     "--report", str(report_path),
                     "--report-csv", str(tmp_path / "report.csv")])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert len(report["sessions"]) == 1
    assert -1.0 <= report["mean_ccc"] <= 1.0
    assert (tmp_path / "report.csv").read_text().startswith("session_id,ccc")

    pred_path = tmp_path / "preds.csv"
    session_dir = sorted(val_dir.glob("session_*"))[0]
    code = dispatch(["predict", "--session", str(session_dir),
                     "--ckpt", str(run / "last.ckpt"), "--out", str(pred_path)])
    assert code == 0
    with open(pred_path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["frame_index", "prediction"]
    assert len(rows) - 1 == 120
    values = np.array([float(r[1]) for r in rows[1:]])
    assert np.all(values >= 0.0) and np.all(values <= 1.0)


def test_eval_oracle_scores_perfectly(tmp_path, capsys):
    _, val_dir = synth_dirs(tmp_path)
    code = dispatch(["eval", "--data", str(val_dir), "--ckpt", "oracle",
                     "--config", str(_geometry_cfg(tmp_path))])
    assert code == 0
    assert "mean ccc: 1.0000" in capsys.readouterr().out


def _geometry_cfg(tmp_path):
    path = tmp_path / "geom.cfg"
    path.write_text("core_len = 16\ncontext_len = 4\n")
    return path


def test_gradcheck_cli_passes(capsys):
    assert dispatch(["gradcheck", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "gradcheck suite passed" in out
    assert "full_model" in out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path, capsys):
    train_dir, val_dir = synth_dirs(tmp_path)
    stream = train_dir / "session_000" / "target" / "clip.datf"
    raw = bytearray(stream.read_bytes())
    raw[16:20] = np.array([np.inf], dtype="<f4").tobytes()  # poison one value
    stream.write_bytes(bytes(raw))
    code = dispatch(["train", "--data", str(train_dir), "--val", str(val_dir)]
                    + fast_flags(tmp_path, out="div"))
    assert code == 3
    assert "error[numeric]" in capsys.readouterr().err


# ---------------------------------------------------------------- ablate

def test_ablate_emits_rows_per_arm_and_seed(tmp_path, capsys):
    train_dir, val_dir = synth_dirs(tmp_path, frames=64, sessions=1)
    out_dir = tmp_path / "ablate"
    config = tmp_path / "ablate.cfg"
    config.write_text("model_dim = 16\nheads = 2\ncore_len = 16\ncontext_len = 4\n"
                      "dtype = float32\nlr = 1e-3\nbatch_size = 4\nepochs = 1\n"
                      "ema_decay = 0.5\n")
    code = dispatch(["ablate", "--data", str(train_dir), "--val", str(val_dir),
                     "--out", str(out_dir), "--config", str(config),
                     "--seeds", "2", "--arms", "baseline,cross,fusion,full"])
    assert code == 0
    with open(out_dir / "ablation.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 8  # four arms x two seeds
    by_arm = {r["arm"]: int(r["params"]) for r in rows}
    assert by_arm["fusion"] > by_arm["baseline"]
    assert by_arm["full"] > by_arm["cross"] > by_arm["baseline"]
    seeds = {r["seed"] for r in rows}
    assert seeds == {"0", "1"}


def test_ablate_rejects_unknown_arm(tmp_path, capsys):
    assert dispatch(["ablate", "--data", "x", "--val", "y", "--out", "z",
                     "--arms", "baseline,warp"]) == 1
    assert "unknown ablation arms" in capsys.readouterr().err
