import json
from pathlib import Path

import numpy as np
import pytest

from bwcp.cli import main
from bwcp.experiment import load_training_checkpoint, save_training_checkpoint

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "topology": [{"kind": "plain", "out": 4, "stride": 1},
                 {"kind": "identity", "out": 4},
                 {"kind": "downsample", "out": 6, "stride": 2}],
    "image_size": 6, "num_classes": 3, "n_train": 48, "n_test": 24,
    "batch_size": 16, "epochs": 2, "seed": 3, "lr": 0.05,
}


def write_config(path, **kw):
    path.write_text(json.dumps({**TINY, **kw}, indent=2))
    return path


def files(out):
    return {p.name: p.read_bytes() for p in sorted(Path(out).iterdir())}


def test_zero_epochs_writes_header_and_initial_checkpoint(tmp_path):
    cfg = write_config(tmp_path / "c.json", epochs=0)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    run = tmp_path / "run"
    assert (run / "metrics.csv").read_text() == (
        "epoch,ce_loss,sparse_loss,total_loss,accuracy,mean_mask,active_channel_fraction\n")
    assert (run / "checkpoint_epoch000.bwcp").exists()


def test_training_is_byte_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a.keys() == b.keys() and "checkpoint_epoch002.bwcp" in a
    assert a == b
    rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("1,")


def test_seed_flag_changes_run(tmp_path):
    cfg = write_config(tmp_path / "c.json", epochs=1)
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_reproduces_unbroken_run(tmp_path):
    cfg2 = write_config(tmp_path / "c2.json", epochs=2)
    cfg3 = write_config(tmp_path / "c3.json", epochs=3)
    assert main(["train", "--config", str(cfg3), "--out", str(tmp_path / "full")]) == 0
    assert main(["train", "--config", str(cfg2), "--out", str(tmp_path / "part")]) == 0
    assert main(["train", "--config", str(cfg3), "--out", str(tmp_path / "part"), "--resume"]) == 0
    full, part = tmp_path / "full", tmp_path / "part"
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    assert (full / "final.bwcp").read_bytes() == (part / "final.bwcp").read_bytes()


def test_resume_refuses_other_config(tmp_path):
    main(["train", "--config", str(write_config(tmp_path / "a.json", epochs=1)), "--out", str(tmp_path / "r")])
    other = write_config(tmp_path / "b.json", epochs=2, lr=0.01)
    assert main(["train", "--config", str(other), "--out", str(tmp_path / "r"), "--resume"]) == 2


def test_invalid_config_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "epochs": 1,\n  "temperature": 0.5\n}\n')
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) != 0
    err = capsys.readouterr().err
    assert "line 3" in err and "temperature" in err


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "c.json", epochs=1)
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


def test_prune_no_prune_threshold(trained_run, tmp_path, capsys):
    ck = trained_run / "run" / "final.bwcp"
    assert main(["prune", str(ck), "--threshold", "1e-300", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "prune_report.json").read_text())
    assert report["flops_reduction_pct"] == 0.0 and report["params_reduction_pct"] == 0.0
    assert report["verified"] and report["equivalence_residual"] < 1e-6
    assert (tmp_path / "pruned.bwcp").exists()
    assert "0.00% less" in capsys.readouterr().out


def test_prune_forced_channel(trained_run, tmp_path):
    model, opt, cfg, rng, epoch, rows = load_training_checkpoint(trained_run / "run" / "final.bwcp")
    for layer in model.bw_layers():
        layer.gamma[:] = 1.0
        layer.beta[:] = 1.0
    target = model.blocks[0].units[0].bw
    target.gamma[1] = 1e-6
    target.beta[1] = -1.0
    ck = tmp_path / "forced.bwcp"
    save_training_checkpoint(ck, model, opt, cfg, rng, epoch, rows)
    assert main(["prune", str(ck), "--out", str(tmp_path / "p")]) == 0
    kept = json.loads((tmp_path / "p" / "prune_report.json").read_text())["kept_channels"]
    assert kept["blocks.0.units.0"] == [0, 2, 3]
    assert all(len(v) == 6 for k, v in kept.items() if k.startswith("blocks.2"))
    assert main(["eval", str(tmp_path / "p" / "pruned.bwcp")]) == 0


def test_prune_corrupt_checkpoint(trained_run, tmp_path, capsys):
    blob = bytearray((trained_run / "run" / "final.bwcp").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "bad.bwcp"
    bad.write_bytes(bytes(blob))
    assert main(["prune", str(bad), "--out", str(tmp_path / "p")]) == 2
    assert "checksum" in capsys.readouterr().err


def test_analyze_prob(trained_run, tmp_path):
    ck = trained_run / "run" / "final.bwcp"
    assert main(["analyze", str(ck), "--mode", "prob", "--out", str(tmp_path)]) == 0
    path = tmp_path / "prob_blocks.0.units.0.csv"
    lines = path.read_text().splitlines()
    assert lines[0] == "rank,channel,gamma,beta,gamma_hat,beta_hat,p_bn,p_bw"
    assert len(lines) == 5
    assert len(list(tmp_path.glob("prob_*.csv"))) == 6


def test_analyze_corr_with_baseline(trained_run, tmp_path):
    ck = trained_run / "run" / "final.bwcp"
    assert main(["analyze", str(ck), "--mode", "corr", "--baseline", str(ck), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "correlation.csv").read_text().splitlines()
    assert lines[0] == "layer,pre_whitening,post_whitening,baseline"
    for line in lines[1:]:
        _, pre, post, base = line.split(",")
        assert 0.0 <= float(post) <= 1.0 and post == base


def test_analyze_unknown_mode(trained_run):
    with pytest.raises(SystemExit) as err:
        main(["analyze", str(trained_run / "run" / "final.bwcp"), "--mode", "nope"])
    assert err.value.code == 2


def test_eval_command(trained_run, capsys):
    assert main(["eval", str(trained_run / "run" / "final.bwcp")]) == 0
    assert "test accuracy" in capsys.readouterr().out


def test_gradcheck_tiny_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "g.json", topology=[{"kind": "plain", "out": 3, "stride": 2}],
                       image_size=4, batch_size=4)
    assert main(["gradcheck", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "blocks.0.units.0" in out
    assert main(["gradcheck", "--config", str(cfg), "--tolerance", "1e-30"]) == 1


def test_gradcheck_ignores_learning_rate(tmp_path, capsys):
    cfg = write_config(tmp_path / "g.json", topology=[{"kind": "plain", "out": 3, "stride": 2}],
                       image_size=4, batch_size=4)
    main(["gradcheck", "--config", str(cfg)])
    first = capsys.readouterr().out
    main(["gradcheck", "--config", str(cfg), "--set", "lr=0"])
    assert capsys.readouterr().out == first


@pytest.mark.slow
@pytest.mark.parametrize("name", ["gradcheck.json", "gradcheck_t3.json"])
def test_gradcheck_shipped_configs(name):
    assert main(["gradcheck", "--config", str(ROOT / "configs" / name)]) == 0
