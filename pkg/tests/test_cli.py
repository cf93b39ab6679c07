import json

import numpy as np
import pytest

from mgdun import cli, config, dataset, mgt, selftest
from mgdun import degradation as deg
from mgdun.network import MgdunModel, ModelConfig
from mgdun import checkpoint


def write_cfg(path, **kv):
    path.write_text("".join(f"{k}={v}\n" for k, v in kv.items()))
    return str(path)


def synth(tmp_path, name="ds", **kv):
    kv.setdefault("count", 3)
    kv.setdefault("val_count", 1)
    cfg = write_cfg(tmp_path / f"{name}.cfg", **kv)
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    return tmp_path / name


def test_config_parsing():
    cfg = config.parse("# comment\nT = 2\nguide=false\nlr=1e-4  # trailing\n\n")
    assert cfg.T == 2 and cfg.guide is False and cfg.lr == 1e-4
    with pytest.raises(ValueError, match="unknown config key 'tee'"):
        config.parse("tee=2")
    with pytest.raises(ValueError, match="cannot parse"):
        config.parse("T=two")
    with pytest.raises(ValueError, match="key=value"):
        config.parse("T 2")
    assert config.parse(cfg.to_text()) == cfg


def test_help_documents_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    out = capsys.readouterr().out
    for key in config.HELP:
        assert f"{key}={config._format(getattr(config.RunConfig(), key))}" in out


def test_synth_shapes_manifest_and_determinism(tmp_path):
    a = synth(tmp_path, "a", seed=7, count=4)
    b = synth(tmp_path, "b", seed=7, count=4)
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma == mb
    assert len([k for k in ma["files"] if k.startswith("train/")]) == 12
    assert mgt.load(a / "train/0003_x.mgt").shape == (1, 1, 16, 16)
    assert (a / "pgm/train_0000_z.pgm").read_bytes().startswith(b"P5\n32 32\n65535\n")
    assert (a / "config.txt").read_text() == config.load(str(tmp_path / "a.cfg")).to_text()
    assert ma["noiseless"] is False


def test_synth_noiseless_reverifies(tmp_path):
    root = synth(tmp_path, noise_lr=0.0, noise_guide=0.0)
    ds = dataset.load(root)
    assert ds.manifest["noiseless"] is True
    op = deg.DegradationOp(sigma=1.0, scale=2)
    for i in range(len(ds.train)):
        np.testing.assert_allclose(ds.train.x[i:i + 1], deg.apply_dk(ds.train.z[i:i + 1], op), atol=1e-6)


def test_refuses_non_empty_out(tmp_path, capsys):
    root = synth(tmp_path)
    assert cli.main(["synth", "--out", str(root)]) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(["synth", "--out", str(root), "--force", "--seed", "3"]) == 0
    assert "seed=3" in (root / "config.txt").read_text()


def test_tampered_dataset_rejected(tmp_path):
    root = synth(tmp_path)
    blob = bytearray((root / "train/0000_x.mgt").read_bytes())
    blob[-1] ^= 1
    (root / "train/0000_x.mgt").write_bytes(bytes(blob))
    with pytest.raises(dataset.DatasetError, match="hash"):
        dataset.load(root)


def test_classical_zero_iterations_is_bicubic(tmp_path):
    root = synth(tmp_path)
    cfg = write_cfg(tmp_path / "c.cfg", data=root, count=3, iters=0)
    assert cli.main(["classical", "--config", cfg, "--out", str(tmp_path / "cl")]) == 0
    rows = [r.split(",") for r in (tmp_path / "cl/report.csv").read_text().splitlines()[1:]]
    for r in rows:
        assert r[1] == r[4]


def test_classical_oracle_gap_column(tmp_path):
    root = synth(tmp_path)
    cfg = write_cfg(tmp_path / "c.cfg", data=root, count=3)
    assert cli.main(["classical", "--config", cfg, "--out", str(tmp_path / "cl")]) == 0
    rows = [r.split(",") for r in (tmp_path / "cl/report.csv").read_text().splitlines()]
    assert rows[0][-1] == "oracle_gap"
    assert all(float(r[-1]) < 1e-3 for r in rows[1:])
    assert (tmp_path / "cl/train_0000_trace.csv").is_file()


def test_classical_divergence_exit_code(tmp_path):
    root = synth(tmp_path)
    cfg = write_cfg(tmp_path / "c.cfg", data=root, delta3=100.0, iters=50)
    assert cli.main(["classical", "--config", cfg, "--out", str(tmp_path / "cl")]) == 1


def test_train_and_eval(tmp_path, capsys):
    root = synth(tmp_path)
    kv = dict(data=root, count=3, T=1, width=8, depth=2, lr=1e-3, epochs=1, batch_size=2)
    cfg = write_cfg(tmp_path / "t.cfg", **kv)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    ckpt = tmp_path / "run/best.ckpt"
    assert ckpt.is_file() and (tmp_path / "run/loss.csv").is_file()
    ecfg = write_cfg(tmp_path / "e.cfg", checkpoint=ckpt, **kv)
    assert cli.main(["eval", "--config", ecfg, "--out", str(tmp_path / "ev")]) == 0
    lines = (tmp_path / "ev/eval.csv").read_text().splitlines()
    assert lines[0] == "config,psnr_db,ssim,rmse255"
    assert lines[1].startswith("bicubic,") and lines[2].startswith("model,")
    # incompatible stage count
    bad = write_cfg(tmp_path / "bad.cfg", checkpoint=ckpt, **{**kv, "T": 3})
    assert cli.main(["eval", "--config", bad, "--out", str(tmp_path / "ev2")]) == 2


def test_eval_bicubic_mode_reproducible(tmp_path):
    root = synth(tmp_path)
    cfg = write_cfg(tmp_path / "e.cfg", data=root, count=3, mode="bicubic")
    outs = []
    for k in range(2):
        assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path / f"ev{k}")]) == 0
        outs.append((tmp_path / f"ev{k}/eval.csv").read_text())
    assert outs[0] == outs[1] and outs[0].count("\n") == 2


def test_eval_sweep_table(tmp_path):
    root = synth(tmp_path, count=2)
    cfg = write_cfg(tmp_path / "s.cfg", data=root, count=2, width=4, depth=2, epochs=1, batch_size=2,
                    sweep_T="1,2", sweep_inn_blocks="1,2")
    assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path / "sw")]) == 0
    rows = (tmp_path / "sw/eval.csv").read_text().splitlines()
    assert len(rows) == 2 + 4
    assert all(len(r.split(",")) == 4 for r in rows)
    assert rows[2].startswith("T=1 inn_blocks=1,")


def test_scale_mismatch_rejected(tmp_path):
    root = synth(tmp_path)
    cfg = write_cfg(tmp_path / "c.cfg", data=root, scale=4)
    assert cli.main(["classical", "--config", cfg, "--out", str(tmp_path / "cl")]) == 2


def test_checkpoint_scale_mismatch_rejected(tmp_path):
    root = synth(tmp_path)
    ckpt = tmp_path / "m.ckpt"
    checkpoint.save(ckpt, MgdunModel(ModelConfig(T=1, scale=4, width=4, block_width=4, inn_hidden=4)))
    cfg = write_cfg(tmp_path / "e.cfg", data=root, T=1, checkpoint=ckpt)
    assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path / "ev")]) == 2


def test_selftest_fault_is_named():
    lines = []
    ok = selftest.run(fault="blur_adjoint", only=["adjoint_dk", "adjoint_p", "metric_identities"],
                      echo=lines.append)
    assert not ok
    assert lines[0].startswith("FAIL adjoint_dk")
    assert lines[1].startswith("FAIL adjoint_p") and lines[2].startswith("PASS metric_identities")
    # the hook is removed afterwards
    assert selftest.run(only=["adjoint_dk"], echo=lines.append)


def test_selftest_cli_with_fault_exits_nonzero(capsys):
    assert cli.main(["selftest", "--inject-fault", "blur_adjoint"]) == 1
    out = capsys.readouterr().out
    assert "FAIL adjoint_dk" in out and "selftest: FAILED" in out


def test_selftest_cli_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == len(selftest.CHECKS)
