import json

import numpy as np
import pytest

from cldlab.cli import build_parser, main, resolve_config
from cldlab.sampleio import samples_from_bytes


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "n_grid": 7, "beta": 2.0}))
    args = build_parser().parse_args(["isweights", "--config", str(cfg), "--beta", "3"])
    out = resolve_config(args)
    assert out["seed"] == 5 and out["n_grid"] == 7 and out["beta"] == 3.0
    assert out["format"] == "csv" and out["experiment"] == "isweights"


def test_isweights_csv_and_manifest(tmp_path):
    out = tmp_path / "w.csv"
    assert main(["isweights", "--n-grid", "5", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,ml,fid,mlc,fidc" and len(lines) == 6
    man = json.loads((tmp_path / "w.csv.manifest.json").read_text())
    assert man["experiment"] == "isweights"
    assert man["config"]["n_grid"] == 5 and man["failures"] == []
    assert man["wall_time_s"] >= 0 and man["version"]


def test_xi_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for f in (a, b):
        assert main(["xi", "--seed", "3", "--n-mc", "200", "--n-grid", "4", "--format", "json", "--out", str(f)]) == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.json"
    main(["xi", "--seed", "4", "--n-mc", "200", "--n-grid", "4", "--format", "json", "--out", str(c)])
    assert c.read_bytes() != a.read_bytes()
    data = json.loads(a.read_text())
    assert data["experiment"] == "xi" and len(data["data"]["t"]) == 4


def test_sample_binary(tmp_path):
    out = tmp_path / "s.bin"
    assert main(["sample", "--n", "50", "--steps", "20", "--format", "bin", "--out", str(out)]) == 0
    x = samples_from_bytes(out.read_bytes())
    assert x.shape == (50, 2) and np.all(np.isfinite(x))
    man = json.loads((tmp_path / "s.bin.manifest.json").read_text())
    assert "seed=0/sample/sscs" in man["rng_streams"]


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["isweights", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["isweights", "--config", str(bad)]) == 2
    assert "bad config" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path):
    out = tmp_path / "w.bin"
    assert main(["isweights", "--n-grid", "3", "--format", "bin", "--out", str(out)]) == 1
    man = json.loads((tmp_path / "w.bin.manifest.json").read_text())
    assert man["failures"] and "binary" in man["failures"][0]


def test_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CLD_LAB_THREADS", "1")
    out = tmp_path / "w.csv"
    assert main(["isweights", "--n-grid", "3", "--out", str(out)]) == 0
    assert json.loads((tmp_path / "w.csv.manifest.json").read_text())["threads"] == 1
    monkeypatch.setenv("CLD_LAB_THREADS", "0")
    assert main(["isweights", "--n-grid", "3", "--out", str(out)]) == 1


def test_train_checkpoint_then_sample(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"hidden": [8], "log_every": 0}))
    ck = tmp_path / "m.ckpt"
    args = ["train", "--config", str(cfg), "--iters", "5", "--batch", "16", "--warmup", "1",
            "--checkpoint", str(ck), "--out", str(tmp_path / "loss.csv")]
    assert main(args) == 0
    assert ck.read_bytes()[:8] == b"CLDNET01"
    out = tmp_path / "s.csv"
    assert main(["sample", "--checkpoint", str(ck), "--n", "10", "--steps", "5", "--out", str(out)]) == 0
    assert out.read_text().startswith("x_0,x_1,v_0,v_1")


def test_unknown_subcommand_exits():
    with pytest.raises(SystemExit):
        main(["nope"])
