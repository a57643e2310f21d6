import hashlib
import json
import subprocess
import sys

import pytest
import yaml

from lofi import VERSION_TAG, cli, trainer

TINY = {
    "data": {"train": 12, "test": 6, "pool": 8, "generator": {"image_size": [32, 32], "max_objects": 3}},
    "model": {"image_size": [32, 32], "patch": 8, "d": 16, "heads": 2, "image_blocks": 1, "text_blocks": 1,
              "n_queries": 4, "d_dec": 16, "dec_blocks": 2, "dec_heads": 2, "context_cap": 160, "mlp_ratio": 2},
    "train": {"epochs": 1, "batch_size": 4},
    "eval": {"max_len": 12, "k": 2},
}


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return str(p)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, cfg_file):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--config", cfg_file, "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory, cfg_file, data_dir):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--config", cfg_file, "--data", str(data_dir), "--out", str(out)]) == 0
    rec = json.loads((out / "run.json").read_text())
    return out / rec["checkpoint"]


def test_gen_data_manifests_and_determinism(tmp_path, cfg_file, data_dir):
    names = sorted(p.name for p in data_dir.glob("*.jsonl"))
    assert names == ["pool.jsonl", "test.jsonl", "train.jsonl"]
    assert cli.main(["gen-data", "--config", cfg_file, "--seed", "7", "--out", str(tmp_path)]) == 0
    for n in names + ["run.json"]:
        assert digest(tmp_path / n) == digest(data_dir / n)


def test_gen_data_bad_path_exits_2(tmp_path, cfg_file, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen-data", "--config", cfg_file, "--out", str(blocker / "sub")]) == 2
    assert "error" in capsys.readouterr().err


def test_usage_and_config_errors_exit_2(tmp_path, cfg_file):
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["gen-data", "--set", "data.bogus=1", "--out", str(tmp_path)]) == 2
    assert cli.main(["gen-data", "--set", "data.train=-5", "--out", str(tmp_path)]) == 2
    assert cli.main(["gen-data", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2


def test_train_echoes_paper_defaults(tmp_path, data_dir, capsys, monkeypatch):
    captured = {}

    def fake_train(cfg, samples, out=None, **kw):
        captured["cfg"] = cfg
        raise trainer.NonFiniteLoss("stop", step=0, ids=[])

    monkeypatch.setattr(trainer, "train", fake_train)
    assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path)]) == 1
    out = capsys.readouterr().out
    for frag in ("epochs=10", "batch_size=16", "lr0=0.0003", "lambda=5.0"):
        assert frag in out
    c = captured["cfg"]
    assert (c.epochs, c.batch_size, c.lr0, c.lam) == (10, 16, 3e-4, 5.0)


def test_train_artifacts_and_determinism(tmp_path, cfg_file, data_dir, ckpt):
    assert cli.main(["train", "--config", cfg_file, "--data", str(data_dir), "--out", str(tmp_path)]) == 0
    a = json.loads((ckpt.parent / "run.json").read_text())
    b = json.loads((tmp_path / "run.json").read_text())
    assert a["sha256"] == b["sha256"]
    assert digest(ckpt) == digest(tmp_path / a["checkpoint"])
    run = a["run"]
    assert run["version"] == VERSION_TAG and run["seed"] == 0
    assert run["config"]["model"]["d"] == 16 and "<out>" in run["command"]
    assert str(ckpt.parent) not in run["command"]


def test_sigmoid_only_log_has_no_ar_steps(tmp_path, cfg_file, data_dir):
    assert cli.main(["train", "--config", cfg_file, "--data", str(data_dir), "--out", str(tmp_path),
                     "--loss-variant", "sigmoid_only"]) == 0
    rows = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert rows and all(set(r["tau"]) == {"-"} for r in rows)


def test_non_finite_loss_exits_1(tmp_path, cfg_file, data_dir, monkeypatch, capsys):
    real = trainer.total_loss

    def broken(*a, **kw):
        loss, *rest = real(*a, **kw)
        return (loss * float("nan"), *rest)

    monkeypatch.setattr(trainer, "total_loss", broken)
    assert cli.main(["train", "--config", cfg_file, "--data", str(data_dir), "--out", str(tmp_path)]) == 1
    assert "non-finite" in capsys.readouterr().err.lower()


def test_eval_retrieval_columns(tmp_path, cfg_file, data_dir, ckpt):
    assert cli.main(["eval-retrieval", "--config", cfg_file, "--data", str(data_dir), "--ckpt", str(ckpt),
                     "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "retrieval.json").read_text())
    for d in ("i2t", "t2i"):
        assert {k for k in rec[d] if k.startswith("R@")} == {"R@1", "R@5", "R@10", "R@20", "R@40"}
    assert rec["run"]["config"]["eval"]["split"] == "test"


def test_eval_ground_columns_and_k0_equivalence(tmp_path, cfg_file, data_dir, ckpt):
    plain, icl = tmp_path / "plain", tmp_path / "icl"
    assert cli.main(["eval-ground", "--config", cfg_file, "--data", str(data_dir), "--ckpt", str(ckpt),
                     "--out", str(plain)]) == 0
    assert cli.main(["icl-ground", "--config", cfg_file, "--data", str(data_dir), "--ckpt", str(ckpt),
                     "--k", "0", "--out", str(icl)]) == 0
    m0 = json.loads((plain / "grounding.json").read_text())["metrics"]
    m1 = json.loads((icl / "icl_grounding.json").read_text())["metrics"]
    for key in ("RoL", "RoS", "F05", "P05", "R05"):
        assert key in m0 and m0[key] == m1[key]
    assert (plain / "grounding_trace.jsonl").read_text() == (icl / "icl_grounding_trace.jsonl").read_text()
    assert (icl / "icl_grounding_per_query.csv").exists()


def test_icl_ground_uses_demonstrations(tmp_path, cfg_file, data_dir, ckpt):
    assert cli.main(["icl-ground", "--config", cfg_file, "--data", str(data_dir), "--ckpt", str(ckpt),
                     "--out", str(tmp_path)]) == 0
    traces = [json.loads(x) for x in (tmp_path / "icl_grounding_trace.jsonl").read_text().splitlines()]
    assert traces and all(len(t["demo_ids"]) == 2 for t in traces)
    assert cli.main(["icl-ground", "--config", cfg_file, "--data", str(data_dir), "--ckpt", str(tmp_path / "x.zip"),
                     "--out", str(tmp_path)]) == 2


def test_ablate_writes_report(tmp_path, cfg_file, data_dir):
    assert cli.main(["ablate", "--config", cfg_file, "--data", str(data_dir), "--out", str(tmp_path),
                     "--variants", "full", "--lambdas", "0", "5", "--seeds", "0"]) == 0
    rec = json.loads((tmp_path / "ablation_run.json").read_text())
    assert rec["mean"] and (tmp_path / "ablation.md").exists()


def test_fuse_boxes(tmp_path, capsys):
    assert cli.main(["fuse-boxes", "--boxes", "[[0,0,100,100],[20,0,120,100]]"]) == 0
    assert json.loads(capsys.readouterr().out) == [[10, 0, 110, 100]]
    f = tmp_path / "b.json"
    f.write_text(json.dumps({"boxes": [[0, 0, 10, 10], [500, 500, 600, 600]]}))
    assert cli.main(["fuse-boxes", "--input", str(f), "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "fused.json").read_text())
    assert sorted(rec["fused"]) == [[0, 0, 10, 10], [500, 500, 600, 600]] and "command" in rec["run"]
    assert cli.main(["fuse-boxes", "--boxes", "not json"]) == 2
    assert cli.main(["fuse-boxes"]) == 2


def test_overrides_and_lofi_out(tmp_path, monkeypatch):
    cfg = cli.resolve_config(None, ["train.lr0=0.001", "model.prompts.caption_prompt=report this scan ."],
                             {"train.epochs": 3})
    assert cfg["train"]["lr0"] == 0.001 and cfg["train"]["epochs"] == 3
    monkeypatch.setenv("LOFI_OUT", str(tmp_path / "envout"))
    assert cli.main(["fuse-boxes", "--boxes", "[[0,0,1,1]]"]) == 0
    assert (tmp_path / "envout" / "fused.json").exists()
    assert cli.main(["fuse-boxes", "--boxes", "[[0,0,1,1]]", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "fused.json").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "lofi", "fuse-boxes", "--boxes", "[[0,0,10,10]]"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout) == [[0, 0, 10, 10]]
    r = subprocess.run([sys.executable, "-m", "lofi", "bogus"], capture_output=True, text=True)
    assert r.returncode == 2
