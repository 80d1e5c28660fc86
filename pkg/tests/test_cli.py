import json
import os
import shutil
import subprocess
import sys
import textwrap

import pytest
from PIL import Image

from ssl_transfer.checkpoint import load_checkpoint
from ssl_transfer.cli import LOCK_NAME, main
from ssl_transfer.config import OUTPUT_ROOT_ENV

CONFIG = """
seed = 5
output_dir = "{out}"

[source]
name = "synthetic"
manifest = "{manifest}"
num_grades = 2

[pretext]
batch_size = 8
epochs = 1

[pretext.encoder]
architecture = "small_cnn"
feature_dim = 16
input_size = [32, 32]
channels = [4, 8, 8]

[pretext.projection]
layer_dims = [16, 8]

[pretext.augment]
blur_kernel = [3, 3]

[finetune]
batch_size = 8
epochs = 1
hidden_dim = 8

[[targets]]
name = "synthetic"
manifest = "{manifest}"
num_grades = 2
tasks = ["binary"]

[sweep]
fractions = [0.1, 0.5, 1.0]
"""


@pytest.fixture(autouse=True)
def _no_output_root(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    assert main(["synth", "--out", str(out), "--per-class", "12", "--size", "32", "--seed", "2"]) == 0
    return out


def _config(tmp_path, corpus, out="run", name="exp.toml", **replace):
    text = CONFIG.format(out=out, manifest=corpus / "manifest.csv")
    for old, new in replace.items():
        text = text.replace(old, new)
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, corpus):
    tmp = tmp_path_factory.mktemp("cli_pre")
    cfg = _config(tmp, corpus)
    assert main(["pretrain", str(cfg)]) == 0
    return tmp, cfg, tmp / "run" / "pretext" / "pretext_final.ckpt"


@pytest.fixture(scope="module")
def classifier(pretrained):
    tmp, cfg, ckpt = pretrained
    assert main(["finetune", str(cfg), "--checkpoint", str(ckpt), "--target", "synthetic"]) == 0
    return tmp / "run" / "finetune" / "synthetic_binary_1.ckpt"


def test_synth_writes_corpus(corpus):
    assert (corpus / "manifest.csv").is_file()
    assert (corpus / "blobs.json").is_file()
    assert len((corpus / "manifest.csv").read_text().splitlines()) == 25


def test_synth_invalid_is_validation_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--size", "8"]) == 1
    assert "image_size" in capsys.readouterr().err


def test_pretrain_outputs(pretrained, capsys):
    tmp, _, ckpt = pretrained
    assert ckpt.is_file()
    prov = json.loads((tmp / "run" / "pretext" / "provenance.json").read_text())
    assert prov["seed"] == 5
    assert prov["checkpoint_fingerprint"] == load_checkpoint(ckpt).fingerprint
    assert not (tmp / "run" / LOCK_NAME).exists()


def test_pretrain_dry_run(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus)
    assert main(["pretrain", str(cfg), "--dry-run"]) == 0
    echo = json.loads(capsys.readouterr().out)
    assert echo["config"]["seed"] == 5
    assert len(echo["config_fingerprint"]) == 16
    assert not (tmp_path / "run").exists()


def test_missing_dataset_path_names_field(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus)
    cfg.write_text(cfg.read_text().replace(str(corpus / "manifest.csv"), str(tmp_path / "gone.csv"), 1))
    assert main(["pretrain", str(cfg)]) == 1
    assert "source.manifest" in capsys.readouterr().err


def test_lock_blocks_second_training(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus)
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / LOCK_NAME).write_text("1\n")
    assert main(["pretrain", str(cfg)]) == 2
    assert "locked" in capsys.readouterr().err


def test_corrupt_checkpoint_is_runtime_failure(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["finetune", str(cfg), "--checkpoint", str(bad), "--target", "synthetic"]) == 2


def test_unconfigured_task_rejected(pretrained, capsys):
    _, cfg, ckpt = pretrained
    code = main(["finetune", str(cfg), "--checkpoint", str(ckpt), "--target", "synthetic", "--task", "multiclass"])
    assert code == 1
    assert "multiclass" in capsys.readouterr().err


def test_finetune_and_evaluate(pretrained, classifier, capsys):
    tmp, cfg, _ = pretrained
    assert classifier.is_file()
    sidecar = json.loads(classifier.with_suffix(".json").read_text())
    assert sidecar["seed"] == 5 and "config_fingerprint" in sidecar
    assert (tmp / "run" / "splits" / "synthetic.json").is_file()
    capsys.readouterr()
    assert main(["evaluate", str(cfg), "--checkpoint", str(classifier), "--target", "synthetic"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["accuracy"] == sidecar["accuracy"]


def test_evaluate_rejects_pretext_checkpoint(pretrained, capsys):
    _, cfg, ckpt = pretrained
    assert main(["evaluate", str(cfg), "--checkpoint", str(ckpt), "--target", "synthetic"]) == 1
    assert "classifier checkpoint" in capsys.readouterr().err


def test_cam_overlays(pretrained, classifier, corpus, tmp_path):
    _, cfg, _ = pretrained
    ids = [line.split(",")[0] for line in (corpus / "manifest.csv").read_text().splitlines()[1:4]]
    args = ["cam", str(cfg), "--checkpoint", str(classifier), "--target", "synthetic", "--class", "1", "--ids", *ids]
    assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
    assert main([*args, "--out-dir", str(tmp_path / "b")]) == 0
    pngs = sorted(p.name for p in (tmp_path / "a").glob("*.png"))
    assert pngs == sorted(f"{i}_cam_1.png" for i in ids)
    for name in pngs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        with Image.open(tmp_path / "a" / name) as im:
            assert im.size == (32, 32) and im.mode == "RGB"
    prov = json.loads((tmp_path / "a" / "cam_provenance.json").read_text())
    assert prov["seed"] == 5


def test_cam_unknown_id(pretrained, classifier, capsys, tmp_path):
    _, cfg, _ = pretrained
    code = main(["cam", str(cfg), "--checkpoint", str(classifier), "--target", "synthetic",
                 "--ids", "no_such_sample", "--out-dir", str(tmp_path)])
    assert code == 1
    assert "no_such_sample" in capsys.readouterr().err


def test_sweep_rows_and_rerun_determinism(pretrained, corpus, tmp_path, capsys):
    _, _, ckpt = pretrained
    csvs = []
    for run in ("s1", "s2"):
        cfg = _config(tmp_path, corpus, out=run, name=f"{run}.toml")
        assert main(["sweep", str(cfg), "--checkpoint", str(ckpt)]) == 0
        csvs.append(tmp_path / run / "results.csv")
    lines = csvs[0].read_text().splitlines()
    assert len(lines) == 4
    assert [ln.split(",")[2] for ln in lines[1:]] == ["0.1", "0.5", "1"]
    assert csvs[0].read_bytes() == csvs[1].read_bytes()
    meta = json.loads((tmp_path / "s1" / "results.meta.json").read_text())
    assert meta["seed"] == 5 and meta["failed_cells"] == {}
    state = json.loads((tmp_path / "s1" / "sweep_state.json").read_text())
    assert all(c["status"] == "done" for c in state["cells"].values())

    # resume: completed cells are reused, output unchanged
    before = csvs[0].read_bytes()
    cfg = tmp_path / "s1.toml"
    assert main(["sweep", str(cfg), "--checkpoint", str(ckpt)]) == 0
    assert csvs[0].read_bytes() == before


def test_sweep_partial_failure(pretrained, corpus, tmp_path, capsys):
    _, _, ckpt = pretrained
    # second target lists images that do not exist on disk
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "manifest.csv").write_text((corpus / "manifest.csv").read_text())
    extra = f"""
[[targets]]
name = "broken"
manifest = "{broken / 'manifest.csv'}"
num_grades = 2
"""
    cfg = _config(tmp_path, corpus, **{"[sweep]": extra + "\n[sweep]"})
    assert main(["sweep", str(cfg), "--checkpoint", str(ckpt)]) == 2
    meta = json.loads((tmp_path / "run" / "results.meta.json").read_text())
    assert sorted(meta["failed_cells"]) == ["broken|binary|0.1", "broken|binary|0.5", "broken|binary|1"]
    rows = (tmp_path / "run" / "results.csv").read_text().splitlines()
    assert len(rows) == 4 and all(r.startswith("synthetic") for r in rows[1:])
    assert "3 failed" in capsys.readouterr().out


def test_sweep_needs_checkpoint(tmp_path, corpus, capsys):
    assert main(["sweep", str(_config(tmp_path, corpus))]) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_report_and_plot(tmp_path, capsys):
    csv = tmp_path / "results.csv"
    rows = ["dataset,task,fraction,accuracy,precision,recall,f1"]
    rows += [f"{d},binary,{f},{50 + 10 * f:.2f},1.00,2.00,3.00" for d in ("a", "b", "c") for f in (0.1, 0.3, 0.5, 1)]
    csv.write_text("\n".join(rows) + "\n")
    (tmp_path / "results.meta.json").write_text(json.dumps({"config_fingerprint": "fp", "seed": 3}))
    assert main(["report", str(csv)]) == 0
    first = capsys.readouterr().out
    assert main(["report", str(csv), "--out", str(tmp_path / "report.md")]) == 0
    assert (tmp_path / "report.md").read_text() == first
    assert first.count("### ") == 3

    assert main(["plot", str(csv), "--out-dir", str(tmp_path / "p1")]) == 0
    assert main(["plot", str(csv), "--out-dir", str(tmp_path / "p2")]) == 0
    one = (tmp_path / "p1" / "label_efficiency_binary.png").read_bytes()
    assert one == (tmp_path / "p2" / "label_efficiency_binary.png").read_bytes()
    assert b"fp" in one
    assert main(["plot", str(csv), "--out-dir", str(tmp_path / "p3"), "--format", "svg"]) == 0
    assert (tmp_path / "p3" / "label_efficiency_binary.svg").is_file()


def test_report_empty_and_malformed(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("dataset,task,fraction,accuracy,precision,recall,f1\n")
    assert main(["report", str(empty)]) == 0
    assert capsys.readouterr().out == "No results.\n"
    bad = tmp_path / "bad.csv"
    bad.write_text("dataset,fraction\nx,1\n")
    assert main(["report", str(bad)]) == 1
    assert main(["plot", str(empty)]) == 1


def test_console_script_help():
    exe = shutil.which("sslx")
    cmd = [exe] if exe else [sys.executable, "-m", "ssl_transfer.cli"]
    proc = subprocess.run([*cmd, "--help"], capture_output=True, text=True, env={**os.environ})
    assert proc.returncode == 0
    for sub in ("pretrain", "finetune", "evaluate", "sweep", "report", "plot", "cam", "synth"):
        assert sub in proc.stdout
