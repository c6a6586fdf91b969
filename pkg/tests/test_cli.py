import json
import os

import numpy as np
import pytest
import yaml

from ram3d import trainer as trainer_mod
from ram3d.cli import main
from ram3d.metrics import EvalReport
from ram3d.scene_io import read_image


def _shrink(cfg_path, **train):
    """Cut the desk config down to a few cheap steps."""
    with open(cfg_path) as fh:
        doc = yaml.safe_load(fh)
    doc["field"].update(levels=4, table_size_log2=10, base_resolution=8, mlp_hidden=16)
    doc["train"].update(dict(steps=3, coarse_samples=4, fine_samples=4), **train)
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(doc, fh)


@pytest.fixture()
def synth(tmp_path):
    root = tmp_path / "scene"
    assert main(["synth", str(root), "--size", "16", "--views", "3"]) == 0
    cfg = root / "config.yaml"
    _shrink(cfg)
    return root, str(cfg)


def test_erase_writes_artifacts(synth):
    root, cfg = synth
    assert main(["erase", "--config", cfg]) == 0
    out = root / "runs" / "erase"
    for name in ("field.ckpt", "frames.npy", "loss.csv", "loss.png", "frames.png", "config.yaml"):
        assert (out / name).exists(), name
    assert len(os.listdir(out / "frames")) == 3


def test_missing_dataset_is_data_error(synth, capsys):
    root, cfg = synth
    with open(cfg) as fh:
        doc = yaml.safe_load(fh)
    doc["dataset"]["root"] = "nowhere"
    with open(cfg, "w") as fh:
        yaml.safe_dump(doc, fh)
    assert main(["erase", "--config", cfg]) == 2
    assert "error[data]" in capsys.readouterr().err


def test_unknown_config_key_fails_fast(synth, capsys):
    root, cfg = synth
    with open(cfg) as fh:
        doc = yaml.safe_load(fh)
    doc["train"]["stpes"] = 4
    with open(cfg, "w") as fh:
        yaml.safe_dump(doc, fh)
    assert main(["erase", "--config", cfg]) == 2
    assert "stpes" in capsys.readouterr().err


def test_nan_exits_numeric_with_step(synth, monkeypatch, capsys):
    root, cfg = synth
    real = trainer_mod.recon_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        loss, g = real(*a, **kw)
        return (float("nan"), g) if calls["n"] == 2 else (loss, g)

    monkeypatch.setattr(trainer_mod, "recon_loss", flaky)
    assert main(["erase", "--config", cfg]) == 3
    err = capsys.readouterr().err
    assert "error[numeric]" in err and "step 1" in err


def test_replace_needs_backgrounds(synth, capsys):
    root, cfg = synth
    assert main(["replace", "--config", cfg]) == 2
    assert "background" in capsys.readouterr().err


def test_replace_addition_mode_with_input_images(synth, capsys):
    root, cfg = synth
    code = main(["replace", "--config", cfg, "--background", str(root / "dataset" / "images"),
                 "--prompt", "a red cube"])
    assert code == 0
    assert "addition mode" in capsys.readouterr().out
    out = root / "runs" / "replace"
    assert (out / "field.ckpt").exists()
    assert len(os.listdir(out / "dataset" / "images")) == 3


def test_replace_after_erase_and_same_seed_rerun(synth, tmp_path):
    root, cfg = synth
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["erase", "--config", cfg, "--out", str(out), "--seed", "5"]) == 0
        assert main(["replace", "--config", cfg, "--out", str(out), "--seed", "5"]) == 0
        runs.append(out)
    for stage in ("erase", "replace"):
        a, b = (r / stage for r in runs)
        assert (a / "field.ckpt").read_bytes() == (b / "field.ckpt").read_bytes()
        assert np.array_equal(np.load(a / "frames.npy"), np.load(b / "frames.npy"))
    for name in sorted(os.listdir(runs[0] / "replace" / "dataset" / "images")):
        assert ((runs[0] / "replace" / "dataset" / "images" / name).read_bytes()
                == (runs[1] / "replace" / "dataset" / "images" / name).read_bytes())


def test_monolithic_and_export(synth, tmp_path):
    root, cfg = synth
    assert main(["monolithic", "--config", cfg, "--prompt", "a red cube"]) == 0
    dest = tmp_path / "exported"
    assert main(["export", "--config", cfg, "--stage", "monolithic", "--dest", str(dest)]) == 0
    assert len(os.listdir(dest / "images")) == 3


def test_render_outputs_and_errors(synth, tmp_path):
    root, cfg = synth
    assert main(["erase", "--config", cfg]) == 0
    ckpt = str(root / "runs" / "erase" / "field.ckpt")
    prefix = str(tmp_path / "prev" / "v1")
    assert main(["render", "--config", cfg, "--checkpoint", ckpt, "--camera", "1", "--output", prefix]) == 0
    for suffix in ("_rgb.png", "_alpha.png", "_depth.png", "_depth.npy"):
        assert os.path.exists(prefix + suffix)
    assert read_image(prefix + "_rgb.png").shape == (16, 16, 3)

    assert main(["render", "--config", cfg, "--checkpoint", ckpt, "--camera", "7", "--output", prefix]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + open(ckpt, "rb").read()[4:])
    assert main(["render", "--config", cfg, "--checkpoint", str(bad), "--output", prefix]) == 2


def test_render_from_camera_json(synth, tmp_path):
    root, cfg = synth
    assert main(["erase", "--config", cfg]) == 0
    ckpt = str(root / "runs" / "erase" / "field.ckpt")
    with open(root / "dataset" / "cameras.json") as fh:
        cams = json.load(fh)
    rec = cams[0] if isinstance(cams, list) else cams["frames"][0]
    cam_path = tmp_path / "cam.json"
    cam_path.write_text(json.dumps(rec))
    prefix = str(tmp_path / "cj")
    assert main(["render", "--config", cfg, "--checkpoint", ckpt, "--camera-json", str(cam_path),
                 "--output", prefix]) == 0
    assert os.path.exists(prefix + "_rgb.png")


def test_eval_same_dir_gives_zero_similarity(synth, tmp_path, capsys):
    root, cfg = synth
    images = str(root / "dataset" / "images")
    out = tmp_path / "rep" / "report.csv"
    assert main(["eval", "--orig", images, "--edit", images, "--src", "a vase", "--tgt", "a ball",
                 "--src", "vase", "--tgt", "ball", "--output", str(out)]) == 0
    rep = EvalReport.from_csv(out.read_text())
    assert [r.dir_similarity for r in rep.rows] == [0.0, 0.0]
    assert rep.rows[0].dir_consistency == 0.0
    assert out.with_suffix(".png").exists()
    assert "Dir. sim." in capsys.readouterr().out


def test_eval_single_frame_and_misaligned(tmp_path):
    from ram3d.scene_io import write_image
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    write_image(str(a / "000.png"), np.zeros((4, 4, 3)))
    write_image(str(b / "000.png"), np.ones((4, 4, 3)))
    args = ["eval", "--orig", str(a), "--edit", str(b), "--src", "x", "--tgt", "y", "--output",
            str(tmp_path / "r.csv")]
    assert main(args) == 2
    write_image(str(a / "001.png"), np.zeros((4, 4, 3)))
    assert main(args) == 2


def test_eval_table_provider_constructed_values(tmp_path):
    from ram3d.metrics import image_key
    from ram3d.scene_io import read_image, write_image
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for k in range(2):
        write_image(str(a / f"{k:03d}.png"), np.full((4, 4, 3), 0.1 * k))
        write_image(str(b / f"{k:03d}.png"), np.full((4, 4, 3), 0.5 + 0.1 * k))
    e = np.eye(3)
    table = {}
    for k in range(2):
        table["image/" + image_key(read_image(str(a / f"{k:03d}.png")))] = e[0]
        table["image/" + image_key(read_image(str(b / f"{k:03d}.png")))] = e[1]
    table["text/src"] = e[0]
    table["text/tgt"] = e[1]
    table["text/rev"] = e[1]
    table["text/rev2"] = e[0]
    np.savez(tmp_path / "t.npz", **table)
    out = tmp_path / "r.csv"
    assert main(["eval", "--orig", str(a), "--edit", str(b), "--provider", "table", "--table",
                 str(tmp_path / "t.npz"), "--src", "src", "--tgt", "tgt", "--src", "rev", "--tgt", "rev2",
                 "--output", str(out)]) == 0
    rep = EvalReport.from_csv(out.read_text())
    assert [r.dir_similarity for r in rep.rows] == [1.0, -1.0]
    assert rep.rows[0].dir_consistency == 1.0


def test_bad_thread_env_is_config_error(synth, monkeypatch):
    root, cfg = synth
    monkeypatch.setenv("RAM3D_THREADS", "many")
    assert main(["erase", "--config", cfg]) == 2
