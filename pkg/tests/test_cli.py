import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mde_edit.backend_toy import generate_dataset, save_backend, write_dataset
from mde_edit.backend_toy.scenes import random_scene, save_mask, save_png
from mde_edit.cli import build_parser, main
from mde_edit.metrics.classifier import train_classifier

pytestmark = pytest.mark.filterwarnings("ignore::mde_edit.pipeline.UnmaskedEditToken")


def run(*argv) -> int:
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:
        return e.code


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def files(tmp_path_factory, tiny_backend):
    d = tmp_path_factory.mktemp("cli")
    save_backend(tiny_backend, d / "tiny.ckpt")
    train_classifier(generate_dataset(40, 0, 0.3), seed=0, steps=10, batch=8).save(d / "clf.ckpt")
    scene = random_scene(np.random.default_rng(11), 2, colors=("red", "blue"), kinds=("circle", "square"))
    save_png(scene.render(), d / "img.png")
    for k, m in enumerate(scene.masks):
        save_mask(m, d / f"mask{k}.png")
    src = scene.caption
    tgt = src.replace("red", "green").replace("square", "triangle")
    cfg = {
        "source_prompt": src,
        "target_prompt": tgt,
        "edits": [
            {"token": "green" if scene.shapes[k].color == "red" else "triangle", "mask_path": str(d / f"mask{k}.png")}
            for k in range(2)
        ],
        "steps": 4,
        "opt_window": 2,
        "lambda1": 1.0,
        "lambda2": 1.25,
        "delta": 0.05,
        "inner_iters": 1,
        "seed": 0,
        "ccl_reduction": "masked_mean",
        "image": str(d / "img.png"),
        "checkpoint": str(d / "tiny.ckpt"),
    }
    (d / "edit.json").write_text(json.dumps(cfg))
    return d


def test_help_lists_defaults(capsys):
    parser = build_parser()
    for cmd in ("gen-data", "train-toy", "invert", "edit", "eval", "ablate", "demo"):
        with pytest.raises(SystemExit):
            parser.parse_args([cmd, "--help"])
    out = " ".join(capsys.readouterr().out.split())
    assert "lambda1=1, lambda2=1.25, 20 optimized steps out of 50" in out
    assert "default 1.25" in out and "default 20" in out


def test_gen_data_deterministic_and_refuses_overwrite(tmp_path):
    assert run("gen-data", "--n", 6, "--seed", 0, "--overlap", 0.5, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--n", 6, "--seed", 0, "--overlap", 0.5, "--out", tmp_path / "b") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert len(list((tmp_path / "a").glob("scene_*.png"))) == 6
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 0 and manifest["config_hash"]
    assert run("gen-data", "--n", 6, "--out", tmp_path / "a") == 2
    assert run("gen-data", "--n", 6, "--out", tmp_path / "a", "--force") == 0


def test_gen_data_rejects_bad_overlap(tmp_path):
    assert run("gen-data", "--n", 5, "--overlap", 1.5, "--out", tmp_path / "x") == 2
    assert not (tmp_path / "x").exists()


def test_edit_with_config_file(files, tmp_path):
    out = tmp_path / "e"
    assert run("edit", "--config", files / "edit.json", "--out", out) == 0
    assert (out / "edited.png").exists()
    lines = (out / "losses.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["lambda2"] == 1.25 and manifest["config"]["steps"] == 4


def test_edit_flag_overrides_config(files, tmp_path):
    out = tmp_path / "e"
    assert run("edit", "--config", files / "edit.json", "--lambda2", 0, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["lambda2"] == 0.0 and manifest["config"]["lambda1"] == 1.0
    for line in (out / "losses.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert rec["total"] == pytest.approx(rec["oal"])


def test_edit_missing_mask_is_atomic(files, tmp_path, capsys):
    cfg = json.loads((files / "edit.json").read_text())
    cfg["edits"][0]["mask_path"] = str(tmp_path / "nope.png")
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    out = tmp_path / "e"
    assert run("edit", "--config", tmp_path / "bad.json", "--out", out) == 3
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".e.")]
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert diag["error"] == "FileNotFoundError"


def test_edit_missing_prompt_is_usage_error(files, tmp_path):
    assert run("edit", "--image", files / "img.png", "--out", tmp_path / "e") == 2


def test_invert_then_edit_with_trajectory(files, tmp_path):
    cfg = json.loads((files / "edit.json").read_text())
    traj = tmp_path / "t.traj"
    assert run("invert", "--ckpt", files / "tiny.ckpt", "--image", files / "img.png", "--prompt", cfg["source_prompt"],
               "--steps", 4, "--nti-steps", 2, "--out", traj) == 0
    assert run("edit", "--config", files / "edit.json", "--trajectory", traj, "--out", tmp_path / "e") == 0


def test_eval_command(files, tmp_path, capsys):
    assert run("eval", "--original", files / "img.png", "--edited", files / "img.png", "--mask", files / "mask0.png",
               "--target", "red circle", "--classifier", files / "clf.ckpt", "--out", tmp_path / "r.json") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["bg_ssim"] == pytest.approx(1.0)
    assert run("eval", "--original", files / "img.png", "--edited", files / "img.png", "--mask", files / "mask0.png",
               "--no-classifier") == 0


def test_ablate_empty_dataset_and_filter(files, tmp_path):
    (tmp_path / "empty").mkdir()
    args = ["ablate", "--ckpt", files / "tiny.ckpt", "--classifier", files / "clf.ckpt"]
    assert run(*args, "--data", tmp_path / "empty", "--out", tmp_path / "a") == 2
    assert run(*args, "--settings", "1,5", "--out", tmp_path / "a") == 2
    code = run(*args, "--tasks", 1, "--settings", "1,4", "--steps", 4, "--opt-window", 2, "--out", tmp_path / "a")
    assert code in (0, 4)
    rows = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert sorted(rows) == ["1", "4"]


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "mde_edit.cli", "gen-data", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--overlap" in r.stdout
