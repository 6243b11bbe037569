import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from occloff.cli import main
from occloff.fusion import EntropyMask, n_selected, select_queries
from occloff.geometry import VoxelGridSpec
from occloff.trainer import write_oracle_checkpoint
from occloff.viz import count_marked, mask_overlay, palette_u8, tiled_slices, write_visualization


def run(capsys, *args):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def four_seq_config(tmp_path, tiny_config_path):
    data = yaml.safe_load(Path(tiny_config_path).read_text())
    data["data"] = {"n_train": 3, "n_val": 1}
    path = tmp_path / "four.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


# -- gen ---------------------------------------------------------------------------

def test_gen_layout_and_idempotence(capsys, tmp_path, four_seq_config):
    code, out, _ = run(capsys, "gen", "--config", four_seq_config, "--out", tmp_path / "a")
    assert code == 0
    dirs = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir())
    assert dirs == [f"seq_{i:04d}" for i in range(4)]
    assert (tmp_path / "a" / "manifest.json").is_file()
    first = tree_digest(tmp_path / "a")
    assert run(capsys, "gen", "--config", four_seq_config, "--out", tmp_path / "a")[0] == 0
    assert tree_digest(tmp_path / "a") == first


def test_gen_rejects_unknown_key(capsys, tmp_path, tiny_config_path):
    data = yaml.safe_load(Path(tiny_config_path).read_text())
    data["model"]["n_layerz"] = 3
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(data))
    code, _, err = run(capsys, "gen", "--config", bad, "--out", tmp_path / "x")
    assert code == 1
    assert "n_layerz" in err


def test_gen_unwritable_output(capsys, tmp_path, tiny_config_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run(capsys, "gen", "--config", tiny_config_path, "--out", blocker / "sub")
    assert code == 2 and "not writable" in err
    assert not list(tmp_path.glob("file/*"))


def test_unknown_command_is_usage_error(capsys):
    assert run(capsys, "frobnicate")[0] == 1


@pytest.mark.parametrize("cmd", ["train", "eval", "ablate"])
def test_missing_dataset(capsys, tmp_path, tiny_config_path, cmd):
    args = {
        "train": ["train", "--config", tiny_config_path, "--data", tmp_path / "none", "--out", tmp_path / "o"],
        "eval": ["eval", "--checkpoint", tmp_path / "c.pt", "--data", tmp_path / "none"],
        "ablate": ["ablate", "--config", tiny_config_path, "--data", tmp_path / "none", "--out", tmp_path / "o",
                   "--grid", "ablation.proxy_loss=true,false"],
    }[cmd]
    code, _, err = run(capsys, *args)
    assert code == 1 and "manifest" in err


# -- train / eval / ablate ---------------------------------------------------------

def test_eval_oracle_checkpoint(capsys, tmp_path, tiny_cfg, tiny_data):
    ck = write_oracle_checkpoint(tmp_path / "oracle.pt", tiny_cfg, tiny_cfg.rig())
    code, out, _ = run(capsys, "eval", "--checkpoint", ck, "--data", tiny_data, "--out", tmp_path / "r.json")
    assert code == 0
    assert "mIoU 1.0000" in out
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["miou"] == 1.0 and all(v == 1.0 for v in rep["per_class"].values())


def test_train_then_eval(capsys, tmp_path, tiny_config_path, tiny_data):
    code, out, _ = run(capsys, "train", "--config", tiny_config_path, "--data", tiny_data, "--out", tmp_path / "t")
    assert code == 0 and "epoch   2" in out
    lines = (tmp_path / "t" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and all("miou" in json.loads(l) for l in lines)
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "t" / "ckpt_epoch_002.pt", "--data", tiny_data)
    assert code == 0 and "mIoU" in out


def test_ablate_proxy_two_rows(capsys, tmp_path, tiny_config_path, tiny_data):
    code, out, _ = run(capsys, "ablate", "--config", tiny_config_path, "--data", tiny_data, "--out",
                       tmp_path / "ab", "--grid", "ablation.proxy_loss=true,false", "--epochs", "1")
    assert code == 0
    rows = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert [r["ablation.proxy_loss"] for r in rows] == [True, False]
    assert rows[0]["delta_miou"] == 0.0
    assert rows[1]["delta_miou"] == pytest.approx(rows[1]["miou"] - rows[0]["miou"])
    assert "delta_miou" in out


def test_ablate_scale_counts(capsys, tmp_path, tiny_cfg, tiny_config_path, tiny_data):
    code, _, _ = run(capsys, "ablate", "--config", tiny_config_path, "--data", tiny_data, "--out",
                     tmp_path / "ab", "--grid", "model.scale=small,base,dense", "--epochs", "1")
    assert code == 0
    rows = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    V = tiny_cfg.coarse_grid.n_voxels
    assert [r["attn_calls_per_layer"] for r in rows] == [2 * n_selected(35, V)] * 2 + [2 * V]
    assert all(r["fusion_seconds"] > 0 and r["train_seconds"] > 0 for r in rows)


def test_ablate_bad_grid(capsys, tmp_path, tiny_config_path, tiny_data):
    code, _, err = run(capsys, "ablate", "--config", tiny_config_path, "--data", tiny_data, "--out",
                       tmp_path / "ab", "--grid", "model.bogus=1,2")
    assert code == 1 and "bogus" in err


# -- viz ---------------------------------------------------------------------------

def test_empty_gt_slice_is_uniform():
    img = tiled_slices(np.zeros((6, 5, 3), dtype=np.int64), scale=2)
    assert img.shape == (12, 30, 3)
    assert (img == palette_u8()[0]).all()


def test_overlay_marks_exactly_the_mask():
    grid = VoxelGridSpec((8, 6, 4), 1.0, (0, 0, 0))
    rng = np.random.default_rng(0)
    for ent in (rng.random(grid.n_voxels), np.ones(grid.n_voxels), np.zeros(grid.n_voxels)):
        m = select_queries(ent, 35)
        assert count_marked(mask_overlay(m, grid, scale=1)) == n_selected(35, grid.n_voxels)


def test_viz_oracle_prediction_equals_gt(capsys, tmp_path, tiny_cfg, tiny_data):
    ck = write_oracle_checkpoint(tmp_path / "oracle.pt", tiny_cfg, tiny_cfg.rig())
    code, _, _ = run(capsys, "viz", "--checkpoint", ck, "--sample", tiny_data / "seq_0008", "--out", tmp_path / "v")
    assert code == 0
    gt = np.asarray(Image.open(tmp_path / "v" / "gt.png"))
    pred = np.asarray(Image.open(tmp_path / "v" / "pred.png"))
    assert np.array_equal(gt, pred)


def test_viz_model_overlays_and_idempotence(capsys, tmp_path, tiny_cfg, tiny_data, tiny_run):
    _, result = tiny_run
    ck = result.checkpoints[-1]
    for out in ("a", "b"):
        code, _, _ = run(capsys, "viz", "--checkpoint", ck, "--sample", tiny_data / "seq_0009",
                         "--out", tmp_path / out, "--scale", "1")
        assert code == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["gt.png", "mask_layer0_gsca.png", "mask_layer0_ssca.png",
                     "mask_layer1_gsca.png", "mask_layer1_ssca.png", "pred.png"]
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    n = n_selected(35, tiny_cfg.coarse_grid.n_voxels)
    for f in files[1:5]:
        assert count_marked(np.asarray(Image.open(tmp_path / "a" / f))) == n


def test_viz_missing_sample(capsys, tmp_path, tiny_cfg, tiny_data):
    ck = write_oracle_checkpoint(tmp_path / "oracle.pt", tiny_cfg, tiny_cfg.rig())
    code, _, err = run(capsys, "viz", "--checkpoint", ck, "--sample", tiny_data / "seq_9999", "--out", tmp_path)
    assert code == 1 and "seq_9999" in err


# -- gradcheck ---------------------------------------------------------------------

def test_gradcheck_passes(capsys, tiny_config_path):
    code, out, _ = run(capsys, "gradcheck", "--config", tiny_config_path, "--instances", "20", "--params", "6")
    assert code == 0
    assert out.count("PASS") == 3 and "max relative error" in out


def test_gradcheck_sign_error_names_operation(capsys, tiny_config_path):
    code, out, err = run(capsys, "gradcheck", "--config", tiny_config_path, "--instances", "5",
                         "--skip-end-to-end", "--inject-sign-error")
    assert code == 2
    assert "FAIL proxy_loss_grad_wrt_distance" in out
    assert "proxy_loss_grad_wrt_distance" in err


def test_gradcheck_32bit_warns(capsys, tiny_config_path):
    code, out, err = run(capsys, "gradcheck", "--config", tiny_config_path, "--no-float64",
                         "--instances", "5", "--skip-end-to-end")
    assert code == 0
    assert "tolerances are loosened" in err
