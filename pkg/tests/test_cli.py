import json

import numpy as np
import pytest

import splatvol as sv
from splatvol import io
from splatvol.cli import main


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {
        "scene": {"seed": 1, "gaussian_count": 10, "placement_radius": 0.4,
                  "scale_range": [0.08, 0.15]},
        "view_count": 6, "radius": 2.4, "resolution": 40,
    }
    spec_path = root / "scene.json"
    spec_path.write_text(json.dumps(spec))
    out = root / "ds"
    assert main(["make-synthetic", "--spec", str(spec_path), "--out", str(out)]) == 0
    return out


def test_unknown_flag_is_usage_error(capsys):
    assert main(["fit", "--frobnicate"]) == 2
    assert main(["no-such-command"]) == 2
    capsys.readouterr()


def test_make_synthetic_wrote_dataset(dataset_dir):
    assert (dataset_dir / "transforms.json").exists()
    assert (dataset_dir / "scene.gvol").exists()
    ds = io.load_dataset(dataset_dir)
    assert len(ds) == 6


def test_fit_render_metrics_extract_pipeline(dataset_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "total_iters": 60, "resolution": 4, "refine_start": 20,
        "refine_interval": 20, "refine_end": 40, "seed": 0,
    }))
    vol_path = tmp_path / "fit.gvol"
    code = main(["fit", str(dataset_dir), "--out", str(vol_path),
                 "--config", str(cfg)])
    assert code == 0
    assert vol_path.exists()
    log_lines = (tmp_path / "fit.gvol.log").read_text().splitlines()
    assert len(log_lines) == 60
    assert len(log_lines[0].split()) == 4

    png = tmp_path / "view.png"
    assert main(["render", str(vol_path), "--pose", "30,20,2.4",
                 "--out", str(png), "--width", "48", "--height", "48"]) == 0
    assert png.exists()

    assert main(["metrics", str(vol_path), str(dataset_dir)]) == 0
    out = capsys.readouterr().out
    assert "psnr" in out and "mean" in out

    gdf_path = tmp_path / "coarse.ggdf"
    assert main(["extract-gdf", str(vol_path), "--out", str(gdf_path),
                 "--opacity-floor", "0.05", "--check-oracle"]) == 0
    field = io.load_gdf(gdf_path)
    assert field.resolution == 4
    assert np.all(field.values >= 0)


def test_fit_no_offsets_freezes_centers(dataset_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"total_iters": 25, "resolution": 3}))
    vol_path = tmp_path / "frozen.gvol"
    assert main(["fit", str(dataset_dir), "--out", str(vol_path),
                 "--config", str(cfg), "--no-offsets"]) == 0
    vol = io.load_volume(vol_path)
    assert np.all(vol.offsets == 0.0)


def test_fit_no_cps_keeps_everything_active(dataset_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"total_iters": 30, "resolution": 3,
                               "refine_start": 5, "refine_interval": 5,
                               "refine_end": 20, "prune_opacity": 0.9}))
    with_cps = tmp_path / "cps.gvol"
    without = tmp_path / "nocps.gvol"
    assert main(["fit", str(dataset_dir), "--out", str(with_cps),
                 "--config", str(cfg)]) == 0
    assert main(["fit", str(dataset_dir), "--out", str(without),
                 "--config", str(cfg), "--no-cps"]) == 0
    log = (without.parent / "nocps.gvol.log").read_text().splitlines()
    assert all(line.split()[3] == "27" for line in log)
    # The aggressive prune threshold must have parked points in the CPS run.
    cps_log = (with_cps.parent / "cps.gvol.log").read_text().splitlines()
    assert any(int(line.split()[3]) < 27 for line in cps_log)
    # After release, everything is active again.
    assert io.load_volume(with_cps).active_mask.all()


def test_diffusion_demo(capsys):
    assert main(["diffusion-demo", "--steps", "40", "--seed", "3",
                 "--resolution", "6"]) == 0
    out = capsys.readouterr().out
    assert "deterministic True" in out


def test_missing_volume_is_diagnostic_error(tmp_path, capsys):
    code = main(["render", str(tmp_path / "none.gvol"), "--pose", "0,0,2",
                 "--out", str(tmp_path / "x.png")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")


def test_bad_pose_is_diagnostic_error(dataset_dir, tmp_path, capsys):
    vol_path = tmp_path / "v.gvol"
    vol, _ = sv.initialize(2)
    io.save_volume(vol, vol_path)
    assert main(["render", str(vol_path), "--pose", "1,2",
                 "--out", str(tmp_path / "x.png")]) == 1
    capsys.readouterr()
