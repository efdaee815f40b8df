"""End-to-end CLI flow on a miniature dataset: generate, fit, render, eval,
inspect. Slow relative to the unit tests but covers every subcommand."""

import numpy as np
import pytest

from gsavatar import cli
from gsavatar import io as gio


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    run = root / "run"
    rc = cli.main([
        "gen-synthetic", "--out", str(ds), "--seed", "1", "--frames", "8",
        "--cameras", "2", "--image-size", "32", "--resolution", "64",
        "--components", "2", "--quiet",
    ])
    assert rc == 0
    rc = cli.main([
        "fit", "--dataset", str(ds), "--out", str(run), "--iterations", "40",
        "--learning-rate", "1e-3", "--components", "2", "--eval-stride", "4",
        "--seed", "3", "--quiet",
    ])
    assert rc == 0
    return ds, run


@pytest.mark.slow
def test_gen_synthetic_writes_dataset(work):
    ds, _ = work
    for name in ["meta.txt", "poses_train.txt", "poses_ood.txt", "cameras.txt",
                 "template/skeleton.txt", "template/mesh.obj",
                 "template/weights.txt"]:
        assert (ds / name).exists(), name
    meta = gio.read_config(ds / "meta.txt")
    assert meta["n_frames"] == 8
    assert meta["n_cameras"] == 3
    assert (ds / "images" / "cam02" / "frame0007.png").exists()


@pytest.mark.slow
def test_fit_writes_run_artifacts(work):
    _, run = work
    for name in ["predictor.bin", "pca.bin", "gaussians_canonical.bin",
                 "loss.csv", "config.txt", "eval.txt"]:
        assert (run / name).exists(), name
    assert (run / "maps" / "base_position_front.bin").exists()
    assert (run / "maps" / "offsets_rest_front.png").exists()

    losses = gio.read_loss_csv(run / "loss.csv")
    assert losses.shape[0] == 40
    # training moved: the tail is better than the start
    assert losses[-5:, 3].mean() < losses[:5, 3].mean()

    ev = gio.read_config(run / "eval.txt")
    assert np.isfinite(ev["mean_psnr"])
    assert 0.0 <= ev["mean_ssim"] <= 1.0
    assert ev["iterations_run"] == 40

    pred, _ = gio.read_predictor(run / "predictor.bin")
    assert pred.pca_hash == gio.content_hash(run / "pca.bin")


@pytest.mark.slow
def test_render_command(work, tmp_path):
    ds, run = work
    out = tmp_path / "renders"
    rc = cli.main([
        "render", "--dataset", str(ds), "--run", str(run), "--poses", "ood",
        "--camera", "0", "--frames", "0:2", "--out", str(out),
    ])
    assert rc == 0
    imgs = sorted(out.glob("frame*.png"))
    assert len(imgs) == 2
    assert gio.read_png(imgs[0]).shape == (32, 32, 3)


@pytest.mark.slow
def test_render_pose_file(work, tmp_path, capsys):
    ds, run = work
    out = tmp_path / "r2"
    rc = cli.main([
        "render", "--dataset", str(ds), "--run", str(run),
        "--poses", str(ds / "poses_train.txt"), "--frames", "3", "--out", str(out),
    ])
    assert rc == 0
    assert (out / "frame0003.png").exists()


@pytest.mark.slow
def test_eval_command(work, capsys):
    ds, run = work
    rc = cli.main(["eval", "--dataset", str(ds), "--run", str(run), "--stride", "4"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mean over 2 frames" in out
    assert "psnr" in out


@pytest.mark.slow
def test_inspect_pca_command(work, capsys):
    _, run = work
    rc = cli.main(["inspect-pca", "--run", str(run)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "components: 2" in out
    assert "cumulative variance" in out


def test_missing_dataset_fails_cleanly(tmp_path, capsys):
    rc = cli.main([
        "fit", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "r"),
        "--iterations", "1", "--quiet",
    ])
    assert rc == 1
    assert "error [" in capsys.readouterr().err


def test_bad_spec_fails_cleanly(tmp_path, capsys):
    rc = cli.main([
        "gen-synthetic", "--out", str(tmp_path / "ds"), "--frames", "4",
        "--components", "20", "--quiet",
    ])
    assert rc == 1
    assert "error [gen-synthetic]" in capsys.readouterr().err


def test_inspect_pca_requires_source(capsys):
    rc = cli.main(["inspect-pca"])
    assert rc == 1
