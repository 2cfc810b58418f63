import csv
import os

import numpy as np
import pytest

from elder import cli
from elder import data as dt
from elder import gradcheck as gc
from elder import imageio
from elder.errors import ConfigError


def run(tmp_path, command, ini="", name="out"):
    cfg = tmp_path / f"{name}.ini"
    cfg.write_text(ini)
    out = tmp_path / name
    return cli.main([command, "--config", str(cfg), "--out", str(out), "--quiet"]), out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_data_writes_tiles_and_manifest(tmp_path):
    code, out = run(tmp_path, "gen-data", "[data]\ncount = 100\n")
    assert code == 0
    rows = read_csv(out / "manifest.csv")
    assert len(rows) == 100
    assert imageio.read_pnm(out / "data" / rows[-1]["file"]).shape == (16, 16)


def test_gen_data_count_zero(tmp_path):
    code, out = run(tmp_path, "gen-data", "[data]\ncount = 0\n")
    assert code == 0
    assert read_csv(out / "manifest.csv") == []


def test_gen_data_deterministic(tmp_path):
    ini = "[experiment]\nseed = 4\n[data]\ncount = 5\n"
    _, a = run(tmp_path, "gen-data", ini, "a")
    _, b = run(tmp_path, "gen-data", ini, "b")
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
    _, c = run(tmp_path, "gen-data", ini.replace("4", "5"), "c")
    assert (a / "manifest.csv").read_bytes() != (c / "manifest.csv").read_bytes()


def test_config_round_trip(tmp_path):
    cfg = cli.ExperimentConfig().override("train", learning_rate=3e-5).override("model", p_missing=0.7)
    text = cfg.to_ini()
    path = tmp_path / "c.ini"
    path.write_text(text)
    again = cli.ExperimentConfig.load(str(path))
    assert again == cfg
    assert again.to_ini() == text


def test_written_config_reloads(tmp_path):
    _, out = run(tmp_path, "gen-data", "[data]\ncount = 1\nimage_size = 12\n")
    cfg = cli.ExperimentConfig.load(str(out / "config.ini"))
    assert cfg.data.image_size == 12


def test_unknown_keys_rejected(tmp_path, capsys):
    code, _ = run(tmp_path, "gen-data", "[data]\ncount = 1\ncolour = red\n[extras]\nx = 1\n")
    assert code == 1
    err = capsys.readouterr().err
    assert "colour" in err and "extras" in err


def test_bad_value_rejected(tmp_path):
    with pytest.raises(ConfigError):
        cli.ExperimentConfig().override("solver", beta=2.0).validate()


def test_train_without_weights_fails(tmp_path, capsys):
    code, _ = run(tmp_path, "train", "[data]\ncount = 2\n")
    assert code == 1
    assert "weights_in" in capsys.readouterr().err


SMALL = """
[experiment]
seed = 3
[data]
count = 4
val_count = 2
[network]
base_channels = 4
[train]
pretrain = true
pretrain_count = 8
pretrain_epochs = 1
epochs = 1
batch_size = 2
"""


def test_train_smoke(tmp_path):
    code, out = run(tmp_path, "train", SMALL)
    assert code == 0
    assert sorted(os.listdir(out / "checkpoints")) == [
        "pretrain_best.eldr", "pretrain_epoch001.eldr", "train_best.eldr", "train_epoch001.eldr"]
    rows = read_csv(out / "train_record.csv")
    assert [r["epoch"] for r in rows] == ["1"]
    assert np.isfinite(float(rows[0]["val_mse"]))


def test_solve_data_only_inpainting_keeps_observations(tmp_path):
    ini = "[experiment]\nseed = 2\n[data]\ncount = 2\n[model]\np_missing = 0.7\n[regularizer]\ntau = 0\n"
    code, out = run(tmp_path, "solve", ini)
    assert code == 0
    cfg = cli.ExperimentConfig.load(str(out / "config.ini"))
    for i, x_gt in enumerate(cli.solve_images(cfg)):
        mask = cli.build_model(cfg, (16, 16), i).mask.astype(bool)
        assert 0.6 < 1 - mask.mean() < 0.8
        recon = imageio.read_pnm(out / f"recon_{i:05d}.pgm")
        np.testing.assert_allclose(recon[mask], np.rint(x_gt[mask] * 255) / 255, atol=1e-12)


def test_solve_trace_nonincreasing(tmp_path):
    ini = SMALL + "[regularizer]\ntau = 0.5\n[model]\nnoise_sigma = 0.02\n[experiment]\ntask = sisr\n"
    ini = ini.replace("[experiment]\nseed = 3\n", "")
    code, out = run(tmp_path, "train", ini, "t")
    assert code == 0
    solve = ini + f"[paths]\nweights_in = {out / 'trained.eldr'}\n"
    code, out = run(tmp_path, "solve", solve, "s")
    assert code == 0
    for i in range(4):
        f = [float(r["f"]) for r in read_csv(out / f"trace_{i:05d}.csv")]
        assert np.all(np.diff(f) <= 0)
    metrics = read_csv(out / "metrics.csv")
    assert len(metrics) == 4 and all(np.isfinite(float(r["psnr"])) for r in metrics)


def test_gradcheck_exit_codes(tmp_path):
    code, out = run(tmp_path, "gradcheck", "", "ok")
    assert code == 0
    assert all(r["passed"] == "1" for r in read_csv(out / "gradcheck.csv"))
    with gc.corrupted_backward("conv2d"):
        code, out = run(tmp_path, "gradcheck", "", "broken")
    assert code == 2
    assert any(r["passed"] == "0" for r in read_csv(out / "gradcheck.csv"))


def test_bench_steps_outputs(tmp_path):
    code, out = run(tmp_path, "bench-steps", "[bench]\nmax_iters = 400\n")
    assert code == 0
    summary = read_csv(out / "bench_summary.csv")
    assert [r["strategy"] for r in summary] == ["backtracking"] * 3 + ["fixed", "fixed_10pct"]
    steps = read_csv(out / "bench_steps.csv")
    assert len(steps) == sum(int(r["iterations"]) + 1 for r in summary)
    hits = {r["strategy"]: int(r["iters_to_threshold"]) for r in summary[1:]}
    assert hits["fixed_10pct"] > hits["backtracking"]


def test_toy_lipschitz_matches_dense_hessian():
    problem, reg, lipschitz = cli.toy_problem((8, 8))
    k = reg.weights.params["kernel"][0, 0]
    n = 64
    basis = np.eye(n).reshape(n, 8, 8)
    from elder import regularizer as rg
    hess = np.stack([rg.grad(reg, b).ravel() for b in basis])
    assert np.max(np.abs(np.linalg.eigvalsh((hess + hess.T) / 2))) == pytest.approx(lipschitz, rel=1e-10)
    assert k.sum() == pytest.approx(1.0)


def test_unwritable_output_exits_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = cli.main(["gen-data", "--out", str(blocker / "sub"), "--quiet"])
    assert code == 3


def test_corrupt_weights_exit_3(tmp_path):
    bad = tmp_path / "bad.eldr"
    bad.write_bytes(b"not a weights file")
    code, _ = run(tmp_path, "solve", f"[data]\ncount = 1\n[paths]\nweights_in = {bad}\n")
    assert code == 3


def test_seed_override(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[data]\ncount = 2\n")
    cli.main(["gen-data", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "o"), "--quiet"])
    assert cli.ExperimentConfig.load(str(tmp_path / "o" / "config.ini")).experiment.seed == 9
    expected = dt.synthetic_image((16, 16), 9, 1)
    got = imageio.read_pnm(tmp_path / "o" / "data" / "tile_00001.pgm")
    np.testing.assert_allclose(got, np.rint(expected * 255) / 255, atol=1e-12)
