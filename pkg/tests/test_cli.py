"""End-to-end command-line workflows: training, prediction, raster export,
evaluation reports, and exit-code conventions."""

import numpy as np
import pytest

from sinr.cli import main, read_manifest, write_manifest, write_pgm
from sinr.data import load_observations, save_observations, write_env_raster
from sinr.data import ObservationSet
from sinr.evaluate import EvalGrid, save_eval_grid
from sinr.geo import GridSpec, InputLayout, cell_centroids
from sinr.net import (
    NetConfig,
    forward,
    init_params,
    read_model_file,
    save_model,
    zeros_like_params,
)


def make_obs_csv(path, n=80, seed=0):
    rng = np.random.default_rng(seed)
    obs = ObservationSet(
        ("north", "south"),
        (rng.random(n) < 0.5).astype(np.int64),
        rng.uniform(-170, 170, n),
        np.zeros(n),
    )
    lats = np.where(obs.species_index == 0, rng.uniform(20, 70, n), rng.uniform(-70, -20, n))
    obs = ObservationSet(obs.species_ids, obs.species_index, obs.lons, lats)
    save_observations(obs, path)
    return obs


def flat_model(path, species=("north", "south"), layout=InputLayout.COORDS,
               identity=False, input_dim=4):
    """A model whose every parameter is zero: it predicts 0.5 everywhere."""
    cfg = NetConfig(input_dim=input_dim, n_species=len(species), hidden_dim=4,
                    n_residual_layers=1, dropout_p=0.0, seed=0,
                    identity_encoder=identity)
    params = zeros_like_params(init_params(cfg))
    save_model(params, cfg, path, input_layout=layout, species_ids=species)
    return cfg


TRAIN_ARGS = [
    "--loss", "an-full", "--lambda", "8", "--epochs", "2", "--batch-size", "32",
    "--lr", "1e-3", "--hidden-dim", "8", "--residual-layers", "1",
    "--dropout", "0.5", "--seed", "3",
]


def run_train(tmp_path, obs_path, model_path, *extra):
    return main(["train", "--obs", str(obs_path), "--out", str(model_path),
                 *TRAIN_ARGS, *extra])


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------


def test_missing_required_argument_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path / "m.sinr")])
    assert exc.value.code == 2
    capsys.readouterr()


def test_env_layout_without_raster_exits_2(tmp_path, capsys):
    obs = tmp_path / "obs.csv"
    make_obs_csv(obs)
    with pytest.raises(SystemExit) as exc:
        main(["train", "--obs", str(obs), "--out", str(tmp_path / "m.sinr"),
              "--input", "env"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_bad_baseline_argument_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "map", "--grid", str(tmp_path / "g"), "--report",
              str(tmp_path / "r"), "--baseline", "nearest"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "baseline" in err


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_missing_obs_file_exits_1(tmp_path, capsys):
    code = main(["train", "--obs", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path / "m.sinr")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_species_exits_1(tmp_path, capsys):
    model = tmp_path / "m.sinr"
    flat_model(model)
    code = main(["predict", "--model", str(model), "--species", "ghost",
                 "--resolution", "2", "--out", str(tmp_path / "p.csv")])
    assert code == 1
    assert "ghost" in capsys.readouterr().err


def test_version_exits_0(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "sinr" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# Manifest round-trip
# ---------------------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "run.manifest"
    write_manifest(path, [("a", 1), ("b", "x y"), ("c", 2.5)])
    assert read_manifest(path) == {"a": "1", "b": "x y", "c": "2.5"}


def test_manifest_rejects_duplicates_and_newlines(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        write_manifest(tmp_path / "m", [("a", 1), ("a", 2)])
    with pytest.raises(ValueError, match="single-line"):
        write_manifest(tmp_path / "m", [("a", "two\nlines")])
    bad = tmp_path / "bad.manifest"
    bad.write_text("noequalsign\n")
    with pytest.raises(ValueError, match="malformed"):
        read_manifest(bad)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_model_and_manifest(tmp_path, capsys):
    obs_path = tmp_path / "obs.csv"
    make_obs_csv(obs_path)
    model_path = tmp_path / "m.sinr"
    assert run_train(tmp_path, obs_path, model_path) == 0
    out = capsys.readouterr().out
    assert "epoch 1/2" in out and "epoch 2/2" in out

    model = read_model_file(model_path)
    assert model.species_ids == ("north", "south")
    assert model.cfg.hidden_dim == 8

    manifest = read_manifest(str(model_path) + ".manifest")
    assert manifest["command"] == "train"
    assert manifest["master_seed"] == "3"
    assert manifest["n_species"] == "2"
    assert manifest["records_trained"] == "80"
    assert manifest["cfg_loss_variant"] == "an-full"
    import hashlib

    assert manifest["model_sha256"] == hashlib.sha256(model_path.read_bytes()).hexdigest()
    assert manifest["obs_sha256"] == hashlib.sha256(obs_path.read_bytes()).hexdigest()


def test_train_is_reproducible_across_invocations(tmp_path, capsys):
    obs_path = tmp_path / "obs.csv"
    make_obs_csv(obs_path)
    a, b = tmp_path / "a.sinr", tmp_path / "b.sinr"
    assert run_train(tmp_path, obs_path, a) == 0
    assert run_train(tmp_path, obs_path, b) == 0
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()


def test_train_min_count_filters_catalog(tmp_path, capsys):
    obs_path = tmp_path / "obs.csv"
    rng = np.random.default_rng(5)
    obs = ObservationSet(
        ("common", "rare"),
        np.array([0] * 30 + [1] * 2, dtype=np.int64),
        rng.uniform(-170, 170, 32),
        rng.uniform(-80, 80, 32),
    )
    save_observations(obs, obs_path)
    model_path = tmp_path / "m.sinr"
    code = main(["train", "--obs", str(obs_path), "--out", str(model_path),
                 "--epochs", "1", "--batch-size", "16", "--hidden-dim", "4",
                 "--residual-layers", "0", "--min-count", "10", "--seed", "1"])
    assert code == 0
    capsys.readouterr()
    assert read_model_file(model_path).species_ids == ("common",)


def test_train_reports_rejected_rows(tmp_path, capsys):
    obs_path = tmp_path / "obs.csv"
    obs_path.write_text(
        "species_id,lon,lat\n"
        "good,10.0,20.0\n"
        "bad,999.0,20.0\n"
        "good,-10.0,-20.0\n"
    )
    model_path = tmp_path / "m.sinr"
    code = main(["train", "--obs", str(obs_path), "--out", str(model_path),
                 "--epochs", "1", "--batch-size", "2", "--hidden-dim", "4",
                 "--residual-layers", "0", "--seed", "1"])
    assert code == 0
    err = capsys.readouterr().err
    assert "row 3" in err and "out of range" in err and "skipped 1" in err


# ---------------------------------------------------------------------------
# predict / export-raster
# ---------------------------------------------------------------------------


def test_predict_matches_in_process_forward(tmp_path, capsys):
    obs_path = tmp_path / "obs.csv"
    make_obs_csv(obs_path)
    model_path = tmp_path / "m.sinr"
    assert run_train(tmp_path, obs_path, model_path) == 0
    out_csv = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(model_path), "--species", "south",
                 "--resolution", "3", "--out", str(out_csv)]) == 0
    capsys.readouterr()

    model = read_model_file(model_path)
    grid = GridSpec(3)
    lons, lats = cell_centroids(grid)
    from sinr.data import assemble_inputs

    x = assemble_inputs(lons, lats, model.input_layout, None)
    _, y = forward(model.params, model.cfg, x, mode="eval")
    col = model.species_ids.index("south")

    rows = out_csv.read_text().strip().splitlines()
    assert rows[0] == "lon,lat,score"
    assert len(rows) == 1 + grid.n_cells
    for i, row in enumerate(rows[1:]):
        lon_s, lat_s, score_s = row.split(",")
        assert lon_s == repr(float(lons[i]))
        assert score_s == repr(float(y[i, col]))


def test_export_raster_flat_model_is_mid_gray(tmp_path, capsys):
    model_path = tmp_path / "flat.sinr"
    flat_model(model_path)
    out = tmp_path / "map.pgm"
    assert main(["export-raster", "--model", str(model_path), "--species", "north",
                 "--resolution", "2", "--out", str(out)]) == 0
    capsys.readouterr()
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "P2"
    assert lines[1] == "4 2"  # width height for resolution 2
    assert lines[2] == "255"
    pixels = [int(v) for row in lines[3:] for v in row.split()]
    assert len(pixels) == 8
    assert set(pixels) == {128}  # sigmoid(0) = 0.5 -> round-half-up 128


def test_export_raster_fixed_threshold(tmp_path, capsys):
    model_path = tmp_path / "flat.sinr"
    flat_model(model_path)
    out = tmp_path / "map.pgm"
    assert main(["export-raster", "--model", str(model_path), "--species", "north",
                 "--resolution", "2", "--out", str(out),
                 "--binary-threshold", "fixed:0.4"]) == 0
    assert {int(v) for r in out.read_text().splitlines()[3:] for v in r.split()} == {255}
    assert main(["export-raster", "--model", str(model_path), "--species", "north",
                 "--resolution", "2", "--out", str(out),
                 "--binary-threshold", "fixed:0.6"]) == 0
    assert {int(v) for r in out.read_text().splitlines()[3:] for v in r.split()} == {0}
    capsys.readouterr()


def test_export_raster_csv_sidecar(tmp_path, capsys):
    model_path = tmp_path / "flat.sinr"
    flat_model(model_path)
    out, side = tmp_path / "map.pgm", tmp_path / "cells.csv"
    assert main(["export-raster", "--model", str(model_path), "--species", "north",
                 "--resolution", "2", "--out", str(out), "--csv", str(side)]) == 0
    capsys.readouterr()
    rows = side.read_text().strip().splitlines()
    assert rows[0] == "lon,lat,score"
    assert len(rows) == 1 + GridSpec(2).n_cells
    assert all(r.endswith("0.5") for r in rows[1:])


def test_write_pgm_row_order(tmp_path):
    path = tmp_path / "img.pgm"
    write_pgm(path, np.array([[0, 1], [2, 3]]))
    assert path.read_text() == "P2\n2 2\n255\n0 1\n2 3\n"


# ---------------------------------------------------------------------------
# eval subcommands
# ---------------------------------------------------------------------------


def grid_fixture(tmp_path):
    """Observations concentrated in known cells plus a matching eval grid."""
    grid = GridSpec(2)
    lons, lats = cell_centroids(grid, np.array([0, 5]))
    obs = ObservationSet(
        ("a", "b"),
        np.array([0] * 4 + [1] * 4, dtype=np.int64),
        np.concatenate([np.full(4, lons[0]), np.full(4, lons[1])]),
        np.concatenate([np.full(4, lats[0]), np.full(4, lats[1])]),
    )
    obs_path = tmp_path / "obs.csv"
    save_observations(obs, obs_path)
    labels = np.full((2, grid.n_cells), -1, dtype=np.int8)
    labels[0, [0, 5]] = [1, 0]
    labels[1, [0, 5]] = [0, 1]
    grid_path = tmp_path / "expert.evalgrid"
    save_eval_grid(EvalGrid(grid, ("a", "b"), labels), grid_path)
    return obs_path, grid_path


def test_eval_map_with_grid_baseline(tmp_path, capsys):
    obs_path, grid_path = grid_fixture(tmp_path)
    report = tmp_path / "map.csv"
    code = main(["eval", "map", "--baseline", "grid:2", "--obs", str(obs_path),
                 "--grid", str(grid_path), "--report", str(report)])
    assert code == 0
    out = capsys.readouterr().out
    assert "MAP (grid:2): 1.000000" in out
    rows = report.read_text().strip().splitlines()
    assert rows[0] == "species_id,ap,status"
    assert rows[-1] == "MAP,1.0,n=2"


def test_eval_map_reports_unknown_species(tmp_path, capsys):
    obs_path, grid_path = grid_fixture(tmp_path)
    model_path = tmp_path / "flat.sinr"
    flat_model(model_path, species=("a",))  # knows only one of the two
    report = tmp_path / "map.csv"
    code = main(["eval", "map", "--model", str(model_path),
                 "--grid", str(grid_path), "--report", str(report)])
    assert code == 0
    capsys.readouterr()
    assert "b,,not in predictor" in report.read_text()


def test_eval_map_dump_cells(tmp_path, capsys):
    obs_path, grid_path = grid_fixture(tmp_path)
    report, dump = tmp_path / "map.csv", tmp_path / "cells.csv"
    code = main(["eval", "map", "--baseline", "grid:2", "--obs", str(obs_path),
                 "--grid", str(grid_path), "--report", str(report),
                 "--dump-cells", str(dump)])
    assert code == 0
    capsys.readouterr()
    rows = dump.read_text().strip().splitlines()
    assert rows[0] == "cell,lon,lat,a,b"
    assert len(rows) == 3  # two valid cells


def test_eval_geoprior_flat_model_changes_nothing(tmp_path, capsys):
    scores = tmp_path / "scores.csv"
    scores.write_text(
        "r1,a,10.0,20.0,a:0.6,b:0.9\n"
        "r2,b,-30.0,5.0,b:0.8,a:0.2\n"
    )
    model_path = tmp_path / "flat.sinr"
    flat_model(model_path, species=("a", "b"))
    report = tmp_path / "gp.csv"
    code = main(["eval", "geoprior", "--model", str(model_path),
                 "--scores", str(scores), "--report", str(report)])
    assert code == 0
    out = capsys.readouterr().out
    # A constant prior multiplies every candidate by 0.5: ranking unchanged.
    assert "delta +0.00 points" in out
    assert report.read_text().strip().splitlines()[-1].startswith("DELTA,0.0,")


def test_eval_geoprior_with_grid_baseline(tmp_path, capsys):
    obs_path, _ = grid_fixture(tmp_path)
    grid = GridSpec(2)
    lons, lats = cell_centroids(grid, np.array([0, 5]))
    scores = tmp_path / "scores.csv"
    # True species a at a's home cell, but the classifier prefers b; the
    # indicator prior zeroes b there, flipping the pick to a.
    scores.write_text(
        f"r1,a,{lons[0]},{lats[0]},a:0.6,b:0.9\n"
        f"r2,b,{lons[1]},{lats[1]},b:0.8,a:0.2\n"
    )
    report = tmp_path / "gp.csv"
    code = main(["eval", "geoprior", "--baseline", "grid:2", "--obs", str(obs_path),
                 "--scores", str(scores), "--report", str(report)])
    assert code == 0
    assert "delta +50.00 points" in capsys.readouterr().out


def test_eval_geofeature_end_to_end(tmp_path, capsys):
    rows, cols = 8, 16
    lat_centroids = 90.0 - (np.arange(rows) + 0.5) * 180.0 / rows
    # Target equals one of the encoder's own harmonics, so a linear read-out
    # of the features reconstructs it almost exactly.
    lat_vals = np.repeat(np.sin(np.pi * lat_centroids / 90.0)[:, None], cols, axis=1)
    write_env_raster(tmp_path / "t.env", lat_vals, (-180, 180, -90, 90))
    model_path = tmp_path / "id.sinr"
    flat_model(model_path, species=("s",), identity=True)
    report = tmp_path / "gf.csv"
    code = main(["eval", "geofeature", "--model", str(model_path),
                 "--env-raster", str(tmp_path / "t.env"),
                 "--report", str(report), "--split-seed", "4"])
    assert code == 0
    out = capsys.readouterr().out
    assert "mean R^2" in out
    rows_ = report.read_text().strip().splitlines()
    assert rows_[0] == "layer,r2,alpha"
    assert rows_[-1].startswith("MEAN,")
    mean_r2 = float(rows_[-1].split(",")[1])
    assert mean_r2 > 0.999


def test_eval_geofeature_rejects_baseline(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "geofeature", "--model", "x", "--baseline", "lr",
              "--env-raster", "y", "--report", str(tmp_path / "r")])
    assert exc.value.code == 2
    capsys.readouterr()


def test_model_layout_requires_env_rasters_exits_2(tmp_path, capsys):
    model_path = tmp_path / "env.sinr"
    flat_model(model_path, layout=InputLayout.ENV, input_dim=1)
    with pytest.raises(SystemExit) as exc:
        main(["predict", "--model", str(model_path), "--species", "north",
              "--resolution", "2", "--out", str(tmp_path / "p.csv")])
    assert exc.value.code == 2
    capsys.readouterr()
