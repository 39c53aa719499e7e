import csv

import numpy as np
import pytest

from longseg import volio
from longseg.applik import read_params
from longseg.atlas import read_positions
from longseg.cli import main

DIMS = "16"
FAST = ["--max-sweeps", "3", "--lbfgs-max-iters", "10", "--bias-order", "1"]


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ph")
    rc = main(["phantom", "--dims", DIMS, "--times", "0", "1", "--rates", "hippocampus:-2",
               "--spacing", "4", "--out-dir", str(d), "--seed", "1"])
    assert rc == 0
    return d


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_phantom_outputs(phantom_dir):
    for name in ("atlas.txt", "t0.mgv", "t1.mgv", "t0_labels.mgv", "truth.csv"):
        assert (phantom_dir / name).exists()
    vol = volio.read_volume(phantom_dir / "t0.mgv")
    assert vol.grid.dims == (16, 16, 16)


def test_phantom_cohort_directories(tmp_path):
    rc = main(["phantom", "--dims", "12", "--cohort", "2", "--groups", "control:0,patient:-2",
               "--out-dir", str(tmp_path)])
    assert rc == 0
    subjects = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
    assert len(subjects) == 4
    groups = _rows(tmp_path / "groups.csv")
    assert groups[0] == ["subject", "group"] and len(groups) == 5


def test_fit_writes_outputs(phantom_dir, tmp_path):
    rc = main(["fit", str(phantom_dir / "t0.mgv"), "--atlas", str(phantom_dir / "atlas.txt"),
               "--out-dir", str(tmp_path)] + FAST)
    assert rc == 0
    gauss, _, extra = read_params(tmp_path / "fit.params")
    assert gauss.n_classes == 5
    labels = volio.read_labels(tmp_path / "labels.mgv")
    truth = volio.read_labels(phantom_dir / "t0_labels.mgv")
    assert np.mean(labels.labels == truth.labels) > 0.85  # smoke check; accuracy is tested elsewhere
    assert read_positions(tmp_path / "fit.pos").shape[1] == 3


def test_fit_long_degenerate(phantom_dir, tmp_path):
    rc = main(["fit-long", str(phantom_dir / "t0.mgv"), str(phantom_dir / "t1.mgv"),
               "--atlas", str(phantom_dir / "atlas.txt"), "--degenerate", "--kappa", "2",
               "--outer-iterations", "1", "--inner-sweeps", "1", "--out-dir", str(tmp_path)] + FAST)
    assert rc == 0
    _, _, extra = read_params(tmp_path / "latents.params")
    assert float(extra["KAPPA0"][0][0]) == 2e6
    assert all(float(v[1]) == 0.0 for v in extra["P0"])
    table = volio.read_volume_table(tmp_path / "volumes.csv")
    assert {r[1] for r in table} == {0.0, 1.0}
    trace = _rows(tmp_path / "trace.csv")
    vals = [float(r[1]) for r in trace[1:]]
    assert vals and all(np.isfinite(vals))


def test_fit_long_single_timepoint_matches_fit(phantom_dir, tmp_path):
    # both paths run to convergence so that iteration budgets do not differ
    atlas = str(phantom_dir / "atlas.txt")
    vol = str(phantom_dir / "t0.mgv")
    conv = ["--max-sweeps", "30", "--bias-order", "1"]
    assert main(["fit", vol, "--atlas", atlas, "--out-dir", str(tmp_path / "x")] + conv) == 0
    assert main(["fit-long", vol, "--atlas", atlas, "--out-dir", str(tmp_path / "l")] + conv) == 0
    a = volio.read_labels(tmp_path / "x" / "labels.mgv").labels
    b = volio.read_labels(tmp_path / "l" / "t0_labels.mgv").labels
    assert np.mean(a == b) >= 0.999
    ga = read_params(tmp_path / "x" / "fit.params")[0]
    gb = read_params(tmp_path / "l" / "t0.params")[0]
    assert np.max(np.abs(ga.means - gb.means)) < 0.02


def test_missing_atlas_exit_code(phantom_dir, tmp_path, capsys):
    rc = main(["fit", str(phantom_dir / "t0.mgv"), "--atlas", str(tmp_path / "nope.txt"),
               "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "atlas not found" in capsys.readouterr().err


def test_bad_config_key_exit_code(phantom_dir, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("kappa = 1\nbogus_key = 3\n")
    rc = main(["fit", str(phantom_dir / "t0.mgv"), "--config", str(cfg),
               "--atlas", str(phantom_dir / "atlas.txt"), "--out-dir", str(tmp_path)])
    assert rc == 2


def test_config_file_values_and_flag_override(phantom_dir, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("# tiny run\nkappa = 3.5\nmax_sweeps = 2\nlbfgs_max_iters = 5\nbias_order = 1\n")
    assert main(["fit", str(phantom_dir / "t0.mgv"), "--config", str(cfg),
                 "--atlas", str(phantom_dir / "atlas.txt"), "--out-dir", str(tmp_path / "a")]) == 0
    assert float(read_params(tmp_path / "a" / "fit.params")[2]["KAPPA"][0][0]) == 3.5
    assert main(["fit", str(phantom_dir / "t0.mgv"), "--config", str(cfg), "--kappa", "1.5",
                 "--atlas", str(phantom_dir / "atlas.txt"), "--out-dir", str(tmp_path / "b")]) == 0
    assert float(read_params(tmp_path / "b" / "fit.params")[2]["KAPPA"][0][0]) == 1.5


def test_nan_volume_exit_code(phantom_dir, tmp_path, capsys):
    vol = volio.read_volume(phantom_dir / "t0.mgv")
    data = vol.data.copy()
    data[3, 4, 5, 0] = np.nan
    volio._write_mgv(tmp_path / "bad.mgv", vol.grid, data, False)
    rc = main(["fit", str(tmp_path / "bad.mgv"), "--atlas", str(phantom_dir / "atlas.txt"),
               "--out-dir", str(tmp_path)] + FAST)
    assert rc == 3
    assert "(3, 4, 5)" in capsys.readouterr().err


def test_metrics_empty_table_exit_code(tmp_path):
    (tmp_path / "t.csv").write_text("subject,time,structure,volume\n")
    assert main(["metrics", "--table", str(tmp_path / "t.csv"), "--out-dir", str(tmp_path)]) == 2


def test_metrics_from_cohort(tmp_path):
    rng = np.random.default_rng(0)
    rows, groups = [], ["subject,group"]
    for i in range(12):
        sid = f"s{i:02d}"
        g = "patient" if i % 2 else "control"
        rate = (-2.0 if g == "patient" else 0.0) + 0.3 * rng.normal()
        for t in (0.0, 1.0, 2.0):
            rows.append((sid, t, "hippocampus", 1000.0 * (1 + rate / 100 * t)))
        groups.append(f"{sid},{g}")
    volio.write_volume_table(rows, tmp_path / "t.csv")
    (tmp_path / "g.csv").write_text("\n".join(groups) + "\n")
    rc = main(["metrics", "--table", str(tmp_path / "t.csv"), "--groups", str(tmp_path / "g.csv"),
               "--positive", "control", "--folds", "3", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = {(r[0], r[1]): float(r[3]) for r in _rows(tmp_path / "metrics.csv")[1:]}
    assert out[("cohens_d", "control-vs-patient")] > 3
    assert out[("auc", "control-vs-patient")] > 0.9
    roc = np.array([[float(v) for v in r] for r in _rows(tmp_path / "roc.csv")[1:]])
    assert np.all(np.diff(roc[:, 0]) >= 0) and np.all(np.diff(roc[:, 1]) >= 0)


def test_metrics_skips_structures_without_spread(tmp_path):
    rows, groups = [], ["subject,group"]
    for i in range(6):
        sid = f"s{i}"
        for t in (0.0, 1.0):
            rows.append((sid, t, "stable", 500.0))
            rows.append((sid, t, "shrinking", 1000.0 * (1 - (0.02 + 0.001 * i) * t * (i % 2))))
        groups.append(f"{sid},{'patient' if i % 2 else 'control'}")
    volio.write_volume_table(rows, tmp_path / "t.csv")
    (tmp_path / "g.csv").write_text("\n".join(groups) + "\n")
    rc = main(["metrics", "--table", str(tmp_path / "t.csv"), "--groups", str(tmp_path / "g.csv"),
               "--folds", "3", "--out-dir", str(tmp_path)])
    assert rc == 0
    d_rows = [r for r in _rows(tmp_path / "metrics.csv") if r[0] == "cohens_d"]
    assert [r[2] for r in d_rows] == ["shrinking"]


def test_metrics_masks_and_dice(tmp_path):
    grid = volio.VoxelGrid((5, 5, 2))
    a = np.zeros(grid.dims, bool)
    a[:2] = True
    b = a.copy()
    b[2] = True
    volio.write_mask(a, grid, tmp_path / "a.mgv")
    volio.write_mask(b, grid, tmp_path / "b.mgv")
    rc = main(["metrics", "--masks", str(tmp_path / "a.mgv"), str(tmp_path / "b.mgv"),
               "--mask-times", "0", "1", "--dice", str(tmp_path / "a.mgv"), str(tmp_path / "b.mgv"),
               "--out-dir", str(tmp_path)])
    assert rc == 0
    out = {r[0]: float(r[3]) for r in _rows(tmp_path / "metrics.csv")[1:]}
    assert out["les_i"] == 10.0 and out["les_d"] == 0.0
    assert out["dice"] == 0.8


def test_grid_search_is_complete_and_reproducible(tmp_path):
    args = ["grid-search", "--subjects", "4", "--dims", "12", "--spacing", "4", "--max-sweeps", "2",
            "--outer-iterations", "1", "--inner-sweeps", "1", "--bias-order", "1"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    rows = _rows(tmp_path / "a" / "grid.csv")
    assert rows[0] == ["kappa0_ratio", "p0_ratio", "median_aspc", "cohens_d", "status"]
    assert len(rows) == 26
    assert (tmp_path / "a" / "grid.csv").read_bytes() == (tmp_path / "b" / "grid.csv").read_bytes()


def test_nothing_to_do(tmp_path):
    assert main(["metrics", "--out-dir", str(tmp_path)]) == 2
