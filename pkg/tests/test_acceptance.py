"""End-to-end acceptance checks.

Each test records a one-line ``detail`` property; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the run.  The phantom-based
checks are slow (the whole module takes about an hour on one core).
"""

import math
import time

import numpy as np
import pytest

from longseg import _kernels, longit, metrics, phantom, volio, xsect
from longseg.atlas import TetrahedralMesh, build_grid_atlas, deformation_energy_gradient
from longseg.cli import main

import oracles

NAMES = phantom.DEFAULT_NAMES
STRUCTURES = [n for k, n in sorted(NAMES.items()) if k > 1]


@pytest.fixture(scope="module", autouse=True)
def single_thread():
    _kernels.set_threads(1)
    yield


def _note(record_property, text):
    record_property("detail", text)
    print(text)


def _cross_seg(vol, atlas, cfg=None):
    res = xsect.fit_cross(vol, atlas, cfg)
    return res, xsect.segment(vol, atlas, res.x_hat, res.gauss, res.bias)


def _logs(out):
    return [volio.log_transform(v) for v in out.volumes]


# 1 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_01_degenerate_longitudinal_matches_cross(record_property):
    dims = (48, 48, 48)
    spec = phantom.default_spec(dims, times=(0.0, 1.0, 2.0), seed=3,
                                anatomy_scale=(1.03, 0.97, 1.0), anatomy_shift=(1.0, -1.0, 0.5))
    vols = _logs(phantom.generate(spec))
    atlas = phantom.default_atlas(dims, 4)
    cfg = longit.LongConfig.degenerate()
    t0 = time.perf_counter()
    res = longit.fit_longitudinal(vols, atlas, cfg)
    elapsed = time.perf_counter() - t0
    agree = []
    for vol, tp in zip(vols, res.timepoints):
        _, seg = _cross_seg(vol, atlas, cfg.cross)
        m = vol.mask
        agree.append(float(np.mean(seg.labels[m] == tp.seg.labels[m])))
    ok = min(agree) >= 0.999 and elapsed < 180
    _note(record_property, f"agreement {min(agree):.5f} (>= 0.999), longitudinal fit {elapsed:.0f} s (< 180)")
    assert ok


# 2 -------------------------------------------------------------------------------------


def _random_spd(rng, N):
    A = rng.normal(size=(N, N))
    return A @ A.T + (0.1 + rng.uniform()) * np.eye(N)


def test_02_theta0_matches_oracle(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        N = int(rng.integers(1, 4))
        T = int(rng.integers(1, 6))
        means = rng.normal(size=(T, N)) * 3
        covs = np.stack([_random_spd(rng, N) for _ in range(T)])
        p0 = N + 2 + rng.uniform(0.5, 50.0)
        mu0, sigma0 = longit.update_theta0(means, covs, p0)
        mu_o, sig_o = oracles.theta0(means, covs, p0)
        worst = max(worst,
                    np.linalg.norm(mu0 - mu_o) / max(np.linalg.norm(mu_o), 1e-300),
                    np.linalg.norm(sigma0 - sig_o) / np.linalg.norm(sig_o))
    _note(record_property, f"max relative error {worst:.2e} over 1000 cases (<= 1e-10)")
    assert worst <= 1e-10


# 3 -------------------------------------------------------------------------------------


def test_03_niw_map_scalar_and_empty_limit(record_property):
    g = longit.niw_map_update(np.array([[3.0], [3.0]]), np.ones((2, 1)), np.array([[0.0]]),
                              np.array([[[1.0]]]), np.array([2.0]), 0.0)
    err = max(abs(g.means[0, 0] - 1.5), abs(g.covs[0, 0, 0] - 2.75))
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 20))
        obs, w = rng.normal(size=n) * 2, rng.uniform(0.01, 1.0, n)
        mu0, s0, p0 = rng.normal(), rng.uniform(0.1, 5.0), rng.uniform(0.0, 30.0)
        g = longit.niw_map_update(obs[:, None], w[:, None], np.array([[mu0]]), np.array([[[s0]]]),
                                  np.array([p0]), 0.0)
        mu, var = oracles.niw_map_scalar(obs, w, mu0, s0, p0)
        err = max(err, abs(g.means[0, 0] - mu) / max(1.0, abs(mu)), abs(g.covs[0, 0, 0] - var) / var)
    mu0 = np.array([[1.0, -2.0], [0.5, 0.25]])
    sigma0 = np.stack([[[2.0, 0.3], [0.3, 1.0]], [[1.5, -0.2], [-0.2, 0.7]]])
    resp = np.zeros((10, 2))
    resp[:, 0] = 1.0
    g = longit.niw_map_update(rng.normal(size=(10, 2)), resp, mu0, sigma0, np.array([6.0, 6.0]), 1e-6)
    exact = np.array_equal(g.means[1], mu0[1]) and np.array_equal(g.covs[1], sigma0[1])
    _note(record_property, f"max relative error {err:.2e} (<= 1e-12), empty class exact: {exact}")
    assert err <= 1e-12 and exact


# 4 -------------------------------------------------------------------------------------


def _monotone(trace):
    tr = np.asarray(trace, dtype=float)
    if tr.size < 2:
        return True, 0.0
    drop = np.max(tr[:-1] - tr[1:]) / np.max(np.abs(tr))
    return drop <= 1e-8, float(drop)


@pytest.mark.slow
def test_04_monotone_ascent(record_property):
    dims = (24, 24, 24)
    atlas = phantom.default_atlas(dims, 4)
    cfg = longit.LongConfig(outer_iterations=3, inner_sweeps=2, cross=xsect.FitConfig(max_outer_sweeps=10))
    worst_joint = worst_cross = 0.0
    bad = []
    for seed in range(20):
        spec = phantom.default_spec(dims, times=(0.0, 1.0), seed=100 + seed,
                                    rates={"hippocampus": -2.0, "ventricle": 3.0})
        vols = _logs(phantom.generate(spec))
        res = longit.fit_longitudinal(vols, atlas, cfg)
        ok_j, d_j = _monotone(res.objective_trace)
        cross = xsect.fit_cross(vols[0], atlas, cfg.cross)
        ok_c, d_c = _monotone(cross.trace)
        worst_joint, worst_cross = max(worst_joint, d_j), max(worst_cross, d_c)
        if not (ok_j and ok_c):
            bad.append(seed)
    _note(record_property, f"20 fits, largest relative drop joint {worst_joint:.1e} cross {worst_cross:.1e} "
                           f"(<= 1e-8), failing seeds {bad}")
    assert not bad


# 5 -------------------------------------------------------------------------------------


def _fd_error(x, ref, mesh, h):
    g = deformation_energy_gradient(x, ref, mesh)
    fd = oracles.central_difference(lambda z: oracles.energy(z, ref, mesh.tetrahedra), x, h)
    return np.linalg.norm(g - fd) / np.linalg.norm(fd)


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def _affine_with_det(rng, det):
    s = rng.uniform(0.5, 2.0, 3)
    s *= (det / np.prod(s)) ** (1 / 3)
    return _rotation(rng) @ np.diag(s) @ _rotation(rng)


def test_05_energy_gradient_finite_differences(record_property):
    rng = np.random.default_rng(5)
    errs, near = [], []
    for i in range(100):
        kind = i % 3
        if kind == 0:
            # single tetrahedron squeezed to det J in [0.05, 0.2]
            ref = rng.normal(size=(4, 3)) * 3
            tets = [[0, 1, 2, 3]]
            if np.linalg.det(np.column_stack([ref[j] - ref[0] for j in (1, 2, 3)])) < 0:
                tets = [[0, 2, 1, 3]]
            mesh = TetrahedralMesh(ref, tets, np.ones((4, 1)))
            det = rng.uniform(0.05, 0.2)
            x = ref @ _affine_with_det(rng, det).T + rng.normal(size=3)
        elif kind == 1:
            # whole grid mesh compressed to det J in [0.05, 0.2]
            mesh = build_grid_atlas(volio.VoxelGrid((5, 5, 5)), 4, K=1)
            ref = mesh.reference_positions
            det = rng.uniform(0.06, 0.19)
            x = ref @ _affine_with_det(rng, det).T + 0.01 * rng.uniform(-1, 1, ref.shape)
        else:
            mesh = build_grid_atlas(volio.VoxelGrid((9, 5, 5)), 4, K=1)
            ref = mesh.reference_positions
            x = ref @ _affine_with_det(rng, rng.uniform(0.5, 2.0)).T + 0.3 * rng.uniform(-1, 1, ref.shape)
        dets = oracles.tet_dets(x, ref, mesh.tetrahedra)
        assert dets.min() > 0
        if kind < 2:
            near.append((dets.min(), dets.max()))
        errs.append(_fd_error(x, ref, mesh, 1e-6))
    lo, hi = min(d[0] for d in near), max(d[1] for d in near)
    _note(record_property, f"100 meshes, max relative error {max(errs):.2e} (< 1e-5); "
                           f"near-degenerate det J range [{lo:.3f}, {hi:.3f}]")
    assert max(errs) < 1e-5 and lo >= 0.04


# 6 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_06_test_retest_longitudinal_beats_cross(record_property):
    dims = (48, 48, 48)
    atlas = phantom.default_atlas(dims, 4)
    cross_aspc, long_aspc = [], []
    t0 = time.perf_counter()
    for s in range(10):
        rng = phantom.make_rng(100, s)
        scale = tuple(1 + 0.03 * rng.normal(size=3))
        shift = tuple(1.0 * rng.normal(size=3))
        reps = []
        for r in range(2):
            spec = phantom.default_spec(dims, seed=1000 * s + r, anatomy_scale=scale, anatomy_shift=shift)
            reps.append(_logs(phantom.generate(spec))[0])
        cv = [volio.structure_volumes(_cross_seg(v, atlas)[1], NAMES) for v in reps]
        res = longit.fit_longitudinal(reps, atlas)
        lv = [volio.structure_volumes(tp.seg, NAMES) for tp in res.timepoints]
        for n in STRUCTURES:
            cross_aspc.append(metrics.aspc(cv[0][n], cv[1][n]))
            long_aspc.append(metrics.aspc(lv[0][n], lv[1][n]))
    elapsed = time.perf_counter() - t0
    mc, ml = float(np.median(cross_aspc)), float(np.median(long_aspc))
    _note(record_property, f"median ASPC longitudinal {ml:.4f} vs cross {mc:.4f}, {elapsed / 60:.1f} min (< 20)")
    assert ml < mc and elapsed < 1200


# 7 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_07_atrophy_recovery(record_property):
    dims = (64, 64, 64)
    spec = phantom.default_spec(dims, times=(0.0, 1.0, 2.0), rates={"hippocampus": -2.0}, seed=5,
                                anatomy_scale=(1.02, 0.98, 1.01), anatomy_shift=(0.7, -0.5, 0.3))
    out = phantom.generate(spec)
    res = longit.fit_longitudinal(_logs(out), phantom.default_atlas(dims, 4))
    vols = [volio.structure_volumes(tp.seg, NAMES)["hippocampus"] for tp in res.timepoints]
    got = metrics.apc((list(spec.times), vols))
    _note(record_property, f"recovered APC {got:.3f} %/yr vs planted -2.0 (tolerance 0.5)")
    assert abs(got + 2.0) <= 0.5


# 8 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_08_effect_size(record_property):
    dims = (48, 48, 48)
    groups = [phantom.GroupSpec("control", {"hippocampus": 0.0}, 0.5),
              phantom.GroupSpec("patient", {"hippocampus": -2.0}, 0.5)]

    def make_spec(sid, rates, s, scale, shift):
        return phantom.default_spec(dims, times=(0.0, 1.0, 2.0), rates=rates, seed=s, subject_id=sid,
                                    anatomy_scale=scale, anatomy_shift=shift)

    cohort = phantom.generate_cohort(15, groups, 8, make_spec=make_spec, anatomy_jitter=0.02)
    atlas = phantom.default_atlas(dims, 4)
    times = [0.0, 1.0, 2.0]
    apc_long = {"control": [], "patient": []}
    apc_cross = {"control": [], "patient": []}
    for _, group, out in cohort:
        vols = _logs(out)
        res = longit.fit_longitudinal(vols, atlas)
        lv = [volio.structure_volumes(tp.seg, NAMES)["hippocampus"] for tp in res.timepoints]
        cv = [volio.structure_volumes(_cross_seg(v, atlas)[1], NAMES)["hippocampus"] for v in vols]
        apc_long[group].append(metrics.apc((times, lv)))
        apc_cross[group].append(metrics.apc((times, cv)))
    d_long = metrics.cohens_d(apc_long["control"], apc_long["patient"])
    d_cross = metrics.cohens_d(apc_cross["control"], apc_cross["patient"])
    _note(record_property, f"Cohen's d longitudinal {d_long:.3f} (>= 0.8), cross {d_cross:.3f}")
    assert d_long >= 0.8 and d_long >= d_cross


# 9 -------------------------------------------------------------------------------------


def test_09_metric_examples(record_property):
    checks = []
    checks.append(metrics.aspc(5.0, 5.0) == 0.0)
    checks.append(abs(metrics.aspc(2.0, 2.1) - 200 * 0.1 / 4.1) < 1e-9)
    checks.append(round(metrics.aspc(2.0, 2.1), 5) == 4.87805)
    checks.append(metrics.apc(([0.0, 1.0, 2.0], [100.0, 98.0, 96.0])) == -2.0)
    checks.append(metrics.apc(([0.0, 1.0, 2.0], [7.0, 7.0, 7.0])) == 0.0)
    checks.append(metrics.apc(([0.0, 0.5], [50.0, 51.0])) == 4.0)
    checks.append(metrics.cohens_d([1.0, 2.0, 4.0], [1.0, 2.0, 4.0]) == 0.0)
    checks.append(abs(metrics.cohens_d([-1.0, 1.0], [1.0, 3.0]) + 2 / math.sqrt(2)) < 1e-9)
    checks.append(metrics.sample_size_for_d(1.0) == 16)
    checks.append(metrics.sample_size_for_d(-1.0) == 16)
    checks.append(metrics.sample_size_for_d(0.5) == 63)
    checks.append(metrics.required_sample_size([0.0, 1.0, 2.0], [1.0, 2.0, 3.0]) == 16)
    m0 = np.zeros(60, bool)
    m1 = m0.copy()
    m1[:10] = True
    m2 = m1.copy()
    m2[10:30] = True
    checks.append(metrics.lesion_rates([(m0, 0.0), (m0, 1.0)]) == (0.0, 0.0))
    checks.append(metrics.lesion_rates([(m0, 0.0), (m1, 0.5)]) == (20.0, 0.0))
    checks.append(metrics.lesion_rates([(m0, 0.0), (m1, 1.0), (m2, 2.0)]) == (15.0, 0.0))
    x = np.zeros(10, bool)
    y = np.zeros(10, bool)
    x[:4] = True
    y[1:7] = True
    z = np.zeros(10, bool)
    z[8:] = True
    checks.append(metrics.dice(x, x) == 1.0)
    checks.append(metrics.dice(x, z) == 0.0)
    checks.append(metrics.dice(x, y) == 0.6)
    feats = np.r_[np.linspace(-3, -1, 10), np.linspace(1, 3, 10)]
    labels = np.r_[np.zeros(10), np.ones(10)]
    checks.append(metrics.lda_roc(feats, labels).auc == 1.0)
    rng = np.random.default_rng(9)
    shuffled = rng.permutation(np.r_[np.zeros(100), np.ones(100)])
    checks.append(abs(metrics.lda_roc(rng.normal(size=(200, 2)), shuffled, seed=9).auc - 0.5) <= 0.1)
    scores = rng.normal(size=50)
    lab = rng.uniform(size=50) < 0.5
    a = metrics.auc_trapezoid(*metrics.roc_curve(scores, lab))
    b = metrics.auc_trapezoid(*metrics.roc_curve(-scores, lab))
    checks.append(abs(a + b - 1.0) < 1e-12)
    failed = [i for i, ok in enumerate(checks) if not ok]
    _note(record_property, f"{len(checks) - len(failed)}/{len(checks)} examples reproduced, "
                           f"sample size at |d| = 1 is {metrics.sample_size_for_d(1.0)}")
    assert not failed


# 10 ------------------------------------------------------------------------------------


@pytest.mark.slow
def test_10_grid_search(record_property, tmp_path):
    t0 = time.perf_counter()
    rc = main(["grid-search", "--subjects", "6", "--dims", "32", "--out-dir", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    with open(tmp_path / "grid.csv") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cells = {(float(r[0]), float(r[1])) for r in rows}
    expected = {(k, p) for k in (5.0, 10.0, 14.0, 15.0, 20.0) for p in (0.25, 0.5, 0.75, 1.0, 1.25)}
    finite = all(np.isfinite(float(r[2])) and np.isfinite(float(r[3])) for r in rows)
    ok = (rc == 0 and cells == expected and len(rows) == 25 and "median_aspc" in header
          and "cohens_d" in header and finite and elapsed < 3600)
    _note(record_property, f"{len(rows)} cells, columns {header[2:4]}, all finite {finite}, "
                           f"{elapsed / 60:.1f} min (< 60)")
    assert ok


# 11 ------------------------------------------------------------------------------------


def test_11_symmetry(record_property):
    dims = (24, 24, 24)
    atlas = phantom.default_atlas(dims, 4)
    cfg = longit.LongConfig(outer_iterations=2, inner_sweeps=2, cross=xsect.FitConfig(max_outer_sweeps=10))
    spec = phantom.default_spec(dims, times=(0.0, 1.0, 2.0), rates={"hippocampus": -3.0}, seed=11)
    vols = _logs(phantom.generate(spec))
    same = longit.fit_longitudinal([vols[0]] * 3, atlas, cfg)
    identical = all(np.array_equal(tp.seg.labels, same.timepoints[0].seg.labels) for tp in same.timepoints)
    perm = [2, 0, 1]
    a = longit.fit_longitudinal(vols, atlas, cfg)
    b = longit.fit_longitudinal([vols[p] for p in perm], atlas, cfg)
    permuted = all(np.array_equal(b.timepoints[i].seg.labels, a.timepoints[p].seg.labels)
                   for i, p in enumerate(perm))
    _note(record_property, f"identical inputs give identical labels: {identical}; "
                           f"permutation commutes: {permuted}")
    assert identical and permuted


# 12 ------------------------------------------------------------------------------------


@pytest.mark.slow
def test_12_lesions(record_property):
    dims = (48, 48, 48)
    spec = phantom.default_spec(dims, n_contrasts=2, times=(0.0, 1.0), seed=7,
                                lesions=phantom.LesionSpec(count=4, growth=30.0))
    out = phantom.generate(spec)
    res = longit.fit_longitudinal(_logs(out), phantom.default_atlas(dims, 4), lesion=longit.LesionConfig())
    dices = [metrics.dice(tp.lesions, truth) for tp, truth in zip(res.timepoints, out.lesions)]
    found, _ = metrics.lesion_rates([(tp.lesions, t) for tp, t in zip(res.timepoints, spec.times)])
    planted, _ = metrics.lesion_rates(list(zip(out.lesions, spec.times)))
    rel = abs(found - planted) / planted
    _note(record_property, f"Dice {min(dices):.3f} (>= 0.7), LES_I {found:.1f} vs planted {planted:.1f} "
                           f"voxels/yr ({100 * rel:.1f}% off, <= 10%)")
    assert min(dices) >= 0.7 and rel <= 0.1
