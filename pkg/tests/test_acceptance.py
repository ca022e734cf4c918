"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line, then asserts."""
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from mardeam import deam, marinit, projector
from mardeam.deam import DeamConfig, PenaltyConfig
from mardeam.iodata import ImageGrid, data_path, load_material, load_phantom, read_rois
from mardeam.physics import rasterize_phantom, replace_material, simulate_scan
from mardeam.postproc import material_truth, mono_stack, roi_stats

from conftest import fan, parallel

ENERGIES = (60.0, 80.0, 100.0, 120.0, 140.0)


@pytest.fixture
def verdict(capsys):
    def say(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, detail
    return say


@pytest.fixture(scope="module")
def water():
    return load_material("water")


@pytest.fixture(scope="module")
def weights(desk, water):
    grid, model = desk
    return marinit.calibrate_from_phantom(load_phantom("calibration_phantom"), grid, model, water)


@pytest.fixture(scope="module")
def rod_scan(desk):
    grid, model = desk
    return simulate_scan(load_phantom("rod_phantom"), grid, model, seed=0)


@pytest.fixture(scope="module")
def rod_init(desk, rod_scan, weights, water):
    grid, model = desk
    return marinit.mar_initialize(rod_scan.d_L, rod_scan.d_H, model, grid, weights, water)


def test_1_projector_adjoint(verdict, rng):
    grid = ImageGrid.zeros(16, 16, 1.0)
    start = time.perf_counter()
    projector._CACHE.clear()
    worst = 0.0
    for geom in (fan(90, 40, fov=12.0), parallel(90, 40, fov=12.0)):
        for _ in range(20):
            x = grid.with_values(rng.uniform(-1, 1, (16, 16)))
            y = rng.uniform(-1, 1, geom.shape)
            ax = projector.forward_project(x, geom).data
            aty = projector.back_project(projector.forward_project(x, geom).with_data(y), grid).values
            lhs, rhs = float(np.sum(ax * y)), float(np.sum(x.values * aty))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    elapsed = time.perf_counter() - start
    verdict(1, "projector adjoint", worst <= 1e-6 and elapsed < 5.0,
            f"max relative discrepancy {worst:.2e}, {elapsed:.2f} s")


def test_2_penalty_gradient(verdict, rng):
    h = 1e-5
    worst = 0.0
    for cfg in (PenaltyConfig(), PenaltyConfig(lam=3.0, delta=0.2)):
        for scale in (1.0, 0.02):
            c = scale * rng.uniform(0, 1, (8, 8))
            z = np.zeros_like(c)
            grad = deam.penalty_gradient(c, cfg, 2.0, 2.0)
            fd = np.zeros_like(c)
            for idx in np.ndindex(c.shape):
                up, dn = c.copy(), c.copy()
                up[idx] += h
                dn[idx] -= h
                fd[idx] = (deam.penalty(up, z, cfg, 2.0, 2.0) - deam.penalty(dn, z, cfg, 2.0, 2.0)) / (2 * h)
            worst = max(worst, np.abs(grad - fd).max() / np.abs(grad).max())
    verdict(2, "penalty gradient vs central differences", worst <= 1e-5, f"max relative error {worst:.2e}")


def test_3_idivergence(verdict, rng):
    g = rng.uniform(1e-3, 1e5, 1000)
    equal = abs(deam.idivergence(g, g))
    d = rng.uniform(1e-3, 1e5, 1000)
    each = [deam.idivergence(d[i:i + 1], g[i:i + 1]) for i in range(1000)]
    hand = abs(deam.idivergence([2.0], [1.0]) - (2 * math.log(2) - 1))
    ok = equal <= 1e-12 and min(each) >= 0 and hand <= 1e-9
    verdict(3, "I-divergence", ok, f"equality {equal:.1e}, min over bins {min(each):.2e}, hand error {hand:.1e}")


def test_4_monotone_objective(verdict, desk, rod_scan, rod_init):
    grid, model = desk
    worst, times = -np.inf, []
    for lam in (0.0, PenaltyConfig().lam):
        cfg = DeamConfig(penalty=PenaltyConfig(lam=lam), stop_tol=0.0)
        start = time.perf_counter()
        *_, hist = deam.run_deam(rod_scan.d_L, rod_scan.d_H, model, grid, rod_init.metal,
                                 (rod_init.c1, rod_init.c2), cfg, n_iters=300, threads=1)
        times.append(time.perf_counter() - start)
        total = np.array([h["total"] for h in hist])
        assert len(total) == 301
        worst = max(worst, (np.diff(total) / np.abs(total[1:])).max())
    ok = worst <= 1e-9 and max(times) < 600
    verdict(4, "DEAM objective monotone over 300 iterations", ok,
            f"largest relative rise {worst:.1e}, runtimes {times[0]:.0f} s and {times[1]:.0f} s")


def test_5_flag_invariance(verdict, desk, rod_scan, rod_init):
    grid, model = desk
    flags = rod_init.metal.flagged
    bumped = [s.with_data(np.where(flags, s.data * 1000.0 + 7.0, s.data)) for s in (rod_scan.d_L, rod_scan.d_H)]

    def iterates(d_l, d_h):
        out = []
        deam.run_deam(d_l, d_h, model, grid, rod_init.metal, (rod_init.c1, rod_init.c2),
                      DeamConfig(stop_tol=0.0), n_iters=10, callback=lambda s: out.append(s.c.copy()))
        return out

    a, b = iterates(rod_scan.d_L, rod_scan.d_H), iterates(*bumped)
    same = len(a) == len(b) == 10 and all(np.array_equal(x, y) for x, y in zip(a, b))
    verdict(5, "flagged counts never change an iterate", same, f"{int(flags.sum())} flagged rays, 10 iterates compared")


def test_6_noiseless_convergence(verdict, desk):
    grid, model = desk
    spec = replace_material(load_phantom("rod_phantom"), "steel", "water")
    scan = simulate_scan(spec, grid, model, noise=False)
    cfg = DeamConfig(penalty=PenaltyConfig(lam=0.0), stop_tol=0.0)
    c1, c2, _ = deam.run_deam(scan.d_L, scan.d_H, model, grid, None, None, cfg, n_iters=500)
    t1, t2 = rasterize_phantom(spec, grid)
    worst, where = 0.0, ""
    for roi in read_rois(data_path("rod_rois.ini")):
        m = roi.mask(grid)
        for name, rec, tru in (("c1", c1, t1), ("c2", c2, t2)):
            r, t = rec.values[m].mean(), tru.values[m].mean()
            # a zero coefficient is judged against the ROI's c1 scale
            err = abs(r - t) / (abs(t) if t != 0 else t1.values[m].mean())
            if err >= worst:
                worst, where = err, f"{roi.name} {name}"
    verdict(6, "noiseless metal-free DEAM, 500 iterations", worst <= 0.01,
            f"max ROI error {100 * worst:.3f}% at {where}")


def test_7_mar_efficacy(verdict, desk, water):
    grid, model = desk
    scan = simulate_scan(load_phantom("rod_phantom"), grid, model, seed=1)
    w = marinit.calibrate_from_phantom(load_phantom("calibration_phantom"), grid, model, water)
    mar = marinit.mar_initialize(scan.d_L, scan.d_H, model, grid, w, water)
    plain = marinit.mar_initialize(scan.d_L, scan.d_H, model, grid, w, water, marinit.MarInitConfig(use_nmar=False))
    cfg = DeamConfig(stop_tol=0.0)
    roi = next(r for r in read_rois(data_path("rod_rois.ini")) if r.name == "between_rods")
    truth = material_truth(water, ENERGIES)
    basis = (load_material("polystyrene"), load_material("cacl2_23pct"))

    start = time.perf_counter()
    stats = {}
    for tag, init, metal in (("mar", mar, mar.metal), ("plain", plain, None)):
        c1, c2, _ = deam.run_deam(scan.d_L, scan.d_H, model, grid, metal, (init.c1, init.c2), cfg, n_iters=200)
        stats[tag] = roi_stats(mono_stack(c1, c2, basis, ENERGIES), roi, truth)
    elapsed = time.perf_counter() - start
    bias = np.array([r.bias_pct for r in stats["mar"]])
    ratio = np.array([a.mae_pct / b.mae_pct for a, b in zip(stats["mar"], stats["plain"])])
    ok = np.all(np.abs(bias) <= 1.5) and np.all(ratio <= 0.5) and elapsed < 1800
    verdict(7, "MAR-DEAM vs DEAM between the rods", ok,
            f"MAR-DEAM bias% {np.round(bias, 2).tolist()}, MAE ratio {np.round(ratio, 3).tolist()}, {elapsed:.0f} s")


def test_8_nmar_beats_linear_interpolation(verdict, desk, weights, water):
    grid, model = desk
    spec = load_phantom("rod_phantom")
    free = simulate_scan(replace_material(spec, "steel", "water"), grid, model, noise=False)
    truth = {j: marinit.preprocess(free.counts(j), model.spectra[j], water).data for j in "LH"}
    rms = {"nmar": [], "li": []}
    for seed in range(5):
        scan = simulate_scan(spec, grid, model, seed=seed)
        res = marinit.mar_initialize(scan.d_L, scan.d_H, model, grid, weights, water)
        f = res.metal.flagged
        for j in "LH":
            li = marinit.linear_complete(marinit.preprocess(scan.counts(j), model.spectra[j], water), res.metal)
            rms["li"].append(np.sqrt(np.mean((li.data - truth[j])[f] ** 2)))
            rms["nmar"].append(np.sqrt(np.mean((res.corrected[j].data - truth[j])[f] ** 2)))
    nmar, li = np.mean(rms["nmar"]), np.mean(rms["li"])
    verdict(8, "NMAR completion error vs linear interpolation", nmar <= 0.8 * li,
            f"mean RMS NMAR {nmar:.4f}, LI {li:.4f}, ratio {nmar / li:.3f}")


def test_9_decomposition(verdict, rng, desk, water):
    grid, model = desk
    worst = 0.0
    for _ in range(20):
        w = rng.uniform(0.01, 0.5, (2, 2))
        if abs(np.linalg.det(w)) < 1e-3:
            continue
        c = rng.uniform(0, 2, (2, 8, 8))
        img = ImageGrid.zeros(8, 8, 1.0)
        mu = np.einsum("jk,kyx->jyx", w, c)
        c1, c2 = marinit.image_domain_decompose(img.with_values(mu[0]), img.with_values(mu[1]),
                                                marinit.CalibrationWeights(w))
        worst = max(worst, np.abs(c1.values - c[0]).max(), np.abs(c2.values - c[1]).max())

    cal = load_phantom("calibration_phantom")
    images = marinit.calibration_images(cal, grid, model, water)
    regions = marinit.region_rois(cal, grid)
    held = 0.0
    for name in (i.name for i in cal.inserts):
        w = marinit.calibrate_from_phantom(cal, grid, model, water, exclude=(name,))
        c1, c2 = marinit.image_domain_decompose(*images, w)
        mat = cal.materials[marinit.region_material(cal, name)]
        m = regions[name]
        held = max(held, abs(c1.values[m].mean() / mat.c1 - 1), abs(c2.values[m].mean() / mat.c2 - 1))
    ok = worst <= 1e-10 and held <= 0.02
    verdict(9, "image-domain decomposition", ok,
            f"synthetic recovery error {worst:.1e}, worst held-out insert error {100 * held:.2f}%")


CLI_CONFIG = """
[simulate]
output_dir = out
nx = 64
ny = 64
pixel_mm = 4.0
n_views = 90
n_channels = 128
seed = 11

[deam]
n_iters = 10
stop_tol = 0

[report]
profile = -100, 0, 100, 0
"""

COMMANDS = (["simulate"], ["init"], ["reconstruct"], ["mono"], ["report"],
            ["init", "--no-nmar"], ["reconstruct", "--no-mar"])


def _cli_run(workdir, threads):
    workdir.mkdir()
    (workdir / "run.ini").write_text(CLI_CONFIG)
    manifests = []
    for cmd in COMMANDS:
        proc = subprocess.run([sys.executable, "-m", "mardeam.cli", *cmd, "--config", "run.ini",
                               "--threads", str(threads)], cwd=workdir, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        manifests.append([line.split("\t")[1:] for line in proc.stdout.splitlines()])
        # snapshot after every command so later commands cannot hide a difference
        manifests.append({p.name: p.read_bytes() for p in sorted((workdir / "out").iterdir())})
    return manifests


def test_10_cli_determinism(verdict, tmp_path):
    a = _cli_run(tmp_path / "a", 1)
    b = _cli_run(tmp_path / "b", 1)
    c = _cli_run(tmp_path / "c", 4)
    n_files = len(a[-1])
    ok = a == b == c
    verdict(10, "CLI byte-identical across runs and thread counts", ok,
            f"{len(COMMANDS)} commands, {n_files} output files, threads 1/1/4")
