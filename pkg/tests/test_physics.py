import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mardeam import projector
from mardeam.iodata import ENERGY_GRID, ImageGrid, Insert, MaterialSpec, PhantomSpec, SpectrumTable, load_material, load_phantom
from mardeam.physics import (AcquisitionModel, expected_counts, poisson_counts, rasterize_phantom,
                             replace_material, simulate_scan, transmitted)

from conftest import fan, line_spectrum, parallel


def water_model(geom, spectrum):
    return AcquisitionModel({"L": spectrum, "H": spectrum},
                            (load_material("water"), load_material("cacl2_23pct")), geom)


def test_empty_object_gives_incident_counts(small_grid, small_model):
    for j in ("L", "H"):
        g = expected_counts(small_grid, small_grid, small_model, j).data
        np.testing.assert_allclose(g, small_model.spectra[j].total, rtol=1e-14)


def test_single_bin_beer_lambert():
    L = 37.0
    grid = ImageGrid(1, 1, L, L, [1.0])
    geom = parallel(2, 1, fov=L)
    model = water_model(geom, line_spectrum(60, 1e5))
    g = expected_counts(grid, grid.with_values([0.0]), model, "L").data[0, 0]
    mu60 = load_material("water").mu[40]
    assert g == pytest.approx(1e5 * math.exp(-mu60 * L), rel=1e-12)


def test_beam_hardening_two_bins():
    water = load_material("water")
    counts = np.zeros(ENERGY_GRID.size)
    counts[[30, 80]] = 1.0   # 50 and 100 keV
    spec = SpectrumTable(ENERGY_GRID, counts)
    fractions = []
    for L in (0.0, 10.0, 50.0):
        hi = counts[80] * math.exp(-water.mu[80] * L)
        total = transmitted(np.array([[L]]), water.mu[None, :], spec)[0]
        fractions.append(hi / total)
    assert fractions[0] < fractions[1] < fractions[2]


def test_single_bin_log_equals_projection(small_grid, rng):
    geom = fan(40, 40, fov=23.0)
    model = water_model(geom, line_spectrum(70, 1e5))
    c1 = small_grid.with_values(rng.uniform(0, 1, (16, 16)))
    c2 = small_grid.with_values(rng.uniform(0, 0.2, (16, 16)))
    g = expected_counts(c1, c2, model, "L").data
    mu = model.mu[:, 50]
    ref = projector.forward_project(small_grid.with_values(mu[0] * c1.values + mu[1] * c2.values), geom).data
    np.testing.assert_allclose(-np.log(g / 1e5), ref, rtol=1e-6, atol=1e-12)


def test_mismatched_grids(small_grid, small_model):
    with pytest.raises(ValueError, match="grid"):
        expected_counts(small_grid, ImageGrid.zeros(16, 16, 1.0), small_model, "L")


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float64, (16, 16), elements=st.floats(0, 1)),
       st.integers(0, 255), st.floats(0.01, 2.0))
def test_attenuation_monotone(small_model, img, pixel, bump):
    grid = ImageGrid(16, 16, 2.0, 2.0, img)
    zero = grid.with_values(np.zeros((16, 16)))
    more = img.copy().ravel()
    more[pixel] += bump
    for j in ("L", "H"):
        g0 = expected_counts(grid, zero, small_model, j).data
        g1 = expected_counts(grid.with_values(more), zero, small_model, j).data
        assert np.all(g1 <= g0)
        assert np.all(g0 <= small_model.spectra[j].total * (1 + 1e-12))


def test_rasterize_empty():
    grid = ImageGrid.zeros(8, 8, 1.0)
    c1, c2 = rasterize_phantom(PhantomSpec(None, 0.0), grid)
    assert not c1.values.any() and not c2.values.any()


def test_rasterize_covering_disc():
    grid = ImageGrid.zeros(8, 8, 1.0)
    spec = PhantomSpec("water", 10.0, (), {"water": MaterialSpec("water", 1.0, 0.0)})
    c1, c2 = rasterize_phantom(spec, grid)
    assert np.all(c1.values == 1.0) and np.all(c2.values == 0.0)


def test_rasterize_rod_area():
    grid = ImageGrid.zeros(40, 40, 1.0)
    spec = PhantomSpec(None, 0.0, (Insert("steel", (0.3, -0.2), 12.0),), {"steel": MaterialSpec("steel", 0.0, 1.0)})
    _, c2 = rasterize_phantom(spec, grid)
    assert abs(c2.values.sum() - math.pi * 144) <= 0.05 * math.pi * 144


def test_overlapping_inserts():
    mats = {"a": MaterialSpec("a", 1.0, 0.0)}
    spec = PhantomSpec(None, 0.0, (Insert("a", (0, 0), 5.0), Insert("a", (6, 0), 5.0)), mats)
    with pytest.raises(ValueError, match="overlap"):
        rasterize_phantom(spec, ImageGrid.zeros(8, 8, 1.0))


def test_noise_off_matches_expected_counts(small_grid, small_model):
    spec = replace_material(load_phantom("rod_phantom"), "steel", "water")
    big = ImageGrid.zeros(16, 16, 14.0)
    model = AcquisitionModel(small_model.spectra, small_model.basis, fan(40, 40, fov=160.0))
    scan = simulate_scan(spec, big, model, noise=False)
    for j in ("L", "H"):
        assert np.array_equal(scan.counts(j).data, expected_counts(scan.c1, scan.c2, model, j).data)


def test_same_seed_same_scan(small_model):
    spec = load_phantom("rod_phantom")
    grid = ImageGrid.zeros(16, 16, 14.0)
    model = AcquisitionModel(small_model.spectra, small_model.basis, fan(40, 40, fov=160.0))
    a = simulate_scan(spec, grid, model, seed=3)
    b = simulate_scan(spec, grid, model, seed=3)
    c = simulate_scan(spec, grid, model, seed=4)
    assert np.array_equal(a.d_L.data, b.d_L.data) and np.array_equal(a.d_H.data, b.d_H.data)
    assert not np.array_equal(a.d_L.data, c.d_L.data)
    assert np.all(a.mean_L.data <= model.spectra["L"].total * (1 + 1e-12))


def test_poisson_mean():
    draws = poisson_counts(np.full((100, 100), 1000.0), seed=7, tube="L")
    assert abs(draws.mean() - 1000.0) <= 3 * math.sqrt(1000.0 / 10000)


def test_poisson_keyed_per_view():
    mean = np.full((6, 5), 50.0)
    full = poisson_counts(mean, 2, "H")
    # each view has its own stream: the rows do not depend on how many views are drawn
    assert np.array_equal(poisson_counts(mean[:3], 2, "H"), full[:3])
    assert not np.array_equal(poisson_counts(mean, 2, "L"), full)


def test_counts_scale_validated(small_model):
    with pytest.raises(ValueError):
        simulate_scan(PhantomSpec(None, 0.0), ImageGrid.zeros(4, 4, 1.0), small_model, counts=0.0)
