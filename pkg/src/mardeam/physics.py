"""Polychromatic dual-energy transmission model and phantom scan simulation."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import projector
from .iodata import (FanGeometry, ImageGrid, Insert, MaterialTable, PhantomSpec, Sinogram,
                     SpectrumTable, check_grid, load_material, load_spectrum)

TUBES = ("L", "H")


@dataclass(frozen=True, eq=False)
class AcquisitionModel:
    spectra: dict          # {"L": SpectrumTable, "H": SpectrumTable}, absolute counts per ray
    basis: tuple           # (MaterialTable for c1, MaterialTable for c2)
    geometry: FanGeometry

    def __post_init__(self):
        if set(self.spectra) != set(TUBES):
            raise ValueError(f"spectra must be keyed by {TUBES}")
        if len(self.basis) != 2:
            raise ValueError("exactly two basis materials are required")
        check_grid(self.spectra["L"], self.spectra["H"], *self.basis)

    @property
    def energies(self):
        return self.basis[0].energies

    @property
    def mu(self) -> np.ndarray:
        """Basis attenuation, shape (2, n_energies)."""
        return np.stack([self.basis[0].mu, self.basis[1].mu])

    def rescaled(self, counts: float) -> "AcquisitionModel":
        """Copy with each spectrum rescaled to ``counts`` expected photons per ray."""
        spectra = {j: s.scaled(counts) for j, s in self.spectra.items()}
        return AcquisitionModel(spectra, self.basis, self.geometry)


def default_model(geometry: FanGeometry, counts: float = 1e5) -> AcquisitionModel:
    """90/140 kVp spectra with the polystyrene / 23% CaCl2 basis from the packaged tables."""
    spectra = {"L": load_spectrum(90).scaled(counts), "H": load_spectrum(140).scaled(counts)}
    return AcquisitionModel(spectra, (load_material("polystyrene"), load_material("cacl2_23pct")), geometry)


def transmitted(line_integrals, mus, spectrum: SpectrumTable) -> np.ndarray:
    """Sum_E I0(E) exp(-Sum_k L_k(y) mu_k(E)) for stacked line integrals.

    ``line_integrals`` is (K, n_rays) and ``mus`` is (K, n_energies).
    Energy bins with zero incident counts are skipped.
    """
    keep = spectrum.counts > 0
    L = np.asarray(line_integrals, dtype=np.float64)
    mu = np.asarray(mus, dtype=np.float64)[:, keep]
    expo = L.T @ mu
    return np.exp(-expo) @ spectrum.counts[keep]


def _check_pair(c1: ImageGrid, c2: ImageGrid):
    if not c1.same_grid(c2):
        raise ValueError("c1 and c2 must share the same image grid")


def expected_counts(c1: ImageGrid, c2: ImageGrid, model: AcquisitionModel, tube: str,
                    threads=None) -> Sinogram:
    """Mean detected counts g_j(y) for basis images (c1, c2)."""
    _check_pair(c1, c2)
    geom = model.geometry
    L1 = projector.forward_project(c1, geom, threads).data.ravel()
    L2 = projector.forward_project(c2, geom, threads).data.ravel()
    g = transmitted(np.stack([L1, L2]), model.mu, model.spectra[tube])
    return Sinogram(geom, g, "counts")


def material_masks(spec: PhantomSpec, grid: ImageGrid) -> dict:
    """Boolean pixel-membership mask per material (pixel centers decide, inserts override background)."""
    for a in range(len(spec.inserts)):
        for b in range(a + 1, len(spec.inserts)):
            ia, ib = spec.inserts[a], spec.inserts[b]
            gap = np.hypot(ia.center[0] - ib.center[0], ia.center[1] - ib.center[1])
            if gap < ia.radius + ib.radius:
                raise ValueError(f"inserts {ia.material!r} and {ib.material!r} overlap")
    xs, ys = grid.pixel_centers()
    masks = {}
    taken = np.zeros(xs.shape, dtype=bool)
    for ins in spec.inserts:
        m = (xs - ins.center[0]) ** 2 + (ys - ins.center[1]) ** 2 <= ins.radius ** 2
        masks[ins.material] = masks.get(ins.material, np.zeros_like(m)) | m
        taken |= m
    if spec.background is not None:
        bg = (xs ** 2 + ys ** 2 <= spec.radius ** 2) & ~taken
        masks[spec.background] = masks.get(spec.background, np.zeros_like(bg)) | bg
    return masks


def rasterize_phantom(spec: PhantomSpec, grid: ImageGrid):
    """Ground-truth (c1, c2) images from the declared per-material coefficients."""
    c1 = np.zeros((grid.ny, grid.nx))
    c2 = np.zeros((grid.ny, grid.nx))
    for name, m in material_masks(spec, grid).items():
        mat = spec.materials[name]
        c1[m] = mat.c1
        c2[m] = mat.c2
    return grid.with_values(c1), grid.with_values(c2)


def replace_material(spec: PhantomSpec, old: str, new: str) -> PhantomSpec:
    """Phantom with every ``old`` insert filled with ``new`` (e.g. a metal-free reference)."""
    inserts = tuple(Insert(new, i.center, i.radius, i.name) if i.material == old else i for i in spec.inserts)
    background = new if spec.background == old else spec.background
    return replace(spec, background=background, inserts=inserts)


def phantom_line_integrals(spec: PhantomSpec, grid: ImageGrid, model: AcquisitionModel,
                           tables: dict | None = None, threads=None):
    """Stacked line integrals and attenuation curves describing the phantom.

    Materials with ``attenuation = basis`` enter through the basis images;
    ``attenuation = table`` materials use their own tables (looked up in
    ``tables`` first, then the packaged data).
    """
    tables = tables or {}
    geom = model.geometry
    basis_spec = replace(spec, materials={
        n: (m if m.attenuation == "basis" else replace(m, c1=0.0, c2=0.0)) for n, m in spec.materials.items()})
    c1, c2 = rasterize_phantom(basis_spec, grid)
    Ls = [projector.forward_project(c1, geom, threads).data.ravel(),
          projector.forward_project(c2, geom, threads).data.ravel()]
    mus = [model.basis[0].mu, model.basis[1].mu]
    for name, mask in material_masks(spec, grid).items():
        mat = spec.materials[name]
        if mat.attenuation != "table" or not mask.any():
            continue
        table = tables.get(name) or load_material(name)
        check_grid(model.basis[0], table)
        Ls.append(projector.forward_project(grid.with_values(mask.astype(float)), geom, threads).data.ravel())
        mus.append(table.mu)
    return np.stack(Ls), np.stack(mus)


@dataclass(frozen=True, eq=False)
class SimulatedScan:
    d_L: Sinogram
    d_H: Sinogram
    c1: ImageGrid
    c2: ImageGrid
    seed: int
    mean_L: Sinogram
    mean_H: Sinogram

    def counts(self, tube: str) -> Sinogram:
        return self.d_L if tube == "L" else self.d_H


def poisson_counts(mean: np.ndarray, seed: int, tube: str) -> np.ndarray:
    """Poisson draws keyed by (seed, tube, view); each view row has its own Philox stream."""
    out = np.empty_like(mean)
    t = TUBES.index(tube)
    for v in range(mean.shape[0]):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, t, v])))
        out[v] = rng.poisson(mean[v])
    return out


def simulate_scan(spec: PhantomSpec, grid: ImageGrid, model: AcquisitionModel, seed: int = 0,
                  noise: bool = True, counts: float | None = None, tables: dict | None = None,
                  threads=None) -> SimulatedScan:
    if counts is not None:
        if not counts > 0:
            raise ValueError("counts scale must be positive")
        model = model.rescaled(counts)
    Ls, mus = phantom_line_integrals(spec, grid, model, tables, threads)
    c1, c2 = rasterize_phantom(spec, grid)
    geom = model.geometry
    sinos = {}
    means = {}
    for j in TUBES:
        g = transmitted(Ls, mus, model.spectra[j]).reshape(geom.shape)
        means[j] = Sinogram(geom, g, "counts")
        d = poisson_counts(g, seed, j) if noise else g
        sinos[j] = Sinogram(geom, d, "counts")
    return SimulatedScan(sinos["L"], sinos["H"], c1, c2, seed, means["L"], means["H"])
