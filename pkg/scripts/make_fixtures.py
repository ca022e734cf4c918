"""Regenerate the CSV attenuation/spectrum fixtures shipped in mardeam/data.

Requires ``xraydb`` (not a runtime dependency). Attenuation values come from
the Elam tables bundled with xraydb, converted to linear attenuation in 1/mm.

    python scripts/make_fixtures.py
"""
from pathlib import Path

import numpy as np
import xraydb

OUT = Path(__file__).resolve().parents[1] / "src" / "mardeam" / "data"
ENERGIES = np.arange(20, 151, dtype=float)

# name -> (list of (formula, mass fraction), density g/cm^3)
MATERIALS = {
    "polystyrene": ([("C8H8", 1.0)], 1.05),
    "cacl2_23pct": ([("CaCl2", 0.23), ("H2O", 0.77)], 1.21),
    "water": ([("H2O", 1.0)], 1.0),
    "butanol": ([("C4H10O", 1.0)], 0.81),
    "propanol": ([("C3H8O", 1.0)], 0.80),
    "k2hpo4_10pct": ([("K2HPO4", 0.10), ("H2O", 0.90)], 1.08),
    "k2hpo4_29pct": ([("K2HPO4", 0.29), ("H2O", 0.71)], 1.27),
    "steel": ([("Fe", 0.70), ("Cr", 0.19), ("Ni", 0.09), ("Mn", 0.02)], 8.0),
    "aluminum": ([("Al", 1.0)], 2.699),
    "copper": ([("Cu", 1.0)], 8.96),
}

# kVp -> filtration (material, thickness mm)
SPECTRA = {
    90: [("aluminum", 3.0)],
    140: [("aluminum", 3.0), ("copper", 0.3)],
}


def linear_mu(name):
    parts, density = MATERIALS[name]
    mass_mu = sum(w * xraydb.material_mu(f, ENERGIES * 1000.0, density=1.0) for f, w in parts)
    return mass_mu * density / 10.0  # 1/cm -> 1/mm


def kramers(kvp, filters):
    shape = np.where(ENERGIES < kvp, (kvp - ENERGIES) / ENERGIES, 0.0)
    for mat, mm in filters:
        shape = shape * np.exp(-linear_mu(mat) * mm)
    shape[shape < 1e-6 * shape.max()] = 0.0
    return shape / shape.sum()


def write_csv(path, values):
    with open(path, "w") as fh:
        fh.write("energy_keV,value\n")
        for e, v in zip(ENERGIES, values):
            fh.write(f"{int(e)},{v:.9e}\n")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name in MATERIALS:
        if name in ("aluminum", "copper"):
            continue
        write_csv(OUT / f"{name}.csv", linear_mu(name))
    for kvp, filters in SPECTRA.items():
        write_csv(OUT / f"spectrum_{kvp}kVp.csv", kramers(kvp, filters))

    basis = np.stack([linear_mu("polystyrene"), linear_mu("cacl2_23pct")], axis=1)
    fit = ENERGIES >= 40
    print("least-squares basis coefficients (40-150 keV):")
    for name in MATERIALS:
        if name in ("aluminum", "copper"):
            continue
        coef, *_ = np.linalg.lstsq(basis[fit], linear_mu(name)[fit], rcond=None)
        err = np.abs(basis @ coef - linear_mu(name)) / linear_mu(name)
        print(f"  {name:14s} c1={coef[0]:.6f} c2={coef[1]:.6f} max rel err 60-150 keV {err[40:].max():.4f}")


if __name__ == "__main__":
    main()
