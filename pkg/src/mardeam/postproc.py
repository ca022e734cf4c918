"""Virtual monoenergetic / kVp synthesis, ROI bias and MAE, line profiles."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .iodata import ImageGrid, MaterialTable, RoiSpec, SpectrumTable, check_grid


def _pair(c1: ImageGrid, c2: ImageGrid):
    if not c1.same_grid(c2):
        raise ValueError("c1 and c2 must share the same image grid")


def virtual_mono(c1: ImageGrid, c2: ImageGrid, basis, energy_kev: float) -> ImageGrid:
    """mu(E, x) = mu_1(E) c1(x) + mu_2(E) c2(x); E must be a grid energy."""
    _pair(c1, c2)
    m1, m2 = basis[0].at(energy_kev), basis[1].at(energy_kev)
    return c1.with_values(m1 * c1.values + m2 * c2.values)


def kvp_weights(spectrum: SpectrumTable) -> np.ndarray:
    total = spectrum.counts.sum()
    if not total > 0:
        raise ValueError("spectrum has zero total counts")
    return spectrum.counts / total


def kvp_image(c1: ImageGrid, c2: ImageGrid, basis, spectrum: SpectrumTable) -> ImageGrid:
    """Incident-spectrum-weighted average of the monoenergetic images."""
    _pair(c1, c2)
    check_grid(spectrum, *basis)
    w = kvp_weights(spectrum)
    m1 = float(w @ basis[0].mu)
    m2 = float(w @ basis[1].mu)
    return c1.with_values(m1 * c1.values + m2 * c2.values)


@dataclass(frozen=True, eq=False)
class MonoStack:
    energies: tuple
    images: tuple

    def __post_init__(self):
        if len(self.energies) != len(self.images):
            raise ValueError("one image per energy is required")
        for img in self.images[1:]:
            if not img.same_grid(self.images[0]):
                raise ValueError("all images in a stack must share one grid")

    def __getitem__(self, energy_kev):
        return self.images[self.energies.index(energy_kev)]


def mono_stack(c1: ImageGrid, c2: ImageGrid, basis, energies) -> MonoStack:
    energies = tuple(float(e) for e in energies)
    return MonoStack(energies, tuple(virtual_mono(c1, c2, basis, e) for e in energies))


def material_truth(table: MaterialTable, energies) -> dict:
    """Reference attenuation per energy from a material table."""
    return {float(e): table.at(e) for e in energies}


@dataclass(frozen=True)
class RoiRow:
    roi: str
    energy_kev: float
    bias_pct: float
    mae_pct: float


@dataclass(frozen=True)
class RoiReport:
    rows: tuple
    truth_source: str = ""

    def cell(self, roi: str, energy_kev: float) -> RoiRow:
        for r in self.rows:
            if r.roi == roi and r.energy_kev == energy_kev:
                return r
        raise KeyError((roi, energy_kev))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["roi", "energy_keV", "bias_pct", "mae_pct"])
        for r in self.rows:
            w.writerow([r.roi, f"{r.energy_kev:g}", f"{r.bias_pct:.6f}", f"{r.mae_pct:.6f}"])
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())


def roi_stats(stack: MonoStack, roi: RoiSpec, truth) -> list:
    """Bias% and MAE% of an ROI against per-energy reference values (dict keyed by keV)."""
    mask = roi.mask(stack.images[0])
    rows = []
    for e, img in zip(stack.energies, stack.images):
        if e not in truth:
            raise ValueError(f"no truth value for {e:g} keV")
        t = float(truth[e])
        if t == 0:
            raise ValueError(f"truth for ROI {roi.name!r} at {e:g} keV is zero")
        v = img.values[mask]
        bias = 100.0 * np.mean(v - t) / t
        mae = 100.0 * np.mean(np.abs(v - t)) / abs(t)
        mae = max(mae, abs(bias))   # guard the triangle inequality against rounding
        rows.append(RoiRow(roi.name, e, float(bias), float(mae)))
    return rows


def roi_report(stack: MonoStack, rois, truths: dict, truth_source: str = "") -> RoiReport:
    """Report over several ROIs; ``truths`` maps ROI name to its per-energy truth."""
    rows = []
    for roi in rois:
        rows.extend(roi_stats(stack, roi, truths[roi.name]))
    return RoiReport(tuple(rows), truth_source)


@dataclass(frozen=True)
class Profile:
    s_mm: np.ndarray
    values: np.ndarray

    def to_csv(self) -> str:
        lines = ["s_mm,value"] + [f"{s:.6f},{v:.9g}" for s, v in zip(self.s_mm, self.values)]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_csv())


def profile(img: ImageGrid, start, stop, n_samples: int) -> Profile:
    """Nearest-pixel samples along the horizontal or vertical segment start -> stop (mm)."""
    (x0, y0), (x1, y1) = start, stop
    if x0 != x1 and y0 != y1:
        raise ValueError("profiles must be horizontal or vertical")
    if n_samples < 2:
        raise ValueError("at least two samples are required")
    ex0, ex1, ey0, ey1 = img.extent
    for x, y in ((x0, y0), (x1, y1)):
        if not (ex0 <= x <= ex1 and ey0 <= y <= ey1):
            raise ValueError(f"profile point ({x}, {y}) lies outside the image")
    t = np.linspace(0.0, 1.0, n_samples)
    xs = x0 + t * (x1 - x0)
    ys = y0 + t * (y1 - y0)
    col = np.clip(np.floor((xs - ex0) / img.dx).astype(int), 0, img.nx - 1)
    row = np.clip(np.floor((ys - ey0) / img.dy).astype(int), 0, img.ny - 1)
    s = t * float(np.hypot(x1 - x0, y1 - y0))
    return Profile(s, img.values[row, col].copy())
