"""Metal segmentation, metal trace, NMAR sinogram completion and image-domain
decomposition: the pipeline that produces the DEAM start images."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import projector
from .fbp import counts_to_lineintegral, fbp_reconstruct, water_precorrection
from .iodata import FanGeometry, ImageGrid, MaterialTable, PhantomSpec, RoiSpec, Sinogram, SpectrumTable
from .physics import TUBES, AcquisitionModel, material_masks, simulate_scan

log = logging.getLogger(__name__)

PRIOR_FLOOR = 1e-6
DET_MIN = 1e-8


@dataclass(frozen=True, eq=False)
class MetalModel:
    mask: ImageGrid
    trace: Sinogram   # kind "trace": metal path length per ray, mm
    flags: Sinogram   # kind "mask": 1 where trace >= threshold
    threshold: float

    @property
    def flagged(self) -> np.ndarray:
        return self.flags.data.astype(bool)


@dataclass(frozen=True, eq=False)
class CalibrationWeights:
    """Rows are tubes (L, H), columns basis components: mu_j = W[j, 0] c1 + W[j, 1] c2."""

    matrix: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.matrix, dtype=np.float64).reshape(2, 2)
        det = np.linalg.det(w)
        if not abs(det) >= DET_MIN:
            raise ValueError(f"calibration weights are near-singular: det={det:.3e}, "
                             f"condition number={np.linalg.cond(w):.3e}")
        object.__setattr__(self, "matrix", w)


@dataclass(frozen=True)
class MarInitConfig:
    trace_threshold: float = 0.5       # mm of metal path
    metal_factor: float = 3.0          # metal threshold, multiple of effective water attenuation
    air_soft_factor: float = 0.5       # class boundary air | soft tissue
    soft_bone_factor: float = 1.3      # class boundary soft tissue | bone
    bone_factor: float = 1.6           # bone class value
    smoothing_radius: int = 2          # pixels
    water_path: float = 100.0          # mm of water used to harden the spectrum for the effective energy
    segmentation_tube: str = "L"
    prior_source: str = "li"           # "li" (linear-interpolation corrected FBP) or "fbp"
    mask_opening: int = 1              # half-width (pixels) of the square opening that strips streak pixels
    min_metal_pixels: int = 5          # smaller connected metal components are discarded
    water_correction: bool = True      # water beam-hardening precorrection before FBP
    filter: str = "ramp"
    use_nmar: bool = True


def effective_water_mu(spectrum: SpectrumTable, water: MaterialTable, path_mm: float) -> float:
    """Water attenuation at the mean energy of the spectrum hardened by ``path_mm`` of water."""
    w = spectrum.counts * np.exp(-water.mu * path_mm)
    e_mean = float((w * spectrum.energies).sum() / w.sum())
    idx = int(np.argmin(np.abs(water.energies - e_mean)))
    return float(water.mu[idx])


def segment_metal(img: ImageGrid, threshold: float) -> ImageGrid:
    return img.with_values((img.values >= threshold).astype(np.float64))


def open_mask(mask: ImageGrid, radius: int) -> ImageGrid:
    """Binary opening with a (2 radius + 1)^2 square; removes thin streaks above the metal threshold."""
    if radius <= 0:
        return mask
    opened = ndimage.binary_opening(mask.values > 0, structure=np.ones((2 * radius + 1,) * 2))
    return mask.with_values(opened.astype(np.float64))


def remove_small_components(mask: ImageGrid, min_pixels: int) -> ImageGrid:
    """Drop 8-connected components with fewer than ``min_pixels`` pixels."""
    if min_pixels <= 1:
        return mask
    lab, n = ndimage.label(mask.values > 0, structure=np.ones((3, 3)))
    if n == 0:
        return mask
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_pixels
    keep[0] = False
    return mask.with_values(keep[lab].astype(np.float64))


def build_metal_model(mask: ImageGrid, geom: FanGeometry, threshold: float = 0.5, threads=None) -> MetalModel:
    vals = mask.values
    if not np.all((vals == 0) | (vals == 1)):
        raise ValueError("metal mask must be binary")
    trace = projector.forward_project(mask, geom, threads).data
    flags = (trace >= threshold).astype(np.float64)
    return MetalModel(mask, Sinogram(geom, trace, "trace"), Sinogram(geom, flags, "mask"), threshold)


def build_prior(img: ImageGrid, thresholds, values, radius: int = 2) -> ImageGrid:
    """Piecewise-constant tissue-class prior.

    ``thresholds`` = (air|soft, soft|bone, metal) boundaries, ``values`` =
    (air, soft, bone) class values. Metal pixels take the soft-tissue value.
    The classified image is box-smoothed with half-width ``radius`` pixels.
    """
    t_soft, t_bone, t_metal = thresholds
    if not t_soft < t_bone < t_metal:
        raise ValueError("prior thresholds must be strictly increasing")
    air, soft, bone = values
    v = img.values
    out = np.full(v.shape, float(air))
    out[v >= t_soft] = soft
    out[v >= t_bone] = bone
    out[v >= t_metal] = soft
    if radius > 0:
        out = ndimage.uniform_filter(out, size=2 * radius + 1, mode="nearest")
    return img.with_values(out)


def interpolate_flagged(data: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Linear interpolation across flagged channels within each view.

    Views with every channel flagged are filled along the (periodic) view axis.
    """
    flags = flags.astype(bool)
    if flags.all():
        raise ValueError("every ray is flagged; nothing to interpolate from")
    out = np.array(data, dtype=np.float64)
    chan = np.arange(data.shape[1])
    full_views = []
    for v in range(data.shape[0]):
        f = flags[v]
        if not f.any():
            continue
        if f.all():
            full_views.append(v)
            continue
        out[v, f] = np.interp(chan[f], chan[~f], out[v, ~f])
    if full_views:
        n_views = data.shape[0]
        good = np.array([v for v in range(n_views) if v not in set(full_views)])
        # periodic extension so the first/last views interpolate across the wrap
        ext = np.concatenate([good - n_views, good, good + n_views])
        for v in full_views:
            out[v] = [np.interp(v, ext, np.tile(out[good, c], 3)) for c in chan]
    return out


def nmar_complete(d: Sinogram, prior: ImageGrid, model: MetalModel, threads=None) -> Sinogram:
    """Normalize by the prior's projection, interpolate the trace, denormalize.

    Unflagged rays are returned unchanged.
    """
    d.require("line_integral")
    if d.geometry != model.flags.geometry:
        raise ValueError("sinogram and metal trace are on different geometries")
    flags = model.flagged
    if not flags.any():
        return d
    p = np.maximum(projector.forward_project(prior, d.geometry, threads).data, PRIOR_FLOOR)
    completed = interpolate_flagged(d.data / p, flags) * p
    out = np.where(flags, completed, d.data)
    return d.with_data(out)


def linear_complete(d: Sinogram, model: MetalModel) -> Sinogram:
    """Plain (unnormalized) linear interpolation across the metal trace."""
    flags = model.flagged
    if not flags.any():
        return d
    return d.with_data(np.where(flags, interpolate_flagged(d.data, flags), d.data))


def image_domain_decompose(mu_l: ImageGrid, mu_h: ImageGrid, w: CalibrationWeights):
    """Per-pixel 2x2 solve of W (c1, c2) = (mu_L, mu_H)."""
    if not mu_l.same_grid(mu_h):
        raise ValueError("low- and high-energy images must share a grid")
    (a, b), (c, d) = w.matrix
    det = a * d - b * c
    lo, hi = mu_l.values, mu_h.values
    c1 = (d * lo - b * hi) / det
    c2 = (a * hi - c * lo) / det
    return mu_l.with_values(c1), mu_l.with_values(c2)


def _roi_mask(roi, grid: ImageGrid) -> np.ndarray:
    return roi.mask(grid) if isinstance(roi, RoiSpec) else np.asarray(roi, dtype=bool)


def calibrate_weights(mu_l: ImageGrid, mu_h: ImageGrid, rois, truths) -> CalibrationWeights:
    """Least-squares fit of W from ROI means of calibration images.

    ``rois`` are RoiSpec rectangles or boolean pixel masks; ``truths`` holds
    the known (c1, c2) for each ROI.
    """
    if len(rois) != len(truths):
        raise ValueError("one (c1, c2) truth pair is required per ROI")
    C = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    if len(rois) < 2 or np.linalg.matrix_rank(C) < 2:
        raise ValueError("calibration ROIs must provide at least two linearly independent (c1, c2) pairs")
    means = []
    for r in rois:
        m = _roi_mask(r, mu_l)
        means.append([mu_l.values[m].mean(), mu_h.values[m].mean()])
    sol, *_ = np.linalg.lstsq(C, np.array(means), rcond=None)
    return CalibrationWeights(sol.T)


def region_rois(spec: PhantomSpec, grid: ImageGrid, erode_mm: float = 6.0) -> dict:
    """Pixel masks per insert (keyed by insert name) plus ``"background"``, shrunk by ``erode_mm``."""
    xs, ys = grid.pixel_centers()
    out = {}
    for ins in spec.inserts:
        r = ins.radius - erode_mm
        m = (xs - ins.center[0]) ** 2 + (ys - ins.center[1]) ** 2 <= r * r
        if r > 0 and m.any():
            out[ins.name or ins.material] = m
    if spec.background is not None:
        it = max(1, int(round(erode_mm / min(grid.dx, grid.dy))))
        core = ndimage.binary_erosion(material_masks(spec, grid)[spec.background], iterations=it)
        if core.any():
            out["background"] = core
    return out


def region_material(spec: PhantomSpec, region: str) -> str:
    if region == "background":
        return spec.background
    return next(i.material for i in spec.inserts if (i.name or i.material) == region)


def preprocess(d: Sinogram, spectrum: SpectrumTable, water: MaterialTable,
               cfg: MarInitConfig = MarInitConfig()) -> Sinogram:
    """Counts to line integrals, optionally water beam-hardening corrected."""
    li = counts_to_lineintegral(d, spectrum.total)
    if not cfg.water_correction:
        return li
    mu_ref = effective_water_mu(spectrum, water, cfg.water_path)
    return li.with_data(water_precorrection(spectrum, water.mu, mu_ref)(li.data))


def calibration_images(spec: PhantomSpec, grid: ImageGrid, model: AcquisitionModel, water: MaterialTable,
                       cfg: MarInitConfig = MarInitConfig(), threads=None):
    """Noiseless (mu_L, mu_H) FBP images of a calibration phantom, preprocessed like the pipeline."""
    scan = simulate_scan(spec, grid, model, noise=False, threads=threads)
    return [fbp_reconstruct(preprocess(scan.counts(j), model.spectra[j], water, cfg), grid, cfg.filter)
            for j in TUBES]


def calibrate_from_phantom(spec: PhantomSpec, grid: ImageGrid, model: AcquisitionModel, water: MaterialTable,
                           cfg: MarInitConfig = MarInitConfig(), exclude=(), threads=None) -> CalibrationWeights:
    """Simulate a noiseless calibration scan and fit W from its inserts and background.

    Regions (insert names, or ``"background"``) listed in ``exclude`` are held out of the fit.
    """
    imgs = calibration_images(spec, grid, model, water, cfg, threads)
    rois = {k: m for k, m in region_rois(spec, grid).items() if k not in exclude}
    truths = [(spec.materials[region_material(spec, k)].c1, spec.materials[region_material(spec, k)].c2)
              for k in rois]
    return calibrate_weights(imgs[0], imgs[1], list(rois.values()), truths)


@dataclass(frozen=True, eq=False)
class InitResult:
    c1: ImageGrid
    c2: ImageGrid
    metal: MetalModel
    fbp: dict        # tube -> uncorrected FBP image
    corrected: dict  # tube -> completed line-integral sinogram (initialization only)


def mar_initialize(d_l: Sinogram, d_h: Sinogram, model: AcquisitionModel, grid: ImageGrid,
                   weights: CalibrationWeights, water: MaterialTable, cfg: MarInitConfig = MarInitConfig(),
                   threads=None) -> InitResult:
    """FBP -> metal segmentation -> trace -> prior -> NMAR -> FBP -> decomposition.

    The completed sinograms are returned for inspection only; DEAM never sees them.
    """
    counts = {"L": d_l.require("counts"), "H": d_h.require("counts")}
    li = {j: preprocess(counts[j], model.spectra[j], water, cfg) for j in TUBES}
    fbp = {j: fbp_reconstruct(li[j], grid, cfg.filter) for j in TUBES}
    mu_w = {j: effective_water_mu(model.spectra[j], water, cfg.water_path) for j in TUBES}

    seg = cfg.segmentation_tube
    mask = segment_metal(fbp[seg], cfg.metal_factor * mu_w[seg])
    mask = remove_small_components(open_mask(mask, cfg.mask_opening), cfg.min_metal_pixels)
    metal = build_metal_model(mask, model.geometry, cfg.trace_threshold, threads)
    log.info("metal pixels: %d, flagged rays: %d", int(mask.values.sum()), int(metal.flags.data.sum()))

    corrected = {}
    for j in TUBES:
        if not cfg.use_nmar or not metal.flagged.any():
            corrected[j] = li[j]
            continue
        src = fbp[j]
        if cfg.prior_source == "li":
            src = fbp_reconstruct(linear_complete(li[j], metal), grid, cfg.filter)
        elif cfg.prior_source != "fbp":
            raise ValueError(f"unknown prior_source {cfg.prior_source!r}")
        thresholds = (cfg.air_soft_factor * mu_w[j], cfg.soft_bone_factor * mu_w[j], cfg.metal_factor * mu_w[j])
        prior = build_prior(src, thresholds, (0.0, mu_w[j], cfg.bone_factor * mu_w[j]), cfg.smoothing_radius)
        corrected[j] = nmar_complete(li[j], prior, metal, threads)

    if cfg.use_nmar and metal.flagged.any():
        mu = [fbp_reconstruct(corrected[j], grid, cfg.filter) for j in TUBES]
    else:
        mu = [fbp[j] for j in TUBES]
    c1, c2 = image_domain_decompose(mu[0], mu[1], weights)
    c1 = c1.with_values(np.maximum(c1.values, 0.0))
    c2 = c2.with_values(np.maximum(c2.values, 0.0))
    return InitResult(c1, c2, metal, fbp, corrected)
