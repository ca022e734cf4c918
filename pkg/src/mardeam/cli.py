"""Config-driven command line: simulate -> init -> reconstruct -> mono -> report.

Every command reads one INI file with ``[simulate]``, ``[init]``, ``[deam]`` and
``[report]`` sections, writes into ``output_dir`` and prints a manifest line
(path, size in bytes, sha256) for each file it wrote.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import deam, marinit, postproc
from .iodata import (FanGeometry, FormatError, ImageGrid, Sinogram, data_path, load_material,
                     load_spectrum, read_image, read_phantom, read_rois, read_sinogram, read_spectrum,
                     write_image, write_sinogram)
from .physics import AcquisitionModel, simulate_scan

log = logging.getLogger("mardeam")


class ConfigError(ValueError):
    pass


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _words(text):
    return tuple(t for t in text.replace(",", " ").split())


# (key, parser, default); default None marks a required key
_MARINIT = {f.name: f.default for f in fields(marinit.MarInitConfig)}
SCHEMA = {
    "simulate": [
        ("output_dir", str, None),
        ("phantom", str, "rod_phantom"),
        ("nx", int, "128"),
        ("ny", int, "128"),
        ("pixel_mm", float, "2.0"),
        ("n_views", int, "180"),
        ("n_channels", int, "256"),
        ("source_radius", float, "500.0"),
        ("detector_radius", float, "500.0"),
        ("fov_radius", float, "135.0"),
        ("mode", str, "fan_equiangular"),
        ("spectrum_low", str, "90"),
        ("spectrum_high", str, "140"),
        ("basis", _words, "polystyrene, cacl2_23pct"),
        ("counts", float, "100000"),
        ("seed", int, "0"),
        ("noise", _bool, "true"),
    ],
    "init": [
        ("calibration_phantom", str, "calibration_phantom"),
        ("water", str, "water"),
        ("trace_threshold", float, repr(_MARINIT["trace_threshold"])),
        ("metal_factor", float, repr(_MARINIT["metal_factor"])),
        ("air_soft_factor", float, repr(_MARINIT["air_soft_factor"])),
        ("soft_bone_factor", float, repr(_MARINIT["soft_bone_factor"])),
        ("bone_factor", float, repr(_MARINIT["bone_factor"])),
        ("smoothing_radius", int, str(_MARINIT["smoothing_radius"])),
        ("water_path", float, repr(_MARINIT["water_path"])),
        ("segmentation_tube", str, _MARINIT["segmentation_tube"]),
        ("prior_source", str, _MARINIT["prior_source"]),
        ("mask_opening", int, str(_MARINIT["mask_opening"])),
        ("min_metal_pixels", int, str(_MARINIT["min_metal_pixels"])),
        ("water_correction", _bool, str(_MARINIT["water_correction"]).lower()),
        ("filter", str, _MARINIT["filter"]),
        ("use_nmar", _bool, str(_MARINIT["use_nmar"]).lower()),
    ],
    "deam": [
        ("lambda", float, "50.0"),
        ("delta", float, "0.01"),
        ("n_iters", int, "2000"),
        ("stop_tol", float, "1e-7"),
        ("surrogate", str, "joint"),
        ("n_vertices", int, "16"),
        ("step", str, "component"),
        ("newton_steps", int, "5"),
        ("momentum", _bool, "true"),
        ("use_mar", _bool, "true"),
    ],
    "report": [
        ("images", str, "reconstruction"),
        ("energies", _floats, "60, 80, 100, 120, 140"),
        ("kvp", _words, "90, 140"),
        ("rois", str, "rod_rois"),
        ("truth", str, "table"),
        ("previews", _bool, "true"),
        ("mono_window", _floats, "0.0, 0.04"),
        ("basis_window", _floats, "0.0, 1.2"),
        ("profile", _floats, ""),
        ("profile_samples", int, "128"),
        ("profile_energy", float, "60"),
    ],
}

IMAGE_SOURCES = {"reconstruction": ("c1.img", "c2.img"), "init": ("c1_init.img", "c2_init.img"),
                 "truth": ("c1_true.img", "c2_true.img")}


def default_config_text() -> str:
    out = ["# mardeam reference configuration; every key shown with its default.",
           "# output_dir is required; relative paths resolve against this file's directory."]
    for sec, keys in SCHEMA.items():
        out.append(f"\n[{sec}]")
        for key, _, default in keys:
            out.append(f"{key} = {'out' if default is None else default}")
    return "\n".join(out) + "\n"


class Config:
    def __init__(self, values: dict, base: Path):
        self.values = values
        self.base = base

    def __getitem__(self, item):
        sec, key = item
        return self.values[sec][key]

    def path(self, text) -> Path:
        p = Path(text)
        return p if p.is_absolute() else self.base / p

    @property
    def output_dir(self) -> Path:
        return self.path(self["simulate", "output_dir"])


def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        known = {k for k, _, _ in SCHEMA[sec]}
        for key in cp[sec]:
            if key not in known:
                raise ConfigError(f"unknown config key [{sec}] {key}")
    values = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, conv, default in keys:
            raw = cp.get(sec, key, fallback=default)
            if raw is None:
                raise ConfigError(f"missing required config key [{sec}] {key}")
            try:
                values[sec][key] = conv(raw)
            except ValueError:
                raise ConfigError(f"invalid value for [{sec}] {key}: {raw!r}") from None
    return Config(values, path.resolve().parent)


# ---------------------------------------------------------------- builders

def _phantom(cfg: Config, text: str):
    if text.endswith(".ini") or "/" in text:
        return read_phantom([data_path("materials.ini"), cfg.path(text)])
    return read_phantom([data_path("materials.ini"), data_path(f"{text}.ini")])


def _rois(cfg: Config, text: str):
    if text.endswith(".ini") or "/" in text:
        return read_rois(cfg.path(text))
    return read_rois(data_path(f"{text}.ini"))


def _spectrum(cfg: Config, text: str):
    if text.isdigit():
        return load_spectrum(int(text))
    return read_spectrum(cfg.path(text))


def build_grid(cfg: Config) -> ImageGrid:
    s = cfg.values["simulate"]
    return ImageGrid.zeros(s["nx"], s["ny"], s["pixel_mm"])


def build_geometry(cfg: Config) -> FanGeometry:
    s = cfg.values["simulate"]
    if not 0 < s["fov_radius"] < s["source_radius"]:
        raise ConfigError("[simulate] fov_radius must lie between 0 and source_radius")
    return FanGeometry(s["n_views"], s["n_channels"], s["source_radius"], s["detector_radius"],
                       2.0 * math.asin(s["fov_radius"] / s["source_radius"]), mode=s["mode"])


def build_model(cfg: Config, geom: FanGeometry | None = None) -> AcquisitionModel:
    s = cfg.values["simulate"]
    if len(s["basis"]) != 2:
        raise ConfigError("[simulate] basis must name exactly two materials")
    spectra = {"L": _spectrum(cfg, s["spectrum_low"]).scaled(s["counts"]),
               "H": _spectrum(cfg, s["spectrum_high"]).scaled(s["counts"])}
    basis = tuple(load_material(n) for n in s["basis"])
    return AcquisitionModel(spectra, basis, geom or build_geometry(cfg))


def marinit_config(cfg: Config, no_nmar=False) -> marinit.MarInitConfig:
    kw = {k: v for k, v in cfg.values["init"].items() if k in _MARINIT}
    if no_nmar:
        kw["use_nmar"] = False
    return marinit.MarInitConfig(**kw)


def deam_config(cfg: Config) -> deam.DeamConfig:
    d = cfg.values["deam"]
    return deam.DeamConfig(penalty=deam.PenaltyConfig(d["lambda"], d["delta"]), n_iters=d["n_iters"],
                           stop_tol=d["stop_tol"], surrogate=d["surrogate"], n_vertices=d["n_vertices"],
                           step=d["step"], newton_steps=d["newton_steps"], momentum=d["momentum"])


# ---------------------------------------------------------------- output helpers

def write_pgm(path, img: ImageGrid, lo: float, hi: float):
    """8-bit binary PGM: value lo -> 0, hi -> 255, linear in between, clipped outside; +y is up."""
    if not hi > lo:
        raise ValueError("display window needs hi > lo")
    scaled = np.clip((img.values - lo) / (hi - lo), 0.0, 1.0)
    pix = np.rint(scaled * 255.0).astype(np.uint8)[::-1]
    Path(path).write_bytes(f"P5\n{img.nx} {img.ny}\n255\n".encode("ascii") + pix.tobytes())


def _validate(path: Path):
    suffix = path.suffix
    if suffix == ".img":
        read_image(path)
    elif suffix == ".sin":
        read_sinogram(path)
    elif suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise FormatError(f"{path}: malformed CSV")
    elif suffix == ".pgm":
        head = path.read_bytes()[:2]
        if head != b"P5":
            raise FormatError(f"{path}: not a binary PGM")


class Manifest:
    def __init__(self, out=None):
        self.paths = []
        self.out = out

    def add(self, path):
        self.paths.append(Path(path))

    def finish(self):
        for p in self.paths:
            _validate(p)
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            print(f"{p}\t{p.stat().st_size}\t{digest}", file=self.out or sys.stdout)


def _need(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run '{hint}' first")
    return path


def _check_geometry(sino: Sinogram, geom: FanGeometry):
    if sino.geometry != geom:
        raise ConfigError(f"sinogram geometry {sino.geometry} does not match the [simulate] geometry")


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: Config, seed=None, threads=None, out=None):
    s = cfg.values["simulate"]
    seed = s["seed"] if seed is None else seed
    odir = cfg.output_dir
    odir.mkdir(parents=True, exist_ok=True)
    grid = build_grid(cfg)
    model = build_model(cfg)
    spec = _phantom(cfg, s["phantom"])
    scan = simulate_scan(spec, grid, model, seed=seed, noise=s["noise"], threads=threads)
    man = Manifest(out)
    for name, sino in (("d_L.sin", scan.d_L), ("d_H.sin", scan.d_H)):
        write_sinogram(odir / name, sino)
        man.add(odir / name)
    for name, img in (("c1_true.img", scan.c1), ("c2_true.img", scan.c2)):
        write_image(odir / name, img)
        man.add(odir / name)
    man.finish()
    return man.paths


def cmd_init(cfg: Config, no_nmar=False, threads=None, out=None):
    odir = cfg.output_dir
    model = build_model(cfg)
    grid = build_grid(cfg)
    d_l = read_sinogram(_need(odir / "d_L.sin", "simulate"))
    d_h = read_sinogram(_need(odir / "d_H.sin", "simulate"))
    for d in (d_l, d_h):
        _check_geometry(d, model.geometry)
    icfg = marinit_config(cfg, no_nmar)
    water = load_material(cfg["init", "water"])
    cal = _phantom(cfg, cfg["init", "calibration_phantom"])
    weights = marinit.calibrate_from_phantom(cal, grid, model, water, icfg, threads=threads)
    res = marinit.mar_initialize(d_l, d_h, model, grid, weights, water, icfg, threads)
    man = Manifest(out)
    for name, img in (("c1_init.img", res.c1), ("c2_init.img", res.c2), ("metal_mask.img", res.metal.mask)):
        write_image(odir / name, img)
        man.add(odir / name)
    for name, sino in (("metal_trace.sin", res.metal.trace), ("metal_flags.sin", res.metal.flags)):
        write_sinogram(odir / name, sino)
        man.add(odir / name)
    w = weights.matrix
    (odir / "calibration.csv").write_text(
        "tube,w_c1,w_c2\n" + "".join(f"{t},{w[i, 0]!r},{w[i, 1]!r}\n" for i, t in enumerate("LH")))
    man.add(odir / "calibration.csv")
    man.finish()
    return man.paths


def cmd_reconstruct(cfg: Config, no_mar=False, threads=None, out=None):
    odir = cfg.output_dir
    model = build_model(cfg)
    grid = build_grid(cfg)
    d_l = read_sinogram(_need(odir / "d_L.sin", "simulate"))
    d_h = read_sinogram(_need(odir / "d_H.sin", "simulate"))
    for d in (d_l, d_h):
        _check_geometry(d, model.geometry)
    c1 = read_image(_need(odir / "c1_init.img", "init"))
    c2 = read_image(_need(odir / "c2_init.img", "init"))
    if not (c1.same_grid(grid) and c2.same_grid(grid)):
        raise ConfigError("initial images do not match the [simulate] image grid")
    flags = None
    if cfg["deam", "use_mar"] and not no_mar:
        flags = read_sinogram(_need(odir / "metal_flags.sin", "init")).require("mask")
        _check_geometry(flags, model.geometry)
    r1, r2, history = deam.run_deam(d_l, d_h, model, grid, flags, (c1, c2), deam_config(cfg), threads=threads)
    man = Manifest(out)
    for name, img in (("c1.img", r1), ("c2.img", r2)):
        write_image(odir / name, img)
        man.add(odir / name)
    lines = ["iter,data_L,data_H,penalty,total"]
    lines += [f"{h['iter']},{h['data_L']!r},{h['data_H']!r},{h['penalty']!r},{h['total']!r}" for h in history[1:]]
    (odir / "convergence.csv").write_text("\n".join(lines) + "\n")
    man.add(odir / "convergence.csv")
    man.finish()
    return man.paths


def _source_images(cfg: Config):
    src = cfg["report", "images"]
    if src not in IMAGE_SOURCES:
        raise ConfigError(f"invalid value for [report] images: {src!r}; expected one of {sorted(IMAGE_SOURCES)}")
    odir = cfg.output_dir
    hint = {"reconstruction": "reconstruct", "init": "init", "truth": "simulate"}[src]
    n1, n2 = IMAGE_SOURCES[src]
    return src, read_image(_need(odir / n1, hint)), read_image(_need(odir / n2, hint))


def _label(src):
    return "recon" if src == "reconstruction" else src


def cmd_mono(cfg: Config, out=None, threads=None):
    r = cfg.values["report"]
    model = build_model(cfg)
    src, c1, c2 = _source_images(cfg)
    tag = _label(src)
    odir = cfg.output_dir
    man = Manifest(out)
    stack = postproc.mono_stack(c1, c2, model.basis, r["energies"])
    for e, img in zip(stack.energies, stack.images):
        base = odir / f"{tag}_mono_{e:03.0f}keV"
        write_image(base.with_suffix(".img"), img)
        man.add(base.with_suffix(".img"))
        if r["previews"]:
            write_pgm(base.with_suffix(".pgm"), img, *r["mono_window"])
            man.add(base.with_suffix(".pgm"))
    for kvp in r["kvp"]:
        img = postproc.kvp_image(c1, c2, model.basis, _spectrum(cfg, kvp))
        base = odir / f"{tag}_kvp_{Path(kvp).stem}"
        write_image(base.with_suffix(".img"), img)
        man.add(base.with_suffix(".img"))
        if r["previews"]:
            write_pgm(base.with_suffix(".pgm"), img, *r["mono_window"])
            man.add(base.with_suffix(".pgm"))
    if r["previews"]:
        for name, img in (("c1", c1), ("c2", c2)):
            p = odir / f"{tag}_{name}.pgm"
            write_pgm(p, img, *r["basis_window"])
            man.add(p)
    man.finish()
    return man.paths


def _truths(cfg: Config, rois, model, energies):
    mode = cfg["report", "truth"]
    spec = _phantom(cfg, cfg["simulate", "phantom"])
    out = {}
    for roi in rois:
        if not roi.material:
            raise ConfigError(f"ROI {roi.name!r} has no material; cannot look up its truth")
        if mode == "table":
            out[roi.name] = postproc.material_truth(load_material(roi.material), energies)
        elif mode == "basis":
            m = spec.materials[roi.material]
            out[roi.name] = {e: m.c1 * model.basis[0].at(e) + m.c2 * model.basis[1].at(e) for e in energies}
        else:
            raise ConfigError(f"invalid value for [report] truth: {mode!r}; expected 'table' or 'basis'")
    return out


def cmd_report(cfg: Config, out=None, threads=None):
    r = cfg.values["report"]
    model = build_model(cfg)
    src, c1, c2 = _source_images(cfg)
    tag = _label(src)
    odir = cfg.output_dir
    man = Manifest(out)
    stack = postproc.mono_stack(c1, c2, model.basis, r["energies"])
    rois = _rois(cfg, r["rois"])
    report = postproc.roi_report(stack, rois, _truths(cfg, rois, model, stack.energies), r["truth"])
    report.write(odir / f"{tag}_roi_report.csv")
    man.add(odir / f"{tag}_roi_report.csv")
    if r["profile"]:
        if len(r["profile"]) != 4:
            raise ConfigError("[report] profile must be 'x0, y0, x1, y1'")
        x0, y0, x1, y1 = r["profile"]
        img = postproc.virtual_mono(c1, c2, model.basis, r["profile_energy"])
        prof = postproc.profile(img, (x0, y0), (x1, y1), r["profile_samples"])
        p = odir / f"{tag}_profile_{r['profile_energy']:03.0f}keV.csv"
        prof.write(p)
        man.add(p)
    man.finish()
    return man.paths


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI configuration file")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: MARDEAM_THREADS or 1)")
    common.add_argument("--seed", type=int, default=None, help="override [simulate] seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mardeam", description=__doc__.splitlines()[0])
    p.add_argument("--print-default-config", action="store_true", help="print the reference config and exit")
    sub = p.add_subparsers(dest="command")
    sub.add_parser("simulate", parents=[common], help="simulate a dual-energy scan")
    pi = sub.add_parser("init", parents=[common], help="MAR initialization")
    pi.add_argument("--no-nmar", action="store_true", help="initialize from plain FBP decomposition")
    pr = sub.add_parser("reconstruct", parents=[common], help="run (MAR-)DEAM")
    pr.add_argument("--no-mar", action="store_true", help="original DEAM, ignoring the metal trace")
    sub.add_parser("mono", parents=[common], help="virtual monoenergetic and kVp images")
    sub.add_parser("report", parents=[common], help="ROI bias/MAE and profiles")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        sys.stdout.write(default_config_text())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        if args.command == "simulate":
            cmd_simulate(cfg, seed=args.seed, threads=args.threads)
        elif args.command == "init":
            cmd_init(cfg, no_nmar=args.no_nmar, threads=args.threads)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, no_mar=args.no_mar, threads=args.threads)
        elif args.command == "mono":
            cmd_mono(cfg)
        else:
            cmd_report(cfg)
    except (ConfigError, FormatError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
