"""Shared data model and on-disk formats.

Binary files (images, sinograms) are an ASCII header followed by a raw
little-endian float32 payload::

    DMIMG1
    nx 3
    ny 2
    ...
    data
    <nx*ny float32>

Tables are two-column CSV (``energy_keV,value``); phantom and ROI specs are
INI files.
"""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = "DMIMG1"
SINO_MAGIC = "DMSIN1"
ENERGY_GRID = np.arange(20.0, 151.0)

SINO_KINDS = ("counts", "line_integral", "trace", "mask")
GEOMETRY_MODES = ("fan_equiangular", "parallel")


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


class GridMismatchError(ValueError):
    """Energy grids of two tables differ."""


def _as_values(values, size, what):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != size:
        raise ValueError(f"{what}: expected {size} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: values must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """2D scalar field. ``values`` has shape (ny, nx); row index grows with y."""

    nx: int
    ny: int
    dx: float
    dy: float
    values: np.ndarray
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"image size must be positive, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError(f"pixel spacing must be positive, got dx={self.dx} dy={self.dy}")
        arr = _as_values(self.values, self.nx * self.ny, "image values").reshape(self.ny, self.nx)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, nx, ny, dx, dy=None, origin_x=0.0, origin_y=0.0):
        dy = dx if dy is None else dy
        return cls(nx, ny, dx, dy, np.zeros((ny, nx)), origin_x, origin_y)

    def with_values(self, values) -> "ImageGrid":
        return ImageGrid(self.nx, self.ny, self.dx, self.dy, values, self.origin_x, self.origin_y)

    def same_grid(self, other: "ImageGrid") -> bool:
        return (self.nx, self.ny, self.dx, self.dy, self.origin_x, self.origin_y) == (
            other.nx, other.ny, other.dx, other.dy, other.origin_x, other.origin_y)

    def pixel_centers(self):
        """Return (x, y) arrays of shape (ny, nx) with pixel-center coordinates in mm."""
        xs = self.origin_x + (np.arange(self.nx) - (self.nx - 1) / 2.0) * self.dx
        ys = self.origin_y + (np.arange(self.ny) - (self.ny - 1) / 2.0) * self.dy
        return np.meshgrid(xs, ys)

    @property
    def extent(self):
        """(xmin, xmax, ymin, ymax) of the grid's outer boundary."""
        hx, hy = self.nx * self.dx / 2.0, self.ny * self.dy / 2.0
        return (self.origin_x - hx, self.origin_x + hx, self.origin_y - hy, self.origin_y + hy)


@dataclass(frozen=True)
class FanGeometry:
    """2D acquisition geometry.

    In fan mode ``source_radius`` is the iso-to-source distance and
    ``detector_radius`` the iso-to-detector distance; channels are equiangular
    across ``fan_angle``. In parallel mode the detector spans the same field of
    view as the fan, ``2 * source_radius * sin(fan_angle / 2)``.
    """

    n_views: int
    n_channels: int
    source_radius: float
    detector_radius: float
    fan_angle: float
    start_angle: float = 0.0
    angular_range: float = 2 * math.pi
    mode: str = "fan_equiangular"

    def __post_init__(self):
        if self.mode not in GEOMETRY_MODES:
            raise ValueError(f"mode must be one of {GEOMETRY_MODES}, got {self.mode!r}")
        if self.n_views < 2:
            raise ValueError(f"n_views must be >= 2, got {self.n_views}")
        if self.n_channels < 1:
            raise ValueError(f"n_channels must be >= 1, got {self.n_channels}")
        if not self.source_radius > 0:
            raise ValueError(f"source_radius must be positive, got {self.source_radius}")
        if not 0 < self.fan_angle < math.pi:
            raise ValueError(f"fan_angle must lie in (0, pi), got {self.fan_angle}")
        if not self.angular_range > 0:
            raise ValueError("angular_range must be positive")
        if self.mode == "fan_equiangular" and self.detector_radius < 0:
            raise ValueError("detector_radius must be non-negative")

    @property
    def shape(self):
        return (self.n_views, self.n_channels)

    @property
    def fov_radius(self) -> float:
        return self.source_radius * math.sin(self.fan_angle / 2.0)

    def view_angles(self) -> np.ndarray:
        return self.start_angle + np.arange(self.n_views) * (self.angular_range / self.n_views)

    def channel_spacing(self) -> float:
        """Channel pitch: radians in fan mode, mm in parallel mode."""
        if self.mode == "fan_equiangular":
            return self.fan_angle / self.n_channels
        return 2.0 * self.fov_radius / self.n_channels

    def channel_positions(self) -> np.ndarray:
        """Channel-center fan angles (rad) or detector offsets (mm)."""
        return (np.arange(self.n_channels) + 0.5 - self.n_channels / 2.0) * self.channel_spacing()

    def covers(self, image: ImageGrid) -> bool:
        """True if the reconstruction circle inscribed in ``image`` lies inside the field of view."""
        x0, x1, y0, y1 = image.extent
        r = min(x1 - x0, y1 - y0) / 2.0 + math.hypot(image.origin_x, image.origin_y)
        return r <= self.fov_radius * (1 + 1e-9)


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Views x channels measurement array; ``data`` has shape (n_views, n_channels)."""

    geometry: FanGeometry
    data: np.ndarray
    kind: str = "counts"

    def __post_init__(self):
        if self.kind not in SINO_KINDS:
            raise ValueError(f"kind must be one of {SINO_KINDS}, got {self.kind!r}")
        arr = _as_values(self.data, self.geometry.n_views * self.geometry.n_channels, "sinogram data")
        arr = arr.reshape(self.geometry.shape)
        if self.kind == "counts" and np.any(arr < 0):
            raise ValueError("counts sinogram must be non-negative")
        if self.kind == "mask" and not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask sinogram must contain only 0 and 1")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def with_data(self, data, kind=None) -> "Sinogram":
        return Sinogram(self.geometry, data, self.kind if kind is None else kind)

    def require(self, kind):
        if self.kind != kind:
            raise ValueError(f"expected a {kind} sinogram, got {self.kind}")
        return self


@dataclass(frozen=True, eq=False)
class SpectrumTable:
    energies: np.ndarray
    counts: np.ndarray
    label: str = ""

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        c = np.asarray(self.counts, dtype=np.float64)
        if e.shape != c.shape or e.ndim != 1:
            raise ValueError("energies and counts must be 1D arrays of equal length")
        if e.size > 1 and np.any(np.diff(e) <= 0):
            raise ValueError("energies must be strictly increasing")
        if np.any(c < 0) or not c.sum() > 0:
            raise ValueError(f"spectrum {self.label!r}: counts must be >= 0 with a positive total")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def scaled(self, total: float) -> "SpectrumTable":
        """Same shape, rescaled to ``total`` expected counts per ray."""
        return SpectrumTable(self.energies, self.counts * (total / self.total), self.label)


@dataclass(frozen=True, eq=False)
class MaterialTable:
    name: str
    energies: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        if e.shape != mu.shape:
            raise ValueError("energies and mu must have equal length")
        if np.any(mu < 0):
            raise ValueError(f"material {self.name!r}: attenuation must be non-negative")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "mu", mu)

    def at(self, energy_kev: float) -> float:
        idx = np.nonzero(self.energies == energy_kev)[0]
        if idx.size == 0:
            raise ValueError(f"{energy_kev} keV is not on the energy grid of {self.name!r}")
        return float(self.mu[idx[0]])


def check_grid(*tables):
    """Raise GridMismatchError unless all tables share one energy grid."""
    ref = tables[0].energies
    for t in tables[1:]:
        if t.energies.shape != ref.shape or np.any(t.energies != ref):
            name = getattr(t, "name", None) or getattr(t, "label", "")
            raise GridMismatchError(
                f"energy grid of {name!r} ({t.energies[0]:g}..{t.energies[-1]:g} keV, {t.energies.size} bins) "
                f"differs from reference ({ref[0]:g}..{ref[-1]:g} keV, {ref.size} bins)")


@dataclass(frozen=True)
class Insert:
    material: str
    center: tuple
    radius: float
    name: str = ""


@dataclass(frozen=True)
class MaterialSpec:
    name: str
    c1: float
    c2: float
    attenuation: str = "basis"  # "basis" or "table"


@dataclass(frozen=True)
class PhantomSpec:
    background: str | None
    radius: float
    inserts: tuple = ()
    materials: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.background is not None and not self.radius > 0:
            raise ValueError("background radius must be positive")
        for ins in self.inserts:
            if not ins.radius > 0:
                raise ValueError(f"insert {ins.material!r}: radius must be positive")
            if self.background is not None and math.hypot(*ins.center) + ins.radius > self.radius + 1e-9:
                raise ValueError(f"insert {ins.material!r} at {ins.center} extends outside the background disc")
        used = ([self.background] if self.background else []) + [i.material for i in self.inserts]
        for name in used:
            if name not in self.materials:
                raise ValueError(f"material {name!r} has no [material {name}] section")


@dataclass(frozen=True)
class RoiSpec:
    name: str
    center: tuple
    half_width: tuple
    material: str = ""

    def mask(self, grid: ImageGrid) -> np.ndarray:
        x0, x1, y0, y1 = grid.extent
        cx, cy = self.center
        hx, hy = self.half_width
        if cx - hx < x0 or cx + hx > x1 or cy - hy < y0 or cy + hy > y1:
            raise ValueError(f"ROI {self.name!r} extends outside the image")
        xs, ys = grid.pixel_centers()
        m = (np.abs(xs - cx) <= hx) & (np.abs(ys - cy) <= hy)
        if not m.any():
            raise ValueError(f"ROI {self.name!r} contains no pixel centers")
        return m


# ---------------------------------------------------------------- binary I/O

def _write_binary(path, magic, header, payload):
    lines = [magic] + [f"{k} {v}" for k, v in header] + ["data"]
    blob = ("\n".join(lines) + "\n").encode("ascii")
    blob += np.ascontiguousarray(payload, dtype="<f4").tobytes()
    Path(path).write_bytes(blob)


def _read_binary(path, magic, keys):
    raw = Path(path).read_bytes()
    header = {}
    pos = 0
    first = True
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: header not terminated by a 'data' line")
        line = raw[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if first:
            if line != magic:
                raise FormatError(f"{path}: bad magic {line!r}, expected {magic!r}")
            first = False
            continue
        if line == "data":
            break
        key, _, value = line.partition(" ")
        if not value:
            raise FormatError(f"{path}: malformed header line {line!r}")
        header[key] = value
    missing = [k for k in keys if k not in header]
    if missing:
        raise FormatError(f"{path}: missing header field(s) {', '.join(missing)}")
    return header, raw[pos:]


def _payload(path, buf, size):
    if len(buf) != 4 * size:
        raise FormatError(f"{path}: data payload has {len(buf)} bytes, expected {4 * size}")
    arr = np.frombuffer(buf, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: data payload contains non-finite values")
    return arr


def _field(path, header, key, conv):
    try:
        return conv(header[key])
    except ValueError as exc:
        raise FormatError(f"{path}: invalid value for {key}: {header[key]!r}") from exc


def _fmt(x: float) -> str:
    return repr(float(x))


def write_image(path, image: ImageGrid):
    header = [("nx", image.nx), ("ny", image.ny), ("dx", _fmt(image.dx)), ("dy", _fmt(image.dy)),
              ("ox", _fmt(image.origin_x)), ("oy", _fmt(image.origin_y))]
    _write_binary(path, IMAGE_MAGIC, header, image.values)


def read_image(path) -> ImageGrid:
    h, buf = _read_binary(path, IMAGE_MAGIC, ("nx", "ny", "dx", "dy", "ox", "oy"))
    nx, ny = _field(path, h, "nx", int), _field(path, h, "ny", int)
    if nx < 1 or ny < 1:
        raise FormatError(f"{path}: nx/ny must be positive")
    values = _payload(path, buf, nx * ny)
    try:
        return ImageGrid(nx, ny, _field(path, h, "dx", float), _field(path, h, "dy", float), values,
                         _field(path, h, "ox", float), _field(path, h, "oy", float))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_sinogram(path, sino: Sinogram):
    g = sino.geometry
    header = [("n_views", g.n_views), ("n_channels", g.n_channels),
              ("source_radius", _fmt(g.source_radius)), ("detector_radius", _fmt(g.detector_radius)),
              ("fan_angle", _fmt(g.fan_angle)), ("start_angle", _fmt(g.start_angle)),
              ("angular_range", _fmt(g.angular_range)), ("mode", g.mode), ("kind", sino.kind)]
    _write_binary(path, SINO_MAGIC, header, sino.data)


def read_sinogram(path) -> Sinogram:
    keys = ("n_views", "n_channels", "source_radius", "detector_radius", "fan_angle",
            "start_angle", "angular_range", "mode", "kind")
    h, buf = _read_binary(path, SINO_MAGIC, keys)
    try:
        geom = FanGeometry(_field(path, h, "n_views", int), _field(path, h, "n_channels", int),
                           _field(path, h, "source_radius", float), _field(path, h, "detector_radius", float),
                           _field(path, h, "fan_angle", float), _field(path, h, "start_angle", float),
                           _field(path, h, "angular_range", float), h["mode"])
        data = _payload(path, buf, geom.n_views * geom.n_channels)
        return Sinogram(geom, data, h["kind"])
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- tables

def parse_table(text: str, source="<string>"):
    """Parse ``energy_keV,value`` CSV text (header optional) into two arrays."""
    energies, values = [], []
    for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise FormatError(f"{source}:{lineno}: expected 2 columns, got {len(row)}")
        try:
            e, v = float(row[0]), float(row[1])
        except ValueError:
            if lineno == 1:
                continue  # header
            raise FormatError(f"{source}:{lineno}: non-numeric row {row}") from None
        if not (math.isfinite(e) and math.isfinite(v)):
            raise FormatError(f"{source}:{lineno}: non-finite value")
        energies.append(e)
        values.append(v)
    if not energies:
        raise FormatError(f"{source}: empty table")
    return np.array(energies), np.array(values)


def read_table(path):
    return parse_table(Path(path).read_text(), str(path))


def write_table(path, energies, values, header="energy_keV,value"):
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for e, v in zip(energies, values):
            fh.write(f"{_fmt(e)},{_fmt(v)}\n")


def read_spectrum(path, label=None) -> SpectrumTable:
    e, c = read_table(path)
    return SpectrumTable(e, c, label if label is not None else Path(path).stem)


def read_material(path, name=None) -> MaterialTable:
    e, mu = read_table(path)
    return MaterialTable(name if name is not None else Path(path).stem, e, mu)


# ---------------------------------------------------------------- INI specs

def _pair(text, what):
    parts = [p for p in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise FormatError(f"{what}: expected two numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _ini(sources):
    """Parse INI text, a path, or a list of paths (later files extend earlier ones)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if isinstance(sources, str) and "\n" in sources:
        cp.read_string(sources)
        return cp
    paths = sources if isinstance(sources, (list, tuple)) else [sources]
    for p in paths:
        if not cp.read(p):
            raise FormatError(f"cannot read {p}")
    return cp


def read_phantom(path_or_text) -> PhantomSpec:
    """Read a phantom INI.

    Sections: ``[background]`` (material, radius), ``[insert <id>]``
    (material, center, radius) and ``[material <name>]`` (c1, c2, optional
    ``attenuation = basis|table``).
    """
    cp = _ini(path_or_text)
    materials = {}
    inserts = []
    background, radius = None, 0.0
    try:
        for sec in cp.sections():
            s = cp[sec]
            if sec == "background":
                background = s["material"]
                radius = float(s["radius"])
            elif sec.startswith("material "):
                name = sec.split(None, 1)[1].strip()
                att = s.get("attenuation", "basis")
                if att not in ("basis", "table"):
                    raise FormatError(f"[{sec}] attenuation must be basis or table")
                materials[name] = MaterialSpec(name, float(s["c1"]), float(s["c2"]), att)
            elif sec.startswith("insert"):
                name = sec.split(None, 1)[1].strip() if " " in sec else sec
                inserts.append(Insert(s["material"], _pair(s["center"], f"[{sec}] center"), float(s["radius"]), name))
            else:
                raise FormatError(f"unknown phantom section [{sec}]")
    except KeyError as exc:
        raise FormatError(f"phantom spec: missing key {exc}") from None
    return PhantomSpec(background, radius, tuple(inserts), materials)


def read_rois(path_or_text):
    """Read ``[roi <name>]`` sections with center, half_width and optional material."""
    cp = _ini(path_or_text)
    rois = []
    for sec in cp.sections():
        if not sec.startswith("roi "):
            raise FormatError(f"unknown ROI section [{sec}]")
        s = cp[sec]
        try:
            rois.append(RoiSpec(sec.split(None, 1)[1].strip(), _pair(s["center"], f"[{sec}] center"),
                                _pair(s["half_width"], f"[{sec}] half_width"), s.get("material", "")))
        except KeyError as exc:
            raise FormatError(f"[{sec}]: missing key {exc}") from None
    return rois


# ---------------------------------------------------------------- packaged data

DATA_DIR = Path(__file__).resolve().parent / "data"


def data_path(name: str) -> Path:
    return DATA_DIR / name


def load_material(name: str) -> MaterialTable:
    return read_material(data_path(f"{name}.csv"), name)


def load_phantom(name: str) -> PhantomSpec:
    """Packaged phantom ``<name>.ini`` combined with the shared material definitions."""
    return read_phantom([data_path("materials.ini"), data_path(f"{name}.ini")])


def load_spectrum(kvp: int) -> SpectrumTable:
    return read_spectrum(data_path(f"spectrum_{kvp}kVp.csv"), f"{kvp} kVp")
