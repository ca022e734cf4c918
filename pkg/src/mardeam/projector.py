"""Matched forward/back projector built from exact ray-pixel intersection lengths.

The system matrix ``h(x, y)`` is assembled once per (grid, geometry) pair with a
vectorised Siddon traversal and cached as a CSR matrix. Forward projection is
``A @ image`` and back projection ``A.T @ sinogram`` so the pair is an exact
transpose by construction.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from collections import OrderedDict

import numpy as np
import scipy.sparse as sp

from .iodata import FanGeometry, ImageGrid, Sinogram

_CHUNK_RAYS = 4096
_MIN_LENGTH = 1e-9  # mm; drops corner-grazing zero-length segments
_CACHE_SIZE = 8
_CACHE: OrderedDict = OrderedDict()


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MARDEAM_THREADS", "1")))
    except ValueError:
        return 1


def ray_endpoints(geom: FanGeometry, reach: float):
    """Start/end points (n_rays, 2) for every measurement, view-major.

    ``reach`` must exceed the distance from the isocenter to any grid corner.
    """
    beta = geom.view_angles()[:, None]
    pos = geom.channel_positions()[None, :]
    if geom.mode == "fan_equiangular":
        sx = geom.source_radius * np.cos(beta) * np.ones_like(pos)
        sy = geom.source_radius * np.sin(beta) * np.ones_like(pos)
        ang = beta + math.pi + pos
        length = geom.source_radius + reach
        ex, ey = sx + length * np.cos(ang), sy + length * np.sin(ang)
    else:
        nx_, ny_ = np.cos(beta), np.sin(beta)
        cx, cy = pos * nx_, pos * ny_
        sx, sy = cx + reach * ny_, cy - reach * nx_
        ex, ey = cx - reach * ny_, cy + reach * nx_
    p0 = np.stack([sx.ravel(), sy.ravel()], axis=1)
    p1 = np.stack([ex.ravel(), ey.ravel()], axis=1)
    return p0, p1


def _siddon_chunk(p0, p1, planes_x, planes_y, nx, ny, dx, dy):
    """Return (ray, pixel, length) triplets for a block of rays."""
    d = p1 - p0
    norm = np.hypot(d[:, 0], d[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (planes_x[None, :] - p0[:, :1]) / d[:, :1]
        ay = (planes_y[None, :] - p0[:, 1:]) / d[:, 1:]
    flat_x = d[:, 0] == 0
    flat_y = d[:, 1] == 0
    lo = np.zeros(len(p0))
    hi = np.ones(len(p0))
    lo = np.maximum(lo, np.where(flat_x, -np.inf, np.minimum(ax[:, 0], ax[:, -1])))
    hi = np.minimum(hi, np.where(flat_x, np.inf, np.maximum(ax[:, 0], ax[:, -1])))
    lo = np.maximum(lo, np.where(flat_y, -np.inf, np.minimum(ay[:, 0], ay[:, -1])))
    hi = np.minimum(hi, np.where(flat_y, np.inf, np.maximum(ay[:, 0], ay[:, -1])))
    inside_x = ~flat_x | ((p0[:, 0] > planes_x[0]) & (p0[:, 0] < planes_x[-1]))
    inside_y = ~flat_y | ((p0[:, 1] > planes_y[0]) & (p0[:, 1] < planes_y[-1]))
    hit = inside_x & inside_y & (hi > lo)

    alphas = np.concatenate([ax, ay, lo[:, None], hi[:, None]], axis=1)
    alphas = np.where(np.isfinite(alphas), alphas, hi[:, None])
    alphas = np.clip(alphas, lo[:, None], hi[:, None])
    alphas.sort(axis=1)
    seg = np.diff(alphas, axis=1) * norm[:, None]
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    mx = p0[:, :1] + mid * d[:, :1]
    my = p0[:, 1:] + mid * d[:, 1:]
    col = np.floor((mx - planes_x[0]) / dx).astype(np.int64)
    row = np.floor((my - planes_y[0]) / dy).astype(np.int64)
    ok = (seg > _MIN_LENGTH) & hit[:, None] & (col >= 0) & (col < nx) & (row >= 0) & (row < ny)
    rays, k = np.nonzero(ok)
    return rays, row[rays, k] * nx + col[rays, k], seg[rays, k]


def _planes(grid_key):
    nx, ny, dx, dy, ox, oy = grid_key
    planes_x = ox + (np.arange(nx + 1) - nx / 2.0) * dx
    planes_y = oy + (np.arange(ny + 1) - ny / 2.0) * dy
    reach = 2.0 * (math.hypot(nx * dx, ny * dy) + math.hypot(ox, oy)) + 1.0
    return planes_x, planes_y, reach


def _grid_key(image: ImageGrid):
    return (image.nx, image.ny, float(image.dx), float(image.dy), float(image.origin_x), float(image.origin_y))


def _build_matrix(grid_key, geom: FanGeometry, threads: int):
    nx, ny, dx, dy, ox, oy = grid_key
    planes_x, planes_y, reach = _planes(grid_key)
    p0, p1 = ray_endpoints(geom, reach)
    n_rays = len(p0)
    starts = list(range(0, n_rays, _CHUNK_RAYS))

    def work(s):
        r, c, v = _siddon_chunk(p0[s:s + _CHUNK_RAYS], p1[s:s + _CHUNK_RAYS], planes_x, planes_y, nx, ny, dx, dy)
        return r + s, c, v

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))  # map preserves chunk order
    else:
        parts = [work(s) for s in starts]
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    if rows.size == 0:
        raise ValueError("acquisition geometry misses the image grid entirely")
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n_rays, nx * ny))
    mat.sum_duplicates()
    mat.sort_indices()
    mat_t = mat.T.tocsr()
    mat.data.flags.writeable = False
    mat_t.data.flags.writeable = False
    return mat, mat_t


def system_matrix(image: ImageGrid, geom: FanGeometry, threads: int | None = None):
    """Return ``(A, A_T)`` as CSR matrices; rows are measurements, columns pixels.

    The matrix is identical for every thread count.
    """
    key = (_grid_key(image), geom)
    if key in _CACHE:
        _CACHE.move_to_end(key)
        return _CACHE[key]
    mats = _build_matrix(key[0], geom, threads or default_threads())
    _CACHE[key] = mats
    while len(_CACHE) > _CACHE_SIZE:
        _CACHE.popitem(last=False)
    return mats


def forward_project(image: ImageGrid, geom: FanGeometry, threads: int | None = None) -> Sinogram:
    A, _ = system_matrix(image, geom, threads)
    return Sinogram(geom, A @ image.values.ravel(), "line_integral")


def back_project(sino: Sinogram, image: ImageGrid, threads: int | None = None) -> ImageGrid:
    """Adjoint of :func:`forward_project`; ``image`` supplies the target grid."""
    geom = sino.geometry
    if sino.data.shape != geom.shape:
        raise ValueError(f"sinogram shape {sino.data.shape} does not match geometry {geom.shape}")
    _, At = system_matrix(image, geom, threads)
    return image.with_values(At @ sino.data.ravel())


def ray_path(image: ImageGrid, geom: FanGeometry, view: int, channel: int):
    """(pixel index, length mm) pairs for one measurement, ordered source to detector."""
    key = _grid_key(image)
    planes_x, planes_y, reach = _planes(key)
    p0, p1 = ray_endpoints(geom, reach)
    y = view * geom.n_channels + channel
    _, pix, length = _siddon_chunk(p0[y:y + 1], p1[y:y + 1], planes_x, planes_y, *key[:4])
    return list(zip(pix.tolist(), length.tolist()))


def max_row_sum(image: ImageGrid, geom: FanGeometry) -> float:
    A, _ = system_matrix(image, geom)
    return float(np.max(A @ np.ones(A.shape[1])))
