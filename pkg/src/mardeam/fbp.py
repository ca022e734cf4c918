"""Filtered backprojection for parallel and equiangular fan-beam sinograms."""
from __future__ import annotations

import math

import numpy as np

from .iodata import FanGeometry, ImageGrid, Sinogram

COUNT_FLOOR = 0.1


def counts_to_lineintegral(d: Sinogram, i0_total, eps: float = COUNT_FLOOR) -> Sinogram:
    """-ln(max(d, eps) / I0). ``i0_total`` may be a scalar or a per-ray array."""
    d.require("counts")
    i0 = np.broadcast_to(np.asarray(i0_total, dtype=np.float64), d.data.shape)
    if np.any(i0 <= 0):
        raise ValueError("I0 must be positive")
    return d.with_data(-np.log(np.maximum(d.data, eps) / i0), "line_integral")


def water_precorrection(spectrum, water_mu, mu_ref: float, max_path: float = 3000.0):
    """Map polychromatic line integrals to water-equivalent ``mu_ref * L``.

    Returns a vectorised callable built from a tabulated, monotone
    polychromatic water curve -ln(sum_E w(E) exp(-mu_w(E) L)).
    """
    keep = spectrum.counts > 0
    w = spectrum.counts[keep] / spectrum.counts[keep].sum()
    mu = np.asarray(water_mu)[keep]
    paths = np.linspace(0.0, max_path, 30001)
    poly = -np.log(np.exp(-np.outer(paths, mu)) @ w)

    def correct(p):
        p = np.asarray(p, dtype=np.float64)
        return np.interp(p, poly, mu_ref * paths, left=0.0, right=mu_ref * max_path) + np.minimum(p, 0.0)

    return correct


def _fft_size(n: int) -> int:
    return 1 << int(math.ceil(math.log2(2 * n)))


def _filter_response(n: int, spacing: float, fan: bool, window: str) -> np.ndarray:
    """Frequency response of the band-limited ramp kernel, padded length."""
    size = _fft_size(n)
    k = np.arange(-(n - 1), n)
    h = np.zeros(k.size)
    odd = k % 2 == 1
    if fan:
        h[k == 0] = 1.0 / (8.0 * spacing ** 2)
        h[odd] = -0.5 / (math.pi * np.sin(k[odd] * spacing)) ** 2
    else:
        h[k == 0] = 1.0 / (4.0 * spacing ** 2)
        h[odd] = -1.0 / (math.pi * k[odd] * spacing) ** 2
    kernel = np.zeros(size)
    kernel[k % size] = h
    resp = np.real(np.fft.fft(kernel)) * spacing
    if window == "hann":
        f = np.fft.fftfreq(size)
        resp = resp * 0.5 * (1.0 + np.cos(2.0 * math.pi * f))
    elif window != "ramp":
        raise ValueError(f"unknown filter {window!r}; expected 'ramp' or 'hann'")
    return resp


def filter_sinogram(data: np.ndarray, geom: FanGeometry, window: str = "ramp") -> np.ndarray:
    n = geom.n_channels
    fan = geom.mode == "fan_equiangular"
    spacing = geom.channel_spacing()
    resp = _filter_response(n, spacing, fan, window)
    if fan:
        gam = geom.channel_positions()
        data = data * (geom.source_radius * np.cos(gam))[None, :]
    padded = np.zeros((data.shape[0], resp.size))
    padded[:, :n] = data
    return np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * resp[None, :], axis=1))[:, :n]


def fbp_reconstruct(sino: Sinogram, grid: ImageGrid, window: str = "ramp") -> ImageGrid:
    """Filtered backprojection of a line-integral sinogram onto ``grid``."""
    sino.require("line_integral")
    geom = sino.geometry
    fan = geom.mode == "fan_equiangular"
    if fan and geom.angular_range < 2 * math.pi * (1 - 1e-9):
        raise ValueError("fan-beam FBP requires a full 2*pi scan")
    if not fan and geom.angular_range < math.pi * (1 - 1e-9):
        raise ValueError(f"parallel FBP requires angular range >= pi, got {geom.angular_range:.4f}")

    q = filter_sinogram(sino.data, geom, window)
    xs, ys = grid.pixel_centers()
    xs, ys = xs.ravel(), ys.ravel()
    n = geom.n_channels
    spacing = geom.channel_spacing()
    chan = np.arange(n, dtype=np.float64)
    out = np.zeros(xs.size)
    d_beta = geom.angular_range / geom.n_views
    for v, beta in enumerate(geom.view_angles()):
        cb, sb = math.cos(beta), math.sin(beta)
        if fan:
            vx = xs - geom.source_radius * cb
            vy = ys - geom.source_radius * sb
            # angle from the central ray (-cos b, -sin b) to the pixel, counter-clockwise
            gamma = np.arctan2(-cb * vy + sb * vx, -cb * vx - sb * vy)
            idx = gamma / spacing + n / 2.0 - 0.5
            out += np.interp(idx, chan, q[v], left=0.0, right=0.0) / (vx * vx + vy * vy)
        else:
            s = xs * cb + ys * sb
            idx = s / spacing + n / 2.0 - 0.5
            out += np.interp(idx, chan, q[v], left=0.0, right=0.0)
    scale = d_beta if fan else d_beta * math.pi / geom.angular_range
    return grid.with_values((out * scale).reshape(grid.ny, grid.nx))
