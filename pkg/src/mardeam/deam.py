"""Dual-energy alternating minimization (DEAM) with metal-trace data substitution.

Each iteration
  1. forms the per-energy model sinograms q_j(y, E) from the current basis images,
  2. projects onto the linear family {p >= 0 : sum_E p_j(y, E) = d_j(y)} for
     rays off the metal trace and sets p = q on the trace,
  3. backprojects the energy-weighted sums of p and q,
  4. updates every pixel by minimising a separable surrogate of the penalised
     objective (exponential majoriser for the data term, convexity split for
     the neighbourhood penalty).

The total penalised I-divergence therefore never increases.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import projector
from .iodata import ImageGrid, Sinogram
from .physics import TUBES, AcquisitionModel

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-30
_NEIGHBORS = ((0, 1), (1, 0), (1, 1), (1, -1), (0, -1), (-1, 0), (-1, -1), (-1, 1))


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 50.0
    delta: float = 0.01

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class DeamConfig:
    penalty: PenaltyConfig = PenaltyConfig()
    n_iters: int = 2000
    stop_tol: float = 1e-7
    surrogate: str = "joint"  # "joint" (per-pixel 2-D) or "separable" (per component)
    n_vertices: int = 16      # polygon size for the joint surrogate
    step: str = "component"   # separable surrogate: "component" or "global" step constant
    newton_steps: int = 5
    momentum: bool = True     # extrapolated starting point with objective-based restart


# ---------------------------------------------------------------- objective pieces

def idivergence(d, g, mask=None) -> float:
    """Sum over rays of d ln(d/g) - d + g; zero-count rays contribute g.

    ``mask`` (boolean, same shape) restricts the sum to selected rays.
    """
    d = np.asarray(getattr(d, "data", d), dtype=np.float64)
    g = np.asarray(getattr(g, "data", g), dtype=np.float64)
    if d.shape != g.shape:
        raise ValueError(f"shape mismatch {d.shape} vs {g.shape}")
    if mask is not None:
        d, g = d[mask], g[mask]
    if np.any(g <= 0) or not np.all(np.isfinite(g)):
        raise ValueError("model counts g must be positive and finite")
    if np.any(d < 0):
        raise ValueError("measured counts d must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        # log1p keeps precision near d = g; the plain difference of logs avoids log1p(-1) for tiny d
        near = np.abs(d - g) < 0.5 * g
        log_ratio = np.where(near, np.log1p((d - g) / g), np.log(d) - np.log(g))
        terms = np.where(d > 0, d * log_ratio, 0.0) + (g - d)
    return math.fsum(terms.ravel())


def potential(t, delta):
    a = np.abs(t) / delta
    return delta * delta * (a - np.log1p(a))


def potential_grad(t, delta):
    return t / (1.0 + np.abs(t) / delta)


def potential_curv(t, delta):
    return 1.0 / (1.0 + np.abs(t) / delta) ** 2


def neighbor_weights(dx: float, dy: float):
    """(row offset, col offset, 1/distance) for the 8-neighbourhood."""
    return [(di, dj, 1.0 / math.hypot(di * dy, dj * dx)) for di, dj in _NEIGHBORS]


def _shift(a, di, dj):
    """Neighbour values a[r+di, c+dj] and a validity mask (edges have fewer neighbours)."""
    ny, nx = a.shape[-2:]
    out = np.zeros_like(a)
    valid = np.zeros((ny, nx), dtype=bool)
    rs = slice(max(0, -di), ny - max(0, di))
    cs = slice(max(0, -dj), nx - max(0, dj))
    rt = slice(max(0, di), ny - max(0, -di))
    ct = slice(max(0, dj), nx - max(0, -dj))
    out[..., rs, cs] = a[..., rt, ct]
    valid[rs, cs] = True
    return out, valid


def _as_array(c):
    return c.values if isinstance(c, ImageGrid) else np.asarray(c, dtype=np.float64)


def penalty(c1, c2, cfg: PenaltyConfig, dx: float | None = None, dy: float | None = None) -> float:
    """lam * sum_i sum_x sum_{x~ in N_x} w(x, x~) phi(c_i(x) - c_i(x~)); every pair counted twice."""
    if cfg.lam == 0:
        return 0.0
    dx = dx if dx is not None else getattr(c1, "dx", 1.0)
    dy = dy if dy is not None else getattr(c1, "dy", 1.0)
    total = []
    for c in (_as_array(c1), _as_array(c2)):
        for di, dj, w in neighbor_weights(dx, dy):
            nb, valid = _shift(c, di, dj)
            total.append(w * potential((c - nb)[valid], cfg.delta).sum())
    return cfg.lam * math.fsum(total)


def penalty_gradient(c, cfg: PenaltyConfig, dx: float | None = None, dy: float | None = None) -> np.ndarray:
    """Gradient of the single-component penalty with respect to c."""
    dx = dx if dx is not None else getattr(c, "dx", 1.0)
    dy = dy if dy is not None else getattr(c, "dy", 1.0)
    arr = _as_array(c)
    grad = np.zeros_like(arr)
    for di, dj, w in neighbor_weights(dx, dy):
        nb, valid = _shift(arr, di, dj)
        grad += np.where(valid, w * potential_grad(arr - nb, cfg.delta), 0.0)
    return 2.0 * cfg.lam * grad


def linear_family_projection(d, q, flags=None) -> np.ndarray:
    """I-projection of q (rays x energies) onto {p : sum_E p = d}; flagged rays keep p = q."""
    d = np.asarray(d, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64)
    p = q * (d / q.sum(axis=1))[:, None]
    if flags is not None:
        f = np.asarray(flags, dtype=bool).ravel()
        p[f] = q[f]
    return p


# ---------------------------------------------------------------- solver

class DeamProblem:
    """Precomputed operators and constants for one reconstruction."""

    def __init__(self, d_l: Sinogram, d_h: Sinogram, model: AcquisitionModel, grid: ImageGrid,
                 flags=None, cfg: DeamConfig = DeamConfig(), threads=None):
        geom = model.geometry
        for d in (d_l, d_h):
            d.require("counts")
            if d.geometry != geom:
                raise ValueError("measured sinograms must use the model geometry")
        if cfg.surrogate not in ("joint", "separable"):
            raise ValueError(f"unknown surrogate {cfg.surrogate!r}; expected 'joint' or 'separable'")
        self.grid = grid
        self.model = model
        self.cfg = cfg
        self.A, self.At = projector.system_matrix(grid, geom, threads)
        self.d = {"L": d_l.data.ravel(), "H": d_h.data.ravel()}
        if flags is None:
            self.flags = np.zeros(self.A.shape[0], dtype=bool)
        else:
            self.flags = np.asarray(getattr(flags, "data", flags), dtype=bool).ravel()
            if self.flags.size != self.A.shape[0]:
                raise ValueError("flag sinogram does not match the geometry")
        self.keep = ~self.flags
        mu = model.mu
        used = np.zeros(mu.shape[1], dtype=bool)
        for j in TUBES:
            used |= model.spectra[j].counts > 0
        self.row_max = float(np.max(self.A @ np.ones(self.A.shape[1])))
        self.z = step_constants(mu[:, used], self.row_max, cfg.step)
        self.vertices, lam = surrogate_vertices(mu[:, used], cfg.n_vertices)
        weights = np.zeros((mu.shape[1], len(self.vertices)))
        weights[used] = lam
        self.mu, self.i0, self.lam = {}, {}, {}
        for j in TUBES:
            k = model.spectra[j].counts > 0
            self.mu[j] = mu[:, k]
            self.i0[j] = model.spectra[j].counts[k]
            self.lam[j] = weights[k]
        self.weights = neighbor_weights(grid.dx, grid.dy)

    def evaluate(self, c: np.ndarray) -> dict:
        """Model counts g_j and per-ray energy sums of q weighted by mu_i (and vertex weights)."""
        L = self.A @ c.reshape(2, -1).T                # (rays, 2)
        out = {"g": {}, "qmu": {}, "qlam": {}}
        for j in TUBES:
            q = np.exp(-(L @ self.mu[j])) * self.i0[j]   # (rays, energies)
            out["g"][j] = q.sum(axis=1)
            out["qmu"][j] = q @ self.mu[j].T
            if self.cfg.surrogate == "joint":
                out["qlam"][j] = q @ self.lam[j]
        return out

    def objective(self, c: np.ndarray, ev: dict) -> dict:
        parts = {j: idivergence(self.d[j], ev["g"][j], self.keep) for j in TUBES}
        pen = penalty(c[0], c[1], self.cfg.penalty, self.grid.dx, self.grid.dy)
        total = parts["L"] + parts["H"] + pen
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite objective: data_L={parts['L']}, data_H={parts['H']}, penalty={pen}")
        return {"data_L": parts["L"], "data_H": parts["H"], "penalty": pen, "total": total}

    def backprojections(self, ev: dict):
        """b_tilde (2, ny, nx) and either b_hat (2, ny, nx) or vertex weights (K, ny, nx)."""
        bt = 0.0
        bh = 0.0
        for j in TUBES:
            ratio = np.where(self.flags, 1.0, self.d[j] / ev["g"][j]) if self.flags.any() else self.d[j] / ev["g"][j]
            bt = bt + ev["qmu"][j] * ratio[:, None]
            bh = bh + (ev["qlam"][j] if self.cfg.surrogate == "joint" else ev["qmu"][j])
        both = self.At @ np.concatenate([bt, bh], axis=1)
        both = both.T.reshape(-1, self.grid.ny, self.grid.nx)
        return both[:2], both[2:]

    def update(self, c: np.ndarray, b_t: np.ndarray, b_h: np.ndarray) -> np.ndarray:
        if self.cfg.surrogate == "joint":
            return _joint_step(c, b_t, b_h, self.vertices, self.row_max, self.cfg.penalty,
                               self.weights, self.cfg.newton_steps)
        z = self.z[:, None, None]
        s = (np.log(np.maximum(b_h, LOG_FLOOR)) - np.log(np.maximum(b_t, LOG_FLOOR))) / z
        if self.cfg.penalty.lam == 0:
            return np.maximum(c + s, 0.0)
        return _penalised_step(c, s, b_t, b_h, z, self.cfg.penalty, self.weights, self.cfg.newton_steps)


def step_constants(mu: np.ndarray, row_max: float, mode: str = "component") -> np.ndarray:
    """Per-component Z_i with sum_{x,i} h(x,y) mu_i(E) / Z_i <= 1 for every ray and energy.

    ``global``: Z = row_max * sum_i max_E mu_i(E) for both components.
    ``component``: Z_i = kappa * row_max * max_E mu_i / w_i with w_i proportional
    to sqrt(max_E mu_i) and kappa = max_E sum_i w_i mu_i(E) / max_E mu_i (<= 1).
    """
    mmax = mu.max(axis=1)
    if mode == "global":
        return np.full(mu.shape[0], row_max * mmax.sum())
    if mode != "component":
        raise ValueError(f"unknown step mode {mode!r}")
    w = np.sqrt(mmax) / np.sqrt(mmax).sum()
    kappa = float(np.max((w[:, None] * mu / mmax[:, None]).sum(axis=0)))
    return kappa * row_max * mmax / w


def _line_meet(a, b, c, d):
    """Intersection of line a->b with line c->d, as (point, t along a->b, s along c->d)."""
    r, s = b - a, d - c
    den = r[0] * s[1] - r[1] * s[0]
    if abs(den) < 1e-300:
        return None, np.inf, np.inf
    w = c - a
    t = (w[0] * s[1] - w[1] * s[0]) / den
    u = (w[0] * r[1] - w[1] * r[0]) / den
    return a + t * r, t, u


def surrogate_vertices(mu: np.ndarray, n_vertices: int = 8):
    """Polygon enclosing the attenuation curve {(mu_1(E), mu_2(E))} and convex weights per energy.

    Returns ``(V, lam)`` with V shaped (K, 2) and lam shaped (n_energies, K),
    lam >= 0, rows summing to 1 and lam @ V == mu.T.  The polygon is the
    convex hull, reduced by repeatedly collapsing the edge whose removal adds
    the least area (neighbouring edges are extended until they meet).
    """
    from scipy.optimize import linprog
    from scipy.spatial import ConvexHull

    if n_vertices < 3:
        raise ValueError("at least three vertices are required")
    pts = np.asarray(mu, dtype=np.float64).T
    poly = [pts[i] for i in ConvexHull(pts).vertices]       # counter-clockwise
    while len(poly) > n_vertices:
        n = len(poly)
        best = None
        for i in range(n):
            a, b, c, d = poly[i - 1], poly[i], poly[(i + 1) % n], poly[(i + 2) % n]
            p, t, u = _line_meet(a, b, d, c)
            if not (t > 1.0 and u > 1.0):
                continue
            area = 0.5 * abs((b[0] - p[0]) * (c[1] - p[1]) - (b[1] - p[1]) * (c[0] - p[0]))
            if best is None or area < best[0]:
                best = (area, i, p)
        if best is None:
            break
        _, i, p = best
        j = (i + 1) % n
        poly[i] = p
        del poly[j]
    V = np.array(poly)
    K = len(V)
    lam = np.zeros((len(pts), K))
    a_eq = np.vstack([V.T, np.ones(K)])
    for e, m in enumerate(pts):
        cost = ((V - m) ** 2).sum(axis=1)
        res = linprog(cost, A_eq=a_eq, b_eq=np.append(m, 1.0), bounds=(0, None), method="highs")
        if not res.success:
            raise RuntimeError(f"attenuation point {m} is not enclosed by the surrogate polygon")
        lam[e] = np.maximum(res.x, 0.0)
    lam /= lam.sum(axis=1, keepdims=True)
    return V, lam


def _neighbor_sums(c, weights):
    nbrs = []
    for di, dj, w in weights:
        nb, valid = _shift(c, di, dj)
        nbrs.append((c + nb, np.where(valid, w, 0.0)))   # (c + c_k), weight (0 off-grid)
    return nbrs


def _joint_step(c, b_t, beta, V, R, pcfg: PenaltyConfig, weights, n_newton):
    """Minimise per pixel, jointly over u = (u_1, u_2) >= 0,
        1/R sum_k beta_k exp(-R V_k.(u - c)) + b_t.u + lam sum_i sum_n w_n phi(2u_i - c_i - c_{i,n})
    by projected Newton with backtracking; each accepted step lowers the surrogate.
    """
    lam, delta = pcfg.lam, pcfg.delta
    shape = c.shape
    c = c.reshape(2, -1)
    b_t = b_t.reshape(2, -1)
    beta = beta.reshape(len(V), -1)
    RV = R * V
    nbrs = []
    if lam > 0:
        for csum, w in _neighbor_sums(c.reshape(shape), weights):
            csum, w = csum.reshape(2, -1), w.reshape(-1)
            nbrs.append((csum, w, potential(2.0 * c - csum, delta)))

    def change(u, idx):
        """Surrogate value at u minus its value at c, for pixels idx."""
        dl = u - c[:, idx]
        with np.errstate(over="ignore", invalid="ignore"):
            ex = np.expm1(np.minimum(-(RV @ dl), 700.0))
            val = (beta[:, idx] * ex).sum(axis=0) / R + (b_t[:, idx] * dl).sum(axis=0)
            for csum, w, p0 in nbrs:
                val = val + lam * w[idx] * (potential(2.0 * u - csum[:, idx], delta) - p0[:, idx]).sum(axis=0)
        return np.where(np.isfinite(val), val, np.inf)

    def derivs(u):
        with np.errstate(over="ignore"):
            e = beta * np.exp(np.minimum(-(RV @ (u - c)), 700.0))   # (K, n)
        g = b_t - V.T @ e
        h11 = RV[:, 0] ** 2 / R @ e
        h12 = (RV[:, 0] * V[:, 1]) @ e
        h22 = RV[:, 1] ** 2 / R @ e
        for csum, w, _ in nbrs:
            t = 2.0 * u - csum
            g = g + (2.0 * lam) * w * potential_grad(t, delta)
            curv = (4.0 * lam) * w * potential_curv(t, delta)
            h11 = h11 + curv[0]
            h22 = h22 + curv[1]
        return g, h11, h12, h22

    u = c.copy()
    cur = np.zeros(c.shape[1])
    for _ in range(n_newton):
        g, h11, h12, h22 = derivs(u)
        free = ~((u <= 0.0) & (g > 0.0))
        det = h11 * h22 - h12 * h12
        with np.errstate(divide="ignore", invalid="ignore"):
            both = np.stack([(-g[0] * h22 + g[1] * h12) / det, (-g[1] * h11 + g[0] * h12) / det])
            only = np.stack([-g[0] / h11, -g[1] / h22])
        step = np.where(free[0] & free[1], both, np.where(free, only, 0.0))
        step = np.where(np.isfinite(step), step, 0.0)
        idx = np.flatnonzero(np.any(step != 0.0, axis=0))
        t = 1.0
        for _ in range(30):
            if idx.size == 0:
                break
            cand = np.maximum(u[:, idx] + t * step[:, idx], 0.0)
            val = change(cand, idx)
            ok = val <= cur[idx]
            acc = idx[ok]
            u[:, acc] = cand[:, ok]
            cur[acc] = val[ok]
            idx = idx[~ok]
            t *= 0.5
    return u.reshape(shape)


def _penalised_step(c, s, b_t, b_h, z, pcfg: PenaltyConfig, weights, n_newton):
    """Minimise per pixel
        b_h/Z exp(-Z(u - c)) + b_t u + lam sum_k w_k phi(2u - c - c_k)
    over u >= 0 with safeguarded Newton; falls back to u = c if the surrogate would not decrease.
    """
    lam, delta = pcfg.lam, pcfg.delta
    nbrs = _neighbor_sums(c, weights)

    def deriv(u):
        with np.errstate(over="ignore"):
            e = np.exp(np.minimum(-z * (u - c), 700.0))
        d1 = -b_h * e + b_t
        d2 = z * b_h * e
        for csum, w in nbrs:
            t = 2.0 * u - csum
            d1 = d1 + 2.0 * lam * w * potential_grad(t, delta)
            d2 = d2 + 4.0 * lam * w * potential_curv(t, delta)
        return d1, d2

    def surrogate_change(u):
        """S(u) - S(c)."""
        with np.errstate(over="ignore", invalid="ignore"):
            val = b_h / z * np.expm1(np.minimum(-z * (u - c), 700.0)) + b_t * (u - c)
            for csum, w in nbrs:
                val = val + lam * w * (potential(2.0 * u - csum, delta) - potential(2.0 * c - csum, delta))
        return val

    center = c + s
    lo = np.maximum(center - 10.0 / z, 0.0)
    hi = np.maximum(center + 10.0 / z, lo + 1.0 / z)
    for _ in range(60):
        d_hi, _ = deriv(hi)
        bad = d_hi < 0
        if not bad.any():
            break
        hi = np.where(bad, hi + 2.0 * (hi - lo), hi)
    d_lo, _ = deriv(lo)
    at_zero = (lo == 0.0) & (d_lo >= 0)
    for _ in range(60):
        bad = (d_lo > 0) & (lo > 0)
        if not bad.any():
            break
        lo = np.where(bad, np.maximum(lo - 2.0 * (hi - lo), 0.0), lo)
        d_lo, _ = deriv(lo)
        at_zero |= (lo == 0.0) & (d_lo >= 0)

    u = np.clip(center, lo, hi)
    for _ in range(n_newton):
        d1, d2 = deriv(u)
        lo = np.where(d1 < 0, u, lo)
        hi = np.where(d1 > 0, u, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            nu = u - d1 / d2
        ok = (nu > lo) & (nu < hi) & np.isfinite(nu)
        u = np.where(ok, nu, 0.5 * (lo + hi))
    u = np.where(at_zero, 0.0, np.maximum(u, 0.0))
    worse = ~(surrogate_change(u) <= 0.0)
    return np.where(worse, c, u)


@dataclass
class ReconState:
    c: np.ndarray                      # (2, ny, nx), non-negative
    iteration: int = 0
    history: list = field(default_factory=list)
    cache: dict | None = None          # model evaluation of ``c``
    previous: np.ndarray | None = None  # last accepted iterate (momentum)
    t: float = 1.0                     # momentum parameter
    restarts: int = 0

    @property
    def objective(self) -> float:
        return self.history[-1]["total"]

    def images(self, grid: ImageGrid):
        return grid.with_values(self.c[0]), grid.with_values(self.c[1])


def initial_state(problem: DeamProblem, c1, c2) -> ReconState:
    c = np.stack([_as_array(c1), _as_array(c2)]).astype(np.float64)
    if c.shape != (2, problem.grid.ny, problem.grid.nx):
        raise ValueError(f"initial images must be {problem.grid.ny}x{problem.grid.nx}")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError("initial images must be finite and non-negative")
    ev = problem.evaluate(c)
    obj = problem.objective(c, ev)
    return ReconState(c, 0, [dict(iter=0, **obj)], ev)


def _mm_step(problem: DeamProblem, c: np.ndarray, ev: dict):
    b_t, b_h = problem.backprojections(ev)
    z = problem.update(c, b_t, b_h)
    ev_z = problem.evaluate(z)
    return z, ev_z, problem.objective(z, ev_z)


def deam_iteration(state: ReconState, problem: DeamProblem) -> ReconState:
    """One surrogate-minimisation update of (c1, c2).

    With momentum the update starts from the extrapolated point
    c + b (c - c_prev); it is kept only if the objective does not rise, otherwise
    momentum restarts and the plain update from c is used.
    """
    ev = state.cache if state.cache is not None else problem.evaluate(state.c)
    it = state.iteration + 1
    t, prev, restarts = state.t, state.previous, state.restarts
    if problem.cfg.momentum and prev is not None:
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = np.maximum(state.c + ((t - 1.0) / t_next) * (state.c - prev), 0.0)
        z, ev_z, obj = _mm_step(problem, y, problem.evaluate(y))
        if obj["total"] <= state.objective:
            if np.vdot(y - z, z - state.c) > 0:   # momentum points uphill: restart next time
                t_next, restarts = 1.0, restarts + 1
            return ReconState(z, it, state.history + [dict(iter=it, **obj)], ev_z, state.c, t_next, restarts)
        restarts += 1
    z, ev_z, obj = _mm_step(problem, state.c, ev)
    return ReconState(z, it, state.history + [dict(iter=it, **obj)], ev_z, state.c, 1.0, restarts)


def run_deam(d_l: Sinogram, d_h: Sinogram, model: AcquisitionModel, grid: ImageGrid, metal=None,
             init=None, cfg: DeamConfig = DeamConfig(), n_iters: int | None = None, threads=None,
             callback=None):
    """Run DEAM; ``metal`` (a MetalModel or flag sinogram) switches on the trace substitution.

    Returns ``(c1, c2, history)`` where history holds one record per iterate,
    starting with the initial images (iter 0).
    """
    flags = None
    if metal is not None:
        flags = getattr(metal, "flags", metal)
    problem = DeamProblem(d_l, d_h, model, grid, flags, cfg, threads)
    if init is None:
        init = (np.zeros((grid.ny, grid.nx)), np.zeros((grid.ny, grid.nx)))
    state = initial_state(problem, *init)
    n = cfg.n_iters if n_iters is None else n_iters
    for _ in range(n):
        state = deam_iteration(state, problem)
        if callback is not None:
            callback(state)
        h = state.history
        if len(h) > 5:
            prev, cur = h[-6]["total"], h[-1]["total"]
            if abs(prev - cur) <= cfg.stop_tol * abs(cur):
                log.info("stopping at iteration %d: relative change below %g", state.iteration, cfg.stop_tol)
                break
    c1, c2 = state.images(grid)
    return c1, c2, state.history
