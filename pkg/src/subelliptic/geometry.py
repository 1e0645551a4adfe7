"""Carnot-Caratheodory distance, metric ball volumes, doubling diagnostics,
greedy coverings, and the fiber-integrated cutoff family.

The discrete metric solves the control-problem Bellman equation on the grid:
moves follow numerically integrated flows of sum_j a_j X_j for piecewise
constant controls with |a_j| <= 1 over time tau, and the value at the flow
endpoint is read off by multilinear interpolation.  Nearest-node snapping is
deliberately avoided: it lets shortest paths collect lateral displacement for
free, which does not vanish under refinement.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .domain import BoxDomain
from .fields import HormanderSystem

_BIG = 1e18


class ClippedBallError(RuntimeError):
    """A metric ball touches the computational boundary; result would lie."""


class CoverageError(RuntimeError):
    """Greedy cover failed its coverage postcondition."""


class UnresolvedDistanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class CCGraphConfig:
    """Controls for the flow-move scheme underlying the discrete CC metric."""

    tau: float | None = None          # time per control segment; None = auto
    controls_per_field: int = 5       # odd number of control levels in [-1,1]
    substeps: int = 2                 # RK4 substeps per move
    step_cells: float = 1.5           # auto-tau target: cells per unit step
    tolerance: float = 1e-9           # sweep convergence threshold

    def __post_init__(self):
        if self.controls_per_field < 3 or self.controls_per_field % 2 == 0:
            raise ValueError("controls_per_field must be an odd integer >= 3")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")


def _rk4_flow(system: HormanderSystem, a: np.ndarray, pts: np.ndarray,
              tau: float, substeps: int) -> np.ndarray:
    """Integrate x' = sum_j a_j X_j(x) for time tau from each point."""

    def F(x):
        vals = system.field_values(x)          # (..., m, n)
        return np.einsum("...mn,m->...n", vals, a)

    x = pts
    h = tau / substeps
    for _ in range(substeps):
        k1 = F(x)
        k2 = F(x + 0.5 * h * k1)
        k3 = F(x + 0.5 * h * k2)
        k4 = F(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


class CCMetric:
    """Discrete CC metric on a box grid via Bellman value iteration."""

    def __init__(self, system: HormanderSystem, domain: BoxDomain,
                 cfg: CCGraphConfig = CCGraphConfig()):
        if domain.dim != system.n:
            raise ValueError("domain dimension differs from system dimension")
        self.system = system
        self.domain = domain
        self.cfg = cfg
        self.tau = cfg.tau if cfg.tau is not None else \
            cfg.step_cells * float(np.min(domain.spacing))
        self._moves = self._build_moves()

    def _build_moves(self):
        dom, sys_, tau = self.domain, self.system, self.tau
        pts = dom.points()
        lower = np.array(dom.lower)
        h = dom.spacing
        counts = np.array(dom.counts)
        dim = dom.dim
        corner_offsets = list(itertools.product((0, 1), repeat=dim))
        levels = np.linspace(-1.0, 1.0, self.cfg.controls_per_field)
        moves = []
        for combo in itertools.product(levels, repeat=sys_.m):
            a = np.array(combo)
            amax = np.max(np.abs(a))
            if amax == 0.0:
                continue
            end = _rk4_flow(sys_, a, pts, tau, self.cfg.substeps)
            rel = (end - lower) / h
            base = np.floor(rel).astype(int)
            frac = rel - base
            valid = np.all((base >= 0) & (base <= counts - 2), axis=1)
            base_c = np.clip(base, 0, counts - 2)
            idx = np.empty((pts.shape[0], len(corner_offsets)), dtype=np.int64)
            wts = np.empty((pts.shape[0], len(corner_offsets)))
            for c, off in enumerate(corner_offsets):
                corner = base_c + np.array(off)
                idx[:, c] = np.ravel_multi_index(tuple(corner.T), dom.counts)
                w = np.ones(pts.shape[0])
                for k in range(dim):
                    w = w * (frac[:, k] if off[k] else 1.0 - frac[:, k])
                wts[:, c] = w
            moves.append((tau * amax, idx, wts, valid))
        return moves

    def distance_fields(self, sources) -> np.ndarray:
        """Distances from each source point; shape (k, num_points)."""
        src = np.atleast_2d(np.asarray(sources, dtype=float))
        nsrc, npts = src.shape[0], self.domain.num_points
        d = np.full((nsrc, npts), _BIG)
        for s in range(nsrc):
            d[s, self.domain.flat_index_of(src[s])] = 0.0
        diameter = float(np.linalg.norm(
            np.array(self.domain.upper) - np.array(self.domain.lower)))
        max_sweeps = int(20 * diameter / self.tau) + 100
        tol = self.cfg.tolerance
        for _ in range(max_sweeps):
            d_new = d
            for cost, idx, wts, valid in self._moves:
                interp = np.einsum("kpc,pc->kp", d[:, idx], wts)
                cand = cost + interp
                cand = np.where(valid[None, :], cand, _BIG)
                d_new = np.minimum(d_new, cand)
            delta = np.max(d - d_new)
            d = d_new
            if delta < tol:
                break
        return d

    def distance_field(self, source) -> np.ndarray:
        return self.distance_fields([source])[0]

    def distance_grid(self, source) -> np.ndarray:
        return self.distance_field(source).reshape(self.domain.counts)

    def interpolate(self, field_flat: np.ndarray, x) -> float:
        """Multilinear interpolation of a node field at an off-grid point."""
        x = np.asarray(x, dtype=float)
        rel = (x - np.array(self.domain.lower)) / self.domain.spacing
        base = np.clip(np.floor(rel).astype(int), 0,
                       np.array(self.domain.counts) - 2)
        frac = rel - base
        out = 0.0
        for off in itertools.product((0, 1), repeat=self.domain.dim):
            corner = base + np.array(off)
            w = np.prod([frac[k] if off[k] else 1.0 - frac[k]
                         for k in range(self.domain.dim)])
            out += w * field_flat[np.ravel_multi_index(tuple(corner),
                                                       self.domain.counts)]
        return float(out)


def get_metric(system: HormanderSystem, domain: BoxDomain,
               cfg: CCGraphConfig = CCGraphConfig()) -> CCMetric:
    """Per-system memoized metric construction."""
    cache = getattr(system, "_metric_cache", None)
    if cache is None:
        cache = {}
        system._metric_cache = cache
    key = (domain, cfg)
    if key not in cache:
        cache[key] = CCMetric(system, domain, cfg)
    return cache[key]


_FIELD_CACHE_LIMIT = 64


def cached_distance_field(metric: CCMetric, source) -> np.ndarray:
    """Memoized single-source distance field (flat array)."""
    cache = getattr(metric, "_dfield_cache", None)
    if cache is None:
        cache = {}
        metric._dfield_cache = cache
    key = tuple(np.round(np.asarray(source, dtype=float), 12))
    if key not in cache:
        if len(cache) >= _FIELD_CACHE_LIMIT:
            cache.pop(next(iter(cache)))
        cache[key] = metric.distance_field(source)
    return cache[key]


@dataclass
class DistanceResult:
    value: float
    error_bound: float
    status: str                  # "ok" or "unresolved"
    coarse_value: float = float("nan")

    def __float__(self):
        return self.value


def cc_distance(system: HormanderSystem, x, y, domain: BoxDomain,
                cfg: CCGraphConfig = CCGraphConfig()) -> DistanceResult:
    """Distance at two resolutions; reports a refinement error bound."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (domain.contains(x) and domain.contains(y)):
        return DistanceResult(float("inf"), float("inf"), "unresolved")
    m_coarse = get_metric(system, domain, cfg)
    fine_cfg = CCGraphConfig(tau=m_coarse.tau / 2.0,
                             controls_per_field=cfg.controls_per_field,
                             substeps=cfg.substeps)
    m_fine = get_metric(system, domain.refine(2), fine_cfg)
    d_c = m_coarse.interpolate(cached_distance_field(m_coarse, x), y)
    d_f = m_fine.interpolate(cached_distance_field(m_fine, x), y)
    if d_f > _BIG / 2:
        return DistanceResult(float("inf"), float("inf"), "unresolved")
    err = 2.0 * abs(d_c - d_f) + 2.0 * m_fine.tau
    return DistanceResult(float(d_f), float(err), "ok", float(d_c))


def ball_volume(system: HormanderSystem, center, r: float, domain: BoxDomain,
                cfg: CCGraphConfig = CCGraphConfig(),
                metric: CCMetric | None = None) -> float:
    """Grid-count measure of B(center, r); refuses clipped balls."""
    m = metric if metric is not None else get_metric(system, domain, cfg)
    dist = cached_distance_field(m, np.asarray(center, dtype=float))
    inside = (dist < r).reshape(domain.counts)
    if _touches_boundary(inside):
        raise ClippedBallError(
            f"ball B({center}, {r}) reaches the domain boundary")
    return float(np.count_nonzero(inside)) * domain.cell_volume


def _touches_boundary(mask: np.ndarray) -> bool:
    for ax in range(mask.ndim):
        sl_lo = [slice(None)] * mask.ndim
        sl_hi = [slice(None)] * mask.ndim
        sl_lo[ax] = 0
        sl_hi[ax] = -1
        if mask[tuple(sl_lo)].any() or mask[tuple(sl_hi)].any():
            return True
    return False


def growth_exponent_fit(ratios_R_over_r, volume_ratios) -> float:
    """Least-squares exponent s in |B(0,R)|/|B(0,r)| ~ (R/r)^s."""
    lx = np.log(np.asarray(ratios_R_over_r, dtype=float))
    ly = np.log(np.asarray(volume_ratios, dtype=float))
    return float(np.sum(lx * ly) / np.sum(lx * lx))


@dataclass
class BallCover:
    centers: np.ndarray          # (k, n) points
    radius: float
    dilation: float              # H
    overlap_histogram: np.ndarray
    max_overlap: int
    coverage: float              # fraction of grid points within R of a center


def greedy_cover(system: HormanderSystem, domain: BoxDomain, R: float,
                 H: float, cfg: CCGraphConfig = CCGraphConfig()) -> BallCover:
    """Greedy maximal R/2-packing in lexicographic grid order.

    The resulting R-balls cover every grid point (asserted); the overlap
    count of the HR-dilated balls is returned per grid point.
    """
    m = get_metric(system, domain, cfg)
    npts = domain.num_points
    min_dist = np.full(npts, np.inf)
    center_fields: list[np.ndarray] = []
    centers_flat: list[int] = []
    for i in range(npts):
        if min_dist[i] > R / 2.0:
            d = m.distance_field(domain.point_at(i))
            centers_flat.append(i)
            center_fields.append(d)
            np.minimum(min_dist, d, out=min_dist)
    covered = min_dist < R
    coverage = float(np.count_nonzero(covered)) / npts
    if not covered.all():
        raise CoverageError(
            f"{npts - int(covered.sum())} grid points farther than R from "
            "every greedy center (distance-field inconsistency)")
    overlap = np.zeros(npts, dtype=int)
    for d in center_fields:
        overlap += d < H * R
    hist = np.bincount(overlap)
    return BallCover(
        centers=np.array([domain.point_at(i) for i in centers_flat]),
        radius=R, dilation=H, overlap_histogram=hist,
        max_overlap=int(overlap.max()), coverage=coverage)
