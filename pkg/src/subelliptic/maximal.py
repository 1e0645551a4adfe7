"""Maximal functions, mean oscillation, and VMO moduli over metric balls.

The uncentered supremum over all metric balls is replaced by a finite family:
centers on a strided subgrid, radii on a dyadic ladder.  Every value computed
this way is a lower bound for the true supremum; refinement stability of the
family (halving the stride) is the quantitative check that the truncation is
harmless.  Balls that reach the box boundary, or that touch the untrusted
margin of a sampled function, are never averaged over.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import BoxDomain, GridFunction, MarginError
from .fields import HormanderSystem
from .geometry import CCGraphConfig, CCMetric, get_metric


class CoverageGapError(RuntimeError):
    """Some grid point lies in no family ball at the smallest radius."""


# ---------------------------------------------------------------------------
# ball family
# ---------------------------------------------------------------------------

@dataclass
class BallFamily:
    """Finite family of metric balls: strided centers, dyadic radii.

    distance[c, p] is the CC distance from center c to grid point p, so the
    ball (c, r) is the boolean slice distance[c] < r.  clipped[c, k] flags
    balls of radius radii[k] around center c that reach the box boundary.
    """

    domain: BoxDomain
    q: float                       # volume growth exponent of the metric
    centers: np.ndarray            # (C, n) points
    radii: np.ndarray              # increasing, radii[k] = r0 * 2^k
    distance: np.ndarray           # (C, num_points)
    clipped: np.ndarray            # (C, K) bool
    stride: int = 1

    _border: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        if np.any(np.diff(self.radii) <= 0):
            raise ValueError("radii must be strictly increasing")
        border = np.ones(self.domain.counts, dtype=bool)
        border[tuple(slice(1, -1) for _ in self.domain.counts)] = False
        self._border = border.ravel()

    @property
    def num_centers(self) -> int:
        return int(self.centers.shape[0])

    def masks(self, k: int) -> np.ndarray:
        """Membership masks (C, num_points) for radius index k."""
        return self.distance < self.radii[k]

    def ball_mask(self, center_idx: int, r: float) -> np.ndarray:
        return self.distance[center_idx] < r

    def is_clipped_mask(self, mask: np.ndarray) -> bool:
        return bool(np.any(mask & self._border))

    def coverage(self, k: int) -> float:
        return float(np.count_nonzero(self.masks(k).any(axis=0))) \
            / self.domain.num_points


def build_ball_family(system: HormanderSystem, domain: BoxDomain,
                      r0: float, num_radii: int = 3, stride: int = 4,
                      cfg: CCGraphConfig = CCGraphConfig(),
                      chunk: int = 48) -> BallFamily:
    """Distance fields from every stride-th grid node, computed in chunks.

    Raises CoverageGapError unless every grid point lies in at least one
    family ball at the smallest radius (possibly a clipped one: coverage is
    a geometric property of the center net, clipping a per-use filter).
    """
    metric = get_metric(system, domain, cfg)
    idx_axes = [np.arange(0, c, stride) for c in domain.counts]
    # Always include the last node per axis so the net reaches the boundary.
    idx_axes = [np.unique(np.append(a, c - 1))
                for a, c in zip(idx_axes, domain.counts)]
    mesh = np.meshgrid(*idx_axes, indexing="ij")
    flat = np.ravel_multi_index(tuple(m.ravel() for m in mesh), domain.counts)
    centers = np.array([domain.point_at(i) for i in flat])
    dist = np.empty((centers.shape[0], domain.num_points))
    for lo in range(0, centers.shape[0], chunk):
        dist[lo:lo + chunk] = metric.distance_fields(centers[lo:lo + chunk])
    radii = r0 * 2.0 ** np.arange(num_radii)
    fam = BallFamily(domain=domain, q=float(system.q), centers=centers,
                     radii=radii, distance=dist, clipped=np.zeros(
                         (centers.shape[0], num_radii), dtype=bool),
                     stride=stride)
    for k in range(num_radii):
        masks = fam.masks(k)
        fam.clipped[:, k] = (masks & fam._border[None, :]).any(axis=1)
        if k == 0 and not masks.any(axis=0).all():
            missing = int(np.count_nonzero(~masks.any(axis=0)))
            raise CoverageGapError(
                f"{missing} grid points outside every radius-{radii[0]:g} "
                f"ball; decrease stride or increase r0")
    return fam


def refine_family(fam: BallFamily, system: HormanderSystem,
                  cfg: CCGraphConfig = CCGraphConfig()) -> BallFamily:
    """Same radii, half the stride: a strict superset of balls."""
    new_stride = max(1, fam.stride // 2)
    return build_ball_family(system, fam.domain, float(fam.radii[0]),
                             num_radii=len(fam.radii), stride=new_stride,
                             cfg=cfg)


# ---------------------------------------------------------------------------
# maximal functions
# ---------------------------------------------------------------------------

def _usable(fam: BallFamily, k: int, trust: np.ndarray) -> np.ndarray:
    """Centers whose radius-k ball is unclipped and inside trusted samples."""
    masks = fam.masks(k)
    ok = ~fam.clipped[:, k]
    if not trust.all():
        ok &= ~(masks & ~trust[None, :]).any(axis=1)
    return ok


def _family_sup(f: GridFunction, fam: BallFamily, oscillation: bool):
    vals = f.values.ravel()
    absvals = np.abs(vals)
    out = np.zeros(f.domain.num_points)
    covered = np.zeros(f.domain.num_points, dtype=bool)
    trust = f.interior_mask().ravel()
    for k in range(len(fam.radii)):
        ok = _usable(fam, k, trust)
        if not ok.any():
            continue
        masks = fam.masks(k)[ok]
        counts = masks.sum(axis=1)
        if oscillation:
            avg = (masks @ vals) / counts
            stat = np.abs(vals[None, :] - avg[:, None])
            stat = np.where(masks, stat, 0.0).sum(axis=1) / counts
        else:
            stat = (masks @ absvals) / counts
        out = np.maximum(out, np.where(masks, stat[:, None], 0.0).max(axis=0))
        covered |= masks.any(axis=0)
    margin = _covering_margin(covered, f.domain)
    return GridFunction(f.domain, out.reshape(f.domain.counts),
                        max(margin, f.margin)), covered


def _covering_margin(covered: np.ndarray, domain: BoxDomain) -> int:
    """Smallest margin whose interior is entirely covered."""
    cov = covered.reshape(domain.counts)
    for m in range((min(domain.counts) - 1) // 2):
        sl = tuple(slice(m, c - m) for c in domain.counts)
        if cov[sl].all():
            return m
    raise MarginError("no interior region is covered by usable balls")


def hl_maximal(f: GridFunction, fam: BallFamily) -> GridFunction:
    """Family supremum of |f|-averages; lower-bounds the true maximal."""
    out, _ = _family_sup(f, fam, oscillation=False)
    return out


def sharp_maximal(f: GridFunction, fam: BallFamily) -> GridFunction:
    """Family supremum of mean oscillations of f."""
    out, _ = _family_sup(f, fam, oscillation=True)
    return out


def abs_power(f: GridFunction, p: float) -> GridFunction:
    return GridFunction(f.domain, np.abs(f.values) ** p, f.margin)


# ---------------------------------------------------------------------------
# VMO modulus
# ---------------------------------------------------------------------------

@dataclass
class VMOReport:
    radii: np.ndarray
    eta: np.ndarray                # nondecreasing by construction
    sup_norm: float
    fitted_slope: float | None = None   # eta(r) <= slope * r * sum||X_i f||

    def eta_at(self, R: float) -> float:
        """Modulus at the largest computed radius <= R (0 below the grid)."""
        below = self.radii <= R + 1e-12
        return float(self.eta[below][-1]) if below.any() else 0.0


def vmo_modulus(f: GridFunction, fam: BallFamily,
                grad_sup: float | None = None) -> VMOReport:
    """Supremum of mean oscillations over balls of radius <= r, per r.

    grad_sup, when given, is sum_i ||X_i f||_inf; the report then carries the
    smallest slope c with eta(r) <= c * r * grad_sup across the radius grid.
    """
    vals = f.values.ravel()
    trust = f.interior_mask().ravel()
    per_radius = np.zeros(len(fam.radii))
    for k in range(len(fam.radii)):
        ok = _usable(fam, k, trust)
        if not ok.any():
            continue
        masks = fam.masks(k)[ok]
        counts = masks.sum(axis=1)
        avg = (masks @ vals) / counts
        osc = np.where(masks, np.abs(vals[None, :] - avg[:, None]), 0.0)
        per_radius[k] = float((osc.sum(axis=1) / counts).max())
    eta = np.maximum.accumulate(per_radius)
    slope = None
    if grad_sup is not None and grad_sup > 0:
        slope = float(np.max(eta / (fam.radii * grad_sup)))
    return VMOReport(radii=fam.radii.copy(), eta=eta,
                     sup_norm=float(np.max(np.abs(vals[trust]))),
                     fitted_slope=slope)


def coefficient_sharp(reports, R: float) -> float:
    """Worst VMO modulus at scale R across a family of coefficient entries."""
    return max(rep.eta_at(R) for rep in reports)


# ---------------------------------------------------------------------------
# oscillation-inequality records
# ---------------------------------------------------------------------------

@dataclass
class OscillationRecord:
    """One sampled instance of a mean-oscillation bound.

    lhs is the mean oscillation over the ball; terms are the additive right
    hand side pieces before the structural constant, so the fitted constant
    over a sample set is max lhs / sum(terms).
    """

    lhs: float
    terms: tuple
    k: float
    p: float
    radius: float
    center_idx: int
    x0_flat: int
    skipped: bool = False
    note: str = ""

    @property
    def rhs(self) -> float:
        return float(sum(self.terms))

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs == 0 else float("inf")


def fitted_constant(records) -> float:
    """Smallest c with lhs <= c * rhs on every non-skipped record."""
    ratios = [r.ratio for r in records if not r.skipped]
    if not ratios:
        raise ValueError("all records were skipped")
    return float(max(ratios))


def mean_over(vals_flat: np.ndarray, mask: np.ndarray) -> float:
    return float(vals_flat[mask].mean())


def mean_oscillation(vals_flat: np.ndarray, mask: np.ndarray) -> float:
    sel = vals_flat[mask]
    return float(np.abs(sel - sel.mean()).mean())


def _ball_pair(fam: BallFamily, trust: np.ndarray, center_idx: int,
               r: float, k: float):
    """Masks for B_r and B_kr, or None when B_kr is unusable."""
    mask_r = fam.ball_mask(center_idx, r)
    mask_kr = fam.ball_mask(center_idx, k * r)
    if fam.is_clipped_mask(mask_kr) or np.any(mask_kr & ~trust):
        return None
    return mask_r, mask_kr


def oscillation_check_abstract(Tf: GridFunction, f: GridFunction,
                               Mf: GridFunction, fam: BallFamily,
                               center_idx: int, r: float, x0_flat: int,
                               k: float, p: float) -> OscillationRecord:
    """Oscillation of Tf over B_r against (1/k) Mf(x0) + k^{q/p} avg term.

    Mf must be the precomputed family maximal of f; x0_flat indexes a grid
    point inside B_r(center).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    trust = f.interior_mask().ravel()
    pair = _ball_pair(fam, trust, center_idx, r, k)
    if pair is None:
        return OscillationRecord(np.nan, (), k, p, r, center_idx, x0_flat,
                                 skipped=True, note="enlarged ball unusable")
    mask_r, mask_kr = pair
    if not mask_r[x0_flat]:
        raise ValueError("x0 lies outside the ball")
    lhs = mean_oscillation(Tf.values.ravel(), mask_r)
    t1 = Mf.values.ravel()[x0_flat] / k
    q = fam.q
    t2 = k ** (q / p) * mean_over(np.abs(f.values.ravel()) ** p,
                                  mask_kr) ** (1.0 / p)
    return OscillationRecord(lhs, (t1, t2), k, p, r, center_idx, x0_flat)


def oscillation_check_constant_matrix(
        second: dict, M_second: dict, LAu: GridFunction, fam: BallFamily,
        i: int, j: int, center_idx: int, r: float, x0_flat: int,
        k: float, p: float) -> OscillationRecord:
    """Oscillation of X_iX_ju against the maximal-plus-source right side.

    second maps (h, l) to the grid of X_hX_lu, M_second to its precomputed
    family maximal; LAu is the constant-matrix operator applied to u.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    trust = LAu.interior_mask().ravel()
    pair = _ball_pair(fam, trust, center_idx, r, k)
    if pair is None:
        return OscillationRecord(np.nan, (), k, p, r, center_idx, x0_flat,
                                 skipped=True, note="enlarged ball unusable")
    mask_r, mask_kr = pair
    if not mask_r[x0_flat]:
        raise ValueError("x0 lies outside the ball")
    lhs = mean_oscillation(second[(i, j)].values.ravel(), mask_r)
    t1 = sum(M_second[key].values.ravel()[x0_flat]
             for key in M_second) / k
    q = fam.q
    t2 = k ** (q / p) * mean_over(np.abs(LAu.values.ravel()) ** p,
                                  mask_kr) ** (1.0 / p)
    return OscillationRecord(lhs, (t1, t2), k, p, r, center_idx, x0_flat)


def oscillation_check_vmo(
        second: dict, M_second: dict, M_source_p: GridFunction,
        M_second_palpha: dict, a_sharp_R: float, fam: BallFamily,
        i: int, j: int, center_idx: int, r: float, x0_flat: int,
        k: float, p: float, alpha: float, beta: float) -> OscillationRecord:
    """Variable-coefficient oscillation bound with the VMO-weighted term.

    M_source_p is the family maximal of |Lu|^p; M_second_palpha maps (h, l)
    to the family maximal of |X_hX_lu|^{p*alpha}; a_sharp_R is the worst
    coefficient VMO modulus at the support scale.  For constant coefficients
    a_sharp_R = 0 and the third term vanishes identically.
    """
    if abs(1.0 / alpha + 1.0 / beta - 1.0) > 1e-12:
        raise ValueError("alpha and beta must be conjugate exponents")
    if k < 2:
        raise ValueError("k must be >= 2")
    trust = M_source_p.interior_mask().ravel()
    pair = _ball_pair(fam, trust, center_idx, r, k)
    if pair is None:
        return OscillationRecord(np.nan, (), k, p, r, center_idx, x0_flat,
                                 skipped=True, note="enlarged ball unusable")
    mask_r, _ = pair
    if not mask_r[x0_flat]:
        raise ValueError("x0 lies outside the ball")
    lhs = mean_oscillation(second[(i, j)].values.ravel(), mask_r)
    q = fam.q
    t1 = sum(M_second[key].values.ravel()[x0_flat]
             for key in M_second) / k
    t2 = k ** (q / p) * M_source_p.values.ravel()[x0_flat] ** (1.0 / p)
    t3 = k ** (q / p) * a_sharp_R ** (1.0 / (p * beta)) * sum(
        M_second_palpha[key].values.ravel()[x0_flat] ** (1.0 / (p * alpha))
        for key in M_second_palpha)
    return OscillationRecord(lhs, (t1, t2, t3), k, p, r, center_idx, x0_flat)


def sample_balls(fam: BallFamily, r: float, k: float,
                 trust: np.ndarray | None = None, limit: int | None = None):
    """(center_idx, x0_flat) pairs whose kr-enlargement is usable."""
    if trust is None:
        trust = np.ones(fam.domain.num_points, dtype=bool)
    out = []
    for ci in range(fam.num_centers):
        pair = _ball_pair(fam, trust, ci, r, k)
        if pair is None:
            continue
        mask_r, _ = pair
        x0 = int(np.flatnonzero(mask_r)[0])
        out.append((ci, x0))
        if limit is not None and len(out) >= limit:
            break
    return out
