"""Truncated singular kernels built from the lifted fundamental solution.

The objects here live on the grushin(1) base plane.  Second derivatives of
the lifted fundamental solution give a kernel that is homogeneous of degree
-Q on the group; integrating the fiber variable against a smooth annular
cutoff produces the truncated kernel K_{eps,R}(x, y) on the plane.  The
module also measures the two structural facts the estimates depend on:

* cancellation: the kernel has vanishing mean on homogeneous-norm shells;
* the local constant c_ij, computed both as a boundary flux across the unit
  shell and as a volume integral over a collar (divergence theorem makes
  the two agree, and the comparison is the correctness check).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import sympy as sp

from .liftgroup import (CarnotLift, GrushinGamma, HeisenbergGamma, _H_SYMS,
                        _B_SYMS, _graded_nodes_2d, base_operator_expr,
                        calibrate_equivalence, grushin_gamma,
                        heisenberg_gamma, lift_grushin1,
                        normalization_constant, poly_to_sympy)

_SQRT_EPS = 1e-300


def smoothstep(t):
    """Quintic smoothstep: 0 below 0, 1 above 1, C^2 in between."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def smoothstep_expr(t):
    ts = sp.Min(sp.Max(t, 0), 1)
    return ts ** 3 * (6 * ts ** 2 - 15 * ts + 10)


def _norm_quartic(u):
    """s(u) = u1^4 + u2^2 + u3^4; the homogeneous norm is s^{1/4}."""
    return u[..., 0] ** 4 + u[..., 1] ** 2 + u[..., 2] ** 4


@dataclass(frozen=True)
class CutoffProfile:
    """Annular cutoff psi(u) = phi(gamma2 * ||u||): 1 on [eps, R] in the
    scaled norm, 0 outside [eps/2, 2R], with quintic transitions.

    The transitions are taken in s = ||u||^4, which is a polynomial in u, so
    psi is smooth everywhere including the origin.
    """

    eps: float
    R: float
    gamma2: float

    def __post_init__(self):
        if not 0 < self.eps < self.R:
            raise ValueError("need 0 < eps < R")

    @property
    def support_radius(self) -> float:
        """||u|| bound of the support; also bounds the fiber coordinate."""
        return 2.0 * self.R / self.gamma2

    def _edges(self):
        g = self.gamma2
        return ((self.eps / (2 * g)) ** 4, (self.eps / g) ** 4,
                (self.R / g) ** 4, (2 * self.R / g) ** 4)

    def __call__(self, u) -> np.ndarray:
        return self.radial_quartic(_norm_quartic(np.asarray(u, dtype=float)))

    def radial_quartic(self, s) -> np.ndarray:
        """Profile as a function of ||u||^4."""
        s0, s1, s2, s3 = self._edges()
        rise = smoothstep((s - s0) / (s1 - s0))
        fall = 1.0 - smoothstep((s - s2) / (s3 - s2))
        return rise * fall


class TruncatedKernel:
    """K_{eps,R}(x, y) = int (Y_i Y_j Gamma . psi)((y,eta)^{-1} (x,0)) deta."""

    def __init__(self, i: int, j: int, eps: float, R: float, A=None,
                 eta_nodes: int = 192):
        self.i, self.j = i, j
        self.tilde = heisenberg_gamma(A)
        self.lift = self.tilde.lift
        eq = calibrate_equivalence(self.lift)
        self.gamma2 = eq.gamma2
        self.profile = CutoffProfile(eps, R, self.gamma2)
        self.eps, self.R = eps, R
        self._fn = self.tilde.word_fn((i, j))
        self._c0 = normalization_constant()
        self.eta_nodes = eta_nodes

    def _arg(self, x, y, eta):
        """(y, eta)^{-1} * (x, 0) for base points, broadcast over eta."""
        x1 = x[..., 0][..., None]
        x2 = x[..., 1][..., None]
        y1 = y[..., 0][..., None]
        y2 = y[..., 1][..., None]
        return np.stack(np.broadcast_arrays(
            x1 - y1, x2 - y2 + y1 * eta, -eta + 0.0 * x1), axis=-1)

    def __call__(self, x, y) -> np.ndarray:
        """The fiber integral uses eta = s tan(theta) with s matched to the
        horizontal displacement, so near-diagonal pairs stay resolved; the
        cutoff truncates the line to a compact set."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dx = np.stack(np.broadcast_arrays(
            y[..., 0] - x[..., 0], y[..., 1] - x[..., 1],
            0.0 * (y[..., 0] + x[..., 0])), axis=-1)
        s = np.maximum(self.lift.hom_norm(dx),
                       self.eps / (2 * self.gamma2))[..., None]
        M = self.eta_nodes
        theta = (np.arange(M) + 0.5) / M * np.pi - np.pi / 2
        dtheta = np.pi / M
        eta = s * np.tan(theta)
        jac = s / np.cos(theta) ** 2
        z = self._arg(x, y, eta)
        vals = self._c0 * np.asarray(
            self._fn(z[..., 0], z[..., 1], z[..., 2]), dtype=float)
        vals = vals * self.profile(z)
        return np.sum(vals * jac, axis=-1) * dtheta


def graded_nodes_aniso(center, half_widths, cells_per_axis,
                       levels: int, shrinks) -> tuple:
    """Midpoint cubature with nested anisotropic refinement around `center`.

    Each level's box and step shrink by the per-axis factors, so the fine
    cells stay shaped like the kernel's anisotropy (weight-2 axes shrink
    quadratically faster).  The innermost central cell is dropped.
    """
    center = np.asarray(center, dtype=float)
    half = np.asarray(half_widths, dtype=float)
    shr = np.asarray(shrinks, dtype=float)
    dim = half.size
    cells = np.broadcast_to(np.asarray(cells_per_axis, dtype=int), (dim,))
    nodes, weights = [], []
    for lev in range(levels + 1):
        step = 2 * half / cells
        axes = [-half[k] + (np.arange(cells[k]) + 0.5) * step[k]
                for k in range(dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        if lev < levels:
            hole = np.all(np.abs(pts) < (half / shr) - 1e-15, axis=1)
            pts = pts[~hole]
        else:
            mid = np.all(np.abs(pts) < 0.5 * step, axis=1)
            pts = pts[~mid]
        nodes.append(pts)
        weights.append(np.full(pts.shape[0], float(np.prod(step))))
        half = half / shr
    return np.concatenate(nodes) + center, np.concatenate(weights)


def kernel_signed_and_abs_integral(kernel: TruncatedKernel, x,
                                   levels: int | None = None) -> tuple:
    """(int K(x,y) dy, int |K(x,y)| dy) over an anisotropic graded grid.

    The grid covers the kernel support and refines toward x with cells
    shaped (r, r^2), matching the degenerate direction at the diagonal.
    """
    x = np.asarray(x, dtype=float)
    Lam = kernel.profile.support_radius
    if levels is None:
        # grade until the innermost box is below the inner cutoff edge
        inner = kernel.eps / (2.0 * kernel.gamma2)
        levels = max(4, int(math.ceil(math.log(Lam / inner) / math.log(4.0))) + 1)
    half = (1.2 * Lam, 1.2 * max(Lam, Lam ** 2))
    ys, wts = graded_nodes_aniso(x, half, 48, levels, (4.0, 16.0))
    vals = kernel(x, ys)
    return (float(np.sum(wts * vals)), float(np.sum(wts * np.abs(vals))))


def log_growth_fit(i: int, j: int, x, R: float, A=None,
                   eps_ladder=None) -> tuple:
    """Fit int |K_{eps,R}| dy against log(1/eps).

    Returns (slope, r_squared, signed_over_abs) where signed_over_abs is the
    largest |signed integral| / |abs integral| across the ladder (the
    boundedness half of the cancellation statement).
    """
    if eps_ladder is None:
        eps_ladder = [R / 2 ** k for k in range(1, 6)]
    logs, absvals, ratio = [], [], 0.0
    for eps in eps_ladder:
        k = TruncatedKernel(i, j, eps, R, A)
        s, a = kernel_signed_and_abs_integral(k, x)
        logs.append(math.log(1.0 / eps))
        absvals.append(a)
        ratio = max(ratio, abs(s) / a)
    t = np.array(logs)
    v = np.array(absvals)
    A_ = np.stack([t, np.ones_like(t)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A_, v, rcond=None)
    ss_tot = float(np.sum((v - v.mean()) ** 2))
    ss_res = float(np.sum((v - A_ @ coef) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    return float(coef[0]), float(r2), float(ratio)


# ---------------------------------------------------------------------------
# surface and shell quadrature on homogeneous-norm spheres
# ---------------------------------------------------------------------------

def _sphere_directions(n_theta: int = 48, n_phi: int = 96) -> tuple:
    """Product rule on the Euclidean S^2; the weight-2 axis is polar."""
    mu, wmu = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) / n_phi * 2 * np.pi
    MU, PHI = np.meshgrid(mu, phi, indexing="ij")
    W = np.broadcast_to(wmu[:, None], MU.shape) * (2 * np.pi / n_phi)
    sin_t = np.sqrt(1.0 - MU ** 2)
    omega = np.stack([sin_t * np.cos(PHI), MU, sin_t * np.sin(PHI)], axis=-1)
    return omega.reshape(-1, 3), W.ravel()


def _radial_stretch(omega: np.ndarray, r: float) -> np.ndarray:
    """t with ||t omega|| = r: solves a t^4 + b t^2 = r^4 in closed form."""
    a = omega[..., 0] ** 4 + omega[..., 2] ** 4
    b = omega[..., 1] ** 2
    r4 = r ** 4
    with np.errstate(divide="ignore", invalid="ignore"):
        t2 = np.where(a > 1e-14,
                      (-b + np.sqrt(b ** 2 + 4 * a * r4)) / (2 * a + _SQRT_EPS),
                      r4 / np.maximum(b, 1e-14))
    return np.sqrt(t2)


_SURFACE_CACHE: dict = {}


def surface_nodes(r: float, n_theta: int = 48, n_phi: int = 96) -> tuple:
    """Nodes u, Euclidean surface weights, unit normals, |grad N| on {N=r}.

    For a star-shaped surface u = t(omega) omega the Euclidean surface
    measure satisfies dS (nu . omega_hat) = t^2 dOmega.
    """
    key = (round(r, 14), n_theta, n_phi)
    if key in _SURFACE_CACHE:
        return _SURFACE_CACHE[key]
    omega, w = _sphere_directions(n_theta, n_phi)
    t = _radial_stretch(omega, r)
    u = t[:, None] * omega
    grad_s = np.stack([4 * u[:, 0] ** 3, 2 * u[:, 1], 4 * u[:, 2] ** 3],
                      axis=-1)
    grad_norm = np.linalg.norm(grad_s, axis=-1)
    nu = grad_s / grad_norm[:, None]
    cosang = np.einsum("ij,ij->i", nu, omega)
    w_surf = w * t ** 2 / cosang
    grad_N = grad_norm / (4.0 * r ** 3)
    out = (u, w_surf, nu, grad_N)
    _SURFACE_CACHE[key] = out
    return out


def surface_integral(fn, r: float, **kw) -> float:
    u, w, nu, _ = surface_nodes(r, **kw)
    return float(np.sum(w * fn(u, nu)))


def flux_constant(i: int, j: int, A=None, r: float = 1.0) -> float:
    """c_ij as the flux int_{||u||=r} (Y_j Gamma)(u) <Y_i(u), nu> dS.

    Independent of r by homogeneity; evaluating at two radii is the
    cutoff-independence check.
    """
    tilde = heisenberg_gamma(A)
    lift = tilde.lift
    fn_j = tilde.word_fn((j,))
    c0 = normalization_constant()

    def integrand(u, nu):
        f = c0 * np.asarray(fn_j(u[:, 0], u[:, 1], u[:, 2]), dtype=float)
        Yi = lift.fields[i].value(u)
        return f * np.einsum("ij,ij->i", Yi, nu)

    return surface_integral(integrand, r)


def _shell_coarea(fn_vals_at, r0: float, r1: float, n_r: int = 16,
                  **kw) -> float:
    """int_{r0 < ||v|| < r1} f dv via the co-area formula."""
    xr, wr = np.polynomial.legendre.leggauss(n_r)
    rs = 0.5 * (r1 - r0) * xr + 0.5 * (r1 + r0)
    ws = 0.5 * (r1 - r0) * wr
    total = 0.0
    for r, w in zip(rs, ws):
        u, w_surf, _, grad_N = surface_nodes(float(r), **kw)
        total += w * float(np.sum(w_surf * fn_vals_at(u) / grad_N))
    return total


def shell_constant(i: int, j: int, A=None, r0: float = 0.5,
                   r1: float = 1.0, profile: str = "quintic") -> float:
    """c_ij as a collar volume integral of Y_i(omega(||v||) Y_j Gamma).

    omega is a step rising from 0 at r0 to 1 at r1, so by the divergence
    theorem this equals the boundary flux at r1; any C^1 ramp is
    admissible, and evaluating with two different ones is the
    cutoff-independence check.  The derivative is taken symbolically and
    the integral by co-area.
    """
    tilde = heisenberg_gamma(A)
    lift = tilde.lift
    x1, x2, x3 = _H_SYMS
    N_expr = (x1 ** 4 + x2 ** 2 + x3 ** 4) ** sp.Rational(1, 4)
    t = (N_expr - r0) / (r1 - r0)
    if profile == "quintic":
        omega = smoothstep_expr(t)
    elif profile == "cosine":
        omega = (1 - sp.cos(sp.pi * sp.Min(sp.Max(t, 0), 1))) / 2
    else:
        raise ValueError(f"unknown profile {profile!r}")
    inner = omega * lift.apply_word(tilde.expr_unit, (j,), _H_SYMS)
    expr = lift.apply_field(inner, i, _H_SYMS)
    fn = sp.lambdify(_H_SYMS, expr, modules="numpy")
    c0 = normalization_constant()

    def vals(u):
        return c0 * np.asarray(fn(u[:, 0], u[:, 1], u[:, 2]), dtype=float)

    return _shell_coarea(vals, r0, r1)


def cancellation_metric(i: int, j: int, A=None, r0: float = 0.5,
                        r1: float = 1.0) -> float:
    """|shell mean| / shell mean of |.| for the kernel Y_i Y_j Gamma."""
    tilde = heisenberg_gamma(A)
    fn = tilde.word_fn((i, j))
    c0 = normalization_constant()

    def signed(u):
        return c0 * np.asarray(fn(u[:, 0], u[:, 1], u[:, 2]), dtype=float)

    def absval(u):
        return np.abs(signed(u))

    num = abs(_shell_coarea(signed, r0, r1))
    den = _shell_coarea(absval, r0, r1)
    return num / den


# ---------------------------------------------------------------------------
# the operator and the second-derivative representation
# ---------------------------------------------------------------------------

def apply_T(kernel: TruncatedKernel, x, ys, wts, fvals) -> float:
    """T f(x) = int K(x, y) f(y) dy over the supplied cubature."""
    vals = kernel(np.asarray(x, dtype=float), ys)
    return float(np.sum(wts * vals * fvals))


def base_field_expr(f: sp.Expr, k: int) -> sp.Expr:
    """X_k applied to f(y1, y2) for the grushin(1) generators."""
    y1, y2 = _B_SYMS
    return sp.diff(f, y1) if k == 0 else y1 * sp.diff(f, y2)


def representation_residual(i: int, j: int, A, u_expr: sp.Expr, xs,
                            eps: float = 0.1, R: float = 20.0,
                            levels: int = 6, cells: int = 64) -> float:
    """Relative residual of X_i X_j u = T_{eps,R}(Lu) + c_ij Lu.

    The operator integral is evaluated in lifted coordinates: substituting
    (y, eta) = (x, 0) * v^{-1} turns T(Lu)(x) into an integral of the fixed
    singular kernel (Y_i Y_j Gamma . psi)(v) against Lu(pi((x,0) v^{-1})),
    so the anisotropic grading can be centered once at v = 0.
    """
    Amat = np.eye(2) if A is None else np.asarray(A, dtype=float)
    F_fn = sp.lambdify(_B_SYMS, base_operator_expr(Amat, u_expr), "numpy")
    target_fn = sp.lambdify(
        _B_SYMS, base_field_expr(base_field_expr(u_expr, j), i), "numpy")
    kernel = TruncatedKernel(i, j, eps, R, A)
    cij = flux_constant(i, j, A)
    c0 = normalization_constant()
    Lam = kernel.profile.support_radius
    half = (1.05 * Lam, 1.05 * max(Lam, Lam ** 2), 1.05 * Lam)
    vs, wts = graded_nodes_aniso((0.0, 0.0, 0.0), half,
                                 (cells, 2 * cells, cells), levels,
                                 (4.0, 16.0, 4.0))
    Kv = c0 * np.asarray(
        kernel._fn(vs[:, 0], vs[:, 1], vs[:, 2]), dtype=float)
    Kv = Kv * kernel.profile(vs)
    vinv = kernel.lift.inverse(vs)
    targets, preds = [], []
    for x in np.atleast_2d(np.asarray(xs, dtype=float)):
        y_lift = kernel.lift.multiply(np.array([x[0], x[1], 0.0]), vinv)
        Fv = np.asarray(F_fn(y_lift[:, 0], y_lift[:, 1]), dtype=float)
        Tv = float(np.sum(wts * Kv * Fv))
        preds.append(Tv + cij * float(F_fn(*x)))
        targets.append(float(target_fn(*x)))
    targets = np.array(targets)
    preds = np.array(preds)
    scale = np.max(np.abs(targets))
    return float(np.max(np.abs(preds - targets)) / scale)


# ---------------------------------------------------------------------------
# the saturated base kernel and its standard estimates
# ---------------------------------------------------------------------------

def kernel_eval(i: int, j: int, x, y, A=None) -> float:
    """Base singular kernel K(x, y) = X_i X_j Gamma_A(x; y), x != y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.allclose(x, y):
        raise ValueError("kernel is singular on the diagonal")
    return float(grushin_gamma(A).x_derivative((i, j), x, y))


def _metric_sample(centers, domain, cfg=None):
    """Base grushin metric with distance fields from the given centers."""
    from .fields import grushin
    from .geometry import CCGraphConfig, get_metric
    sys_ = grushin(1)
    m = get_metric(sys_, domain, cfg or CCGraphConfig())
    fields = m.distance_fields(centers)
    return m, fields


@dataclass
class StandardEstimateFit:
    constant: float        # fitted bound (max of the normalized samples)
    median: float
    samples: int
    skipped: int           # pairs dropped for clipped balls or tiny distances


def standard_estimate_fit(i: int, j: int, A=None, n_centers: int = 20,
                          per_center: int = 15, seed: int = 5,
                          domain=None) -> StandardEstimateFit:
    """Fit of the size estimate |K(x,y)| * |B(x, d(x,y))| <= A_fit.

    Samples pairs at a spread of distances and normalizes the kernel by the
    ball volume at the pair's distance; the fitted constant is the sample
    maximum.  Pairs whose ball would be clipped by the box are skipped and
    counted.
    """
    from .domain import BoxDomain
    rng = np.random.default_rng(seed)
    if domain is None:
        domain = BoxDomain((-2.0, -2.0), (2.0, 2.0), (81, 81))
    centers = rng.uniform(-0.6, 0.6, size=(n_centers, 2))
    m, dfields = _metric_sample(centers, domain)
    counts = domain.counts
    G = grushin_gamma(A)
    vals, skipped = [], 0
    for c, df in zip(centers, dfields):
        dgrid = df.reshape(counts)
        for _ in range(per_center):
            y = c + rng.uniform(-0.8, 0.8, size=2)
            if not domain.contains(y):
                skipped += 1
                continue
            d = m.interpolate(df, y)
            if d < 4 * m.tau or d > 1e17:
                skipped += 1
                continue
            inside = dgrid < d
            from .geometry import _touches_boundary
            if _touches_boundary(inside):
                skipped += 1
                continue
            volB = float(np.count_nonzero(inside)) * domain.cell_volume
            K = float(G.x_derivative((i, j), c, y))
            vals.append(abs(K) * volB)
    vals = np.array(vals)
    return StandardEstimateFit(constant=float(vals.max()),
                               median=float(np.median(vals)),
                               samples=int(vals.size), skipped=skipped)


def mean_value_fit(i: int, j: int, A=None, n_centers: int = 12,
                   per_center: int = 10, seed: int = 6,
                   domain=None) -> StandardEstimateFit:
    """Fit of the smoothness estimate for the base kernel.

    For triples with d(x0, y) >= 2 d(x0, x):
    |K(x,y) - K(x0,y)| <= B_fit * (d(x0,x) / d(x0,y)) / |B(x0, d(x0,y))|.
    """
    from .domain import BoxDomain
    from .geometry import _touches_boundary
    rng = np.random.default_rng(seed)
    if domain is None:
        domain = BoxDomain((-2.0, -2.0), (2.0, 2.0), (81, 81))
    centers = rng.uniform(-0.5, 0.5, size=(n_centers, 2))
    m, dfields = _metric_sample(centers, domain)
    counts = domain.counts
    G = grushin_gamma(A)
    vals, skipped = [], 0
    for x0, df in zip(centers, dfields):
        dgrid = df.reshape(counts)
        for _ in range(per_center):
            x = x0 + rng.uniform(-0.08, 0.08, size=2)
            y = x0 + rng.uniform(-0.8, 0.8, size=2)
            if not (domain.contains(x) and domain.contains(y)):
                skipped += 1
                continue
            dxx = m.interpolate(df, x)
            dxy = m.interpolate(df, y)
            if dxy < max(2 * dxx, 6 * m.tau) or dxx < m.tau:
                skipped += 1
                continue
            inside = dgrid < dxy
            if _touches_boundary(inside):
                skipped += 1
                continue
            volB = float(np.count_nonzero(inside)) * domain.cell_volume
            dK = abs(float(G.x_derivative((i, j), x, y)) -
                     float(G.x_derivative((i, j), x0, y)))
            vals.append(dK * (dxy / dxx) * volB)
    vals = np.array(vals)
    return StandardEstimateFit(constant=float(vals.max()),
                               median=float(np.median(vals)),
                               samples=int(vals.size), skipped=skipped)


def base_shell_integral(i: int, j: int, z, r0: float, r1: float, A=None,
                        domain=None) -> float:
    """|int_{r0 < d(z,y) < r1} K(z, y) dy| on the grid, diagonal excluded.

    z is snapped to a grid node; the cell containing z is excluded and
    symmetric cell pairs (y, 2z - y) are summed together first, which
    cancels the odd part of the discretization error near the pole.
    """
    from .domain import BoxDomain
    from .geometry import CCGraphConfig, cached_distance_field, get_metric
    from .fields import grushin
    if domain is None:
        domain = BoxDomain((-2.0, -2.0), (2.0, 2.0), (81, 81))
    if r1 <= r0:
        return 0.0
    m = get_metric(grushin(1), domain, CCGraphConfig())
    iz = np.array(domain.index_of(z))
    z = domain.point_at(int(np.ravel_multi_index(tuple(iz), domain.counts)))
    dist = cached_distance_field(m, z)
    mask = (dist > r0) & (dist < r1)
    mask[np.ravel_multi_index(tuple(iz), domain.counts)] = False
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return 0.0
    multi = np.stack(np.unravel_index(idx, domain.counts), axis=1)
    refl = 2 * iz[None, :] - multi
    counts = np.array(domain.counts)
    ok = np.all((refl >= 0) & (refl < counts), axis=1)
    refl_flat = np.full(idx.size, -1)
    refl_flat[ok] = np.ravel_multi_index(tuple(refl[ok].T), domain.counts)
    pts = domain.points()[idx]
    G = grushin_gamma(A)
    K = np.array([float(G.x_derivative((i, j), z, y)) for y in pts])
    flat_to_pos = {f: p for p, f in enumerate(idx)}
    total, used = 0.0, np.zeros(idx.size, dtype=bool)
    for p in range(idx.size):
        if used[p]:
            continue
        q = flat_to_pos.get(refl_flat[p], -1)
        if q >= 0 and not used[q] and mask[refl_flat[p]]:
            total += K[p] + K[q]
            used[p] = used[q] = True
        else:
            total += K[p]
            used[p] = True
    return abs(total * domain.cell_volume)


def shell_bound_fit(i: int, j: int, A=None, domain=None) -> float:
    """Fitted uniform bound on base-shell integrals over a (z, r0, r1) sweep."""
    zs = [(0.0, 0.0), (0.45, 0.3), (-0.3, 0.55), (0.6, -0.4)]
    shells = [(0.15, 0.3), (0.2, 0.6), (0.35, 0.7)]
    best = 0.0
    for z in zs:
        for r0, r1 in shells:
            best = max(best, base_shell_integral(i, j, z, r0, r1, A,
                                                 domain=domain))
    return best


def smoothed_vs_singular(i: int, j: int, eps: float, R: float, A=None,
                         pairs=None) -> float:
    """Worst relative gap between K_{eps,R} and K well inside the cutoff.

    The outer cutoff removes the fiber tail beyond hom norm R/gamma2, which
    contributes a relative error on the order of (d gamma2 / R)^3 to the
    saturated kernel; the window therefore requires 2 eps gamma2 < d(x,y) <
    R / (6 gamma2), where that bound sits below the agreement tolerance.
    Near oscillation zeros of K a pointwise quotient is meaningless, so the
    denominator is floored at a tenth of the sample median magnitude (the
    zeros themselves are exercised by the cancellation metric).
    """
    kernel = TruncatedKernel(i, j, eps, R, A)
    eq = calibrate_equivalence(kernel.lift)
    G = grushin_gamma(A)
    if pairs is None:
        rng = np.random.default_rng(17)
        pairs = [(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
                 for _ in range(40)]
    from .domain import BoxDomain
    xs = [np.asarray(x, dtype=float) for x, _ in pairs]
    metric, dgrids = _metric_sample(xs, BoxDomain((-1.5, -1.5), (1.5, 1.5),
                                                 (61, 61)))
    triples = []
    for (x, y), dgrid in zip(pairs, dgrids):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        d = float(metric.interpolate(dgrid, y))
        if not (2 * eps * eq.gamma2 < d < R / (6 * eq.gamma2)):
            continue
        triples.append((float(kernel(x, y)),
                        float(G.x_derivative((i, j), x, y))))
    if not triples:
        raise ValueError("no sample pair lies in the agreement window")
    floor = 0.1 * float(np.median([abs(ke) for _, ke in triples]))
    return max(abs(ks - ke) / max(abs(ke), floor) for ks, ke in triples)


def lifted_abs_integral(i: int, j: int, eps: float, R: float, A=None,
                        n_log: int = 48) -> float:
    """int over R^3 of |Y_i Y_j Gamma . psi_{eps,R}|, by co-area shells.

    The shell integral of |kernel| at norm r is exactly c / r by
    homogeneity, so the radial integral is done in log r, where the
    integrand is the smooth cutoff profile times a constant.
    """
    tilde = heisenberg_gamma(A)
    fn = tilde.word_fn((i, j))
    c0 = normalization_constant()
    profile = CutoffProfile(eps, R, calibrate_equivalence(tilde.lift).gamma2)
    r_lo = eps / (2.0 * profile.gamma2)
    r_hi = profile.support_radius
    # r * (shell integral of |kernel| at norm r) is an r-independent
    # constant by homogeneity; evaluate it once on the unit shell, where
    # the star-shaped surface rule is accurate, then integrate the radial
    # profile in log r.
    u, w_surf, _, grad_N = surface_nodes(1.0)
    g1 = float(np.sum(w_surf * np.abs(
        c0 * np.asarray(fn(u[:, 0], u[:, 1], u[:, 2]), dtype=float))
        / grad_N))
    xg, wg = np.polynomial.legendre.leggauss(n_log)
    tmid = 0.5 * (math.log(r_hi) + math.log(r_lo))
    thalf = 0.5 * (math.log(r_hi) - math.log(r_lo))
    rs = np.exp(tmid + thalf * xg)
    return g1 * float(np.sum(thalf * wg * profile.radial_quartic(rs ** 4)))


def log_growth_grid(i: int, j: int, x, eps_list=(0.02, 0.05, 0.1),
                    R_list=(0.5, 1.0, 2.0), A=None) -> tuple:
    """Fit the lifted integral = a + C log(R/eps) over the (eps, R) grid.

    Saturating the absolute value over the fiber dominates the base
    integral int |K_{eps,R}(x, .)| dy, which is also evaluated and checked
    against the bound pointwise in the sweep.  Returns (C, r_squared,
    worst signed/abs ratio of the base integral, worst base/lifted ratio).
    """
    logs, lifted, ratio, base_over = [], [], 0.0, 0.0
    for R in R_list:
        for eps in eps_list:
            k = TruncatedKernel(i, j, eps, R, A)
            s, a = kernel_signed_and_abs_integral(k, x)
            L = lifted_abs_integral(i, j, eps, R, A)
            logs.append(math.log(R / eps))
            lifted.append(L)
            ratio = max(ratio, abs(s) / a)
            base_over = max(base_over, a / L)
    t = np.array(logs)
    v = np.array(lifted)
    M = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(M, v, rcond=None)
    ss_tot = float(np.sum((v - v.mean()) ** 2))
    ss_res = float(np.sum((v - M @ coef) ** 2))
    return (float(coef[0]), 1.0 - ss_res / ss_tot, float(ratio),
            float(base_over))


# ---------------------------------------------------------------------------
# the operator on grid functions
# ---------------------------------------------------------------------------

def _support_extent(kernel: TruncatedKernel, y1_max: float) -> tuple:
    """Half-widths (in x1, x2) of {x : K(x,y) != 0} around a support point.

    The cutoff kills the integrand once ||u|| exceeds 2R/gamma2 with
    u = (x1-y1, x2-y2+y1 eta, -eta), so |eta| is bounded by the same radius
    and the x2 reach picks up a |y1| eta cross term.
    """
    rad = kernel.profile.support_radius
    return rad, rad ** 2 + y1_max * rad


def operator_matrix(kernel: TruncatedKernel, domain, support_idx,
                    out_idx=None, chunk: int = 256) -> np.ndarray:
    """Dense matrix of K_{eps,R}(x_a, y_b) over grid nodes, (out, support)."""
    pts = domain.points()
    ys = pts[support_idx]
    xs = pts if out_idx is None else pts[out_idx]
    out = np.empty((xs.shape[0], ys.shape[0]))
    for a in range(0, xs.shape[0], chunk):
        xa = xs[a:a + chunk]
        out[a:a + chunk] = kernel(xa[:, None, :], ys[None, :, :])
    return out


def apply_T_grid(kernel: TruncatedKernel, f) -> "object":
    """T_{eps,R} f on the grid of f; f must vanish near the boundary.

    The support of f, fattened by the kernel's reach, must stay inside the
    box; otherwise the discrete integral silently loses mass, so this is a
    hard error.
    """
    from .domain import GridFunction, MarginError
    dom = f.domain
    nz = np.flatnonzero(np.abs(f.values.ravel()) > 0)
    if nz.size == 0:
        return GridFunction(dom, np.zeros(dom.counts), f.margin)
    pts = dom.points()
    supp = pts[nz]
    ex1, ex2 = _support_extent(kernel, float(np.abs(supp[:, 0]).max()))
    lo = supp.min(axis=0) - (ex1, ex2)
    hi = supp.max(axis=0) + (ex1, ex2)
    if np.any(lo < np.array(dom.lower)) or np.any(hi > np.array(dom.upper)):
        raise MarginError("kernel support of T f would leave the box")
    M = operator_matrix(kernel, dom, nz)
    vals = (M @ f.values.ravel()[nz]) * dom.cell_volume
    return GridFunction(dom, vals.reshape(dom.counts), f.margin)


def grid_interpolate(f, pts) -> np.ndarray:
    """Bilinear values of a GridFunction at points; zero outside the box."""
    dom = f.domain
    pts = np.asarray(pts, dtype=float)
    rel = (pts - np.array(dom.lower)) / dom.spacing
    counts = np.array(dom.counts)
    inside = np.all((rel >= 0) & (rel <= counts - 1), axis=-1)
    base = np.clip(np.floor(rel).astype(int), 0, counts - 2)
    frac = rel - base
    out = np.zeros(pts.shape[:-1])
    flat = f.values.ravel()
    import itertools as _it
    for off in _it.product((0, 1), repeat=dom.dim):
        corner = base + np.array(off)
        w = np.ones(pts.shape[:-1])
        for k in range(dom.dim):
            w = w * (frac[..., k] if off[k] else 1.0 - frac[..., k])
        out += w * flat[np.ravel_multi_index(
            tuple(np.moveaxis(corner, -1, 0)), dom.counts)]
    return np.where(inside, out, 0.0)


def _interp2_flat(f, y1, y2) -> np.ndarray:
    """Bilinear interpolation on a 2-D GridFunction, zero outside the box."""
    dom = f.domain
    h = dom.spacing
    c0, c1 = dom.counts
    r1 = (y1 - dom.lower[0]) / h[0]
    r2 = (y2 - dom.lower[1]) / h[1]
    inside = (r1 >= 0) & (r1 <= c0 - 1) & (r2 >= 0) & (r2 <= c1 - 1)
    r1 = np.clip(r1, 0.0, c0 - 1 - 1e-9)
    r2 = np.clip(r2, 0.0, c1 - 1 - 1e-9)
    b1 = r1.astype(np.int64)
    b2 = r2.astype(np.int64)
    f1 = r1 - b1
    f2 = r2 - b2
    flat = f.values.ravel()
    base = b1 * c1 + b2
    v = ((1 - f1) * ((1 - f2) * flat[base] + f2 * flat[base + 1]) +
         f1 * ((1 - f2) * flat[base + c1] + f2 * flat[base + c1 + 1]))
    return v * inside


def apply_T_quadrature(kernel: TruncatedKernel, f, out_points,
                       levels: int = 4, cells: int = 16) -> np.ndarray:
    """T f at the given points by graded quadrature in lifted coordinates.

    Substituting v = (y, eta)^{-1} (x, 0) moves the singularity to a fixed
    point, T f(x) = int (K~ psi)(v) f(pi((x,0) v^{-1})) dv, so one set of
    anisotropically graded nodes serves every x; a uniform y-grid sum
    cannot do this, because the near-diagonal mass lives at scale eps.
    """
    Lam = kernel.profile.support_radius
    half = (1.05 * Lam, 1.05 * max(Lam, Lam ** 2), 1.05 * Lam)
    vs, wts = graded_nodes_aniso((0.0, 0.0, 0.0), half,
                                 (cells, 2 * cells, cells), levels,
                                 (4.0, 16.0, 4.0))
    Kv = kernel._c0 * np.asarray(
        kernel._fn(vs[:, 0], vs[:, 1], vs[:, 2]), dtype=float)
    Kv = Kv * kernel.profile(vs) * wts
    # base projection of (x1, x2, 0) * v^{-1} written out from the group
    # law: y1 = x1 - v1, y2 = x2 - v2 + v1 v3 - x1 v3
    b_add = -vs[:, 1] + vs[:, 0] * vs[:, 2]
    c_mul = -vs[:, 2]
    out_points = np.asarray(out_points, dtype=float)
    out = np.empty(len(out_points))
    chunk = max(1, int(4e7) // max(len(vs), 1))
    for a in range(0, len(out_points), chunk):
        x1 = out_points[a:a + chunk, 0][:, None]
        x2 = out_points[a:a + chunk, 1][:, None]
        y1 = x1 - vs[None, :, 0]
        y2 = x2 + b_add[None, :] + x1 * c_mul[None, :]
        out[a:a + chunk] = _interp2_flat(f, y1, y2) @ Kv
    return out


def lp_ratio_sweep(i: int, j: int, test_functions,
                   eps_list=(0.02, 0.05, 0.1), R_list=(0.5, 1.0, 2.0),
                   p_list=(1.5, 2.0, 3.0), A=None, stride: int = 4) -> dict:
    """max_f ||T f||_p / ||f||_p for each (eps, R, p) cell of the sweep.

    T f is sampled on a strided subgrid of each f's domain and the norms
    are Riemann sums there; the quadrature nodes are built once per
    (eps, R) and the p loop reuses the images.
    """
    out = {}
    for R in R_list:
        for eps in eps_list:
            kernel = TruncatedKernel(i, j, eps, R, A)
            images = []
            for f in test_functions:
                dom = f.domain
                sub = tuple(np.arange(0, c, stride) for c in dom.counts)
                mesh = np.meshgrid(*[np.asarray(dom.axes()[k])[sub[k]]
                                     for k in range(dom.dim)], indexing="ij")
                pts = np.stack([m.ravel() for m in mesh], axis=-1)
                Tf = apply_T_quadrature(kernel, f, pts)
                cell = float(np.prod(dom.spacing * stride))
                fvals = f.values[np.ix_(*sub)].ravel()
                images.append((fvals, Tf, cell))
            for p in p_list:
                best = 0.0
                for fvals, Tf, cell in images:
                    nf = float((np.sum(np.abs(fvals) ** p) * cell) ** (1 / p))
                    nT = float((np.sum(np.abs(Tf) ** p) * cell) ** (1 / p))
                    if nf > 0:
                        best = max(best, nT / nf)
                out[(eps, R, p)] = best
    return out


def representation_ladder(i: int, j: int, A, u_expr: sp.Expr, xs,
                          ladder=((0.4, 5.0), (0.2, 10.0), (0.1, 20.0)),
                          levels: int = 6, cells: int = 64) -> list:
    """Residuals of the second-derivative representation along eps down,
    R up; the sequence should decrease toward the quadrature floor."""
    return [representation_residual(i, j, A, u_expr, xs, eps=eps, R=R,
                                    levels=levels, cells=cells)
            for eps, R in ladder]
