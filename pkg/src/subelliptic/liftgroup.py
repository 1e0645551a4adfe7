"""Nilpotent group lifts of homogeneous vector fields.

A lift places the base fields on R^N = R^n x R^p as left-invariant fields of
a stratified group, so that potential theory on the group (explicit
fundamental solutions, homogeneous norms) can be pushed down to the base by
integrating out the fiber.  The catalog carries two lifts:

* grushin(1) lifts to the polarized Heisenberg group on R^3, which has a
  classical closed-form fundamental solution; and
* the step-3 system x1 d2 + x1^2 d3 lifts to an Engel-type group on R^4,
  used for group geometry only.

Every structural claim (group axioms, left invariance, dilation
compatibility, projection onto the base fields) is checked by
``verify_lift``, symbolically where the claim is polynomial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.linalg
import sympy as sp

from .domain import BoxDomain
from .fields import (Poly, PolyVectorField, HormanderSystem, grushin,
                     example3)
from .geometry import CCGraphConfig, CCMetric


class LiftVerificationError(RuntimeError):
    pass


def poly_to_sympy(p: Poly, syms) -> sp.Expr:
    """Exact conversion of a sparse Fraction polynomial to a sympy expr."""
    out = sp.Integer(0)
    for e, c in p.terms.items():
        term = sp.Rational(c.numerator, c.denominator)
        for s, k in zip(syms, e):
            if k:
                term *= s ** k
        out += term
    return out


@dataclass
class CarnotLift:
    """Group structure on R^N lifting a homogeneous system on R^n.

    law: N polynomials in 2N variables (u followed by v) giving u * v.
    inverse: N polynomials in N variables giving u^{-1}.
    fields: lifted vector fields on R^N, one per base generator.
    weights: dilation exponent of each lifted coordinate (base coordinates
    first, fiber coordinates after; not necessarily sorted).
    """

    name: str
    base: HormanderSystem
    weights: tuple
    fields: list
    law: list
    inverse_map: list

    @property
    def N(self) -> int:
        return len(self.weights)

    @property
    def p(self) -> int:
        return self.N - self.base.n

    @property
    def Q(self) -> int:
        return int(sum(self.weights))

    @property
    def norm_exponent(self) -> int:
        return 2 * math.lcm(*self.weights)

    def multiply(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        uv = np.concatenate(np.broadcast_arrays(u, v), axis=-1)
        return np.stack([p(uv) for p in self.law], axis=-1)

    def inverse(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.stack([p(u) for p in self.inverse_map], axis=-1)

    def dilate(self, lam: float, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return u * np.array([lam ** w for w in self.weights])

    def hom_norm(self, u) -> np.ndarray:
        """Homogeneous norm (sum_i |u_i|^{L/w_i})^{1/L}, L = 2 lcm(weights)."""
        u = np.asarray(u, dtype=float)
        L = self.norm_exponent
        s = np.zeros(u.shape[:-1])
        for i, w in enumerate(self.weights):
            s = s + np.abs(u[..., i]) ** (L // w)
        return s ** (1.0 / L)

    # symbolic views -------------------------------------------------------

    def symbols(self, prefix: str = "u"):
        return sp.symbols(f"{prefix}1:{self.N + 1}", real=True)

    def law_exprs(self, usyms, vsyms):
        allsyms = tuple(usyms) + tuple(vsyms)
        return [poly_to_sympy(p, allsyms) for p in self.law]

    def inverse_exprs(self, usyms):
        return [poly_to_sympy(p, usyms) for p in self.inverse_map]

    def field_exprs(self, j: int, usyms):
        return [poly_to_sympy(c, usyms) for c in self.fields[j].comps]

    def apply_field(self, expr: sp.Expr, j: int, usyms) -> sp.Expr:
        comps = self.field_exprs(j, usyms)
        return sum(c * sp.diff(expr, s) for c, s in zip(comps, usyms))

    def apply_word(self, expr: sp.Expr, word, usyms) -> sp.Expr:
        for j in reversed(word):
            expr = self.apply_field(expr, j, usyms)
        return expr


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

def lift_grushin1() -> CarnotLift:
    """Polarized Heisenberg lift of X1 = d1, X2 = x1 d2.

    Coordinates (x1, x2, xi); xi is the fiber variable.
    Lifted fields: Y1 = d_x1, Y2 = x1 d_x2 + d_xi.
    """
    N = 2 * 3  # variables of the law: u then v
    law = [
        Poly(N, {(1, 0, 0, 0, 0, 0): 1, (0, 0, 0, 1, 0, 0): 1}),
        Poly(N, {(0, 1, 0, 0, 0, 0): 1, (0, 0, 0, 0, 1, 0): 1,
                 (1, 0, 0, 0, 0, 1): 1}),
        Poly(N, {(0, 0, 1, 0, 0, 0): 1, (0, 0, 0, 0, 0, 1): 1}),
    ]
    inv = [
        Poly(3, {(1, 0, 0): -1}),
        Poly(3, {(0, 1, 0): -1, (1, 0, 1): 1}),
        Poly(3, {(0, 0, 1): -1}),
    ]
    Y1 = PolyVectorField([Poly.constant(3, 1), Poly.zero(3), Poly.zero(3)])
    Y2 = PolyVectorField([Poly.zero(3), Poly.monomial(3, (1, 0, 0)),
                          Poly.constant(3, 1)])
    return CarnotLift(name="grushin1_heisenberg", base=grushin(1),
                      weights=(1, 2, 1), fields=[Y1, Y2],
                      law=law, inverse_map=inv)


def lift_example3() -> CarnotLift:
    """Engel-type lift of X1 = d1, X2 = x1 d2 + x1^2 d3.

    Coordinates (u1, u2, u3, u4); u4 is the fiber variable.
    Lifted fields: Y1 = d1, Y2 = u1 d2 + u1^2 d3 + d4.
    """
    N = 2 * 4
    z8 = tuple([0] * 8)

    def mono(positions) -> tuple:
        e = list(z8)
        for pos in positions:
            e[pos] += 1
        return tuple(e)

    law = [
        Poly(N, {mono([0]): 1, mono([4]): 1}),
        Poly(N, {mono([1]): 1, mono([5]): 1, mono([0, 7]): 1}),
        Poly(N, {mono([2]): 1, mono([6]): 1, mono([0, 5]): 2,
                 mono([0, 0, 7]): 1}),
        Poly(N, {mono([3]): 1, mono([7]): 1}),
    ]
    inv = [
        Poly(4, {(1, 0, 0, 0): -1}),
        Poly(4, {(0, 1, 0, 0): -1, (1, 0, 0, 1): 1}),
        Poly(4, {(0, 0, 1, 0): -1, (1, 1, 0, 0): 2, (2, 0, 0, 1): -1}),
        Poly(4, {(0, 0, 0, 1): -1}),
    ]
    Y1 = PolyVectorField([Poly.constant(4, 1)] + [Poly.zero(4)] * 3)
    Y2 = PolyVectorField([Poly.zero(4), Poly.monomial(4, (1, 0, 0, 0)),
                          Poly.monomial(4, (2, 0, 0, 0)),
                          Poly.constant(4, 1)])
    return CarnotLift(name="example3_engel", base=example3(),
                      weights=(1, 2, 3, 1), fields=[Y1, Y2],
                      law=law, inverse_map=inv)


_LIFTS = {"grushin1": lift_grushin1, "example3": lift_example3}


def load_lift(name: str) -> CarnotLift:
    try:
        return _LIFTS[name]()
    except KeyError:
        raise KeyError(f"no lift for {name!r}; available: "
                       f"{', '.join(sorted(_LIFTS))}") from None


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass
class LiftReport:
    group_axioms: bool
    left_invariant: bool
    dilation_automorphism: bool
    fields_homogeneous: bool
    projects_to_base: bool
    details: list

    @property
    def passed(self) -> bool:
        return (self.group_axioms and self.left_invariant and
                self.dilation_automorphism and self.fields_homogeneous and
                self.projects_to_base)

    def __bool__(self):
        return self.passed


def verify_lift(lift: CarnotLift, samples: int = 40, seed: int = 7,
                tol: float = 1e-9) -> LiftReport:
    details: list = []
    rng = np.random.default_rng(seed)
    N = lift.N

    # group axioms at random points (polynomial identities, so random-point
    # checks at tight tolerance are decisive up to measure zero)
    u = rng.uniform(-1.5, 1.5, (samples, N))
    v = rng.uniform(-1.5, 1.5, (samples, N))
    w = rng.uniform(-1.5, 1.5, (samples, N))
    e = np.zeros(N)
    ax = True
    if not np.allclose(lift.multiply(u, e), u, atol=tol):
        ax = False
        details.append("right identity fails")
    if not np.allclose(lift.multiply(e, u), u, atol=tol):
        ax = False
        details.append("left identity fails")
    if not np.allclose(lift.multiply(u, lift.inverse(u)), 0.0, atol=tol):
        ax = False
        details.append("right inverse fails")
    if not np.allclose(lift.multiply(lift.inverse(u), u), 0.0, atol=tol):
        ax = False
        details.append("left inverse fails")
    lhs = lift.multiply(lift.multiply(u, v), w)
    rhs = lift.multiply(u, lift.multiply(v, w))
    if not np.allclose(lhs, rhs, atol=1e-6 * np.max(np.abs(lhs) + 1)):
        ax = False
        details.append("associativity fails")

    # left invariance, exact: d/dv [u*v] applied to Y_j(v) equals Y_j(u*v)
    us = lift.symbols("a")
    vs = lift.symbols("b")
    law = lift.law_exprs(us, vs)
    li = True
    for j in range(len(lift.fields)):
        Yv = lift.field_exprs(j, vs)
        Yuv = [comp.subs(dict(zip(us, law)), simultaneous=True)
               for comp in lift.field_exprs(j, us)]
        for k in range(N):
            pushed = sum(sp.diff(law[k], vs[i]) * Yv[i] for i in range(N))
            if sp.expand(pushed - Yuv[k]) != 0:
                li = False
                details.append(
                    f"field {j} component {k} not left invariant")

    # the dilations are group automorphisms: every monomial of law_k has
    # combined weight w_k (weights of u and v variables both count)
    ww = tuple(lift.weights) + tuple(lift.weights)
    da = True
    for k, p in enumerate(lift.law):
        for exp in p.terms:
            if sum(a * b for a, b in zip(exp, ww)) != lift.weights[k]:
                da = False
                details.append(f"law component {k}: monomial {exp} breaks "
                               "dilation compatibility")

    # lifted fields are homogeneous of degree 1 under the lifted dilations
    fh = True
    for j, Y in enumerate(lift.fields):
        for k, p in enumerate(Y.comps):
            want = lift.weights[k] - 1
            for exp in p.terms:
                if sum(a * b for a, b in zip(exp, lift.weights)) != want:
                    fh = False
                    details.append(
                        f"field {j} component {k}: monomial {exp} has wrong "
                        "homogeneity")

    # projection onto the base: the first n components of Y_j coincide with
    # X_j and involve no fiber variables
    n = lift.base.n
    pr = True
    for j, Y in enumerate(lift.fields):
        X = lift.base.fields[j]
        for k in range(n):
            terms = {}
            okay = True
            for exp, c in Y.comps[k].terms.items():
                if any(exp[i] for i in range(n, lift.N)):
                    okay = False
                terms[exp[:n]] = c
            if not okay or terms != dict(X.comps[k].terms):
                pr = False
                details.append(f"field {j} does not project onto base "
                               f"component {k}")

    return LiftReport(group_axioms=ax, left_invariant=li,
                      dilation_automorphism=da, fields_homogeneous=fh,
                      projects_to_base=pr, details=details)


def control_system(lift: CarnotLift):
    """The lifted fields as a control system usable by the CC metric code.

    The lifted weights are not sorted, so this bypasses the base-system
    container and only exposes what the metric needs.
    """

    class _Lifted:
        name = lift.name + "_control"
        fields = lift.fields
        n = lift.N
        m = len(lift.fields)

        @staticmethod
        def field_values(x):
            return np.stack([Y.value(x) for Y in lift.fields], axis=-2)

    return _Lifted()


# ---------------------------------------------------------------------------
# norm / distance equivalence constants
# ---------------------------------------------------------------------------

@dataclass
class EquivalenceConstants:
    gamma1: float          # gamma1 * ||u|| <= d(0, u)
    gamma2: float          # d(0, u) <= gamma2 * ||u||
    samples: int
    max_error_bound: float


_EQUIV_CACHE: dict = {}


def calibrate_equivalence(lift: CarnotLift, half_width: float = 1.3,
                          points_per_axis: int = 41) -> EquivalenceConstants:
    """Measure gamma1, gamma2 on hom-norm shells via the lifted CC metric.

    The measured distance is clipped to the box, which can only overestimate,
    so gamma2 is padded up and gamma1 down by the discretization error.
    """
    key = (lift.name, half_width, points_per_axis)
    if key in _EQUIV_CACHE:
        return _EQUIV_CACHE[key]
    sys_ = control_system(lift)
    dom = BoxDomain((-half_width,) * lift.N, (half_width,) * lift.N,
                    (points_per_axis,) * lift.N)
    metric = CCMetric(sys_, dom, CCGraphConfig())
    dist = metric.distance_field(np.zeros(lift.N))
    pts = dom.points()
    norms = lift.hom_norm(pts)
    # stay on shells comfortably inside the box so clipping cannot bite
    keep = (norms > 0.35) & (norms < 0.75) & (dist < 1e17)
    ratios = dist[keep] / norms[keep]
    pad = 2.0 * metric.tau
    g1 = float(np.min(ratios) - pad / np.min(norms[keep]))
    g2 = float(np.max(ratios) + pad / np.min(norms[keep]))
    if g1 <= 0:
        raise RuntimeError("equivalence calibration degenerate: gamma1 <= 0")
    out = EquivalenceConstants(gamma1=g1, gamma2=g2,
                               samples=int(np.count_nonzero(keep)),
                               max_error_bound=pad)
    _EQUIV_CACHE[key] = out
    return out


# ---------------------------------------------------------------------------
# fundamental solutions on the Heisenberg lift
# ---------------------------------------------------------------------------

def sqrt_spd(A: np.ndarray) -> np.ndarray:
    """Symmetric positive definite square root via eigendecomposition."""
    A = np.asarray(A, dtype=float)
    if not np.allclose(A, A.T, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    w, V = scipy.linalg.eigh(A)
    if np.min(w) <= 0:
        raise ValueError(f"matrix is not positive definite (eigs {w})")
    return (V * np.sqrt(w)) @ V.T


_H_SYMS = sp.symbols("x1 x2 x3", real=True)   # x3 is the fiber variable


def _gamma_unit_expr(x1, x2, x3) -> sp.Expr:
    """Unnormalized kernel: ((x1^2+x3^2)^2 + 16 (x2 - x1 x3 / 2)^2)^{-1/2}.

    Annihilated by Y1^2 + Y2^2 away from the origin (checked in the tests)
    and homogeneous of degree -2 = 2 - Q for the weights (1, 2, 1).
    """
    rho4 = (x1 ** 2 + x3 ** 2) ** 2 + 16 * (x2 - x1 * x3 / 2) ** 2
    return rho4 ** sp.Rational(-1, 2)


class HeisenbergGamma:
    """Fundamental solution of sum_ij a_ij Y_i Y_j on the grushin(1) lift.

    For general SPD A the solution is transported from the identity matrix
    through the group automorphism that acts by S = sqrt(A) on the
    horizontal pair (x1, x3) and by det(S) on the central variable, divided
    by det(A) (the automorphism's Jacobian).  The overall constant is
    calibrated once from the reproduction identity; see
    ``normalization_constant``.
    """

    def __init__(self, A=None):
        self.lift = lift_grushin1()
        if A is None:
            A = np.eye(2)
        A = np.asarray(A, dtype=float)
        self.A = A
        S = sqrt_spd(A)
        Si = np.linalg.inv(S)
        detS = float(np.linalg.det(S))
        x1, x2, x3 = _H_SYMS
        a, b = x1, x3
        t = x2 - a * b / 2
        a0 = Si[0, 0] * a + Si[0, 1] * b
        b0 = Si[1, 0] * a + Si[1, 1] * b
        t0 = t / detS
        x2_0 = t0 + a0 * b0 / 2
        self.expr_unit = _gamma_unit_expr(a0, x2_0, b0) / (detS ** 2)
        self._value = sp.lambdify(_H_SYMS, self.expr_unit, modules="numpy")
        self._words: dict = {}

    def value(self, u, normalized: bool = True) -> np.ndarray:
        """Gamma at points u (..., 3)."""
        u = np.asarray(u, dtype=float)
        out = self._value(u[..., 0], u[..., 1], u[..., 2])
        out = np.asarray(out, dtype=float)
        if normalized:
            out = out * normalization_constant()
        return out

    def word_fn(self, word):
        """Lambdified Y-word derivative of Gamma (unnormalized), cached."""
        word = tuple(word)
        if word not in self._words:
            expr = self.lift.apply_word(self.expr_unit, word, _H_SYMS)
            self._words[word] = sp.lambdify(_H_SYMS, expr, modules="numpy")
        return self._words[word]

    def word_value(self, word, u, normalized: bool = True) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.asarray(
            self.word_fn(word)(u[..., 0], u[..., 1], u[..., 2]), dtype=float)
        if normalized:
            out = out * normalization_constant()
        return out


_GAMMA_CACHE: dict = {}


def heisenberg_gamma(A=None) -> HeisenbergGamma:
    key = None if A is None else tuple(np.round(np.asarray(A, float), 14).ravel())
    if key not in _GAMMA_CACHE:
        _GAMMA_CACHE[key] = HeisenbergGamma(A)
    return _GAMMA_CACHE[key]


def _graded_nodes(L: float, h: float, levels: int = 2,
                  shrink: float = 4.0) -> tuple:
    """Midpoint cubature on [-L, L]^3 with nested refinement around 0.

    Each level replaces the central block with a grid `shrink` times finer;
    the innermost central cell is dropped (its contribution is O(cell^2)
    for a kernel homogeneous of degree -2).
    """
    nodes = []
    weights = []
    lo = L
    step = h
    for lev in range(levels + 1):
        k = int(round(2 * lo / step))
        ax = -lo + (np.arange(k) + 0.5) * step
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
        if lev < levels:
            inner = lo / shrink
            hole = np.all(np.abs(pts) < inner - 1e-12, axis=1)
            pts = pts[~hole]
        else:
            center = np.all(np.abs(pts) < 0.5 * step, axis=1)
            pts = pts[~center]
        nodes.append(pts)
        weights.append(np.full(pts.shape[0], step ** 3))
        lo = lo / shrink
        step = step / shrink
    return np.concatenate(nodes), np.concatenate(weights)


def _gaussian_bump(widths, center=None):
    """Gaussian test function and its lifted-sublaplacian image (A = I)."""
    x1, x2, x3 = _H_SYMS
    c = (0.0, 0.0, 0.0) if center is None else center
    expr = sp.exp(-sum(((s - ci) / wi) ** 2
                       for s, ci, wi in zip(_H_SYMS, c, widths)))
    return expr


def _apply_operator(expr: sp.Expr, A: np.ndarray, lift: CarnotLift) -> sp.Expr:
    out = sp.Integer(0)
    for i in range(2):
        for j in range(2):
            if A[i, j] == 0:
                continue
            out += A[i, j] * lift.apply_word(expr, (i, j), _H_SYMS)
    return out


def reproduction_residual(gamma: HeisenbergGamma, bump_expr: sp.Expr,
                          xs: np.ndarray, nodes=None, weights=None,
                          normalized: bool = True) -> float:
    """Max relative error of u(x) = int Gamma(y^{-1} x) (L_A u)(y) dy.

    Substituting z = y^{-1} * x turns this into a convolution against a
    fixed singular kernel; the quadrature is graded around z = 0.
    """
    lift = gamma.lift
    if nodes is None:
        nodes, weights = _default_nodes()
    Lu = sp.lambdify(_H_SYMS, _apply_operator(bump_expr, gamma.A, lift),
                     modules="numpy")
    u_fn = sp.lambdify(_H_SYMS, bump_expr, modules="numpy")
    G = gamma.value(nodes, normalized=normalized)
    zinv = lift.inverse(nodes)
    worst = 0.0
    for x in np.atleast_2d(xs):
        y = lift.multiply(x, zinv)
        integral = float(np.sum(weights * G * Lu(y[:, 0], y[:, 1], y[:, 2])))
        target = float(u_fn(*x))
        worst = max(worst, abs(integral - target) / abs(target))
    return worst


_NODE_CACHE: dict = {}


def _default_nodes(fine: bool = True) -> tuple:
    """Shared convolution cubature; fine for calibration-grade residuals."""
    key = fine
    if key not in _NODE_CACHE:
        if fine:
            _NODE_CACHE[key] = _graded_nodes(8.0, 0.125, levels=3)
        else:
            _NODE_CACHE[key] = _graded_nodes(8.0, 0.25, levels=2)
    return _NODE_CACHE[key]


_C0: list = []


def normalization_constant() -> float:
    """Overall constant of the fundamental solution family.

    Fixed by matching the reproduction identity for one Gaussian profile at
    several evaluation points; a structurally different profile validates
    the value (`test` suite enforces the tolerance).  Calibrated lazily and
    cached for the process lifetime.
    """
    if _C0:
        return _C0[0]
    lift = lift_grushin1()
    gamma = heisenberg_gamma(None)
    nodes, weights = _default_nodes()
    bump = _gaussian_bump((1.0, 1.5, 1.0))
    Lu = sp.lambdify(_H_SYMS, _apply_operator(bump, np.eye(2), lift),
                     modules="numpy")
    u_fn = sp.lambdify(_H_SYMS, bump, modules="numpy")
    G = gamma.value(nodes, normalized=False)
    zinv = lift.inverse(nodes)
    xs = np.array([[0.0, 0.0, 0.0], [0.4, 0.1, -0.2], [-0.3, 0.25, 0.35],
                   [0.15, -0.3, 0.1]])
    ratios = []
    for x in xs:
        y = lift.multiply(x, zinv)
        integral = float(np.sum(weights * G * Lu(y[:, 0], y[:, 1], y[:, 2])))
        ratios.append(float(u_fn(*x)) / integral)
    c0 = float(np.mean(ratios))
    spread = float(np.max(np.abs(np.array(ratios) / c0 - 1.0)))
    if spread > 5e-3:
        raise RuntimeError(
            f"normalization calibration inconsistent: spread {spread:.2e}")
    _C0.append(c0)
    return c0


def spd_sweep(count: int = 12, nu: float = 0.25, seed: int = 11) -> list:
    """Deterministic SPD test matrices with eigenvalues in [nu, 1/nu]."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        theta = rng.uniform(0, np.pi)
        R = np.array([[np.cos(theta), -np.sin(theta)],
                      [np.sin(theta), np.cos(theta)]])
        eigs = rng.uniform(nu, 1.0 / nu, 2)
        out.append(R @ np.diag(eigs) @ R.T)
    return out


# ---------------------------------------------------------------------------
# saturation: integrating out the fiber
# ---------------------------------------------------------------------------

class GrushinGamma:
    """Kernel on the base plane obtained by integrating out the fiber.

    Gamma_A(x; y) = int_R GammaTilde_A((x,0)^{-1} * (y,eta)) d eta.
    The eta line is compactified by eta = s tan(theta) (the integrand decays
    like eta^{-2}, so the transformed integrand is bounded); the midpoint
    rule is doubled until two resolutions agree to `rtol`.
    """

    def __init__(self, A=None, rtol: float = 1e-3, base_nodes: int = 96):
        self.tilde = heisenberg_gamma(A)
        self.lift = self.tilde.lift
        self.rtol = rtol
        self.base_nodes = base_nodes

    def _fiber_arg(self, x, y, eta):
        """(x,0)^{-1} * (y, eta) for base points x, y; broadcasts over eta."""
        x1 = x[..., 0][..., None]
        x2 = x[..., 1][..., None]
        y1 = y[..., 0][..., None]
        y2 = y[..., 1][..., None]
        return np.stack(np.broadcast_arrays(
            y1 - x1, y2 - x2 - x1 * eta, eta + np.zeros_like(x1)), axis=-1)

    def _saturate(self, fn, x, y, scale):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        s = np.maximum(np.asarray(scale, dtype=float), 1e-3)[..., None]
        prev = None
        M = self.base_nodes
        for _ in range(5):
            theta = (np.arange(M) + 0.5) / M * np.pi - np.pi / 2
            dtheta = np.pi / M
            eta = s * np.tan(theta)
            jac = s / np.cos(theta) ** 2
            z = self._fiber_arg(x, y, eta)
            vals = fn(z)
            cur = np.sum(vals * jac, axis=-1) * dtheta
            cur_abs = np.sum(np.abs(vals) * jac, axis=-1) * dtheta
            if prev is not None:
                # near zeros of an oscillating kernel the signed value is an
                # unusable yardstick; fall back to a fraction of the mass
                floor = np.maximum(np.abs(cur), 0.05 * cur_abs)
                err = np.max(np.abs(cur - prev) / np.maximum(floor, 1e-300))
                if err < self.rtol:
                    return cur
            prev = cur
            M *= 2
        raise RuntimeError("fiber quadrature did not converge")

    def _scale(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dx = np.stack(np.broadcast_arrays(
            y[..., 0] - x[..., 0], y[..., 1] - x[..., 1],
            np.zeros(np.broadcast_shapes(x[..., 0].shape, y[..., 0].shape))),
            axis=-1)
        return self.lift.hom_norm(dx)

    def value(self, x, y) -> np.ndarray:
        return self._saturate(lambda z: self.tilde.value(z), x, y,
                              self._scale(x, y))

    def x_derivative(self, word, x, y) -> np.ndarray:
        """(X_word)_x Gamma_A(x; y): the Y-word kernel, fiber attached to x.

        Uses int (Y_word GammaTilde)((y,0)^{-1} * (x, eta)) d eta.
        """
        fn = self.tilde.word_fn(word)
        c0 = normalization_constant()

        def eval_fn(z):
            return c0 * np.asarray(
                fn(z[..., 0], z[..., 1], z[..., 2]), dtype=float)

        return self._saturate(eval_fn, y, x, self._scale(x, y))

    def y_derivative(self, word, x, y) -> np.ndarray:
        """(X_word)_y Gamma_A(x; y), fiber attached to y."""
        fn = self.tilde.word_fn(word)
        c0 = normalization_constant()

        def eval_fn(z):
            return c0 * np.asarray(
                fn(z[..., 0], z[..., 1], z[..., 2]), dtype=float)

        return self._saturate(eval_fn, x, y, self._scale(x, y))


_B_SYMS = sp.symbols("y1 y2", real=True)


def _graded_nodes_2d(center, L: float, h: float, levels: int = 2,
                     shrink: float = 4.0) -> tuple:
    """Midpoint cubature on a square around `center`, refined near center."""
    nodes = []
    weights = []
    lo = L
    step = h
    for lev in range(levels + 1):
        k = int(round(2 * lo / step))
        ax = -lo + (np.arange(k) + 0.5) * step
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
        if lev < levels:
            inner = lo / shrink
            hole = np.all(np.abs(pts) < inner - 1e-12, axis=1)
            pts = pts[~hole]
        else:
            mid = np.all(np.abs(pts) < 0.5 * step, axis=1)
            pts = pts[~mid]
        nodes.append(pts)
        weights.append(np.full(pts.shape[0], step ** 2))
        lo = lo / shrink
        step = step / shrink
    return np.concatenate(nodes) + np.asarray(center), np.concatenate(weights)


def base_operator_expr(A: np.ndarray, expr: sp.Expr) -> sp.Expr:
    """sum_ij a_ij X_i X_j applied to expr(y1, y2) for the grushin(1) pair."""
    y1, y2 = _B_SYMS
    base = grushin(1)

    def apply_field(f, j):
        comps = [poly_to_sympy(c, _B_SYMS) for c in base.fields[j].comps]
        return sum(c * sp.diff(f, s) for c, s in zip(comps, _B_SYMS))

    out = sp.Integer(0)
    for i in range(2):
        for j in range(2):
            if A[i, j] != 0:
                out += A[i, j] * apply_field(apply_field(expr, j), i)
    return out


def base_reproduction_residual(A, bump_expr: sp.Expr, xs,
                               L: float = 6.0, h: float = 0.15) -> float:
    """Max relative error of u(x) = int Gamma_A(x; y) (L_A u)(y) dy on R^2."""
    Amat = np.eye(2) if A is None else np.asarray(A, dtype=float)
    G = grushin_gamma(A)
    Lu = sp.lambdify(_B_SYMS, base_operator_expr(Amat, bump_expr), "numpy")
    u_fn = sp.lambdify(_B_SYMS, bump_expr, "numpy")
    worst = 0.0
    for x in np.atleast_2d(np.asarray(xs, dtype=float)):
        ys, wts = _graded_nodes_2d(x, L, h)
        vals = G.value(x, ys)
        integral = float(np.sum(wts * vals * Lu(ys[:, 0], ys[:, 1])))
        target = float(u_fn(*x))
        worst = max(worst, abs(integral - target) / abs(target))
    return worst


_SAT_CACHE: dict = {}


def grushin_gamma(A=None) -> GrushinGamma:
    key = None if A is None else tuple(np.round(np.asarray(A, float), 14).ravel())
    if key not in _SAT_CACHE:
        _SAT_CACHE[key] = GrushinGamma(A)
    return _SAT_CACHE[key]


# ---------------------------------------------------------------------------
# fiber-slice volume constants and the fiber-integrated cutoff family
# ---------------------------------------------------------------------------

@dataclass
class FiberConstants:
    """Comparison constants between lifted-ball eta-slices and ball volumes.

    For the lifted ball B~(0, r), the measure of the slice over a base
    point y, divided by |B~| / |B_X(0,r)|, is bounded above by c_upper for
    every y, and stays above c_lower for y in the shrunk ball B_X(0,
    kappa r).  kappa is the largest ladder value whose lower constant
    clears the floor.
    """

    kappa: float
    c_lower: float
    c_upper: float
    radii: tuple
    floor: float


_FIBER_CACHE: dict = {}


def calibrate_fiber_constants(lift: CarnotLift, half_width: float = 1.7,
                              points_per_axis: int = 41,
                              radii: tuple = (0.35, 0.45, 0.55),
                              floor: float = 0.05) -> FiberConstants:
    """Measure the slice constants of the lifted metric on a box grid.

    The base distance is recovered from the lifted one as
    d_X(0, y) = min_eta d~((0,0), (y, eta)): projecting a lifted
    horizontal path to the base is admissible with the same controls, and
    any base path lifts at equal cost, so the two infima coincide.
    """
    key = (lift.name, half_width, points_per_axis, radii, floor)
    if key in _FIBER_CACHE:
        return _FIBER_CACHE[key]
    from .geometry import _touches_boundary
    n, N = lift.base.n, lift.N
    dom = BoxDomain((-half_width,) * N, (half_width,) * N,
                    (points_per_axis,) * N)
    metric = CCMetric(control_system(lift), dom, CCGraphConfig())
    dgrid = metric.distance_field(np.zeros(N)).reshape(dom.counts)
    fiber_axes = tuple(range(n, N))
    h = dom.spacing
    fiber_cell = float(np.prod(h[n:]))
    base_cell = float(np.prod(h[:n]))
    d_base = dgrid.min(axis=fiber_axes)

    per_radius = []
    for r in radii:
        inside = dgrid < r
        if _touches_boundary(inside):
            raise RuntimeError(
                f"lifted ball of radius {r} clipped by the calibration box")
        vol_lift = float(np.count_nonzero(inside)) * dom.cell_volume
        vol_base = float(np.count_nonzero(d_base < r)) * base_cell
        slice_meas = inside.sum(axis=fiber_axes) * fiber_cell
        per_radius.append((r, slice_meas * vol_base / vol_lift))

    c_upper = max(float(sm.max()) for _, sm in per_radius)
    kappa, c_lower = 0.0, 0.0
    for cand in np.arange(0.95, 0.14, -0.05):
        lows = [float(sm[d_base < cand * r].min()) for r, sm in per_radius]
        if min(lows) >= floor:
            kappa, c_lower = float(cand), min(lows)
            break
    if kappa == 0.0:
        raise RuntimeError("no kappa in the ladder clears the slice floor")
    out = FiberConstants(kappa=kappa, c_lower=c_lower, c_upper=c_upper,
                         radii=tuple(radii), floor=floor)
    _FIBER_CACHE[key] = out
    return out


def _smoothstep_expr(t):
    """Quintic smoothstep as a Piecewise (differentiates without deltas)."""
    core = t ** 3 * (6 * t ** 2 - 15 * t + 10)
    return sp.Piecewise((0, t <= 0), (1, t >= 1), (core, True))


@dataclass
class CutoffFamily:
    """A cutoff adapted to the metric ball B(x, R), sampled on a grid.

    values holds phi^x on the base grid; derivatives maps derivative words
    (tuples of field indices) to sampled grids of X_I phi^x, computed by
    differentiating under the fiber integral with the lifted fields.
    """

    center: np.ndarray
    R: float
    H: float
    values: "GridFunction"
    derivatives: dict
    ball_volume: float

    def support_radius(self) -> float:
        return self.H * self.R


def cutoff_family(lift: CarnotLift, x, R: float, domain: BoxDomain,
                  eta_nodes: int = 161,
                  cfg: CCGraphConfig = CCGraphConfig()) -> CutoffFamily:
    """Cutoff phi^x(y) = c0^{-1} * integral of psi((x,0)^{-1} o (y,eta)).

    psi is radial in the smooth homogeneous norm: identically 1 for
    ||u|| <= R/(gamma1 kappa), vanishing beyond twice that, with a C^2
    quintic joint in between; by the norm/distance equivalence phi^x is
    then supported in the metric ball of radius H R around x, with
    H = 2 gamma2 / (gamma1 kappa).  The normalizer c0 is the fiber
    integral of psi at the group origin; fiber translation has unit
    Jacobian, so phi^x(x) = 1 for every center, and left invariance of
    the lifted fields makes the size and X-derivative bounds independent
    of the center.
    """
    from .domain import GridFunction
    from .geometry import ball_volume, get_metric
    x = np.asarray(x, dtype=float)
    eq = calibrate_equivalence(lift)
    fib = calibrate_fiber_constants(lift)
    t1 = R / (eq.gamma1 * fib.kappa)
    t2 = 2.0 * t1
    H = 2.0 * eq.gamma2 / (eq.gamma1 * fib.kappa)
    L = lift.norm_exponent

    usyms = lift.symbols("u")
    # every exponent L // w is even, so no absolute values are needed
    s_expr = sum(u ** (L // w) for u, w in zip(usyms, lift.weights))
    psi = _smoothstep_expr((t2 ** L - s_expr) / (t2 ** L - t1 ** L))
    words = [(), *[(i,) for i in range(lift.base.m)],
             *[(i, j) for i in range(lift.base.m)
               for j in range(lift.base.m)]]
    word_fns = {w: sp.lambdify(usyms, lift.apply_word(psi, w, usyms), "numpy")
                for w in words}

    metric = get_metric(lift.base, domain, cfg)
    volB = ball_volume(lift.base, x, R, domain, metric=metric)

    pts = domain.points()                          # (npts, n)
    eta = np.linspace(-1.05 * t2, 1.05 * t2, eta_nodes)
    inv_x = lift.inverse(np.concatenate([x, np.zeros(lift.p)]))
    yeta = np.concatenate(
        [np.broadcast_to(pts[:, None, :], (pts.shape[0], eta_nodes,
                                           lift.base.n)),
         np.broadcast_to(eta[None, :, None], (pts.shape[0], eta_nodes,
                                              lift.p))], axis=-1)
    u = lift.multiply(inv_x, yeta)                 # (npts, K, N)
    ucomp = [u[..., k] for k in range(lift.N)]

    origin = [np.zeros_like(eta) for _ in range(lift.N - lift.p)] + [eta]
    c0 = float(np.trapezoid(word_fns[()](*origin), eta))

    grids = {}
    for w, fn in word_fns.items():
        vals = np.trapezoid(fn(*ucomp), eta, axis=1) / c0
        grids[w] = GridFunction(domain, vals.reshape(domain.counts))
    return CutoffFamily(center=x, R=R, H=H, values=grids[()],
                        derivatives={w: g for w, g in grids.items() if w},
                        ball_volume=volB)
