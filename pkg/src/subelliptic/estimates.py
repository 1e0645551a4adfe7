"""Discrete directional derivatives, Sobolev norms along vector fields,
variable-coefficient operators, and a-priori estimate ratio experiments.

X-derivatives are centered finite differences of the grid samples combined
with exact polynomial coefficients; each application shrinks the trusted
margin by one cell.  Symbolic helpers produce the same derivatives exactly
(via sympy) for oracle comparisons.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import sympy as sp

from .domain import BoxDomain, GridFunction
from .fields import HormanderSystem, Poly, PolyVectorField


class EllipticityError(ValueError):
    """Coefficient matrix leaves the [nu, 1/nu] eigenvalue window."""


# ---------------------------------------------------------------------------
# discrete X-derivatives
# ---------------------------------------------------------------------------

def apply_field_grid(X: PolyVectorField, f: GridFunction) -> GridFunction:
    """Centered-difference directional derivative sum_k c_k(x) df/dx_k."""
    dom = f.domain
    grads = np.gradient(f.values, *dom.spacing, edge_order=1)
    if dom.dim == 1:
        grads = [grads]
    pts = dom.points()
    out = np.zeros(dom.counts)
    for k, c in enumerate(X.comps):
        if c.is_zero():
            continue
        out += c(pts).reshape(dom.counts) * grads[k]
    return GridFunction(dom, out, f.margin + 1)


def apply_word_grid(system: HormanderSystem, word, f: GridFunction) -> GridFunction:
    """X_{i1} X_{i2} ... X_{ik} f by repeated centered differencing."""
    out = f
    for i in reversed(word):
        out = apply_field_grid(system.fields[i], out)
    return out


# ---------------------------------------------------------------------------
# symbolic oracles
# ---------------------------------------------------------------------------

def poly_to_sympy(p: Poly, xs) -> sp.Expr:
    out = sp.Integer(0)
    for exps, c in p.terms.items():
        term = sp.Rational(c.numerator, c.denominator)
        for k, e in enumerate(exps):
            if e:
                term *= xs[k] ** e
        out += term
    return out


def field_apply_sympy(X: PolyVectorField, expr: sp.Expr, xs) -> sp.Expr:
    out = sp.Integer(0)
    for k, c in enumerate(X.comps):
        if not c.is_zero():
            out += poly_to_sympy(c, xs) * sp.diff(expr, xs[k])
    return sp.expand(out)


def word_apply_sympy(system: HormanderSystem, word, expr: sp.Expr, xs) -> sp.Expr:
    out = expr
    for i in reversed(word):
        out = field_apply_sympy(system.fields[i], out, xs)
    return out


def grid_from_expr(domain: BoxDomain, expr: sp.Expr, xs,
                   margin: int = 0) -> GridFunction:
    fn = sp.lambdify(xs, expr, "numpy")
    pts = domain.points()
    vals = np.broadcast_to(
        np.asarray(fn(*[pts[:, k] for k in range(domain.dim)]), dtype=float),
        (pts.shape[0],)).reshape(domain.counts)
    return GridFunction(domain, vals.copy(), margin)


# ---------------------------------------------------------------------------
# Sobolev norms
# ---------------------------------------------------------------------------

@dataclass
class SobolevReport:
    p: float
    k: int
    base_norm: float                 # ||f||_p
    word_norms: dict                 # word tuple -> ||X_I f||_p, 1 <= |I| <= k
    total: float

    def __float__(self):
        return self.total


def sobolev_norm(system: HormanderSystem, f: GridFunction, k: int,
                 p: float) -> SobolevReport:
    """||f||_p plus the sum of ||X_I f||_p over words of length 1..k."""
    base = f.lp_norm(p)
    word_norms = {}
    frontier = {(): f}
    for _ in range(k):
        nxt = {}
        for word, g in frontier.items():
            for i in range(system.m):
                w = word + (i,)
                nxt[w] = apply_field_grid(system.fields[i], g)
                word_norms[w] = nxt[w].lp_norm(p)
        frontier = nxt
    return SobolevReport(p=p, k=k, base_norm=base, word_norms=word_norms,
                         total=base + sum(word_norms.values()))


# ---------------------------------------------------------------------------
# the operator L
# ---------------------------------------------------------------------------

@dataclass
class DiscreteOperator:
    """L u = sum_ij a_ij(x) X_i X_j u with a pointwise elliptic matrix.

    coefficients maps (i, j) with i <= j to a GridFunction (symmetry is
    imposed structurally); construction verifies every pointwise eigenvalue
    lies in [nu, 1/nu].
    """

    system: HormanderSystem
    coefficients: dict
    nu: float
    domain: BoxDomain

    def __post_init__(self):
        if not (0 < self.nu <= 1):
            raise ValueError("nu must lie in (0, 1]")
        m = self.system.m
        P = self.domain.num_points
        mat = np.zeros((P, m, m))
        for (i, j), g in self.coefficients.items():
            if i > j:
                raise ValueError("store coefficients with i <= j only")
            if g.domain != self.domain:
                raise ValueError("coefficient grid on a different domain")
            mat[:, i, j] = g.values.ravel()
            mat[:, j, i] = g.values.ravel()
        eigs = np.linalg.eigvalsh(mat)
        lo, hi = float(eigs.min()), float(eigs.max())
        if lo < self.nu - 1e-12 or hi > 1.0 / self.nu + 1e-12:
            raise EllipticityError(
                f"pointwise eigenvalues [{lo:.4g}, {hi:.4g}] leave "
                f"[{self.nu:.4g}, {1 / self.nu:.4g}]")

    def entry(self, i: int, j: int) -> GridFunction:
        key = (i, j) if i <= j else (j, i)
        if key in self.coefficients:
            return self.coefficients[key]
        return GridFunction(self.domain, np.zeros(self.domain.counts))

    @classmethod
    def constant(cls, system: HormanderSystem, A: np.ndarray, nu: float,
                 domain: BoxDomain) -> "DiscreteOperator":
        A = np.asarray(A, dtype=float)
        coeffs = {}
        for i in range(system.m):
            for j in range(i, system.m):
                if A[i, j] != 0.0:
                    coeffs[(i, j)] = GridFunction(
                        domain, np.full(domain.counts, A[i, j]))
        return cls(system, coeffs, nu, domain)

    @classmethod
    def identity(cls, system: HormanderSystem, domain: BoxDomain,
                 nu: float = 0.5) -> "DiscreteOperator":
        return cls.constant(system, np.eye(system.m), nu, domain)


def apply_L(op: DiscreteOperator, u: GridFunction) -> GridFunction:
    """sum_ij a_ij(x) X_i X_j u; margin grows by two stencil widths."""
    sys_ = op.system
    out = np.zeros(op.domain.counts)
    margin = u.margin + 2
    first = [apply_field_grid(sys_.fields[j], u) for j in range(sys_.m)]
    for i in range(sys_.m):
        for j in range(sys_.m):
            a = op.entry(i, j)
            if not np.any(a.values):
                continue
            second = apply_field_grid(sys_.fields[i], first[j])
            out += a.values * second.values
            margin = max(margin, second.margin, a.margin)
    return GridFunction(op.domain, out, margin)


# ---------------------------------------------------------------------------
# estimate ratios
# ---------------------------------------------------------------------------

def apriori_ratio(op: DiscreteOperator, u: GridFunction, p: float):
    """||u||_{W^{2,p}} / (||Lu||_p + ||u||_p), with the report attached."""
    rep = sobolev_norm(op.system, u, 2, p)
    Lu = apply_L(op, u)
    denom = Lu.lp_norm(p) + u.lp_norm(p)
    if denom == 0.0:
        return 0.0, rep
    return rep.total / denom, rep


@dataclass
class InterpolationRecord:
    eps: float
    lhs: float                       # ||X_i u||_p
    rhs_first: float                 # eps * ||X_i^2 u||_p
    base: float                      # ||u||_p
    c_required: float                # smallest c with lhs <= rhs_first + c/eps * base


def interpolation_check(system: HormanderSystem, u: GridFunction, i: int,
                        p: float, eps_list):
    """Both sides of the intermediate-norm inequality per epsilon.

    Returns (records, c_p) where c_p is the smallest constant making the
    inequality hold for every epsilon in the list.
    """
    Xu = apply_field_grid(system.fields[i], u)
    XXu = apply_field_grid(system.fields[i], Xu)
    lhs = Xu.lp_norm(p)
    t2 = XXu.lp_norm(p)
    t0 = u.lp_norm(p)
    records = []
    for eps in eps_list:
        rhs1 = eps * t2
        if t0 == 0.0:
            c_req = 0.0 if lhs <= rhs1 else float("inf")
        else:
            c_req = max(0.0, (lhs - rhs1) * eps / t0)
        records.append(InterpolationRecord(eps, lhs, rhs1, t0, c_req))
    return records, max(r.c_required for r in records)


def leibniz_expand(system: HormanderSystem, J, a: GridFunction,
                   w: GridFunction) -> GridFunction:
    """X_J(a w) expanded by the iterated product rule in the order of J.

    Each application of X_j maps a term (A, W) to (X_j A, W) + (A, X_j W);
    the returned grid is the sum of products of the fully expanded terms,
    and must agree with direct differentiation of a*w within stencil error.
    """
    terms = [(a, w)]
    for j in reversed(J):
        X = system.fields[j]
        nxt = []
        for A, W in terms:
            nxt.append((apply_field_grid(X, A), W))
            nxt.append((A, apply_field_grid(X, W)))
        terms = nxt
    dom = a.domain
    out = np.zeros(dom.counts)
    margin = 0
    for A, W in terms:
        out += A.values * W.values
        margin = max(margin, A.margin, W.margin)
    return GridFunction(dom, out, margin)


def higher_order_ratio(op: DiscreteOperator, u: GridFunction, k: int,
                       p: float) -> float:
    """||u||_{W^{k+2,p}} / (||Lu||_{W^{k,p}} + ||u||_p)."""
    rep = sobolev_norm(op.system, u, k + 2, p)
    Lu = apply_L(op, u)
    Lu_rep = sobolev_norm(op.system, Lu, k, p)
    denom = Lu_rep.total + u.lp_norm(p)
    if denom == 0.0:
        return 0.0
    return rep.total / denom


# ---------------------------------------------------------------------------
# manufactured test functions
# ---------------------------------------------------------------------------

def bump_expr(xs, widths, amplitude: float = 1.0) -> sp.Expr:
    """Separable Gaussian bump exp(-sum (x_k/w_k)^2)."""
    e = sp.Integer(0)
    for x, w in zip(xs, widths):
        e += (x / sp.Float(w)) ** 2
    return sp.Float(amplitude) * sp.exp(-e)


def oscillatory_expr(xs, freqs, widths) -> sp.Expr:
    """Gaussian bump times a product of axis cosines."""
    e = bump_expr(xs, widths)
    for x, f in zip(xs, freqs):
        if f:
            e *= sp.cos(sp.Float(f) * x)
    return e


def dilate_expr(system: HormanderSystem, expr: sp.Expr, xs,
                lam: float) -> sp.Expr:
    """Compose with the anisotropic dilation of the field system."""
    sub = {x: sp.Float(lam) ** w * x
           for x, w in zip(xs, system.dilations.exponents)}
    return expr.subs(sub, simultaneous=True)


def test_function_suite(xs, count: int = 10):
    """Deterministic mixed bump/oscillation expressions for norm sweeps."""
    rng = np.random.default_rng(20260826)
    out = []
    for _ in range(count):
        widths = rng.uniform(0.4, 1.0, size=len(xs))
        if rng.random() < 0.5:
            out.append(bump_expr(xs, widths, amplitude=rng.uniform(0.5, 2)))
        else:
            freqs = rng.integers(0, 4, size=len(xs))
            out.append(oscillatory_expr(xs, freqs, widths))
    return out
