"""Truncated singular kernels, cancellation constants, operator action."""

import numpy as np
import pytest

from subelliptic import kernels
from subelliptic.domain import BoxDomain, GridFunction, MarginError
from subelliptic.kernels import (CutoffProfile, TruncatedKernel, apply_T_grid,
                                 base_shell_integral, cancellation_metric,
                                 flux_constant, kernel_eval,
                                 lifted_abs_integral, shell_constant,
                                 smoothed_vs_singular)


@pytest.fixture(scope="module")
def gamma2(lift1):
    from subelliptic.liftgroup import calibrate_equivalence
    return calibrate_equivalence(lift1).gamma2


def test_cutoff_profile_plateau(gamma2):
    prof = CutoffProfile(0.1, 1.0, gamma2)
    for t in (0.1 / gamma2, 0.5 / gamma2, 1.0 / gamma2):
        assert prof((t, 0.0, 0.0)) == pytest.approx(1.0)
    assert prof((2.0 / gamma2 + 0.01, 0.0, 0.0)) == 0.0
    assert prof((0.04 / gamma2, 0.0, 0.0)) == 0.0
    with pytest.raises(ValueError):
        CutoffProfile(1.0, 0.5, gamma2)


def test_truncated_kernel_finite_and_truncated(gamma2):
    k = TruncatedKernel(0, 0, 0.1, 1.0)
    x = np.array([0.3, 0.2])
    near = k(x, x + (0.2, 0.0))
    assert np.isfinite(near) and near != 0.0
    # pairs far beyond the outer cutoff see a zero kernel
    far = k(x, x + (3.0 / gamma2 * 1.0, 0.0))
    assert far == 0.0


def test_cancellation_metric_small():
    assert cancellation_metric(0, 0) <= 1e-3


def test_flux_constant_radius_independent():
    c1 = flux_constant(0, 1, r=1.0)
    c2 = flux_constant(0, 1, r=0.7)
    assert c1 == pytest.approx(c2, rel=1e-2, abs=1e-10)


def test_shell_matches_flux_and_profile_free():
    cf = flux_constant(1, 1)
    cq = shell_constant(1, 1, profile="quintic")
    cc = shell_constant(1, 1, profile="cosine")
    assert cq == pytest.approx(cf, rel=1e-2, abs=1e-10)
    assert cq == pytest.approx(cc, rel=5e-3, abs=1e-10)
    with pytest.raises(ValueError):
        shell_constant(1, 1, profile="linear")


def test_lifted_integral_log_linear():
    vals = [lifted_abs_integral(0, 0, eps, 1.0)
            for eps in (0.02, 0.04, 0.08)]
    assert vals[0] > vals[1] > vals[2] > 0
    d1, d2 = vals[0] - vals[1], vals[1] - vals[2]
    assert d1 == pytest.approx(d2, rel=0.05)


def test_kernel_eval_diagonal_guard():
    with pytest.raises(ValueError):
        kernel_eval(0, 0, (0.3, 0.2), (0.3, 0.2))
    assert np.isfinite(kernel_eval(0, 0, (0.3, 0.2), (0.5, 0.1)))


def test_base_shell_degenerate_interval():
    assert base_shell_integral(0, 0, (0.0, 0.0), 0.5, 0.5) == 0.0


def bump_grid(dom, center, rad):
    pts = dom.points()
    r2 = np.sum((pts - center) ** 2, axis=1) / rad ** 2
    vals = np.where(r2 < 1, np.exp(-1 / np.maximum(1 - r2, 1e-300)), 0.0)
    return GridFunction(dom, vals.reshape(dom.counts))


def test_apply_T_grid_zero_and_linear():
    dom = BoxDomain((-2, -2), (2, 2), (41, 41))
    k = TruncatedKernel(0, 0, 0.2, 0.5)
    z = GridFunction(dom, np.zeros(dom.counts))
    assert np.all(apply_T_grid(k, z).values == 0.0)
    f = bump_grid(dom, (0.0, 0.0), 0.4)
    Tf = apply_T_grid(k, f)
    T2f = apply_T_grid(k, GridFunction(dom, 2.0 * f.values))
    assert np.allclose(T2f.values, 2.0 * Tf.values)
    assert np.abs(Tf.values).max() > 0


def test_apply_T_grid_boundary_guard():
    dom = BoxDomain((-2, -2), (2, 2), (41, 41))
    k = TruncatedKernel(0, 0, 0.2, 1.0)
    f = bump_grid(dom, (1.8, 1.8), 0.3)
    with pytest.raises(MarginError):
        apply_T_grid(k, f)


def test_smoothed_matches_singular():
    # separations chosen inside the agreement window of (eps, R) = (.02, 8)
    rng = np.random.default_rng(3)
    pairs = []
    for s in (0.18, 0.22, 0.26, 0.3):
        x = rng.uniform(-0.7, 0.7, 2)
        pairs.append((x, x + (s, 0.0)))
        pairs.append((x, x + (-s, 0.02)))
    gap = smoothed_vs_singular(0, 0, eps=0.02, R=8.0, pairs=pairs)
    assert gap <= 0.02
