"""Ball families, maximal functions, VMO moduli, oscillation records."""

import numpy as np
import pytest

from subelliptic import maximal
from subelliptic.domain import GridFunction
from subelliptic.maximal import (CoverageGapError, abs_power, fitted_constant,
                                 hl_maximal, mean_oscillation,
                                 oscillation_check_abstract, sample_balls,
                                 sharp_maximal, vmo_modulus)


def const_grid(dom, c):
    return GridFunction(dom, np.full(dom.counts, float(c)))


def test_family_coverage_and_clipping(family41, dom41):
    assert family41.coverage(0) == 1.0
    # the largest radius is clipped somewhere near the box corners
    assert family41.clipped[:, -1].any()
    assert family41.radii[1] == pytest.approx(2 * family41.radii[0])


def test_coverage_gap_raises(g1, dom41):
    with pytest.raises(CoverageGapError):
        maximal.build_ball_family(g1, dom41, r0=0.2, num_radii=1, stride=4)


def test_maximal_of_constant_exact(family41, dom41):
    M = hl_maximal(const_grid(dom41, -3.0), family41)
    assert np.all(M.interior_values() == 3.0)


def test_sharp_of_constant_zero(family41, dom41):
    S = sharp_maximal(const_grid(dom41, 7.5), family41)
    assert np.all(S.interior_values() == 0.0)


def test_sharp_below_twice_maximal(family41, suite41):
    for f in suite41[:4]:
        M = hl_maximal(f, family41)
        S = sharp_maximal(f, family41)
        sl = S.interior_slice()
        assert np.all(S.values[sl] <= 2.0 * M.values[sl] + 1e-12)


def test_sublinearity(family41, suite41):
    f, g = suite41[0], suite41[1]
    Mfg = hl_maximal(f + g, family41)
    Mf = hl_maximal(f, family41)
    Mg = hl_maximal(g, family41)
    sl = Mfg.interior_slice()
    assert np.all(Mfg.values[sl] <= Mf.values[sl] + Mg.values[sl] + 1e-12)


def test_enlargement_never_decreases(family41, family41_fine, suite41):
    f = suite41[2]
    coarse = hl_maximal(f, family41)
    fine = hl_maximal(f, family41_fine)
    sl = fine.interior_slice()
    assert np.all(fine.values[sl] >= coarse.values[sl] - 1e-12)


def test_abs_power(dom41):
    f = const_grid(dom41, -2.0)
    assert np.all(abs_power(f, 3).values == 8.0)


def test_vmo_shift_and_bounds(family41, suite41):
    f = suite41[3]
    rep = vmo_modulus(f, family41)
    assert np.all(np.diff(rep.eta) >= 0)
    assert rep.eta[-1] <= 2 * rep.sup_norm + 1e-12
    shifted = GridFunction(f.domain, f.values + 4.0, f.margin)
    rep2 = vmo_modulus(shifted, family41)
    assert np.allclose(rep.eta, rep2.eta)


def test_vmo_constant_is_zero(family41, dom41):
    rep = vmo_modulus(const_grid(dom41, 2.0), family41)
    assert np.all(rep.eta == 0.0)
    assert rep.eta_at(10.0) == 0.0


def test_vmo_fitted_slope(family41, suite41):
    f = suite41[4]
    grad = 5.0
    rep = vmo_modulus(f, family41, grad_sup=grad)
    assert rep.fitted_slope is not None and np.isfinite(rep.fitted_slope)
    assert np.all(rep.eta <= rep.fitted_slope * rep.radii * grad + 1e-12)


def test_oscillation_record_trivial(family41, dom41):
    z = const_grid(dom41, 0.0)
    Mz = hl_maximal(z, family41)
    samples = sample_balls(family41, family41.radii[0], 2.0, limit=3)
    assert samples
    ci, x0 = samples[0]
    rec = oscillation_check_abstract(z, z, Mz, family41, ci,
                                     family41.radii[0], x0, k=2.0, p=2.0)
    assert rec.lhs == 0.0 and rec.rhs == 0.0 and rec.ratio == 0.0


def test_oscillation_record_fitted(family41, suite41):
    f = suite41[5]
    Mf = hl_maximal(f, family41)
    trust = f.interior_mask().ravel()
    recs = []
    for ci, x0 in sample_balls(family41, family41.radii[0], 2.0, trust, 10):
        recs.append(oscillation_check_abstract(
            f, f, Mf, family41, ci, family41.radii[0], x0, k=2.0, p=2.0))
    c = fitted_constant(recs)
    assert np.isfinite(c) and c >= 0
    for r in recs:
        assert r.lhs <= c * r.rhs + 1e-12


def test_oscillation_skips_clipped_enlargement(family41, dom41):
    f = const_grid(dom41, 1.0)
    Mf = hl_maximal(f, family41)
    # a 8x enlargement of the outer radius cannot fit in the box
    rec = oscillation_check_abstract(f, f, Mf, family41, 0,
                                     family41.radii[-1], 0, k=8.0, p=2.0)
    assert rec.skipped
    with pytest.raises(ValueError):
        fitted_constant([rec])


def test_oscillation_k_guard(family41, dom41):
    f = const_grid(dom41, 1.0)
    with pytest.raises(ValueError):
        oscillation_check_abstract(f, f, f, family41, 0,
                                   family41.radii[0], 0, k=1.0, p=2.0)


def test_mean_oscillation_matches_definition():
    vals = np.array([1.0, 3.0, 5.0, 100.0])
    mask = np.array([True, True, True, False])
    assert mean_oscillation(vals, mask) == pytest.approx(4.0 / 3.0)
