"""Discrete CC metric: distances, homogeneity, volumes, covers."""

import numpy as np
import pytest

from subelliptic import geometry
from subelliptic.domain import BoxDomain
from subelliptic.geometry import (ClippedBallError, ball_volume, cc_distance,
                                  get_metric, greedy_cover,
                                  growth_exponent_fit)


def test_axis_distance_matches_euclidean(g1, dom41):
    for t in (0.5, 1.0):
        res = cc_distance(g1, (0, 0), (t, 0), dom41)
        assert res.status == "ok"
        assert abs(res.value - t) <= res.error_bound
        assert res.error_bound <= 0.2


def test_symmetry_in_x1(g1, dom41):
    a = cc_distance(g1, (0, 0), (0.8, 0.4), dom41)
    b = cc_distance(g1, (0, 0), (-0.8, 0.4), dom41)
    assert abs(a.value - b.value) <= a.error_bound + b.error_bound


def test_dilation_covariance_sample(g1, dom41):
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(8):
        y = rng.uniform(-0.6, 0.6, size=2)
        y2 = g1.dilations.apply(2.0, y)
        d1 = cc_distance(g1, (0, 0), y, dom41)
        d2 = cc_distance(g1, (0, 0), y2, dom41)
        if d1.status != "ok" or d2.status != "ok":
            continue
        assert abs(d2.value - 2 * d1.value) <= 2 * d1.error_bound + d2.error_bound
        checked += 1
    assert checked >= 5


def test_outside_domain_unresolved(g1, dom41):
    res = cc_distance(g1, (0, 0), (5, 0), dom41)
    assert res.status == "unresolved"
    assert res.value == float("inf")


def test_ball_volume_scaling(g1, dom41):
    m = get_metric(g1, dom41)
    v1 = ball_volume(g1, (0, 0), 0.4, dom41, metric=m)
    v2 = ball_volume(g1, (0, 0), 0.8, dom41, metric=m)
    # |B(0, 2r)| / |B(0, r)| = 2^q = 8 for the dilation-invariant metric
    assert v2 / v1 == pytest.approx(8.0, rel=0.2)


def test_clipped_ball_rejected(g1, dom41):
    with pytest.raises(ClippedBallError):
        ball_volume(g1, (1.8, 1.8), 1.0, dom41)


def test_growth_exponent_fit_exact():
    ratios = np.array([2.0, 4.0])
    vols = ratios ** 3
    assert growth_exponent_fit(ratios, vols) == pytest.approx(3.0)


def test_greedy_cover(g1):
    dom = BoxDomain((-1, -1), (1, 1), (21, 21))
    cover = greedy_cover(g1, dom, R=0.5, H=3.0)
    assert cover.coverage == 1.0
    assert cover.max_overlap >= 1
    assert cover.overlap_histogram[0] >= 0
    # centers form an R/2 packing: pairwise distances > R/2
    m = get_metric(g1, dom)
    for a in range(len(cover.centers)):
        d = m.distance_field(cover.centers[a])
        for b in range(a + 1, len(cover.centers)):
            idx = dom.flat_index_of(cover.centers[b])
            assert d[idx] > 0.25 - 1e-9
