import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from emohead4d.completion import (FUSION_D0, FUSION_DTH, OTF_COUNT_DEFAULT, OTF_COUNT_FULL, FusionMask,
                                  build_completion, carve_otf_points, complete_positions, fuse_clouds,
                                  fusion_weight, init_otf_points, nearest_facial, propagate_motion)
from emohead4d.core import GaussianCloud, InvalidInputError
from scenes import random_scene

BOX = (np.array([-1.0, -2.0, 0.0]), np.array([1.0, 0.5, 3.0]))


def test_propagate_closed_form():
    d = np.array([[1.0, 0, 0]])
    assert np.array_equal(propagate_motion(d, np.array([0.0])), d)
    out = propagate_motion(d, np.array([10.0]))
    assert abs(out[0, 0] - np.exp(-1.0)) <= 1e-12 and out[0, 1] == 0 and out[0, 2] == 0
    assert abs(out[0, 0] - 0.36788) < 1e-5
    assert not propagate_motion(np.zeros((3, 3)), np.array([0.0, 4.0, 1e3])).any()


def test_fusion_closed_form():
    assert FUSION_D0 == 5.0 and FUSION_DTH == 10.0
    assert list(fusion_weight(np.array([3.0, 10.0, 20.0]))) == [0.0, 0.5, 1.0]


@pytest.mark.parametrize("fn", [lambda d: propagate_motion(np.ones((1, 3)), d), fusion_weight])
def test_negative_distance(fn):
    with pytest.raises(InvalidInputError):
        fn(np.array([-1e-9]))


def test_fusion_continuity():
    for edge in (FUSION_D0, FUSION_D0 + FUSION_DTH):
        lo, hi = np.nextafter(edge, 0), np.nextafter(edge, np.inf)
        w = fusion_weight(np.array([lo, edge, hi]))
        assert np.abs(np.diff(w)).max() <= 1e-12


@settings(max_examples=100)
@given(arrays(np.float64, 20, elements=st.floats(0, 100)))
def test_fusion_bounds_and_monotone(d):
    d = np.sort(d)
    w = fusion_weight(d)
    assert (w >= 0).all() and (w <= 1).all()
    assert (np.diff(w) >= 0).all()
    assert (w[d < 5] == 0).all() and (w[d > 15] == 1).all()


@settings(max_examples=100)
@given(arrays(np.float64, 3, elements=st.floats(-5, 5)), st.floats(0, 50), st.floats(0, 50))
def test_propagate_monotone_and_direction(delta, d1, d2):
    lo, hi = sorted([d1, d2])
    a = propagate_motion(delta[None], np.array([lo]))[0]
    b = propagate_motion(delta[None], np.array([hi]))[0]
    assert (np.abs(b) <= np.abs(a) + 1e-15).all()
    assert (np.sign(a) == np.sign(delta)).all() or np.allclose(a, 0)


def test_otf_defaults_and_containment():
    assert OTF_COUNT_DEFAULT == 5000 and OTF_COUNT_FULL == 85_500
    pts = init_otf_points(BOX, OTF_COUNT_FULL, seed=3)
    assert pts.shape == (85_500, 3)
    assert (pts >= BOX[0]).all() and (pts <= BOX[1]).all()
    assert np.array_equal(pts, init_otf_points(BOX, OTF_COUNT_FULL, seed=3))
    assert not np.array_equal(pts[:10], init_otf_points(BOX, 10, seed=4))


@pytest.mark.parametrize("bounds,count", [(([0, 0, 0], [1, 0, 1]), 5), (([0, 0, 0], [1, 1, 1]), 0),
                                          (([0, 0, np.nan], [1, 1, 1]), 5)])
def test_otf_errors(bounds, count):
    with pytest.raises(InvalidInputError):
        init_otf_points(bounds, count)


def test_carved_points_behind_face(rng):
    fac = np.c_[rng.uniform(-0.5, 0.5, (50, 2)), np.full(50, 1.0)]
    nrm = np.tile([0, 0, 1.0], (50, 1))
    pts = carve_otf_points(BOX, 300, fac, nrm, seed=1)
    assert len(pts) == 300
    nf = nearest_facial(pts, fac)
    assert (np.sum((pts - fac[nf.index]) * nrm[nf.index], axis=1) <= 0).all()


def brute(otf, fac):
    d = np.sqrt(((otf[:, None] - fac[None]) ** 2).sum(-1))
    return d.argmin(axis=1), d.min(axis=1)


@pytest.mark.parametrize("seed", range(5))
def test_nearest_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    otf, fac = r.normal(size=(1000, 3)), r.normal(size=(400, 3))
    nf = nearest_facial(otf, fac)
    idx, dist = brute(otf, fac)
    assert np.array_equal(nf.index, idx)
    assert np.allclose(nf.distance, dist, rtol=0, atol=1e-15)
    assert np.allclose(nf.distance, np.linalg.norm(otf - fac[nf.index], axis=1), atol=0)


def test_nearest_coincident_and_ties():
    fac = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [1.0, 0, 0]])
    otf = np.array([[2.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
    nf = nearest_facial(otf, fac)
    assert list(nf.index) == [2, 0, 1]
    assert nf.distance[0] == 0 and nf.distance[2] == 0


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_nearest_ties_on_lattice(seed):
    r = np.random.default_rng(seed)
    fac = r.integers(-3, 4, (30, 3)).astype(float)
    otf = r.integers(-3, 4, (40, 3)).astype(float) + 0.5 * r.integers(0, 2, (40, 3))
    nf = nearest_facial(otf, fac)
    idx, dist = brute(otf, fac)
    assert np.array_equal(nf.index, idx) and np.array_equal(nf.distance, dist)


def test_nearest_empty_facial():
    with pytest.raises(InvalidInputError):
        nearest_facial(np.zeros((3, 3)), np.zeros((0, 3)))


def _clouds(rng, n=12):
    a, b = random_scene(rng, n), random_scene(rng, n)
    return a, b


def test_fuse_branches_and_bound(rng):
    c, d = _clouds(rng)
    w = rng.uniform(size=12)
    w[:3], w[3:6] = 1.0, 0.0
    fused = fuse_clouds(c, d, FusionMask(w, np.zeros(12), 5.0, 10.0))
    assert len(fused) == 24
    eff_c, eff_d = fused.opacities[:12], fused.opacities[12:]
    assert (eff_d[:3] == 0).all() and (eff_c[3:6] == 0).all()
    assert np.array_equal(fused.opacity_logits, np.concatenate([c.opacity_logits, d.opacity_logits]))
    assert (eff_c + eff_d <= np.maximum(c.opacities, d.opacities) + 1e-15).all()
    for f in ("positions", "log_scales", "rotations", "sh_coeffs"):
        assert np.array_equal(getattr(fused, f), np.concatenate([getattr(c, f), getattr(d, f)]))


@settings(max_examples=30)
@given(st.integers(1, 40))
def test_fuse_count(n):
    r = np.random.default_rng(n)
    c, d = _clouds(r, n)
    assert len(fuse_clouds(c, d, FusionMask(r.uniform(size=n), np.zeros(n), 5.0, 10.0))) == 2 * n


def test_fuse_mismatch(rng):
    c, d = _clouds(rng)
    with pytest.raises(InvalidInputError):
        fuse_clouds(c, d, FusionMask(np.zeros(5), np.zeros(5), 5.0, 10.0))


def _head(rng):
    cl = random_scene(rng, 60, spread=0.05)
    cl.is_facial = np.arange(60) < 25
    return cl


def test_completion_mm_and_facial_weights(rng):
    cl = _head(rng)
    comp = build_completion(cl, unit_scale_mm=1000.0)
    otf = ~cl.is_facial
    nf = nearest_facial(cl.positions[otf], cl.positions[cl.is_facial])
    assert np.allclose(comp.mask.distance_mm[otf], 1000 * nf.distance)
    assert (comp.mask.weights[cl.is_facial] == 0).all()
    assert np.array_equal(comp.mask.weights[otf], fusion_weight(1000 * nf.distance))


def test_complete_positions(rng):
    cl = _head(rng)
    comp = build_completion(cl)
    fac = cl.positions[cl.is_facial]
    delta = rng.normal(0, 1e-3, fac.shape)
    pos = complete_positions(comp, cl.positions, fac + delta, delta)
    assert np.array_equal(pos[cl.is_facial], fac + delta)
    otf = ~cl.is_facial
    expect = cl.positions[otf] + delta[comp.nearest.index] * np.exp(-0.1 * comp.mask.distance_mm[otf])[:, None]
    assert np.allclose(pos[otf], expect, atol=1e-15)
    with pytest.raises(InvalidInputError):
        complete_positions(comp, cl.positions, fac[:-1], delta[:-1])
