import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinning import barriers as B


def test_log_hodograph_boundary_derivative():
    x = np.array([[2.0, 0.0]])
    for variant in ("corrected", "literal"):
        for sign in (+1, -1):
            _, g, _ = B.log_psi(x, sign, variant)
            assert math.isclose(g[0, 1], sign * 0.25, rel_tol=1e-14)
    v, _, _ = B.log_psi(np.array([[1.0, 0.0]]), +1)
    assert v[0] == 0.0


def test_log_hodograph_threshold():
    vs0 = B.search_varsigma0()
    assert vs0 >= 0.02
    sub, sup = B.barrier_log_hodograph(vs0)
    assert B.verify_barrier(sub).passed and B.verify_barrier(sup).passed


def test_literal_log_hodograph_fails():
    sub, sup = B.barrier_log_hodograph(0.02, variant="literal")
    assert not (B.verify_barrier(sub).passed and B.verify_barrier(sup).passed)


def test_fundie_exponents_and_signs():
    sup, sub = B.barrier_fundie(0.5, 3, c=0.1)
    assert sup.params["beta"] == -0.5 and sup.params["sign"] == 1.0
    sup, sub = B.barrier_fundie(1.5, 3, c=0.1)
    assert sup.params["beta"] == 0.5 and sup.params["sign"] == -1.0
    with pytest.raises(ValueError):
        B.barrier_fundie(1.0, 3, c=0.1)


def test_fundie_constant_search():
    c = B.search_c_delta(0.5, 3)
    assert c >= 0.05
    sup, sub = B.barrier_fundie(0.5, 3)
    assert B.verify_barrier(sup).passed and B.verify_barrier(sub).passed


def test_small_sigma_constant_and_zero_amplitude():
    b = B._small_sigma_3d(0.0)
    assert b.params["C"] == 4.0
    x = np.random.default_rng(0).uniform(-3, 3, (200, 3))
    assert np.array_equal(b.value(x), x[:, -1])


def test_small_sigma_3d_patch_at_005():
    b = B._small_sigma_3d(0.05)
    jump, gap = B.interface_jump(b)
    assert gap < 1e-9 and jump > 0
    _, bnd = b.sampler(300)
    outside = np.linalg.norm(bnd, axis=1) > b.info["interface_radius"]
    assert np.all(np.sum(b.info["outer_grad"](bnd[outside]) ** 2, axis=1) > 1.0)


def test_small_sigma_threshold_enforced():
    sigma0 = B.search_sigma0(3)
    assert sigma0 > 0
    with pytest.raises(ValueError):
        B.barrier_small_sigma(2 * sigma0, 3)
    for sg in (sigma0, -sigma0):
        b = B.barrier_small_sigma(sg, 3)
        assert B.verify_barrier(b).passed
        jump, gap = B.interface_jump(b)
        assert jump > 0 and gap < 1e-9


def test_mollified_2d_barrier():
    sigma0 = B.search_sigma0(2)
    assert sigma0 > 0
    b = B.barrier_small_sigma(-0.5 * sigma0, 2)
    assert b.role == "sub" and B.verify_barrier(b).passed
    # hodograph subsolution is a physical supersolution: slope at most Q on the front above the defect
    slope = b.info["physical_front_slope"](np.linspace(-0.4, 0.4, 9))
    assert np.all(slope <= 1 - 0.5 * sigma0 + 1e-6)


def test_line_sink_depth():
    assert 0.05 < B.line_sink_depth(5.0) - 5.0 < 0.08
    gaps = [B.line_sink_depth(R) - R for R in (4.0, 6.0, 8.0)]
    assert gaps[0] > gaps[1] > gaps[2] > 0
    z = B.line_sink_depth(5.0)
    assert math.isclose(z, math.log1p(10.0 / (z - 5.0)), rel_tol=1e-14)


def test_line_sink_far_field_and_front():
    assert abs(B.line_sink_far_capacity(5.0) - 10.0) < 0.2
    b = B.barrier_line_sink(5.0)
    heights = [b.info["zero_height"](rho) for rho in np.linspace(0.0, 20.0, 41)]
    assert min(heights) > 0
    rep = B.verify_barrier(b)
    assert rep.passed and b.role == "sub"
    assert b.info["sigma_achieved"] > 0


def test_point_source_roots_and_slope():
    s0, s1, s2 = B.point_source_roots(2.0, 3)
    assert abs(s0 - (-3 + math.sqrt(5)) / 2) < 1e-12
    assert abs(s1 - (-3 - math.sqrt(5)) / 2) < 1e-12
    assert abs(s2 - (-3 - math.sqrt(13)) / 2) < 1e-12
    b = B.barrier_point_source(2.0, 3)
    assert math.isclose(b.info["slope_at_s0"], 1 - 1 / (s0 + 3) ** 2, rel_tol=1e-12)
    assert math.isclose(b.info["slope_at_s0"], 0.854102, abs_tol=1e-6)
    assert B.verify_barrier(b, n=500).passed


def test_point_source_pinch_limit():
    ts = (1e-2, 1e-3, 1e-4)
    slopes = [B.barrier_point_source(1 + t, 3).info["slope_at_s0"] for t in ts]
    assert slopes[0] > slopes[1] > slopes[2]
    # the pinch closes like sqrt(r - 1)
    assert all(abs(sl / (2 * math.sqrt(t)) - 1) < 0.1 for sl, t in zip(slopes, ts))
    with pytest.raises(ValueError, match="no pinch"):
        B.point_source_roots(1.0, 3)


def test_log_supersolution():
    with pytest.raises(ValueError):
        B.barrier_log_supersolution(0.3, -1.0)
    plane = B.barrier_log_supersolution(0.0, 0.0)
    _, bnd = plane.sampler(50)
    assert np.allclose(np.linalg.norm(plane.gradient(bnd), axis=1), 1.0)
    b = B.barrier_log_supersolution(0.3, 1.0)
    _, bnd = b.sampler(500)
    r = np.linalg.norm(bnd, axis=1)
    assert r.min() >= 3 and r.max() <= 100 + 1e-9
    g2 = np.sum(b.gradient(bnd) ** 2, axis=1)
    assert np.allclose(g2, b.info["slope_squared_formula"](bnd), atol=1e-12)
    assert np.all(g2 <= 1.0) and B.verify_barrier(b).passed


def test_plane_margins_vanish():
    for role in ("sub", "super"):
        rep = B.verify_barrier(B.barrier_plane(role))
        assert rep.passed and abs(rep.min_margin) <= 1e-12


def test_verify_rejects_samples_outside_domain():
    b = B.barrier_log_supersolution(0.3, 1.0)
    with pytest.raises(ValueError):
        B.verify_barrier(b, samples=(np.zeros((0, 2)), np.array([[1.0, 0.0]])))


def test_make_barrier_dispatch():
    assert B.make_barrier("point_source", r=2.0).kind == "point_source"
    with pytest.raises(ValueError):
        B.make_barrier("nonexistent")


@settings(max_examples=40, deadline=None)
@given(r=st.floats(1.05, 6.0))
def test_point_source_root_ordering(r):
    s0, s1, s2 = B.point_source_roots(r, 3)
    assert s2 < -(r + 1) < s1 < -r < s0 < 0
    for s in (s0, s1, s2):
        assert abs(s + 1 / abs(s + r + 1)) < 1e-12
