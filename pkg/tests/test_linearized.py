import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import JOBS
from pinning import linearized as lin
from pinning.capacity import extremal_capacities, kappa_curve
from pinning.geometry import DefectProfile, slice_integral
from pinning.hodograph import HodographDomain, solve_hodograph

PHYSICAL_2D = lin.Calibration(2, 1 / math.pi, "physical", 1 / math.pi, [], [], "fixed for tests")
PHYSICAL_3D = lin.Calibration(3, 1 / (2 * math.pi), "physical", 1 / (2 * math.pi), [], [], "fixed for tests")


def test_kernel_constants():
    assert lin.kernel_constant(2, "paper") == 1.0
    assert lin.kernel_constant(3, "physical") == 1 / (2 * math.pi)
    with pytest.raises(ValueError):
        lin.kernel_constant(2, "other")


def test_zero_shape_gives_zero_field():
    zero = DefectProfile(2, 0.1, radial=lambda r: np.zeros_like(np.asarray(r, float)), radial_dr=None)
    sol = lin.kernel_convolve(zero, 0.0)
    rho, z = np.meshgrid(np.linspace(-3, 3, 7), np.linspace(0, 2, 5))
    assert np.all(sol.value(rho, z) == 0.0)
    assert sol.far_coefficient == 0.0


@pytest.mark.parametrize("d", [2, 3])
def test_physical_boundary_residual(d):
    sol = lin.kernel_convolve(DefectProfile(d, 1.0), 0.0, "physical")
    t = np.concatenate([np.linspace(0.0, 0.95, 20), np.linspace(1.05, 3.0, 10)])
    assert np.max(np.abs(lin.boundary_residual(sol, t))) < 1e-6


def test_paper_mode_residual_profile():
    defect = DefectProfile(2, 1.0)
    sol = lin.kernel_convolve(defect, 0.0, "paper")
    t = np.linspace(0.0, 0.9, 10)
    ratio = lin.boundary_residual(sol, t) / defect.shape_at(t, 0 * t)
    assert np.allclose(ratio, -(math.pi - 1), rtol=1e-6)


@pytest.mark.parametrize("d", [2, 3])
def test_kernel_field_harmonic_and_far_field(d):
    sol = lin.kernel_convolve(DefectProfile(d, 1.0), 0.3, "physical")
    rho, z, h = np.linspace(-2.0, 2.0, 9), 0.8, 1e-3
    if d == 3:
        rho = np.abs(rho) + 0.5
    lap = (sol.value(rho, z + h) + sol.value(rho, z - h) - 2 * sol.value(rho, z)) / h**2
    lap += (sol.value(rho + h, z) + sol.value(rho - h, z) - 2 * sol.value(rho, z)) / h**2
    if d == 3:
        lap += (sol.value(rho + h, z) - sol.value(rho - h, z)) / (2 * h) / rho
    assert np.max(np.abs(lap)) < 1e-4
    r = 200.0
    G = math.log(r) if d == 2 else 1 / r
    assert abs(sol.value(r, 0.0) - sol.far_coefficient * G) < 2e-3 * abs(sol.far_coefficient * G)


@pytest.fixture(scope="module")
def remainders():
    return {sg: lin.fixed_point_remainder(DefectProfile(2, sg), 0.0) for sg in (0.04, 0.02, 0.01)}


def test_remainder_stays_bounded(remainders):
    norms = [r.remainder_norm for r in remainders.values()]
    assert max(norms) < 2 * min(norms)


def test_contraction_factor_scales_with_sigma(remainders):
    first = [r.increments[1] / r.increments[0] for r in remainders.values()]
    assert all(0.4 < b / a < 0.6 for a, b in zip(first, first[1:]))


def test_remainder_capacity_against_nonlinear(remainders):
    sigma = 0.02
    f = solve_hodograph(HodographDomain(d=2), DefectProfile(2, sigma), 0.0)
    assert abs(remainders[sigma].capacity - (-f.k_h)) < 3 * sigma**2


def test_remainder_needs_nonzero_sigma():
    with pytest.raises(ValueError):
        lin.fixed_point_remainder(DefectProfile(2, 0.0), 0.0)


def test_prediction_requires_calibration(monkeypatch):
    monkeypatch.setattr(lin, "_CALIBRATIONS", {})
    with pytest.raises(LookupError, match="calibration missing"):
        lin.predict_capacity(DefectProfile(2, 0.01), 0.0)


def test_prediction_examples():
    defect = DefectProfile(2, 0.01)
    assert lin.predict_capacity(defect, 0.0, sigma=0.0, calibration=PHYSICAL_2D) == 0.0
    expected = 0.01 * 16 / 15 / math.pi
    assert math.isclose(lin.predict_capacity(defect, 0.0, calibration=PHYSICAL_2D), expected, rel_tol=1e-10)


def test_calibration_round_trip(tmp_path):
    path = tmp_path / "cal.json"
    PHYSICAL_3D.save(path)
    assert lin.Calibration.load(path) == PHYSICAL_3D


@settings(max_examples=60, deadline=None)
@given(d=st.sampled_from([2, 3]), s=st.floats(-1.5, 1.5), sigma=st.floats(1e-4, 0.3))
def test_prediction_identities(d, s, sigma):
    cal = PHYSICAL_2D if d == 2 else PHYSICAL_3D
    defect = DefectProfile(d, sigma)
    p1 = lin.predict_capacity(defect, s, calibration=cal)
    p2 = lin.predict_capacity(defect, s, sigma=2 * sigma, calibration=cal)
    assert p1 >= 0
    assert p2 == 2 * p1
    assert abs(p1 - cal.constant * sigma * slice_integral(defect, s)) < 1e-12


def test_interval_containment_d3():
    gaps = {}
    for sigma in (0.04, 0.02, 0.01):
        curve = kappa_curve(DefectProfile(3, sigma), s_min=-1.2, s_max=1.2, ds=0.2, jobs=JOBS)
        preds = [lin.predict_capacity(DefectProfile(3, sigma), s, calibration=PHYSICAL_3D) for s in curve.s]
        k_rec, k_adv = extremal_capacities(curve)
        assert k_rec <= 0 <= k_adv
        gaps[sigma] = (abs(k_adv - max(preds)) / sigma**2, abs(k_rec - min(preds)) / sigma**2)
    C = max(max(g) for g in gaps.values())
    # the fitted constant must not blow up as sigma halves
    assert C < 1.0
    assert gaps[0.01][0] < 2 * gaps[0.04][0] + 1e-9
