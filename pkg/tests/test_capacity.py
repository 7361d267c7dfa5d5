import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import JOBS, ball_family
from pinning.capacity import (
    FitError,
    ball_state,
    extrapolate_kappa,
    extremal_capacities,
    fit_capacity,
    hausdorff,
    kappa_curve,
    log_lower_bound_constant,
    strip_solve,
    sweep_kappa_R,
)
from pinning.geometry import DefectProfile, slice_integral
from pinning.hodograph import HodographDomain, solve_hodograph

X, Z = np.meshgrid(np.linspace(-40, 40, 81), np.linspace(0, 40, 41), indexing="ij")
R = np.hypot(X, Z)


@settings(max_examples=100, deadline=None)
@given(c=st.floats(-5, 5), k=st.floats(-5, 5), d=st.sampled_from([2, 3]))
def test_fit_round_trip(c, k, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        G = np.log(R) if d == 2 else 1.0 / R
    with np.errstate(invalid="ignore"):
        rec = fit_capacity((X, Z, c + k * G), window=(2.0, 40.0), d=d, tol=1e-9)
    assert abs(rec.meta["k_hodograph"] - k) < 1e-10 and abs(rec.s + c) < 1e-10
    assert rec.k == (-rec.meta["k_hodograph"] if d == 2 else rec.meta["k_hodograph"])
    assert rec.residual < 1e-10


def test_fit_rejects_bad_windows():
    with pytest.raises(FitError):
        fit_capacity((X, Z, np.zeros_like(X)), window=(1.0, 10.0), d=2)
    with pytest.raises(FitError, match="no flat expansion"):
        fit_capacity((X, Z, 0.1 * Z), window=(2.0, 40.0), d=3)


def test_small_defect_capacity_decides_constant():
    sigma = 0.01
    defect = DefectProfile(2, sigma)
    rec = fit_capacity(solve_hodograph(HodographDomain(d=2), defect, 0.0))
    ratio = rec.k / sigma
    I0 = slice_integral(defect, 0.0)
    assert abs(ratio - I0 / math.pi) < 0.25 * I0 / math.pi
    assert abs(ratio - I0) > 0.25 * I0


def test_extrapolation_is_exact_on_its_model():
    Rs = [50.0, 100.0, 200.0]
    k, a = extrapolate_kappa(Rs, [0.3 - 0.7 / math.log(r) for r in Rs])
    assert math.isclose(k, 0.3, abs_tol=1e-12) and math.isclose(a, 0.7, abs_tol=1e-12)


def test_hausdorff():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 0.5], [1.0, 0.5], [2.0, 0.5]])
    assert math.isclose(hausdorff(a, b), math.hypot(1.0, 0.5))
    assert hausdorff(a, a) == 0.0


@pytest.fixture(scope="module")
def sweeps():
    fam = ball_family(0.2)
    defect = DefectProfile(2, 0.2)
    return fam, {
        "adv": sweep_kappa_R(defect, 50.0, "adv", family=fam),
        "rec": sweep_kappa_R(defect, 50.0, "rec", family=fam),
        "fine": sweep_kappa_R(defect, 50.0, "adv", family=fam, k_step=0.01),
    }


def test_sweep_signs_and_interval(sweeps):
    _, sw = sweeps
    assert sw["rec"].kappa_R_capacity <= 0 <= sw["adv"].kappa_R_capacity
    assert sw["adv"].kappa_R_capacity > 0
    for res in sw.values():
        flags = res.pinned.astype(int)
        assert flags[0] == 1 and np.all(np.diff(flags) <= 0)


def test_sweep_refinement_is_monotone(sweeps):
    _, sw = sweeps
    assert sw["fine"].kappa_R >= sw["adv"].kappa_R - 1e-6
    assert abs(sw["fine"].kappa_R - sw["adv"].kappa_R) <= 0.02


def test_capacitory_lower_bound_uniform(sweeps):
    fam, sw = sweeps
    constants = []
    for k, _, pinned in sw["adv"].states:
        if pinned and k > 0:
            f, k_exact = ball_state(fam, k, 50.0)
            constants.append(log_lower_bound_constant(f, k_exact, 50.0))
    assert constants and max(constants) < 1.0


def test_sweep_rejects_small_radius():
    with pytest.raises(ValueError):
        sweep_kappa_R(DefectProfile(2, 0.2), 10.0, family=ball_family(0.2))


def test_strip_zero_defect():
    for s in (-1.5, 0.0, 0.5):
        assert abs(strip_solve(DefectProfile(3, 0.0), s).k) < 1e-12


def test_strip_small_defect_against_linearized():
    sigma = 0.05
    rec = strip_solve(DefectProfile(3, sigma), 0.0)
    predicted = sigma * slice_integral(DefectProfile(3, sigma), 0.0) / (2 * math.pi)
    assert rec.k > 0
    assert abs(rec.k - predicted) < 0.1 * predicted


def test_strip_requires_height_below_top():
    with pytest.raises(ValueError):
        strip_solve(DefectProfile(3, 0.1), -50.0, R=40.0)


@pytest.fixture(scope="module")
def curve():
    return kappa_curve(DefectProfile(3, 0.05), jobs=JOBS)


def test_kappa_curve_extremum_symmetric(curve):
    i = int(np.argmax(curve.kappa_adv))
    assert abs(curve.s[i]) < 0.1 + 1e-12
    k_rec, k_adv = extremal_capacities(curve)
    assert k_adv > 0 and abs(k_rec) < 1e-10
    assert -1.0 - 0.1 <= curve.support[0] and curve.support[1] <= 1.0 + 0.1


def test_extremal_capacities_zero_defect():
    flat = kappa_curve(DefectProfile(3, 0.0), ds=0.5, refine=False, jobs=JOBS)
    assert np.allclose(extremal_capacities(flat), 0.0, atol=1e-12)
