"""Capacity extraction, finite-radius pinning sweeps (d = 2) and strip curves (d = 3).

Sign conventions (physical):
    d = 2:  u = x_d + s + k log|x| + o(1)     hodograph  v = -s + k_h log|y|,  k = -k_h
    d = 3:  u = x_d + s - k / |x| + ...        hodograph  v = -s + k_h / |y|,   k =  k_h
Positive k is the advancing side.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import DefectProfile
from .hodograph import (
    FarField,
    HodographDomain,
    HodographField,
    SolverError,
    green,
    solve_hodograph,
)


class FitError(ValueError):
    pass


@dataclass
class CapacityRecord:
    s: float
    k: float
    fit_window: tuple[float, float]
    residual: float
    convention: str = "physical"
    d: int = 2
    meta: dict = field(default_factory=dict)


def fit_far_field(rho, z, values, d: int, window=(2.0, math.inf), basis=None, tol: float = 1e-3) -> tuple[float, float, float]:
    """Least-squares fit values ≈ c + k_h G over the annulus window; returns (c, k_h, max residual).

    G is log|y| (d = 2) or |y|^{-1} (d = 3) unless `basis` supplies G values.
    """
    rho = np.asarray(rho, float).ravel()
    z = np.asarray(z, float).ravel()
    values = np.asarray(values, float).ravel()
    r = np.hypot(rho, z)
    r_min, r_max = window
    if r_min < 2.0:
        raise FitError("fit window must satisfy r_min >= 2")
    mask = (r >= r_min) & (r <= r_max)
    if mask.sum() < 3:
        raise FitError("no flat expansion in window (too few samples)")
    if basis is None:
        G = np.log(r[mask]) if d == 2 else r[mask] ** (2 - d)
    else:
        G = np.asarray(basis, float).ravel()[mask]
    M = np.column_stack([np.ones(mask.sum()), G])
    coef, *_ = np.linalg.lstsq(M, values[mask], rcond=None)
    res = float(np.max(np.abs(M @ coef - values[mask])))
    if res > tol:
        raise FitError(f"no flat expansion in window (residual {res:.3e})")
    return float(coef[0]), float(coef[1]), res


def fit_capacity(fieldv, window: Optional[tuple[float, float]] = None, d: Optional[int] = None,
                 tol: float = 1e-3) -> CapacityRecord:
    """Fit the one-term far-field ansatz and convert to physical (s, k).

    `fieldv` is a HodographField or a tuple (rho, z, values) of hodograph samples.
    """
    if isinstance(fieldv, HodographField):
        d = fieldv.d
        H = fieldv.closure.top(fieldv.domain)
        if window is None:
            window = (4.0, 0.5 * min(fieldv.domain.L, H))
        if window[1] > max(fieldv.domain.L, H):
            raise FitError("fit window exceeds the computational domain")
        X, Z = np.meshgrid(fieldv.xs, fieldv.zs, indexing="ij")
        V = fieldv.v
        basis = green(d, X, Z, fieldv.closure, H) if fieldv.closure.kind == "strip" else None
    else:
        if d is None:
            raise ValueError("dimension required for raw samples")
        X, Z, V = fieldv
        window = window or (2.0, math.inf)
        basis = None
    c, kh, res = fit_far_field(X, Z, V, d, window, basis=basis, tol=tol)
    k = -kh if d == 2 else kh
    return CapacityRecord(s=-c, k=k, fit_window=tuple(window), residual=res, d=d,
                          meta={"k_hodograph": kh, "c_hodograph": c})


def front_distance(fieldv: HodographField) -> float:
    """min over the free boundary of |x|, i.e. how deep the front sits inside B̄₁."""
    y, h = fieldv.front()
    return float(np.min(np.hypot(y, h)))


# ---------------------------------------------------------------------------
# single-site families


@dataclass
class FamilyPoint:
    s: float
    k: float
    front_min: float
    field: Optional[HodographField] = None


def _family_chunk(args):
    defect, domain, s_values, keep = args
    out = []
    prev: Optional[HodographField] = None
    for s in s_values:
        init = None if prev is None else prev.v + (prev.closure.s - s)
        init_k = 0.0 if prev is None else prev.k_h
        f = solve_hodograph(domain, defect, FarField("height", s=s), initial=init, initial_k=init_k)
        k = -f.k_h if domain.d == 2 else f.k_h
        out.append(FamilyPoint(s, k, front_distance(f), f if keep else None))
        prev = f
    return out


def parallel_map(fn, items: Sequence, jobs: int = 1):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    try:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    except Exception:  # unpicklable profiles fall back to serial
        return [fn(it) for it in items]


def single_site_family(defect: DefectProfile, s_values: Sequence[float], domain: Optional[HodographDomain] = None,
                       jobs: int = 1, keep_fields: bool = False) -> list[FamilyPoint]:
    """Solutions with prescribed height s, by continuation in s (chunked over workers)."""
    domain = domain or HodographDomain(d=defect.d)
    s_values = list(s_values)
    n = max(1, min(jobs, len(s_values)))
    chunks = [list(c) for c in np.array_split(np.array(s_values), n) if len(c)]
    # start each chunk near s = 0 is not needed: continuation is from the chunk's first point
    results = parallel_map(_family_chunk, [(defect, domain, c, keep_fields) for c in chunks], jobs)
    return [p for chunk in results for p in chunk]


# ---------------------------------------------------------------------------
# finite-radius pinning (d = 2)


@dataclass
class PinningSweepResult:
    R: float
    direction: str
    k_grid: np.ndarray
    pinned: np.ndarray
    kappa_R: float  # literal: sup of k whose extremal state meets the closed unit ball
    kappa_R_capacity: float  # extremal realized capacity along the pinned branch
    jump_gap: float
    s_branch: tuple[float, float]
    s_after: float
    states: list = field(default_factory=list)  # (k, s*, pinned) along the grid


class BallFamily:
    """Interpolated single-site family s ↦ (k(s), front distance) used for every R."""

    def __init__(self, defect: DefectProfile, domain: Optional[HodographDomain] = None, s_lo: float = -1.0,
                 s_hi: float = 1.0, ds: float = 0.025, margin: float = 0.6, jobs: int = 1):
        if defect.d != 2:
            raise ValueError("finite-radius pinning sweeps are for d = 2")
        self.defect = defect
        self.domain = domain or HodographDomain(d=2)
        self.s_lo, self.s_hi = s_lo, s_hi
        grid = np.round(np.arange(s_lo - margin, s_hi + margin + 0.5 * ds, ds), 12)
        try:
            pts = single_site_family(defect, grid, self.domain, jobs=jobs)
        except SolverError as exc:
            raise SolverError(f"non-graph front (defect too strong): {exc}") from exc
        self.points = pts
        self.s = np.array([p.s for p in pts])
        self.k = np.array([p.k for p in pts])
        self.m = np.array([p.front_min for p in pts])
        self._k = CubicSpline(self.s, self.k)
        self._m = CubicSpline(self.s, self.m)

    def capacity(self, s):
        return self._k(s)

    def front_min(self, s):
        return self._m(s)

    def solve_at(self, s: float) -> HodographField:
        return solve_hodograph(self.domain, self.defect, FarField("height", s=float(s)))


def _first_crossing(fun, level: float, a: float, b: float, step: float) -> float:
    """First t from a towards b with fun(t) = level (bisection inside the first sign change)."""
    sgn0 = np.sign(fun(a) - level)
    n = max(2, int(math.ceil(abs(b - a) / step)))
    ts = np.linspace(a, b, n + 1)
    vals = fun(ts) - level
    for i in range(1, len(ts)):
        if np.sign(vals[i]) != sgn0 or vals[i] == 0:
            lo, hi = ts[i - 1], ts[i]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if np.sign(fun(mid) - level) == sgn0:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)
    return math.inf if b > a else -math.inf


def extremal_height(family: BallFamily, k: float, R: float, direction: str = "adv") -> float:
    """Height s of the extremal B_R state with data (x_d + k log R)_+.

    A state of the ball problem is a single-site solution of height s with
    k = k(s) + s / log R.  The minimal supersolution above (x_d − 1)_+ is reached
    by advancing the front monotonically from the obstacle (s = −1) to the first
    such s; the receding case starts from s = +1 and moves down.
    """
    logR = math.log(R)
    kR = lambda s: family.capacity(s) + np.asarray(s) / logR
    start, stop = (-1.0, family.s[-1]) if direction == "adv" else (1.0, family.s[0])
    return _first_crossing(kR, k, start, stop, 0.25 * (family.s[1] - family.s[0]))


def sweep_kappa_R(defect: DefectProfile, R: float, direction: str = "adv", tolerance: float = 1e-6,
                  family: Optional[BallFamily] = None, k_step: float = 0.02, pin_tol: Optional[float] = None,
                  jobs: int = 1) -> PinningSweepResult:
    """Pinned flags of the extremal B_R states on a k-grid plus the bisected threshold.

    κ^R is the last pinned k (ties classify as detached).  `kappa_R_capacity`
    is the extremal far-field capacity realized along the pinned branch.
    """
    if R < 20:
        raise ValueError("R must be at least 20")
    if direction not in ("adv", "rec"):
        raise ValueError("direction must be 'adv' or 'rec'")
    family = family or BallFamily(defect, jobs=jobs)
    pin_tol = family.domain.h if pin_tol is None else pin_tol
    sign = 1.0 if direction == "adv" else -1.0

    def pinned(k: float) -> tuple[bool, float]:
        s = extremal_height(family, k, R, direction)
        return (bool(np.isfinite(s) and family.front_min(s) <= 1.0 + pin_tol), s)

    ks, flags, states = [], [], []
    first_off = None
    j = 0
    while first_off is None or j <= max(first_off + 5, int(1.5 * first_off)):
        k = sign * j * k_step
        p, s = pinned(k)
        ks.append(k)
        flags.append(p)
        states.append((k, s, p))
        if not p and first_off is None:
            first_off = j
        j += 1
        if j * k_step > 50.0:
            raise SolverError("non-graph front (defect too strong)")
    flags_arr = np.array(flags)
    if np.any(np.diff(flags_arr.astype(int)) > 0):
        raise SolverError("pinned set is not an interval")
    if first_off == 0:
        kappa, lo, hi = 0.0, 0.0, 0.0
    else:
        lo, hi = (first_off - 1) * k_step, first_off * k_step
        while hi - lo > tolerance:
            mid = 0.5 * (lo + hi)
            if pinned(sign * mid)[0]:
                lo = mid
            else:
                hi = mid
        kappa = sign * lo
    s0 = extremal_height(family, 0.0, R, direction)
    s_before = extremal_height(family, sign * lo, R, direction)
    s_after = extremal_height(family, sign * hi, R, direction)
    kcap = 0.0
    if first_off > 0:
        ss = np.linspace(*sorted((s0, s_before)), 801)
        caps = family.capacity(ss)
        kcap = max(float(np.max(caps)), 0.0) if direction == "adv" else min(float(np.min(caps)), 0.0)
    gap = _front_gap(family, s_before, s_after)
    return PinningSweepResult(R, direction, np.array(ks), flags_arr, kappa, kcap, gap, (s0, s_before), s_after, states)


def _front_at(family: BallFamily, s: float, window: float = 4.0) -> np.ndarray:
    if not np.isfinite(s):
        return np.zeros((0, 2))
    f = family.solve_at(s)
    y, hgt = f.front()
    sel = np.abs(y) <= window
    return np.column_stack([y[sel], hgt[sel]])


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return math.inf
    D = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def _front_gap(family: BallFamily, s1: float, s2: float) -> float:
    if not (np.isfinite(s1) and np.isfinite(s2)):
        return math.inf
    if abs(s1 - s2) < 1e-12:
        return 0.0
    return hausdorff(_front_at(family, s1), _front_at(family, s2))


def ball_state_k(fieldv: HodographField, R: float) -> float:
    """The k for which a height-s single-site solution solves the B_R problem exactly."""
    return -fieldv.k_h + fieldv.closure.s / math.log(R)


def ball_state(family: BallFamily, k: float, R: float, direction: str = "adv") -> tuple[HodographField, float]:
    """Extremal B_R state for data (x_d + k log R)_+, as (field, exact k solved by that field)."""
    f = family.solve_at(extremal_height(family, k, R, direction))
    return f, ball_state_k(f, R)


def ball_state_bounds(fieldv: HodographField, R: float, k: Optional[float] = None) -> tuple[float, float]:
    """Margins of (x_d − 1)_+ ≤ u ≤ (x_d + k log R)_+ inside B_R, in hodograph form −k log R ≤ v ≤ 1.

    Returns (min of v + k log R, min of 1 − v); both must be ≥ 0.  k defaults to
    the exact data of the state.
    """
    k = ball_state_k(fieldv, R) if k is None else k
    X, Z = np.meshgrid(fieldv.xs, fieldv.zs, indexing="ij")
    inside = np.hypot(X, Z) <= R
    vals = [fieldv.v[inside]]
    # beyond the grid the far-field ansatz is monotone in |y|
    for r in np.geomspace(fieldv.domain.L, R, 16) if R > fieldv.domain.L else ():
        vals.append(np.array([fieldv.far_value(r, 0.0)]))
    v = np.concatenate(vals)
    return float(np.min(v + k * math.log(R))), float(np.min(1.0 - v))


def log_lower_bound_constant(fieldv: HodographField, k: float, R: float) -> float:
    """Smallest C with u ≥ x_d + k log|x| − C on grid nodes with 2 ≤ |x| ≤ R."""
    X, Z = np.meshgrid(fieldv.xs, fieldv.zs, indexing="ij")
    xd = Z + fieldv.v
    r = np.hypot(X, xd)
    sel = (r >= 2.0) & (r <= R)
    return float(np.max(xd[sel] + k * np.log(r[sel]) - Z[sel]))


def extrapolate_kappa(Rs: Sequence[float], kappas: Sequence[float]) -> tuple[float, float]:
    """Least-squares fit κ^R = k − a / log R; returns (k, a)."""
    Rs = np.asarray(Rs, float)
    M = np.column_stack([np.ones_like(Rs), -1.0 / np.log(Rs)])
    coef, *_ = np.linalg.lstsq(M, np.asarray(kappas, float), rcond=None)
    return float(coef[0]), float(coef[1])


# ---------------------------------------------------------------------------
# strip problem (d = 3)


@dataclass
class KappaCurve:
    s: np.ndarray
    kappa_adv: np.ndarray
    kappa_rec: np.ndarray
    support: tuple[float, float]
    records: list = field(default_factory=list)


def strip_bounds(fieldv: HodographField, s: float) -> tuple[float, float]:
    """Margins of (x_d + min(s,−1))_+ ≤ w ≤ (x_d + max(s,1))_+, i.e. min(−s,−1) ≤ v ≤ max(−s,1)."""
    v = fieldv.v
    return float(np.min(v - min(-s, -1.0))), float(np.min(max(-s, 1.0) - v))


def strip_solve(defect: DefectProfile, s: float, R: float = 40.0, domain: Optional[HodographDomain] = None,
                bound_tol: float = 1e-8) -> CapacityRecord:
    if defect.d != 3:
        raise ValueError("strip problem is implemented for d = 3")
    if R <= -s:
        raise ValueError("strip requires R > -s")
    domain = domain or HodographDomain(d=3, L=48.0, H=max(4.0, R + s))
    closure = FarField("strip", s=s, R=R)
    try:
        f = solve_hodograph(domain, defect, closure)
    except SolverError as exc:
        raise SolverError(f"no pinned solution at s={s}: {exc}") from exc
    lo, hi = strip_bounds(f, s)
    if lo < -bound_tol or hi < -bound_tol:
        raise AssertionError(f"a-priori strip bound violated at s={s}: margins {lo:.3e}, {hi:.3e}")
    H = closure.top(domain)
    rec = fit_capacity(f, window=(4.0, min(0.5 * H, 0.5 * domain.L)))
    rec.s = s
    rec.meta.update({"bound_margins": (lo, hi), "R": R, "k_closure": f.k_h})
    return rec


def _strip_task(args):
    defect, s, R = args
    return strip_solve(defect, s, R)


def kappa_curve(defect: DefectProfile, R: float = 40.0, s_min: float = -2.0, s_max: float = 2.0, ds: float = 0.1,
                refine: bool = True, jobs: int = 1) -> KappaCurve:
    """κ(s) on a grid, refined near the extremum.

    In the flat regime each height carries a single solution, so the advancing
    and receding curves coincide; both are reported.
    """
    grid = list(np.round(np.arange(s_min, s_max + 0.5 * ds, ds), 12))
    recs = parallel_map(_strip_task, [(defect, s, R) for s in grid], jobs)
    if refine:
        ks = np.array([r.k for r in recs])
        i = int(np.argmax(np.abs(ks)))
        extra = [grid[i] + t * ds for t in (-0.5, 0.5) if s_min < grid[i] + t * ds < s_max]
        recs += parallel_map(_strip_task, [(defect, s, R) for s in extra], jobs)
    recs.sort(key=lambda r: r.s)
    s = np.array([r.s for r in recs])
    k = np.array([r.k for r in recs])
    nz = np.flatnonzero(np.abs(k) >= 1e-4)
    support = (float(s[nz[0]]), float(s[nz[-1]])) if nz.size else (0.0, 0.0)
    return KappaCurve(s, k.copy(), k.copy(), support, recs)


def _parabolic_extremum(s: np.ndarray, k: np.ndarray, mode: str) -> float:
    i = int(np.argmax(k) if mode == "max" else np.argmin(k))
    if 0 < i < len(s) - 1:
        c = np.polyfit(s[i - 1:i + 2], k[i - 1:i + 2], 2)
        if (mode == "max" and c[0] < 0) or (mode == "min" and c[0] > 0):
            return float(np.polyval(c, -c[1] / (2 * c[0])))
    return float(k[i])


def extremal_capacities(curve) -> tuple[float, float]:
    """(k_rec, k_adv) from a KappaCurve, or from d = 2 sweeps given as {R: (κ_rec^R, κ_adv^R)}."""
    if isinstance(curve, KappaCurve):
        k_adv = _parabolic_extremum(curve.s, curve.kappa_adv, "max")
        k_rec = _parabolic_extremum(curve.s, curve.kappa_rec, "min")
        return min(k_rec, 0.0), max(k_adv, 0.0)
    Rs = sorted(curve)
    k_rec, _ = extrapolate_kappa(Rs, [curve[R][0] for R in Rs])
    k_adv, _ = extrapolate_kappa(Rs, [curve[R][1] for R in Rs])
    return k_rec, k_adv
