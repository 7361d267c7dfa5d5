"""Explicit barrier families and a sampling verifier for their sub/supersolution inequalities.

Physical barriers are checked for Δφ and |∇φ| against Q on the zero set.
Hodograph barriers are checked for tr(A(∇v)D²v) and for the Neumann
condition Q(1 + ∂_d v) versus √(1 + |∇'v|²) on {y_d = 0}.  A hodograph
subsolution corresponds to a physical supersolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.interpolate import RectBivariateSpline
from scipy.signal import fftconvolve
from scipy.stats import qmc

from .hodograph import a_matrix, invert_hodograph

KINDS = ("small_sigma_3d", "log_hodograph_2d", "fundie", "log_supersolution_2d", "line_sink", "point_source",
         "mollified_2d", "plane")


@dataclass
class Barrier:
    kind: str
    role: str  # "sub" or "super"
    coords: str  # "physical" or "hodograph"
    d: int
    params: dict
    value: Callable[[np.ndarray], np.ndarray]
    in_domain: Callable[[np.ndarray], np.ndarray]
    sampler: Callable[[int], tuple[np.ndarray, np.ndarray]]  # -> (interior points, boundary points)
    gradient: Optional[Callable] = None
    hessian: Optional[Callable] = None
    Q: Callable[[np.ndarray], np.ndarray] = lambda x: np.ones(np.shape(x)[:-1])
    info: dict = field(default_factory=dict)


@dataclass
class VerificationReport:
    kind: str
    role: str
    n_interior: int
    n_boundary: int
    interior_margin: float
    boundary_margin: float
    min_margin: float
    worst_point: list
    budget: float
    passed: bool

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in self.__dict__.items()}


ROUNDING_FLOOR = 1e-12


def halton(n: int, dim: int) -> np.ndarray:
    return qmc.Halton(dim, scramble=False).random(n + 1)[1:]


# ---------------------------------------------------------------------------
# finite differences


def _fd_grad(f, x, h):
    d = x.shape[-1]
    g = np.empty_like(x)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        g[..., i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _fd_hess(f, x, h):
    d = x.shape[-1]
    H = np.empty(x.shape + (d,))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        H[..., i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            H[..., i, j] = H[..., j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


def _third_derivative_scale(f, x, h):
    """max over axes of |f'''| from the wide five-point stencil."""
    d = x.shape[-1]
    out = np.zeros(x.shape[:-1])
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        t = (f(x + 2 * e) - 2 * f(x + e) + 2 * f(x - e) - f(x - 2 * e)) / (2 * h**3)
        out = np.maximum(out, np.abs(t))
    return out


def _grad(b: Barrier, x, h):
    return b.gradient(x) if b.gradient is not None else _fd_grad(b.value, x, h)


def _hess(b: Barrier, x, h):
    return b.hessian(x) if b.hessian is not None else _fd_hess(b.value, x, h)


def verify_barrier(b: Barrier, samples: Optional[tuple[np.ndarray, np.ndarray]] = None, n: int = 500,
                   step: float = 1e-4) -> VerificationReport:
    """Worst signed slack of the interior and boundary inequalities over sample points.

    The pass criterion is min margin ≥ −budget, with budget = 10·step·(local
    third-derivative estimate) for finite-difference quantities (zero where the
    barrier supplies exact derivatives).
    """
    interior, boundary = b.sampler(n) if samples is None else samples
    interior = np.atleast_2d(np.asarray(interior, float)) if len(interior) else np.zeros((0, b.d))
    boundary = np.atleast_2d(np.asarray(boundary, float)) if len(boundary) else np.zeros((0, b.d))
    for pts in (interior, boundary):
        if len(pts) and not np.all(b.in_domain(pts)):
            raise ValueError("sample outside the barrier's declared domain")
    sign = 1.0 if b.role == "sub" else -1.0
    exact = b.hessian is not None and b.gradient is not None
    margins_i = np.zeros(0)
    margins_b = np.zeros(0)
    budget_i = np.zeros(0)
    budget_b = np.zeros(0)
    if len(interior):
        H = _hess(b, interior, step)
        if b.coords == "physical":
            op = np.trace(H, axis1=-2, axis2=-1)
        else:
            G = _grad(b, interior, step)
            A = a_matrix(G)
            op = np.einsum("...ij,...ij->...", A, H)
        margins_i = sign * op
        budget_i = _budget(b, interior, step, exact, order=2)
    if len(boundary):
        G = _grad(b, boundary, step)
        Qv = b.Q(boundary)
        if b.coords == "physical":
            slack = np.linalg.norm(G, axis=-1) - Qv
        else:
            slack = Qv * (1.0 + G[..., -1]) - np.sqrt(1.0 + np.sum(G[..., :-1] ** 2, axis=-1))
        margins_b = sign * slack
        budget_b = _budget(b, boundary, step, b.gradient is not None, order=1)
    all_m = np.concatenate([margins_i, margins_b])
    all_b = np.concatenate([budget_i, budget_b])
    pts = np.concatenate([interior, boundary]) if len(all_m) else np.zeros((1, b.d))
    if len(all_m) == 0:
        raise ValueError("no samples to verify")
    j = int(np.argmin(all_m + all_b))
    return VerificationReport(
        b.kind, b.role, len(interior), len(boundary),
        float(margins_i.min()) if len(margins_i) else math.inf,
        float(margins_b.min()) if len(margins_b) else math.inf,
        float(all_m.min()), pts[j].tolist(), float(all_b[j]),
        bool(np.all(all_m + all_b >= 0.0)),
    )


def _budget(b: Barrier, pts, step, exact, order):
    # truncation 10·step·|third derivative| plus rounding; exact derivatives keep only a floor
    if exact:
        return np.full(len(pts), ROUNDING_FLOOR)
    f = np.abs(b.value(pts))
    rounding = 8.0 * np.finfo(float).eps * (1.0 + f) / step**order
    return 10.0 * step * _third_derivative_scale(b.value, pts, step) + rounding + ROUNDING_FLOOR


def threshold_search(passes: Callable[[float], bool], lo: float, hi: float, tol: float = 1e-3) -> float:
    """Largest t in [lo, hi] with passes(t), assuming passes is monotone (true below the threshold)."""
    if not passes(lo):
        return 0.0
    if passes(hi):
        return hi
    while hi - lo > tol * max(lo, 1e-12):
        mid = 0.5 * (lo + hi)
        if passes(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# radial helpers


def _radial(x, F, dF, d2F):
    """Value, gradient and Hessian of F(|x|) at points x (..., d)."""
    r = np.linalg.norm(x, axis=-1)
    n = x / r[..., None]
    d = x.shape[-1]
    val = F(r)
    grad = dF(r)[..., None] * n
    nn = n[..., :, None] * n[..., None, :]
    I = np.eye(d)
    hess = d2F(r)[..., None, None] * nn + (dF(r) / r)[..., None, None] * (I - nn)
    return val, grad, hess


def _dipole(x):
    """x_d / |x|^2 (d = 2) with gradient and Hessian."""
    r2 = np.sum(x * x, axis=-1)
    yd = x[..., -1]
    d = x.shape[-1]
    val = yd / r2
    ed = np.zeros(d)
    ed[-1] = 1.0
    grad = ed / r2[..., None] - 2.0 * yd[..., None] * x / r2[..., None] ** 2
    I = np.eye(d)
    term1 = -2.0 * (ed[:, None] * x[..., None, :] + x[..., :, None] * ed[None, :]) / r2[..., None, None] ** 2
    term2 = yd[..., None, None] * (-2.0 * I / r2[..., None, None] ** 2 + 8.0 * x[..., :, None] * x[..., None, :] / r2[..., None, None] ** 3)
    return val, grad, term1 + term2


def _plane_sampler(d, rmin, rmax, n, center=None):
    """Quasi-random points of the upper half space with rmin ≤ |y| ≤ rmax (log-uniform radii), plus boundary points."""
    center = np.zeros(d) if center is None else center
    u = halton(n, d)
    r = rmin * (rmax / rmin) ** u[:, 0]
    if d == 2:
        th = math.pi * (0.02 + 0.96 * u[:, 1])
        pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
    else:
        ct = 0.02 + 0.96 * u[:, 1]
        st = np.sqrt(1 - ct * ct)
        ph = 2 * math.pi * u[:, 2]
        pts = np.column_stack([r * st * np.cos(ph), r * st * np.sin(ph), r * ct])
    ub = halton(n, max(d - 1, 1) + 1)
    rb = rmin * (rmax / rmin) ** ub[:, 0]
    if d == 2:
        bpts = np.column_stack([np.where(ub[:, 1] < 0.5, -rb, rb), np.zeros(n)])
    else:
        ph = 2 * math.pi * ub[:, 1]
        bpts = np.column_stack([rb * np.cos(ph), rb * np.sin(ph), np.zeros(n)])
    return pts + center, bpts + center


def barrier_plane(role: str = "sub", d: int = 2) -> Barrier:
    """(x_d)_+ with Q ≡ 1."""
    ed = np.zeros(d)
    ed[-1] = 1.0

    def sampler(n):
        u = halton(n, d)
        interior = (u - 0.5) * 8.0
        interior[:, -1] = 0.05 + 4.0 * u[:, -1]
        bnd = (halton(n, d) - 0.5) * 8.0
        bnd[:, -1] = 0.0
        return interior, bnd

    return Barrier("plane", role, "physical", d, {}, lambda x: np.asarray(x)[..., -1],
                   lambda x: np.asarray(x)[..., -1] >= 0, sampler)


# ---------------------------------------------------------------------------
# logarithmic hodograph barriers (d = 2)


def _log_psi(variant_sign: float, dipole_sign: float):
    def F(r):
        return np.log(r) + variant_sign * np.log1p(np.log(r))

    def dF(r):
        L = np.log(r)
        return 1.0 / r + variant_sign / (r * (1.0 + L))

    def d2F(r):
        L = np.log(r)
        return -1.0 / r**2 - variant_sign * (1.0 / (r**2 * (1.0 + L)) + 1.0 / (r**2 * (1.0 + L) ** 2))

    def parts(x):
        v, g, H = _radial(np.asarray(x, float), F, dF, d2F)
        dv, dg, dH = _dipole(np.asarray(x, float))
        return v + dipole_sign * dv, g + dipole_sign * dg, H + dipole_sign * dH

    return parts


def log_psi(x, sign: int = +1, variant: str = "corrected"):
    """ψ± at points x (..., 2).  The corrected variant flips the sign of the log-log term."""
    lsign = -sign if variant == "corrected" else sign
    return _log_psi(lsign, sign)(x)


def barrier_log_hodograph(varsigma: float, variant: str = "corrected", rmax: float = 200.0) -> tuple[Barrier, Barrier]:
    """ςψ₊ (sub) and ςψ₋ (super) for the hodograph equation on the upper half plane outside B₁.

    variant "corrected": ψ± = log|y| ∓ log(1+log|y|) ± y_d/|y|², whose Laplacian
    is ±1/(|y|²(1+log|y|)²).  variant "literal" keeps ± on the log-log term,
    whose Laplacian has the opposite sign; it is kept for comparison.
    """
    if variant not in ("corrected", "literal"):
        raise ValueError("variant must be 'corrected' or 'literal'")
    out = []
    for sign, role in ((+1, "sub"), (-1, "super")):
        parts = _log_psi(-sign if variant == "corrected" else sign, sign)
        dom = lambda x: (np.linalg.norm(x, axis=-1) >= 1.0 - 1e-12) & (np.asarray(x)[..., -1] >= 0)
        out.append(Barrier(
            "log_hodograph_2d", role, "hodograph", 2, {"varsigma": varsigma, "variant": variant},
            value=lambda x, p=parts: varsigma * p(x)[0],
            gradient=lambda x, p=parts: varsigma * p(x)[1],
            hessian=lambda x, p=parts: varsigma * p(x)[2],
            in_domain=dom,
            sampler=lambda n: _plane_sampler(2, 1.0, rmax, n),
        ))
    return out[0], out[1]


def search_varsigma0(variant: str = "corrected", hi: float = 1.0) -> float:
    def ok(vs):
        sub, sup = barrier_log_hodograph(vs, variant)
        return verify_barrier(sub).passed and verify_barrier(sup).passed
    return threshold_search(ok, 1e-4, hi)


# ---------------------------------------------------------------------------
# fundamental-solution barriers (d ≥ 3)


def barrier_fundie(delta_exp: float, d: int = 3, c: Optional[float] = None, rmax: float = 100.0) -> tuple[Barrier, Barrier]:
    """φ₊ = ŝ c|y|^β (super) and φ₋ = −ŝ c|y + e_d/2|^β (sub), β = 2 − d + δ, ŝ = sgn(d − 2 − δ).

    With c = None the constant is found by a verification search.
    """
    if d < 3:
        raise ValueError("fundamental-solution barriers need d >= 3")
    if not 0.0 < delta_exp < d - 1:
        raise ValueError("need 0 < delta < d - 1")
    if abs(delta_exp - (d - 2)) < 1e-12:
        raise ValueError("delta = d - 2 leaves the sign undefined")
    if c is None:
        c = search_c_delta(delta_exp, d)
    beta = 2.0 - d + delta_exp
    sh = math.copysign(1.0, d - 2 - delta_exp)
    F = lambda r: r**beta
    dF = lambda r: beta * r ** (beta - 1)
    d2F = lambda r: beta * (beta - 1) * r ** (beta - 2)
    shift = np.zeros(d)
    shift[-1] = 0.5
    out = []
    for role, amp, ctr in (("super", sh * c, np.zeros(d)), ("sub", -sh * c, shift)):
        def parts(x, amp=amp, ctr=ctr):
            v, g, H = _radial(np.asarray(x, float) + ctr, F, dF, d2F)
            return amp * v, amp * g, amp * H
        out.append(Barrier(
            "fundie", role, "hodograph", d, {"delta": delta_exp, "c": c, "beta": beta, "sign": sh},
            value=lambda x, p=parts: p(x)[0], gradient=lambda x, p=parts: p(x)[1], hessian=lambda x, p=parts: p(x)[2],
            in_domain=lambda x: (np.linalg.norm(x, axis=-1) >= 1.0 - 1e-12) & (np.asarray(x)[..., -1] >= 0),
            sampler=lambda n: _plane_sampler(d, 1.0, rmax, n),
        ))
    return out[0], out[1]


@lru_cache(maxsize=None)
def search_c_delta(delta_exp: float, d: int = 3) -> float:
    def ok(c):
        sup, sub = barrier_fundie(delta_exp, d, c)
        return verify_barrier(sup).passed and verify_barrier(sub).passed
    return threshold_search(ok, 1e-4, 2.0)


# ---------------------------------------------------------------------------
# small-σ patched barriers


SUPER_PATCH_RADIUS_3D = 1.25


def _small_sigma_3d(sigma: float, d: int = 3, patch_radius: Optional[float] = None) -> Barrier:
    """ρ-rescaled patch: (1+σ)x_d − Cσρ inside B_ρ, x_d − Cσρ^{d−1}|x|^{2−d} + σρ^d x_d/|x|^d outside.

    The defect occupies the unit cylinder.  With ρ = 1 the zero set crosses the
    cylinder outside B_ρ, where the outer slope is about 1 + σ/|x|^d; that is
    harmless for σ > 0 but breaks the supersolution case, so σ < 0 defaults to
    ρ > 1 (the whole cylinder part of the zero set then sits inside B_ρ).
    """
    rho = (1.0 if sigma >= 0 else SUPER_PATCH_RADIUS_3D) if patch_radius is None else patch_radius
    C = d / (d - 2) + 1.0
    ed = np.zeros(d)
    ed[-1] = 1.0

    def inner(x):
        return (1.0 + sigma) * x[..., -1] - C * sigma * rho

    def outer(x):
        r = np.linalg.norm(x, axis=-1)
        return x[..., -1] - C * sigma * rho ** (d - 1) * r ** (2 - d) + sigma * rho**d * x[..., -1] / r**d

    def outer_grad(x):
        r = np.linalg.norm(x, axis=-1)[..., None]
        return ed + sigma * (C * (d - 2) * rho ** (d - 1) * x / r**d + rho**d * ed / r**d
                             - d * rho**d * x[..., -1:] * x / r ** (d + 2))

    def value(x):
        x = np.asarray(x, float)
        r = np.linalg.norm(x, axis=-1)
        return np.where(r < rho, inner(x), outer(np.where(r[..., None] < rho, ed * 2.0 * rho, x)))

    def gradient(x):
        x = np.asarray(x, float)
        r = np.linalg.norm(x, axis=-1)[..., None]
        return np.where(r < rho, (1.0 + sigma) * ed, outer_grad(np.where(r < rho, ed * 2.0 * rho, x)))

    def Q(x):
        x = np.asarray(x, float)
        return 1.0 + sigma * (np.linalg.norm(x[..., :-1], axis=-1) < 1.0)

    span = 2.0 * abs(C * sigma) * rho + 1e-3

    def zero_height(xp):
        f = lambda t: value(np.append(xp, t))
        return optimize.brentq(f, -span, span, xtol=1e-14) if f(-span) * f(span) < 0 else math.nan

    def sampler(n):
        u = halton(n, d)
        # half the tangential radii packed around the cylinder wall and the patch sphere
        rr = np.where(u[:, 0] < 0.5, 0.8 + 0.6 * rho * (2 * u[:, 0]), 0.05 + 6.0 * (2 * u[:, 0] - 1) ** 2)
        ph = 2 * math.pi * u[:, 1]
        xp = np.column_stack([rr * np.cos(ph), rr * np.sin(ph)])[:, : d - 1]
        hts = np.array([zero_height(p) for p in xp])
        ok = np.isfinite(hts)
        bnd = np.column_stack([xp, hts])[ok]
        interior = np.column_stack([xp, hts + 0.05 + 3.0 * u[:, 2]])[ok]
        rad = np.linalg.norm(interior, axis=-1)
        return interior[np.abs(rad - rho) > 1e-3], bnd

    return Barrier("small_sigma_3d", "sub" if sigma >= 0 else "super", "physical", d,
                   {"sigma": sigma, "C": C, "patch_radius": rho},
                   value=value, gradient=gradient,
                   in_domain=lambda x: np.ones(np.shape(x)[:-1], bool), sampler=sampler, Q=Q,
                   info={"inner": inner, "outer": outer, "outer_grad": outer_grad, "interface_radius": rho})


def _mollifier(r):
    out = np.zeros_like(r)
    m = r < 1.0
    out[m] = np.exp(-1.0 / (1.0 - r[m] ** 2))
    return out


def _mollifier_dr(r):
    out = np.zeros_like(r)
    m = r < 1.0
    out[m] = np.exp(-1.0 / (1.0 - r[m] ** 2)) * (-2.0 * r[m] / (1.0 - r[m] ** 2) ** 2)
    return out


def _mollifier_d2r(r):
    out = np.zeros_like(r)
    m = r < 1.0
    rm = r[m]
    w = 1.0 - rm**2
    e = np.exp(-1.0 / w)
    g = -2.0 * rm / w**2
    dg = -2.0 / w**2 - 8.0 * rm**2 / w**3
    out[m] = e * (g * g + dg)
    return out


PATCH_RADIUS_2D = math.e
PATCH_SLOPE_2D = 12.0


def _patch_2d_pieces(vs: float, rho: float = PATCH_RADIUS_2D, a: float = PATCH_SLOPE_2D):
    """Inner ς y_d and outer ς[a(g(r) − g(ρ)) + ρ² y_d/r²], g = log r − log(1 + log r)."""
    g = lambda r: np.log(r) - np.log1p(np.log(r))

    def inner(y):
        return vs * y[..., -1]

    def outer(y):
        r = np.linalg.norm(y, axis=-1)
        return vs * (a * (g(r) - g(rho)) + rho**2 * y[..., -1] / r**2)

    def outer_grad(y):
        r = np.linalg.norm(y, axis=-1)[..., None]
        L = np.log(r)
        dg = L / (r * (1.0 + L))
        ed = np.array([0.0, 1.0])
        return vs * (a * dg * y / r + rho**2 * (ed / r**2 - 2.0 * y[..., -1:] * y / r**4))

    def patched(y):
        r = np.linalg.norm(y, axis=-1)
        safe = np.where(r[..., None] < rho, rho * 2.0, y)
        return np.where(r < rho, inner(y), outer(safe))

    return inner, outer, outer_grad, patched


@dataclass
class MollifiedField:
    xs: np.ndarray
    zs: np.ndarray
    v: np.ndarray
    vx: np.ndarray
    vz: np.ndarray
    vxx: np.ndarray
    vxz: np.ndarray
    vzz: np.ndarray


def _mollify_patch(vs: float, eps: float = 0.5, half: float = 10.0, h: float = 1.0 / 64.0):
    """η_ε * ψ and its first and second derivatives on a grid, by FFT convolution.

    Derivatives are convolutions of ψ with the analytic derivatives of η_ε.
    """
    _, _, _, patched = _patch_2d_pieces(vs)
    n = int(round(2 * half / h))
    g = np.linspace(-half, half, n + 1)
    Y1, Y2 = np.meshgrid(g, g, indexing="ij")
    psi = patched(np.stack([Y1, Y2], axis=-1))
    m = int(math.ceil(eps / h))
    k = np.arange(-m, m + 1) * h
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    R = np.hypot(K1, K2) / eps
    eta = _mollifier(R)
    mass = eta.sum() * h * h
    eta = eta / mass
    dr = _mollifier_dr(R) / (mass * eps)
    d2r = _mollifier_d2r(R) / (mass * eps**2)
    with np.errstate(invalid="ignore", divide="ignore"):
        n1 = np.where(R > 0, K1 / np.hypot(K1, K2), 0.0)
        n2 = np.where(R > 0, K2 / np.hypot(K1, K2), 0.0)
        dr_over_r = np.where(R > 0, dr / (R * eps), d2r)
    kx, kz = dr * n1, dr * n2
    kxx = d2r * n1 * n1 + dr_over_r * (1 - n1 * n1)
    kzz = d2r * n2 * n2 + dr_over_r * (1 - n2 * n2)
    kxz = (d2r - dr_over_r) * n1 * n2
    # rescale so the discrete kernels differentiate linear and quadratic polynomials exactly
    area = h * h
    kx = kx / (-np.sum(kx * K1) * area)
    kz = kz / (-np.sum(kz * K2) * area)
    kxx = kxx / (0.5 * np.sum(kxx * K1 * K1) * area)
    kzz = kzz / (0.5 * np.sum(kzz * K2 * K2) * area)
    kxz = kxz / (np.sum(kxz * K1 * K2) * area)
    conv = lambda ker: fftconvolve(psi, ker, mode="same") * h * h
    keep = (g >= -half + 2 * eps) & (g <= half - 2 * eps)
    sel = np.ix_(keep, keep)
    xs = g[keep]
    return MollifiedField(xs, xs, conv(eta)[sel], conv(kx)[sel], conv(kz)[sel], conv(kxx)[sel], conv(kxz)[sel],
                          conv(kzz)[sel])


def _small_sigma_2d(sigma: float, eps: float = 0.5, box: float = 6.0) -> Barrier:
    vs = -sigma / (1.0 + sigma)
    mf = _mollify_patch(vs, eps)
    splines = {name: RectBivariateSpline(mf.xs, mf.zs, getattr(mf, name), kx=3, ky=3)
               for name in ("v", "vx", "vz", "vxx", "vxz", "vzz")}

    def ev(name, y):
        y = np.asarray(y, float)
        return splines[name](y[..., 0].ravel(), y[..., 1].ravel(), grid=False).reshape(y.shape[:-1])

    value = lambda y: ev("v", y)
    gradient = lambda y: np.stack([ev("vx", y), ev("vz", y)], axis=-1)

    def hessian(y):
        a, b, c = ev("vxx", y), ev("vxz", y), ev("vzz", y)
        return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)

    def Q(y):
        return 1.0 + sigma * (np.abs(np.asarray(y)[..., 0]) < 0.5)

    def sampler(n):
        u = halton(n, 2)
        interior = np.column_stack([(u[:, 0] - 0.5) * 2 * box, 0.02 + (box - 0.02) * u[:, 1]])
        bnd = np.column_stack([(halton(n, 1)[:, 0] - 0.5) * 2 * box, np.zeros(n)])
        return interior, bnd

    inner, outer, outer_grad, patched = _patch_2d_pieces(vs)
    def physical(x1=None, xd=None):
        """Inverse hodograph transform of the mollified field (the physical-coordinate barrier)."""
        zsel = mf.zs >= 0.0
        part = MollifiedField(mf.xs, mf.zs[zsel], *(getattr(mf, k)[:, zsel] for k in ("v", "vx", "vz", "vxx", "vxz", "vzz")))
        x1 = np.linspace(-box, box, 241) if x1 is None else x1
        xd = np.linspace(-0.5, box, 201) if xd is None else xd
        return invert_hodograph(part, x1=x1, xd=xd)

    def physical_front_slope(x1):
        """|∇u| on the physical free boundary above x1: √(1 + v_x²)/(1 + v_z) at y_d = 0."""
        y = np.column_stack([x1, np.zeros_like(x1)])
        return np.sqrt(1.0 + ev("vx", y) ** 2) / (1.0 + ev("vz", y))

    return Barrier("mollified_2d", "sub" if vs > 0 else "super", "hodograph", 2,
                   {"sigma": sigma, "varsigma": vs, "eps": eps, "patch_radius": PATCH_RADIUS_2D, "a": PATCH_SLOPE_2D},
                   value=value, gradient=gradient, hessian=hessian,
                   in_domain=lambda y: (np.abs(np.asarray(y)[..., 0]) <= box + 1e-12) & (np.asarray(y)[..., 1] >= 0)
                   & (np.asarray(y)[..., 1] <= box + 1e-12),
                   sampler=sampler, Q=Q,
                   info={"inner": inner, "outer": outer, "outer_grad": outer_grad, "interface_radius": PATCH_RADIUS_2D,
                         "physical": physical, "physical_front_slope": physical_front_slope})


_SIGMA0: dict = {}


def search_sigma0(d: int, hi: float = 0.5) -> float:
    """Largest σ₀ with both signs ±σ passing verification (cached per dimension)."""
    if d in _SIGMA0:
        return _SIGMA0[d]
    make = _small_sigma_3d if d >= 3 else _small_sigma_2d

    def ok(sg):
        return all(verify_barrier(make(s)).passed for s in (sg, -sg))

    _SIGMA0[d] = threshold_search(ok, 1e-3, hi, tol=2e-2)
    return _SIGMA0[d]


def barrier_small_sigma(sigma: float, d: int = 3, sigma0: Optional[float] = None) -> Barrier:
    """Patched small-defect barrier; sub for σ > 0 in d ≥ 3, hodograph sub for σ < 0 in d = 2."""
    limit = search_sigma0(d) if sigma0 is None else sigma0
    if abs(sigma) > limit:
        raise ValueError(f"|sigma| = {abs(sigma)} exceeds the verified threshold {limit}")
    return _small_sigma_3d(sigma, d) if d >= 3 else _small_sigma_2d(sigma)


def interface_jump(b: Barrier, n: int = 200) -> tuple[float, float]:
    """(min signed normal-derivative jump x·∇out − x·∇in, max |out − in|) on the patch sphere.

    Sub barriers need a positive jump (max-patching), super barriers a negative one.
    """
    rad = b.info["interface_radius"]
    d = b.d
    u = halton(n, max(d - 1, 1))
    if d == 2:
        th = math.pi * u[:, 0]
        pts = rad * np.column_stack([np.cos(th), np.sin(th)])
    else:
        ct = u[:, 0]
        st = np.sqrt(1 - ct * ct)
        ph = 2 * math.pi * u[:, 1]
        pts = rad * np.column_stack([st * np.cos(ph), st * np.sin(ph), ct])
    h = 1e-6
    inn, out = b.info["inner"], b.info["outer"]
    radial = lambda f: (f(pts * (1 + h)) - f(pts * (1 - h))) / (2 * h)  # = x·∇f on |x| = 1 scaled by rad
    jump = radial(out) - radial(inn)
    sign = 1.0 if b.role == "sub" else -1.0
    return float(np.min(sign * jump)), float(np.max(np.abs(out(pts) - inn(pts))))


# ---------------------------------------------------------------------------
# large-defect barriers (d = 3)


def line_potential(rho, xd, R):
    """∫_{−R}^{R} dt / |x − t e_d| for d = 3, with ρ = |x'|."""
    rho = np.maximum(np.asarray(rho, float), 1e-300)
    return np.arcsinh((xd + R) / rho) - np.arcsinh((xd - R) / rho)


def line_potential_grad(rho, xd, R):
    rho = np.maximum(np.asarray(rho, float), 1e-300)
    c1, c2 = xd + R, xd - R
    s1, s2 = np.sqrt(rho**2 + c1**2), np.sqrt(rho**2 + c2**2)
    return -(c1 / (rho * s1) - c2 / (rho * s2)), 1.0 / s1 - 1.0 / s2


def line_sink_depth(R: float) -> float:
    """Root z > R of z = log(1 + 2R/(z − R)), by bisection."""
    f = lambda z: z - math.log1p(2.0 * R / (z - R))
    lo, hi = R + 1e-300, R + 1.0
    while f(hi) < 0:
        hi = R + 2 * (hi - R)
    lo = R + 1e-12 * max(R, 1.0)
    while f(lo) > 0:
        lo = R + 0.5 * (lo - R)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4e-16 * hi:
            break
    return 0.5 * (lo + hi)


def barrier_line_sink(R: float, a: float = 0.5, d: int = 3) -> Barrier:
    """Rescaled line-sink subsolution a⁻¹φ_R(a x + z e_d), φ_R = x_d − ∫_{L_R}|x − y|^{-1}.

    The defect amplitude it handles is σ = min |∇φ_R| over the free boundary in
    the unit ball of the rescaled frame, minus 1.
    """
    if d != 3:
        raise ValueError("line-sink barrier implemented for d = 3")
    if R < 2:
        raise ValueError("need R >= 2")
    z = line_sink_depth(R)

    def phiR(x):
        x = np.asarray(x, float)
        rho = np.linalg.norm(x[..., :-1], axis=-1)
        return x[..., -1] - line_potential(rho, x[..., -1], R)

    def phiR_grad(x):
        x = np.asarray(x, float)
        rho = np.linalg.norm(x[..., :-1], axis=-1)
        gr, gz = line_potential_grad(rho, x[..., -1], R)
        with np.errstate(invalid="ignore", divide="ignore"):
            nr = np.where(rho[..., None] > 0, x[..., :-1] / np.maximum(rho, 1e-300)[..., None], 0.0)
        g = np.empty_like(x)
        g[..., :-1] = -gr[..., None] * nr
        g[..., -1] = 1.0 - gz
        return g

    def zero_height(rho):
        """Height of the free boundary of φ_R above tangential radius ρ (top root)."""
        f = lambda t: t - float(line_potential(rho, t, R))
        lo = max(1e-12, z - 1.0) if rho < 1e-9 else 1e-12
        if rho < 1e-9:
            return z
        hi = z + 1.0
        while f(hi) < 0:
            hi *= 2
        return optimize.brentq(f, lo, hi, xtol=1e-14)

    scale = lambda x: a * np.asarray(x, float) + np.array([0.0] * (d - 1) + [z])
    value = lambda x: phiR(scale(x)) / a
    gradient = lambda x: phiR_grad(scale(x))

    # free-boundary points of the rescaled frame inside B₁, closed off by the point on the unit sphere
    frame = lambda rr: (np.array([rr, 0.0, zero_height(rr)]) - np.array([0.0, 0.0, z])) / a
    edge = optimize.brentq(lambda rr: np.linalg.norm(frame(rr)) - 1.0, 0.0, a, xtol=1e-14)
    in_ball = np.array([frame(rr) for rr in np.linspace(0.0, edge, 81)])
    slopes = np.linalg.norm(gradient(in_ball), axis=-1)
    sigma = float(slopes.min() - 1.0)

    def Q(x):
        x = np.asarray(x, float)
        return 1.0 + sigma * (np.linalg.norm(x, axis=-1) < 1.0)

    def sampler(n):
        u = halton(n, 2)
        # rescaled-frame tangential radii: dense in the unit ball, sparse far out
        rr = np.where(u[:, 0] < 0.6, u[:, 0] / 0.6, 1.0 + 30.0 * ((u[:, 0] - 0.6) / 0.4) ** 2)
        ph = 2 * math.pi * u[:, 1]
        hts = np.array([(zero_height(a * r) - z) / a for r in rr])
        bnd = np.column_stack([rr * np.cos(ph), rr * np.sin(ph), hts])
        ui = halton(n, 3)
        interior = np.column_stack([ui[:, 0] * 3 * np.cos(2 * math.pi * ui[:, 1]), ui[:, 0] * 3 * np.sin(2 * math.pi * ui[:, 1]), np.zeros(n)])
        hts_i = np.array([(zero_height(a * np.hypot(p[0], p[1])) - z) / a for p in interior])
        interior[:, 2] = hts_i + 0.05 + 3.0 * ui[:, 2]
        return interior, bnd

    def in_domain(x):
        return np.ones(np.shape(x)[:-1], bool)

    return Barrier("line_sink", "sub", "physical", d, {"R": R, "a": a}, value=value, gradient=gradient,
                   in_domain=in_domain, sampler=sampler, Q=Q,
                   info={"depth": z, "sigma_achieved": sigma, "phi_R": phiR, "phi_R_grad": phiR_grad,
                         "zero_height": zero_height})


def line_sink_far_capacity(R: float, window: tuple[float, float] | None = None, n: int = 200) -> float:
    """Fitted k in φ_R ≈ x_d − k|x|^{−1} over |x| ∈ [10R, 40R] (sampled over directions)."""
    lo, hi = window or (10.0 * R, 40.0 * R)
    u = halton(n, 2)
    r = lo + (hi - lo) * u[:, 0]
    ct = 2 * u[:, 1] - 1
    st = np.sqrt(1 - ct * ct)
    rho, xd = r * st, r * ct
    vals = line_potential(rho, xd, R)
    G = 1.0 / r
    k = float(np.sum(G * vals) / np.sum(G * G))
    return k


def _Phi(d: int, r):
    return -np.log(r) if d == 2 else r ** (2 - d) / (d - 2)


def point_source_roots(r: float, d: int = 3) -> tuple[float, float, float]:
    """Axis zeros s₂ < −(r+1) < s₁ < −r < s₀ < 0 of x_d + Φ(x + (r+1)e_d)."""
    if r <= (_Phi(d, 1.0) if d >= 3 else 0.0):
        raise ValueError("no pinch: r must exceed Φ(1)")
    f = lambda t: t + float(_Phi(d, abs(t + r + 1.0)))
    s0 = optimize.brentq(f, -r, 0.0, xtol=1e-15, rtol=1e-15)
    s1 = optimize.brentq(f, -r - 1.0 + 1e-15, -r, xtol=1e-15, rtol=1e-15)
    lo = -r - 2.0
    while f(lo) > 0:
        lo -= 1.0
    s2 = optimize.brentq(f, lo, -r - 1.0 - 1e-15, xtol=1e-15, rtol=1e-15)
    return s0, s1, s2


def barrier_point_source(r: float, d: int = 3, rho_max: float = 20.0) -> Barrier:
    """ψ_r = (x_d + Φ(x + (r+1)e_d))·1_{Ω₁}; supersolution with slope ≤ 1 on ∂Ω₁."""
    s0, s1, s2 = point_source_roots(r, d)
    c = np.zeros(d)
    c[-1] = r + 1.0

    def value(x):
        x = np.asarray(x, float)
        return x[..., -1] + _Phi(d, np.linalg.norm(x + c, axis=-1))

    def gradient(x):
        x = np.asarray(x, float)
        y = x + c
        ed = np.zeros(d)
        ed[-1] = 1.0
        return ed - y / np.linalg.norm(y, axis=-1)[..., None] ** d

    def hessian(x):
        y = np.asarray(x, float) + c
        r = np.linalg.norm(y, axis=-1)[..., None, None]
        return -np.eye(d) / r**d + d * y[..., :, None] * y[..., None, :] / r ** (d + 2)

    def top_root(rho):
        f = lambda t: t + float(_Phi(d, math.hypot(rho, t + r + 1.0)))
        return optimize.brentq(f, s0 - 1e-12, 1e-9 + 1.0, xtol=1e-15) if f(s0 - 1e-12) < 0 else s0

    def sampler(n):
        u = halton(n, 2)
        rr = rho_max * u[:, 0] ** 2
        hts = np.array([top_root(x) for x in rr])
        if d == 2:
            bnd = np.column_stack([np.where(u[:, 1] < 0.5, -rr, rr), hts])
        else:
            ph = 2 * math.pi * u[:, 1]
            bnd = np.column_stack([rr * np.cos(ph), rr * np.sin(ph), hts])
        interior = bnd.copy()
        interior[:, -1] += 0.05 + 2.0 * halton(n, 1)[:, 0]
        return interior, bnd

    return Barrier("point_source", "super", "physical", d, {"r": r}, value=value, gradient=gradient, hessian=hessian,
                   in_domain=lambda x: value(x) >= -1e-9, sampler=sampler,
                   info={"roots": (s0, s1, s2), "slope_at_s0": float(np.linalg.norm(gradient(np.eye(d)[-1] * s0))),
                         "top_root": top_root})


def barrier_log_supersolution(sigma: float, s: float, d: int = 2, rmax: float = 100.0) -> Barrier:
    """(x_d + σ log|x| + s)_+ on |x| ≥ 3."""
    if sigma * s < 0:
        raise ValueError("need sigma*s >= 0")
    ed = np.zeros(d)
    ed[-1] = 1.0

    def value(x):
        x = np.asarray(x, float)
        return x[..., -1] + sigma * np.log(np.linalg.norm(x, axis=-1)) + s

    def gradient(x):
        x = np.asarray(x, float)
        return ed + sigma * x / np.sum(x * x, axis=-1)[..., None]

    def zero_point(t, side):
        # x_1 = t ≥ 3 (magnitude), solve x_d = −σ log|x| − s by fixed point
        xd = -s
        for _ in range(200):
            xd = -sigma * math.log(math.hypot(t, xd)) - s
        return np.array([side * t] + [0.0] * (d - 2) + [xd])

    def sampler(n):
        u = halton(n, 2)
        ts = 3.0 * (rmax / 3.0) ** u[:, 0]
        bnd = np.array([zero_point(t, 1 if w < 0.5 else -1) for t, w in zip(ts, u[:, 1])])
        bnd = bnd[np.linalg.norm(bnd, axis=-1) >= 3.0]
        interior = bnd.copy()
        interior[:, -1] += 0.05 + 3.0 * halton(len(bnd), 1)[:, 0]
        return interior, bnd

    def slope_squared_formula(x):
        # |e_d + σx/|x|²|² with x_d = −σ log|x| − s substituted
        x = np.asarray(x, float)
        rr = np.linalg.norm(x, axis=-1)
        return 1.0 - 2.0 / rr**2 * (sigma**2 * np.log(rr) + sigma * s - 0.5 * sigma**2)

    return Barrier("log_supersolution_2d", "super", "physical", d, {"sigma": sigma, "s": s}, value=value,
                   gradient=gradient, hessian=lambda x: _log_hess(x, sigma),
                   in_domain=lambda x: np.linalg.norm(x, axis=-1) >= 3.0 - 1e-12, sampler=sampler,
                   info={"slope_squared_formula": slope_squared_formula})


def _log_hess(x, sigma):
    x = np.asarray(x, float)
    r2 = np.sum(x * x, axis=-1)[..., None, None]
    d = x.shape[-1]
    return sigma * (np.eye(d) / r2 - 2.0 * x[..., :, None] * x[..., None, :] / r2**2)


def _small_sigma_3d_kind(sigma: float = 0.05, sigma0: Optional[float] = None):
    return barrier_small_sigma(sigma, 3, sigma0)


def _mollified_2d_kind(sigma: float = -0.05, sigma0: Optional[float] = None):
    return barrier_small_sigma(sigma, 2, sigma0)


BUILDERS = {
    "point_source": barrier_point_source,
    "line_sink": barrier_line_sink,
    "log_supersolution_2d": barrier_log_supersolution,
    "log_hodograph_2d": barrier_log_hodograph,
    "fundie": barrier_fundie,
    "small_sigma_3d": _small_sigma_3d_kind,
    "mollified_2d": _mollified_2d_kind,
    "plane": barrier_plane,
}


def make_barrier(kind: str, **params) -> Barrier | tuple[Barrier, Barrier]:
    """Dispatch by kind name (used by the CLI); params are the builder's keyword arguments."""
    if kind not in BUILDERS:
        raise ValueError(f"unknown barrier kind {kind!r}")
    return BUILDERS[kind](**params)
