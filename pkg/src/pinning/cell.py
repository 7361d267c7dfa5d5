"""Semipermeable-membrane cell problem and the patched periodic barrier.

The corrector solves Δω = 0 in the upper half space, ∂_d ω = 1 − c Σ_z δ_z on
the boundary, with zero cell-average of ∂_d ω at every height.  For the
consistent mass c = |ξ| its Fourier series is

    ω(x) = C₀ + Σ_{κ ≠ 0} e^{iκ·x'} e^{−|κ| x_d} / |κ|,

with κ running over the dual lattice.  Near the boundary the series is replaced
by the closed form (d = 2) or a two-dimensional Ewald sum (d = 3); both are
exact and continue evenly (up to the x_d term) into x_d < 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.interpolate import RectBivariateSpline
from scipy.special import erf, erfc, erfcx

from .barriers import Barrier, halton
from .geometry import CoefficientField, DefectProfile, LatticeSpec, build_lattice, eval_Q

GAMMA = {2: math.pi, 3: 2.0 * math.pi}
MIN_SHELLS = 32
SPECTRAL_HEIGHT = 0.2


def fundamental(d: int, r):
    r = np.asarray(r, float)
    with np.errstate(divide="ignore"):
        return -np.log(r) if d == 2 else r ** (2 - d)


def _exp_erfc(a, u):
    """e^a erfc(u) without overflow."""
    a = np.asarray(a, float)
    u = np.asarray(u, float)
    pos = u >= 0
    out = np.empty(np.broadcast(a, u).shape)
    with np.errstate(over="ignore", under="ignore"):
        out[...] = np.where(pos, np.exp(a - np.where(pos, u, 0.0) ** 2) * erfcx(np.where(pos, u, 0.0)),
                            np.exp(a) * erfc(u))
    return out


@dataclass
class CellSolution:
    lattice: LatticeSpec
    K: int
    C0: float
    flux_scale: float
    dual: np.ndarray  # spectral wave vectors (tangential)
    tail_estimate: float
    ewald_alpha: float
    singular_coefficient: float
    far_field_constant: float
    info: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.lattice.d

    @property
    def area(self) -> float:
        return self.lattice.cell_area

    # -- evaluation -------------------------------------------------------

    def _reduce(self, x):
        x = np.asarray(x, float)
        site = self.lattice.nearest_site(x)
        return x - site

    def raw_extracted(self, x, drop_singular: bool = False):
        """Σ-part of ω (without C₀) and its gradient from the closed form / Ewald sum, valid for any x_d."""
        x = self._reduce(x)
        if self.d == 2:
            return _closed_form_2d(x, self.lattice.tangential_basis[0, 0], drop_singular)
        return _ewald_3d(x, self.lattice, self.ewald_alpha, drop_singular)

    def raw_spectral(self, x):
        x = np.asarray(x, float)
        kn = np.linalg.norm(self.dual, axis=1)
        zmin = float(np.min(x[..., -1], initial=np.inf))
        keep = kn * zmin <= 40.0  # e^{-40} is below double precision relative to the leading terms
        dual, kn = self.dual[keep], kn[keep]
        phase = x[..., :-1] @ dual.T
        damp = np.exp(-np.multiply.outer(x[..., -1], kn)) / kn
        val = np.sum(np.cos(phase) * damp, axis=-1)
        g = np.empty(x.shape)
        g[..., :-1] = -(np.sin(phase) * damp) @ dual
        g[..., -1] = -np.sum(np.cos(phase) * damp * kn, axis=-1)
        return val, g

    def evaluate(self, x):
        """(ω, ∇ω) at points x (..., d); x_d < 0 uses the even continuation of the remainder."""
        x = np.asarray(x, float)
        flat = x.reshape(-1, self.d)
        val = np.empty(len(flat))
        grad = np.empty(flat.shape)
        hi = flat[:, -1] >= SPECTRAL_HEIGHT
        chunk = 1024
        for mask, route in ((hi, self.raw_spectral), (~hi, self.raw_extracted)):
            idx = np.flatnonzero(mask)
            for j in range(0, len(idx), chunk):
                sel = idx[j:j + chunk]
                val[sel], grad[sel] = route(flat[sel])
        val = self.flux_scale * val + self.C0
        grad = self.flux_scale * grad
        return val.reshape(x.shape[:-1]), grad.reshape(x.shape)

    def __call__(self, x):
        return self.evaluate(x)[0]

    def remainder(self, x):
        """h = ω − (c/γ)Φ(x − z) − x_d about the nearest site z (smooth, even in x_d)."""
        x = np.asarray(x, float)
        val, _ = self.raw_extracted(x, drop_singular=True)
        return self.flux_scale * val + self.C0 - self.flux_scale * x[..., -1]


def _closed_form_2d(x, ell: float, drop_singular: bool):
    """−(ℓ/π) log|1 − e^{iθζ}|, ζ = x₁ + i x_d, θ = 2π/ℓ; with drop_singular the −(ℓ/π)(−log|x|) part is removed."""
    ell = abs(ell)
    theta = 2.0 * math.pi / ell
    a = -theta * x[..., 1]
    b = theta * x[..., 0]
    em = np.expm1(a)
    re = -(em * np.cos(b) - 2.0 * np.sin(0.5 * b) ** 2)  # Re(1 − w)
    im = -np.exp(a) * np.sin(b)  # Im(1 − w)
    mod2 = re * re + im * im
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        if drop_singular:
            ratio = np.where(r2 > 0, mod2 / np.where(r2 > 0, r2, 1.0), theta**2)
            val = -(ell / math.pi) * 0.5 * np.log(ratio)
        else:
            val = -(ell / math.pi) * 0.5 * np.log(mod2)
        # f'(ζ) = −iθ w / (1 − w)
        w = np.exp(a) * (np.cos(b) + 1j * np.sin(b))
        one_minus = re + 1j * im
        fp = -1j * theta * w / one_minus
        gx = -(ell / math.pi) * fp.real
        gy = (ell / math.pi) * fp.imag
        if drop_singular:
            # add ∇((ℓ/π) log r); the limit at the site is (0, 1)
            safe = np.where(r2 > 0, r2, 1.0)
            gx = np.where(r2 > 0, gx + (ell / math.pi) * x[..., 0] / safe, 0.0)
            gy = np.where(r2 > 0, gy + (ell / math.pi) * x[..., 1] / safe, 1.0)
    return val, np.stack([gx, gy], axis=-1)


def _lattice_vectors(B: np.ndarray, radius: float) -> np.ndarray:
    """All integer combinations of the rows of B with norm ≤ radius."""
    lam = np.min(np.linalg.norm(B, axis=1))
    # reduced 2d basis: |n₁b₁ + n₂b₂| ≥ (√3/2) λ₁ max|nᵢ|
    M = int(math.ceil(radius / (0.85 * lam))) + 1
    n = np.arange(-M, M + 1)
    N1, N2 = np.meshgrid(n, n, indexing="ij")
    V = N1.ravel()[:, None] * B[0] + N2.ravel()[:, None] * B[1]
    keep = np.linalg.norm(V, axis=1) <= radius
    return V[keep]


def _ewald_3d(x, lattice: LatticeSpec, alpha: float, drop_singular: bool, zmax: float = 2.0):
    """(A/2π)[E(x) + (2π/A) x_d] with E the background-neutral Ewald sum; equals Σ_κ e^{iκx'}e^{−|κ|x_d}/|κ| for x_d > 0."""
    A = lattice.cell_area
    B = lattice.tangential_basis
    xt = x[..., :-1]
    z = x[..., -1]
    flat_t = xt.reshape(-1, 2)
    flat_z = z.reshape(-1)
    n = len(flat_z)
    val = np.zeros(n)
    grad = np.zeros((n, 3))
    diam = float(np.max(np.linalg.norm(flat_t, axis=1), initial=0.0))
    cutoff = 6.5 / alpha
    for L in _lattice_vectors(B, cutoff + diam):
        dv = np.column_stack([flat_t + L, flat_z])
        s = np.linalg.norm(dv, axis=1)
        self_term = drop_singular and not np.any(L)
        with np.errstate(divide="ignore", invalid="ignore"):
            gauss = (2.0 * alpha / math.sqrt(math.pi)) * np.exp(-(alpha * s) ** 2)
            if self_term:
                small = s < 1e-5
                ss = np.where(small, 1.0, s)
                term = np.where(small, -(2 * alpha / math.sqrt(math.pi)) * (1 - (alpha * s) ** 2 / 3), -erf(alpha * ss) / ss)
                dds_over_s = np.where(small, (2 * alpha / math.sqrt(math.pi)) * (2 * alpha**2 / 3),
                                      (erf(alpha * ss) / ss**2 - gauss / ss) / ss)
            else:
                term = erfc(alpha * s) / s
                dds_over_s = (-erfc(alpha * s) / s**2 - gauss / s) / s
        val += term
        grad += dds_over_s[:, None] * dv
    kmax = 2.0 * alpha * (6.5 + alpha * max(zmax, float(np.max(np.abs(flat_z), initial=0.0))))
    K = _lattice_vectors(lattice.dual_basis(), kmax)
    K = K[np.linalg.norm(K, axis=1) > 0]
    kn = np.linalg.norm(K, axis=1)
    zz = flat_z[:, None]
    u1 = kn / (2 * alpha) + alpha * zz
    u2 = kn / (2 * alpha) - alpha * zz
    t1 = _exp_erfc(kn * zz, u1)
    t2 = _exp_erfc(-kn * zz, u2)
    g = t1 + t2
    gp = kn * (t1 - t2)
    ph = flat_t @ K.T
    c = np.cos(ph)
    sn = np.sin(ph)
    pref = math.pi / A
    val += pref * np.sum(c * g / kn, axis=1)
    grad[:, :2] += -pref * (sn * g / kn) @ K
    grad[:, 2] += pref * np.sum(c * gp / kn, axis=1)
    val += -(2 * math.pi / A) * (flat_z * erf(alpha * flat_z) + np.exp(-(alpha * flat_z) ** 2) / (alpha * math.sqrt(math.pi)))
    grad[:, 2] += -(2 * math.pi / A) * erf(alpha * flat_z)
    scale = A / (2 * math.pi)
    val = scale * val + flat_z
    grad = scale * grad
    grad[:, 2] += 1.0
    return val.reshape(z.shape), grad.reshape(x.shape)


def _spectral_vectors(lattice: LatticeSpec, K: int) -> tuple[np.ndarray, float]:
    """Dual vectors in shells max|nᵢ| ≤ K, and min |κ| on shell K+1."""
    kb = lattice.dual_basis()
    if lattice.d == 2:
        n = np.arange(-K, K + 1)
        n = n[n != 0]
        vecs = n[:, None] * kb[0]
        edge = (K + 1) * np.linalg.norm(kb[0])
        return vecs, float(edge)
    n = np.arange(-K - 1, K + 2)
    N1, N2 = np.meshgrid(n, n, indexing="ij")
    shell = np.maximum(np.abs(N1), np.abs(N2)).ravel()
    V = N1.ravel()[:, None] * kb[0] + N2.ravel()[:, None] * kb[1]
    inside = (shell <= K) & (shell > 0)
    edge = float(np.min(np.linalg.norm(V[shell == K + 1], axis=1)))
    return V[inside], edge


def tail_bound(lattice: LatticeSpec, kappa_edge: float, height: float) -> float:
    """Upper estimate of the truncated part of the series at height x_d."""
    if lattice.d == 2:
        theta = kappa_edge  # = θ (K + 1)
        step = np.linalg.norm(lattice.dual_basis()[0])
        return float(2.0 * math.exp(-theta * height) / (theta * (1.0 - math.exp(-step * height))))
    A = lattice.cell_area
    return float(2.0 * (A / (2 * math.pi)) * math.exp(-kappa_edge * height) / height * (1.0 + 1.0 / (kappa_edge * height)))


def solve_cell(lattice: LatticeSpec | Sequence[int], K: int = 64, tol: float = 1e-12, flux_scale: float = 1.0) -> CellSolution:
    """Corrector for the lattice of sites on {x_d = 0}, normalized by min ω = 0."""
    if not isinstance(lattice, LatticeSpec):
        lattice = build_lattice(lattice)
    if K < MIN_SHELLS:
        raise ValueError(f"increase K (need at least {MIN_SHELLS} shells)")
    dual, edge = _spectral_vectors(lattice, K)
    tail = tail_bound(lattice, edge, SPECTRAL_HEIGHT)
    if tail > tol:
        raise ValueError(f"increase K (tail estimate {tail:.2e} > {tol:.0e})")
    alpha = math.sqrt(math.pi / lattice.cell_area)
    cell = CellSolution(lattice, K, 0.0, flux_scale, dual, tail, alpha, flux_scale * lattice.cell_area / GAMMA[lattice.d], 0.0)
    m, where = _boundary_minimum(cell)
    cell.C0 = -m
    cell.far_field_constant = cell.C0
    cell.info["argmin"] = where.tolist()
    return cell


def _cell_points(lattice: LatticeSpec, n: int) -> np.ndarray:
    """Periodic grid of the fundamental cell centered at the origin (tangential coordinates)."""
    B = lattice.tangential_basis
    t = (np.arange(n) + 0.5) / n - 0.5
    if lattice.d == 2:
        return t[:, None] * B[0]
    T1, T2 = np.meshgrid(t, t, indexing="ij")
    return T1.ravel()[:, None] * B[0] + T2.ravel()[:, None] * B[1]


def _boundary_minimum(cell: CellSolution) -> tuple[float, np.ndarray]:
    lat = cell.lattice
    n = 400 if cell.d == 2 else 60
    pts = _cell_points(lat, n)
    full = np.column_stack([pts, np.zeros(len(pts))])
    vals, _ = cell.raw_extracted(full)
    vals = cell.flux_scale * vals
    j = int(np.argmin(vals))
    f = lambda p: float(cell.flux_scale * cell.raw_extracted(np.append(p, 0.0)[None, :])[0][0])
    res = optimize.minimize(f, pts[j], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 4000})
    best = min(vals[j], res.fun)
    where = res.x if res.fun <= vals[j] else pts[j]
    return float(best), np.append(where, 0.0)


# ---------------------------------------------------------------------------
# checks


def cell_average_dd(cell: CellSolution, height: float, n: int = 512) -> float:
    """⟨∂_d ω(·, height)⟩ over the fundamental cell (trapezoid on a periodic grid)."""
    pts = _cell_points(cell.lattice, n)
    full = np.column_stack([pts, np.full(len(pts), height)])
    _, g = cell.evaluate(full)
    return float(np.mean(g[:, -1]))


def face_flux_c_star(cell: CellSolution, height: float = 0.1, n: Optional[int] = None) -> float:
    """c = λ|□| − ∫_{face at height} ∂_d ω for Neumann data scaled by λ (divergence theorem over the slab)."""
    n = n or (2048 if cell.d == 2 else 256)
    return cell.area * (cell.flux_scale - cell_average_dd(cell, height, n))


def hemisphere_flux_c_star(cell: CellSolution, radius: float = 0.05, n: int = 64) -> float:
    """c = |B'_ε| − ∫_{upper hemisphere} ∂_r ω (half ball about the origin site)."""
    u, w = np.polynomial.legendre.leggauss(n)
    if cell.d == 2:
        th = 0.5 * math.pi * (u + 1)
        wt = 0.5 * math.pi * w
        dirs = np.column_stack([np.cos(th), np.sin(th)])
        _, g = cell.evaluate(radius * dirs)
        flux = np.sum(wt * np.sum(g * dirs, axis=1)) * radius
        return 2.0 * radius * cell.flux_scale - flux
    # polar angle from the vertical axis in [0, π/2], azimuth uniform
    th = 0.25 * math.pi * (u + 1)
    wt = 0.25 * math.pi * w
    m = 2 * n
    ph = 2 * math.pi * np.arange(m) / m
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    dirs = np.stack([np.sin(TH) * np.cos(PH), np.sin(TH) * np.sin(PH), np.cos(TH)], axis=-1)
    _, g = cell.evaluate(radius * dirs)
    dr = np.sum(g * dirs, axis=-1)
    flux = np.sum(wt[:, None] * np.sin(TH) * dr) * (2 * math.pi / m) * radius**2
    return math.pi * radius**2 * cell.flux_scale - flux


def check_c_star(cell: CellSolution) -> float:
    """Relative error of the face-flux mass per site against |ξ|."""
    target = cell.flux_scale * float(np.linalg.norm(cell.lattice.xi))
    return abs(face_flux_c_star(cell) - target) / target


def fit_singular_coefficient(cell: CellSolution, r_min: float = 1e-3, r_max: float = 0.1, n: int = 200) -> float:
    """Least-squares coefficient of Φ in ω − x_d near the origin site, with an even harmonic background."""
    u = halton(n, cell.d)
    r = r_min * (r_max / r_min) ** u[:, 0]
    if cell.d == 2:
        th = math.pi * u[:, 1]
        x = np.column_stack([r * np.cos(th), r * np.sin(th)])
        basis = [fundamental(2, r), np.ones(n), x[:, 0], x[:, 0] ** 2 - x[:, 1] ** 2]
    else:
        ct = u[:, 1]
        st = np.sqrt(1 - ct**2)
        ph = 2 * math.pi * u[:, 2]
        x = np.column_stack([r * st * np.cos(ph), r * st * np.sin(ph), r * ct])
        basis = [fundamental(3, r), np.ones(n), x[:, 0], x[:, 1], x[:, 0] * x[:, 1],
                 x[:, 0] ** 2 - x[:, 2] ** 2, x[:, 1] ** 2 - x[:, 2] ** 2]
    vals = cell(x) - cell.flux_scale * x[:, -1]
    M = np.column_stack(basis)
    coef, *_ = np.linalg.lstsq(M, vals, rcond=None)
    return float(coef[0])


def remainder_odd_part(cell: CellSolution, n: int = 100, radius: float = 0.2) -> float:
    """max |h(x', x_d) − h(x', −x_d)| over sampled pairs near the origin site."""
    u = halton(n, cell.d)
    x = (u - 0.5) * 2 * radius
    x[:, -1] = np.abs(x[:, -1]) + 1e-3
    xm = x.copy()
    xm[:, -1] = -xm[:, -1]
    return float(np.max(np.abs(cell.remainder(x) - cell.remainder(xm))))


@dataclass
class TailFit:
    heights: list
    deviations: list
    rate: float  # fitted exponential rate
    bound_rate: float  # 2π / longest basis vector
    constant: float

    @property
    def holds(self) -> bool:
        return all(dv <= self.constant * math.exp(-self.bound_rate * h) * (1 + 1e-9)
                   for h, dv in zip(self.heights, self.deviations)) and self.rate >= self.bound_rate * (1 - 1e-6)


def tail_fit(cell: CellSolution, heights: Sequence[float] = (1.0, 2.0, 3.0), n: int = 64) -> TailFit:
    """Fit |ω − far constant| ≤ C e^{−2π x_d/ℓ} over sampled heights."""
    pts = _cell_points(cell.lattice, n)
    devs = []
    for h in heights:
        full = np.column_stack([pts, np.full(len(pts), h)])
        devs.append(float(np.max(np.abs(cell(full) - cell.far_field_constant))))
    ell = float(np.max(np.linalg.norm(cell.lattice.tangential_basis, axis=1)))
    bound_rate = 2 * math.pi / ell
    rate = -float(np.polyfit(heights, np.log(devs), 1)[0])
    C = max(dv * math.exp(bound_rate * h) for h, dv in zip(heights, devs))
    return TailFit(list(heights), devs, rate, bound_rate, C)


def field_dump(cell: CellSolution, nx: int = 65, nz: int = 33, height: float = 2.0) -> np.ndarray:
    """Rows (x_1, ..., x_d, ω) on a grid of the cell × [0, height], lattice sites skipped."""
    B = cell.lattice.tangential_basis
    t = np.linspace(-0.5, 0.5, nx)
    zs = np.linspace(0.0, height, nz)
    rows = []
    if cell.d == 2:
        T, Z = np.meshgrid(t, zs, indexing="ij")
        P = np.column_stack([T.ravel() * B[0, 0], Z.ravel()])
    else:
        T1, T2, Z = np.meshgrid(t, t, zs, indexing="ij")
        tang = T1.ravel()[:, None] * B[0] + T2.ravel()[:, None] * B[1]
        P = np.column_stack([tang, Z.ravel()])
    site = cell.lattice.nearest_site(P)
    keep = np.linalg.norm(P - site, axis=1) > 1e-9
    P = P[keep]
    return np.column_stack([P, cell(P)])


# ---------------------------------------------------------------------------
# inner profiles and the patched barrier


@dataclass
class InnerProfile:
    """Physical single-site solution u(x) = y_d with y_d + v(x', y_d) = x_d, from a hodograph field."""

    d: int
    k: float
    evaluate: Callable[[np.ndarray], np.ndarray]
    label: str = ""

    @classmethod
    def plane(cls, d: int = 2) -> "InnerProfile":
        return cls(d, 0.0, lambda x: np.asarray(x, float)[..., -1], "plane")

    @classmethod
    def from_field(cls, fieldv) -> "InnerProfile":
        d = fieldv.d
        xs, zs, v = fieldv.xs, fieldv.zs, fieldv.v
        spl = RectBivariateSpline(xs, zs, v, kx=3, ky=3)
        k = -fieldv.k_h if d == 2 else fieldv.k_h

        def evaluate(x):
            x = np.asarray(x, float)
            flat = x.reshape(-1, d)
            t = flat[:, 0] if d == 2 else np.linalg.norm(flat[:, :-1], axis=1)
            if np.any(np.abs(t) > xs[-1]) or np.any(flat[:, -1] > zs[-1] + spl(t, np.full_like(t, zs[-1]), grid=False)):
                raise ValueError("point outside the inner solution's computational domain")
            xd = flat[:, -1]
            v0 = spl(t, np.zeros_like(t), grid=False)
            vz0 = spl(t, np.zeros_like(t), dy=1, grid=False)
            out = np.empty(len(flat))
            below = xd <= v0
            out[below] = (xd[below] - v0[below]) / (1.0 + vz0[below])
            a = ~below
            if np.any(a):
                ta, xa = t[a], xd[a]
                lo = np.zeros_like(xa)
                hi = np.full_like(xa, zs[-1])
                y = np.clip(xa - v0[a], 0.0, zs[-1])
                for _ in range(60):
                    g = y + spl(ta, y, grid=False) - xa
                    gp = 1.0 + spl(ta, y, dy=1, grid=False)
                    lo = np.where(g < 0, y, lo)
                    hi = np.where(g >= 0, y, hi)
                    yn = y - g / gp
                    bad = (yn <= lo) | (yn >= hi)
                    yn = np.where(bad, 0.5 * (lo + hi), yn)
                    if np.max(np.abs(yn - y)) < 1e-14:
                        y = yn
                        break
                    y = yn
                out[a] = y
            return out.reshape(x.shape[:-1])

        return cls(d, k, evaluate, "hodograph")


@dataclass
class PatchedBarrier:
    inner: InnerProfile
    cell: CellSolution
    delta: float
    k: float
    eps: float
    Lambda: float
    r: float
    c: float
    alpha: float
    shift: float
    role: str  # "super" (advancing bound) or "sub" (receding bound)
    margins: dict
    valid: bool

    @property
    def d(self) -> int:
        return self.cell.d

    @property
    def sign(self) -> float:
        return -1.0 if self.role == "super" else 1.0

    @property
    def amplitude(self) -> float:
        kk = self.k - self.eps if self.role == "super" else self.k + self.eps
        return GAMMA[self.d] / np.linalg.norm(self.cell.lattice.xi) * self.delta ** (self.d - 1) * kk

    def w_in(self, x):
        x = np.asarray(x, float)
        z = self.cell.lattice.nearest_site(x)
        return self.delta * self.inner.evaluate((x - z) / self.delta)

    def w_out(self, x):
        x = np.asarray(x, float)
        return _w_out(self.cell, x, self.alpha * self.sign, self.amplitude, self.shift)

    def value(self, x):
        x = np.asarray(x, float)
        z = self.cell.lattice.nearest_site(x)
        dist = np.linalg.norm(x - z, axis=-1)
        out = self.w_out(x)
        near = dist <= self.Lambda * self.r
        if np.any(near):
            wi = self.w_in(x[near])
            wo = out[near]
            inner = dist[near] <= self.r / self.Lambda
            pick = np.minimum(wi, wo) if self.role == "super" else np.maximum(wi, wo)
            out[near] = np.where(inner, wi, pick)
        return out

    def asymptotic_slope(self, height: float = 10.0) -> float:
        """∂_d w_out far above the boundary (ω has decayed there)."""
        x = np.zeros((1, self.d))
        x[0, -1] = height
        h = 1e-4
        e = np.zeros(self.d)
        e[-1] = h
        return float((self.w_out(x + e) - self.w_out(x - e))[0] / (2 * h))

    def predicted_slope(self) -> float:
        return 1.0 + self.sign * self.alpha + self.amplitude

    def normalized_bound(self) -> float:
        return (self.predicted_slope() - 1.0) / self.delta ** (self.d - 1)

    @property
    def s_delta(self) -> float:
        """Height offset of the outer profile in the lemma's parametrization."""
        kk = self.eps if self.role == "super" else -self.eps
        return kk * math.log(self.r) if self.d == 2 else -kk * (self.delta / self.r) ** (self.d - 2)

    @property
    def s(self) -> float:
        """Inner height implied by the fitted translation, shift = δ(s + s_Δ)."""
        return self.shift / self.delta - self.s_delta

    def as_barrier(self, n_cell: int = 200) -> Barrier:
        """The outer part as a Barrier (physical), sampled outside the patch balls."""
        d = self.d
        lat = self.cell.lattice
        fieldspec = None

        def gradient(x):
            x = np.asarray(x, float)
            _, g = self.cell.evaluate(x + self.shift * np.eye(d)[-1])
            beta = 1.0 + self.sign * self.alpha
            grad = -self.amplitude * g
            grad[..., -1] += beta + self.amplitude
            return grad

        def sampler(n):
            pts = _cell_points(lat, max(n, 8))[:n]
            zs = _zero_heights(self.w_out, pts, d)
            ok = np.isfinite(zs)
            bnd = np.column_stack([pts[ok], zs[ok]])
            far = np.linalg.norm(bnd, axis=1) > self.Lambda * self.r
            bnd = bnd[far]
            interior = bnd.copy()
            interior[:, -1] += 0.05 + 1.0 * halton(len(bnd), 1)[:, 0]
            return interior, bnd

        return Barrier("patched", self.role, "physical", d,
                       {"delta": self.delta, "k": self.k, "eps": self.eps, "Lambda": self.Lambda, "alpha": self.alpha},
                       value=self.w_out, gradient=gradient, in_domain=lambda x: np.ones(np.shape(x)[:-1], bool),
                       sampler=sampler, Q=lambda x: np.ones(np.shape(x)[:-1]), info={"patched": self})


def _w_out(cell: CellSolution, x, signed_alpha: float, amplitude: float, shift: float):
    """(1 ± α)(x_d + t) + amplitude·[x_d + t − ω(x + t e_d)]."""
    x = np.asarray(x, float)
    xs = x.copy()
    xs[..., -1] += shift
    om = cell(xs)
    return (1.0 + signed_alpha) * xs[..., -1] + amplitude * (xs[..., -1] - om)


def _zero_heights(fun, tang, d, lo=-1.0, hi=1.0, iters=80):
    """Vectorized bisection for fun(x', x_d) = 0 in x_d ∈ [lo, hi] (NaN if not bracketed)."""
    n = len(tang)
    a = np.full(n, lo)
    b = np.full(n, hi)
    fa = fun(np.column_stack([tang, a]))
    fb = fun(np.column_stack([tang, b]))
    ok = (fa < 0) & (fb > 0)
    for _ in range(iters):
        m = 0.5 * (a + b)
        fm = fun(np.column_stack([tang, m]))
        neg = fm < 0
        a = np.where(neg, m, a)
        b = np.where(neg, b, m)
    out = 0.5 * (a + b)
    out[~ok] = np.nan
    return out


def _sphere_points(d: int, radius: float, n: int) -> np.ndarray:
    if d == 2:
        th = 2 * math.pi * (np.arange(n) + 0.5) / n
        return radius * np.column_stack([np.cos(th), np.sin(th)])
    u = halton(n, 2)
    ct = 2 * u[:, 0] - 1
    st = np.sqrt(1 - ct**2)
    ph = 2 * math.pi * u[:, 1]
    return radius * np.column_stack([st * np.cos(ph), st * np.sin(ph), ct])


def _outer_slope_margin(cell, signed_alpha, amplitude, shift, role, excl_radius, n=256) -> float:
    """Worst slack of |∇w_out| ≤ 1 (super) or ≥ 1 (sub) on the outer free boundary away from the sites."""
    d = cell.d
    pts = _cell_points(cell.lattice, n if d == 2 else int(math.sqrt(n)) + 1)
    f = lambda x: _w_out(cell, x, signed_alpha, amplitude, shift)
    zs = _zero_heights(f, pts, d)
    ok = np.isfinite(zs)
    P = np.column_stack([pts[ok], zs[ok]])
    P = P[np.linalg.norm(P, axis=1) >= excl_radius]
    if len(P) == 0:
        return math.inf
    xs = P.copy()
    xs[:, -1] += shift
    _, g = cell.evaluate(xs)
    grad = -amplitude * g
    grad[:, -1] += 1.0 + signed_alpha + amplitude
    slope = np.linalg.norm(grad, axis=1)
    return float(np.min(1.0 - slope)) if role == "super" else float(np.min(slope - 1.0))


def assemble_patched_barrier(inner: InnerProfile, cell: CellSolution, delta: float, k: Optional[float] = None,
                             eps: float = 0.0, Lambda: float = 2.0, c: float = 0.25, role: str = "super",
                             n_sphere: int = 256, raise_on_failure: bool = True) -> PatchedBarrier:
    """Patch δ·w_in(·/δ) near each site with the corrector-based outer profile.

    r = c/Λ.  The translation t is chosen to balance the two crossing margins on
    ∂B_{Λr} and ∂B_{r/Λ}, and α is the smallest value for which the outer
    profile satisfies its free-boundary inequality outside the inner balls.
    """
    if role not in ("super", "sub"):
        raise ValueError("role must be 'super' or 'sub'")
    d = cell.d
    if inner.d != d:
        raise ValueError("inner profile and cell dimension differ")
    k = inner.k if k is None else k
    if Lambda <= 1.0:
        raise ValueError("Lambda must exceed 1")
    r = c / Lambda
    sign = -1.0 if role == "super" else 1.0
    kk = k - eps if role == "super" else k + eps
    amplitude = GAMMA[d] / np.linalg.norm(cell.lattice.xi) * delta ** (d - 1) * kk

    outer_pts = _sphere_points(d, Lambda * r, n_sphere)
    inner_pts = _sphere_points(d, r / Lambda, n_sphere)
    win_outer = delta * inner.evaluate(outer_pts / delta)
    win_inner = delta * inner.evaluate(inner_pts / delta)

    def crossing(alpha, t):
        wo_o = _w_out(cell, outer_pts, sign * alpha, amplitude, t)
        wo_i = _w_out(cell, inner_pts, sign * alpha, amplitude, t)
        act_o = np.maximum(wo_o, win_outer) > 0
        act_i = np.maximum(wo_i, win_inner) > 0
        # super: w_out < w_in on the outer sphere, w_out > w_in on the inner sphere (sub: reversed)
        m_out = -sign * (win_outer - wo_o)[act_o]
        m_in = -sign * (wo_i - win_inner)[act_i]
        return (float(np.min(m_out)) if m_out.size else math.inf), (float(np.min(m_in)) if m_in.size else math.inf)

    def balanced_shift(alpha):
        F = lambda t: np.subtract(*crossing(alpha, t))
        lo, hi = -0.5, 0.5
        flo, fhi = F(lo), F(hi)
        if not (np.isfinite(flo) and np.isfinite(fhi)) or flo * fhi > 0:
            return 0.0
        return optimize.brentq(F, lo, hi, xtol=1e-13)

    def slope_ok(alpha):
        t = balanced_shift(alpha)
        return _outer_slope_margin(cell, sign * alpha, amplitude, t, role, r / Lambda) >= 0.0

    degenerate = abs(amplitude) == 0.0 and inner.label == "plane"
    if degenerate:
        alpha, t = 0.0, 0.0
        m_out = m_in = 0.0
        slope_margin = 0.0
        valid = True
    else:
        if slope_ok(0.0):
            alpha = 0.0
        elif not slope_ok(0.5):
            alpha = 0.5
        else:
            lo, hi = 0.0, 0.5
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if slope_ok(mid):
                    hi = mid
                else:
                    lo = mid
                if hi - lo < 1e-9 * max(hi, 1e-12) + 1e-14:
                    break
            alpha = hi
        t = balanced_shift(alpha)
        m_out, m_in = crossing(alpha, t)
        slope_margin = _outer_slope_margin(cell, sign * alpha, amplitude, t, role, r / Lambda)
        valid = m_out > 0 and m_in > 0 and slope_margin >= 0
    pb = PatchedBarrier(inner, cell, delta, k, eps, Lambda, r, c, alpha, t, role,
                        {"outer_crossing": m_out, "inner_crossing": m_in, "outer_slope": slope_margin}, bool(valid))
    if not valid and raise_on_failure:
        raise ValueError("δ not small enough for (k, ε)")
    return pb


@dataclass
class BoundRow:
    delta: float
    normalized_bound: float
    prediction: float
    eps: float
    Lambda: float
    alpha: float
    valid: bool

    @property
    def relative_gap(self) -> float:
        return abs(self.prediction - self.normalized_bound) / abs(self.prediction) if self.prediction else 0.0


EPS_FRACTIONS = (0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0)
LAMBDAS = (1.25, 1.5, 2.0, 3.0)


def _assemble_task(args):
    inner, cell, delta, eps, lam, c, role = args
    try:
        return assemble_patched_barrier(inner, cell, delta, eps=eps, Lambda=lam, c=c, role=role, raise_on_failure=False)
    except ValueError:
        return None


def best_patched_bound(inner: InnerProfile, cell: CellSolution, delta: float, role: str = "super",
                       eps_fractions: Sequence[float] = EPS_FRACTIONS, Lambdas: Sequence[float] = LAMBDAS,
                       c: float = 0.25, jobs: int = 1) -> Optional[PatchedBarrier]:
    """Valid patched barrier with the best asymptotic slope over the (ε, Λ) grid (None if none is valid)."""
    from .capacity import parallel_map

    scale = abs(inner.k) if inner.k != 0 else 1.0
    tasks = [(inner, cell, delta, fr * scale, lam, c, role) for lam in Lambdas for fr in eps_fractions]
    found = [pb for pb in parallel_map(_assemble_task, tasks, jobs) if pb is not None and pb.valid]
    if not found:
        return None
    key = (lambda pb: pb.normalized_bound()) if role == "super" else (lambda pb: -pb.normalized_bound())
    return max(found, key=key)


def estimate_Q_bound(deltas: Sequence[float], defect: DefectProfile, direction: str = "adv", xi=None,
                     inner: Optional[InnerProfile] = None, cell: Optional[CellSolution] = None, jobs: int = 1,
                     **kw) -> list[BoundRow]:
    """Per δ: best valid barrier bound (Q̂^δ − 1)/δ^{d−1} next to the prediction γ_d|ξ|⁻¹k."""
    if direction not in ("adv", "rec"):
        raise ValueError("direction must be 'adv' or 'rec'")
    d = defect.d
    xi = xi or ((0, 1) if d == 2 else (0, 0, 1))
    cell = cell or solve_cell(xi)
    if inner is None:
        inner = InnerProfile.plane(d) if defect.sigma == 0 else extremal_inner(defect, direction, jobs=jobs)
    role = "super" if direction == "adv" else "sub"
    pred = GAMMA[d] / float(np.linalg.norm(cell.lattice.xi)) * inner.k
    rows = []
    for dl in deltas:
        if inner.k == 0.0:
            rows.append(BoundRow(dl, 0.0, pred, 0.0, float("nan"), 0.0, True))
            continue
        pb = best_patched_bound(inner, cell, dl, role=role, jobs=jobs, **kw)
        if pb is None:
            rows.append(BoundRow(dl, 0.0, pred, float("nan"), float("nan"), float("nan"), False))
        else:
            rows.append(BoundRow(dl, pb.normalized_bound(), pred, pb.eps, pb.Lambda, pb.alpha, True))
    return rows

def extremal_inner(defect: DefectProfile, direction: str = "adv", s_values: Optional[Sequence[float]] = None,
                   domain=None, jobs: int = 1) -> InnerProfile:
    """Single-site solution at the extremal capacity of the height family (max for adv, min for rec)."""
    from .capacity import single_site_family

    if direction not in ("adv", "rec"):
        raise ValueError("direction must be 'adv' or 'rec'")
    s_values = np.arange(-0.6, 0.6001, 0.1) if s_values is None else np.asarray(s_values, float)
    pts = single_site_family(defect, s_values, domain, jobs=jobs)
    s = np.array([p.s for p in pts])
    k = np.array([p.k for p in pts])
    i = int(np.argmax(k) if direction == "adv" else np.argmin(k))
    s_star = float(s[i])
    if 0 < i < len(s) - 1:
        c = np.polyfit(s[i - 1:i + 2], k[i - 1:i + 2], 2)
        if c[0] != 0:
            s_star = float(np.clip(-c[1] / (2 * c[0]), s[i - 1], s[i + 1]))
    fld = single_site_family(defect, [s_star], domain, keep_fields=True)[0].field
    prof = InnerProfile.from_field(fld)
    prof.label = f"height s={s_star:.6g}"
    return prof
