"""Finite-difference solver for the hodograph form of the single-site problem.

After the partial hodograph change of variables y = (x', u(x)) the unknown
v(y) = x_d - y_d lives on a fixed half-space and satisfies

    tr(A(∇v) D²v) = 0                               for y_d > 0,
    (1 + σ q̃(y', v)) (1 + ∂_d v) = sqrt(1 + |∇'v|²)   on y_d = 0.

d = 2 is discretized on a planar grid over [-L, L] x [0, H]; d = 3 uses the
axisymmetric reduction in (ρ, y_d), valid because defect profiles are radial.
Grids are uniform (spacing h) on the defect core and stretched geometrically
outside it.  Artificial boundaries carry the one-term far-field ansatz
c + k_h G(y), with k_h an extra Newton unknown tied to a least-squares fit on
an annulus, so the closure is refreshed inside every Newton step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.interpolate import RectBivariateSpline

from .geometry import DefectProfile


class SolverError(RuntimeError):
    """Numerical failure of a solve (reported with exit code 3 by the CLI)."""


# ---------------------------------------------------------------------------
# operator pieces


def a_matrix(p) -> np.ndarray:
    """A(p) for a gradient p of shape (d,) or a batch (..., d)."""
    p = np.asarray(p, dtype=float)
    d = p.shape[-1]
    pd = p[..., -1]
    if np.any(pd <= -1.0):
        raise ValueError("degenerate transform")
    pt = p[..., :-1]
    A = np.broadcast_to(np.eye(d), p.shape + (d,)).copy()
    off = pt / (1.0 + pd)[..., None]
    A[..., :-1, -1] = off
    A[..., -1, :-1] = off
    A[..., -1, -1] = (1.0 + np.sum(pt * pt, axis=-1)) / (1.0 + pd) ** 2
    return A


def n_term(pt) -> np.ndarray:
    """N(p') = sqrt(1 + |p'|²) - 1, computed without cancellation."""
    pt = np.asarray(pt, dtype=float)
    s = np.sum(pt * pt, axis=-1) if pt.ndim else pt * pt
    return s / (np.sqrt(1.0 + s) + 1.0)


def neumann_operator(dv_normal, pt, q_value=0.0, sigma: float = 0.0):
    """(1 + σ q̃)(1 + ∂_d v) − sqrt(1 + |p'|²)."""
    pt = np.atleast_1d(np.asarray(pt, dtype=float))
    s = np.sum(pt * pt, axis=-1)
    return (1.0 + sigma * np.asarray(q_value)) * (1.0 + np.asarray(dv_normal)) - np.sqrt(1.0 + s)


# ---------------------------------------------------------------------------
# grids


def stretched_axis(core: float, h: float, L: float, ratio: float) -> np.ndarray:
    """Nodes on [0, L]: uniform spacing h up to `core`, geometric growth after."""
    n_core = max(1, int(round(core / h)))
    nodes = list(np.arange(n_core + 1) * h)
    x, step = nodes[-1], h
    while x < L - 1e-12:
        step *= ratio
        x = min(x + step, L)
        nodes.append(x)
    nodes = np.array(nodes)
    # avoid a sliver cell at the end
    if len(nodes) > 3 and nodes[-1] - nodes[-2] < 0.5 * (nodes[-2] - nodes[-3]):
        nodes = np.delete(nodes, -2)
    return nodes


@dataclass(frozen=True)
class HodographDomain:
    d: int = 2
    L: float = 48.0
    H: float = 48.0
    h: float = 1.0 / 16.0
    core: float = 2.0
    ratio: float = 1.08

    def __post_init__(self):
        if self.L < 4 or self.H < 4:
            raise ValueError("domain half-widths must satisfy L >= 4 and H >= 4")
        if self.h > 1.0 / 8.0:
            raise ValueError("grid spacing must satisfy h <= 1/8")

    @property
    def axisymmetric(self) -> bool:
        return self.d == 3

    def tangential_nodes(self) -> np.ndarray:
        half = stretched_axis(self.core, self.h, self.L, self.ratio)
        if self.axisymmetric:
            return half
        return np.concatenate([-half[:0:-1], half])

    def vertical_nodes(self) -> np.ndarray:
        return stretched_axis(self.core, self.h, self.H, self.ratio)


def _first_derivative(x: np.ndarray, symmetric_axis: bool = False) -> sp.csr_matrix:
    n = len(x)
    rows, cols, vals = [], [], []
    for i in range(n):
        if 0 < i < n - 1:
            hm, hp = x[i] - x[i - 1], x[i + 1] - x[i]
            w = (-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp)))
            idx = (i - 1, i, i + 1)
        elif i == 0:
            if symmetric_axis:
                continue
            h1, h2 = x[1] - x[0], x[2] - x[1]
            w = (-(2 * h1 + h2) / (h1 * (h1 + h2)), (h1 + h2) / (h1 * h2), -h1 / (h2 * (h1 + h2)))
            idx = (0, 1, 2)
        else:
            h1, h2 = x[-1] - x[-2], x[-2] - x[-3]
            w = ((2 * h1 + h2) / (h1 * (h1 + h2)), -(h1 + h2) / (h1 * h2), h1 / (h2 * (h1 + h2)))
            idx = (n - 1, n - 2, n - 3)
        rows += [i] * 3
        cols += list(idx)
        vals += list(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _second_derivative(x: np.ndarray, symmetric_axis: bool = False) -> sp.csr_matrix:
    n = len(x)
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        hm, hp = x[i] - x[i - 1], x[i + 1] - x[i]
        rows += [i] * 3
        cols += [i - 1, i, i + 1]
        vals += [2 / (hm * (hm + hp)), -2 / (hm * hp), 2 / (hp * (hm + hp))]
    if symmetric_axis:
        h1 = x[1] - x[0]
        rows += [0, 0]
        cols += [0, 1]
        vals += [-2 / h1**2, 2 / h1**2]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass
class GridOperators:
    xs: np.ndarray
    zs: np.ndarray
    Dx: sp.csr_matrix
    Dz: sp.csr_matrix
    Dxx: sp.csr_matrix
    Dzz: sp.csr_matrix
    Dxz: sp.csr_matrix
    Lt: sp.csr_matrix  # tangential Laplacian
    X: np.ndarray
    Z: np.ndarray

    @property
    def shape(self):
        return (len(self.xs), len(self.zs))


_OPS_CACHE: dict = {}


def grid_operators(domain: HodographDomain, H: Optional[float] = None) -> GridOperators:
    key = (domain, H)
    if key in _OPS_CACHE:
        return _OPS_CACHE[key]
    xs = domain.tangential_nodes()
    zs = domain.vertical_nodes() if H is None else stretched_axis(domain.core, domain.h, H, domain.ratio)
    axis = domain.axisymmetric
    dx1, dxx1 = _first_derivative(xs, axis), _second_derivative(xs, axis)
    dz1, dzz1 = _first_derivative(zs), _second_derivative(zs)
    Ix, Iz = sp.identity(len(xs), format="csr"), sp.identity(len(zs), format="csr")
    Dx = sp.kron(dx1, Iz, format="csr")
    Dz = sp.kron(Ix, dz1, format="csr")
    Dxx = sp.kron(dxx1, Iz, format="csr")
    Dzz = sp.kron(Ix, dzz1, format="csr")
    Dxz = sp.kron(dx1, dz1, format="csr")
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    if axis:
        inv_r = np.where(xs > 0, 1.0 / np.where(xs > 0, xs, 1.0), 0.0)
        lt1 = dxx1 + sp.diags(inv_r) @ dx1
        lt1 = lt1.tolil()
        lt1[0, :] = 2.0 * dxx1[0, :]
        Lt = sp.kron(lt1.tocsr(), Iz, format="csr")
    else:
        Lt = Dxx
    ops = GridOperators(xs, zs, Dx, Dz, Dxx, Dzz, Dxz, Lt, X, Z)
    _OPS_CACHE[key] = ops
    return ops


# ---------------------------------------------------------------------------
# far-field closures


def strip_green(rho: np.ndarray, z: np.ndarray, H: float, terms: int = 400) -> np.ndarray:
    """Σ_n (−1)^n / |y − 2nH e_d|: unit source on the Neumann floor, zero on y_d = H."""
    rho = np.asarray(rho, dtype=float)
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        total = 1.0 / np.hypot(rho, z)
    partial_prev = total.copy()
    for n in range(1, terms + 1):
        term = (-1) ** n * (1.0 / np.hypot(rho, z - 2 * n * H) + 1.0 / np.hypot(rho, z + 2 * n * H))
        partial_prev = total
        total = total + term
    # average of the last two partial sums accelerates the alternating tail
    return 0.5 * (total + partial_prev)


@dataclass(frozen=True)
class FarField:
    """Closure on artificial boundaries.

    kind = "height": v -> -s at infinity (physical far field x_d + s).
    kind = "ball":   d = 2 ball problem of radius R with data (x_d + k log R)_+.
    kind = "strip":  d = 3, data x_d + s on {x_d >= R} (top of the box at y_d = R + s).
    """

    kind: str = "height"
    s: float = 0.0
    k: float = 0.0
    R: float = math.inf

    def top(self, domain: HodographDomain) -> float:
        if self.kind == "strip":
            return self.R + self.s
        return domain.H


def green(d: int, rho, z, closure: FarField, H: float):
    with np.errstate(divide="ignore"):
        if d == 2:
            return np.log(np.hypot(rho, z))
        if closure.kind == "strip":
            return strip_green(rho, z, H)
        return 1.0 / np.hypot(rho, z)


# ---------------------------------------------------------------------------
# fields


@dataclass
class HodographField:
    domain: HodographDomain
    defect: DefectProfile
    closure: FarField
    xs: np.ndarray
    zs: np.ndarray
    v: np.ndarray  # shape (len(xs), len(zs))
    k_h: float
    c: float
    residual: float
    iterations: int
    history: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.domain.d

    def gradient(self):
        ops = grid_operators(self.domain, None if self.closure.kind != "strip" else self.closure.top(self.domain))
        flat = self.v.ravel()
        return (ops.Dx @ flat).reshape(self.v.shape), (ops.Dz @ flat).reshape(self.v.shape)

    def front(self) -> tuple[np.ndarray, np.ndarray]:
        """Free boundary as (tangential coordinate, height) = (y', v(y', 0))."""
        return self.xs.copy(), self.v[:, 0].copy()

    def far_value(self, rho, z):
        H = self.closure.top(self.domain)
        return self.c + self.k_h * green(self.d, rho, z, self.closure, H)


def _annulus_functional(ops: GridOperators, d: int, closure: FarField, H: float, r_min: float, r_max: float):
    R = np.hypot(ops.X, ops.Z).ravel()
    mask = (R >= r_min) & (R <= r_max)
    if mask.sum() < 8:
        raise SolverError("fit annulus contains too few nodes")
    G = green(d, ops.X.ravel()[mask], ops.Z.ravel()[mask], closure, H)
    M = np.column_stack([np.ones(mask.sum()), G])
    pinv = np.linalg.pinv(M)
    ell = np.zeros(R.size)
    ell[np.flatnonzero(mask)] = pinv[1]
    return ell


def solve_hodograph(
    domain: HodographDomain,
    defect: DefectProfile,
    closure: FarField | float = 0.0,
    initial: Optional[np.ndarray] = None,
    initial_k: float = 0.0,
    tol: float = 1e-9,
    max_iter: int = 40,
    sigma_cap: float = 0.3,
    fit_window: Optional[tuple[float, float]] = None,
) -> HodographField:
    """Damped Newton solve; `closure` may be a plain number, read as the height s."""
    if not isinstance(closure, FarField):
        closure = FarField("height", s=float(closure))
    if abs(defect.sigma) > sigma_cap:
        raise ValueError(f"sigma={defect.sigma} exceeds the flat-regime solver cap {sigma_cap}")
    if defect.d != domain.d:
        raise ValueError("defect and domain dimensions differ")
    if closure.kind == "ball" and domain.d != 2:
        raise ValueError("ball closure is for d = 2")
    if closure.kind == "strip" and domain.d != 3:
        raise ValueError("strip closure is for d = 3")
    H = closure.top(domain)
    if H < 4:
        raise ValueError("domain top must satisfy H >= 4")
    ops = grid_operators(domain, H if closure.kind == "strip" else None)
    nx, nz = ops.shape
    N = nx * nz
    d = domain.d
    sigma = defect.sigma

    idx = np.arange(N).reshape(nx, nz)
    far = np.zeros((nx, nz), dtype=bool)
    far[:, -1] = True
    far[-1, :] = True
    if not domain.axisymmetric:
        far[0, :] = True
    bottom = np.zeros((nx, nz), dtype=bool)
    bottom[:, 0] = True
    bottom &= ~far
    interior = ~(far | bottom)
    far_idx, bot_idx, int_idx = idx[far], idx[bottom], idx[interior]
    G_far = green(d, ops.X[far], ops.Z[far], closure, H)

    if fit_window is None:
        lim = min(domain.L, H)
        fit_window = (4.0, 0.5 * lim)
    ell = _annulus_functional(ops, d, closure, H, *fit_window)

    if closure.kind == "ball":
        logR = math.log(closure.R)
        c_of = lambda kh: -(closure.k + kh) * logR
        dc_dk = -logR
    else:
        c_of = lambda kh: -closure.s
        dc_dk = 0.0

    rho_bot = np.abs(ops.X[:, 0])[~far[:, 0]]

    v = np.full(N, -closure.s if closure.kind != "ball" else 0.0) if initial is None else np.asarray(initial, float).ravel().copy()
    if initial is None and closure.kind == "ball":
        v[:] = c_of(initial_k)
    kh = float(initial_k)

    Dz_bot = ops.Dz[bot_idx]
    Dx_bot = ops.Dx[bot_idx]

    def residual(v, kh):
        p1 = ops.Dx @ v
        p2 = ops.Dz @ v
        vxz = ops.Dxz @ v
        vzz = ops.Dzz @ v
        one = 1.0 + p2
        a = p1 / one
        b = (1.0 + p1 * p1) / one**2
        F = np.empty(N + 1)
        pde = ops.Lt @ v + 2.0 * a * vxz + b * vzz
        F[int_idx] = pde[int_idx]
        vb = v[bot_idx]
        qv = defect.shape_at(rho_bot, vb)
        pb1 = p1[bot_idx]
        pbz = Dz_bot @ v
        F[bot_idx] = (1.0 + sigma * qv) * (1.0 + pbz) - np.sqrt(1.0 + pb1 * pb1)
        F[far_idx] = v[far_idx] - c_of(kh) - kh * G_far
        F[N] = kh - ell @ v
        return F, (p1, p2, vxz, vzz, a, b, one, qv, pb1, pbz)

    def jacobian(v, kh, aux):
        p1, p2, vxz, vzz, a, b, one, qv, pb1, pbz = aux
        a1 = 1.0 / one
        a2 = -p1 / one**2
        b1 = 2.0 * p1 / one**2
        b2 = -2.0 * (1.0 + p1 * p1) / one**3
        J_pde = (
            ops.Lt
            + sp.diags(2.0 * a) @ ops.Dxz
            + sp.diags(2.0 * vxz * a1) @ ops.Dx
            + sp.diags(2.0 * vxz * a2) @ ops.Dz
            + sp.diags(b) @ ops.Dzz
            + sp.diags(vzz * b1) @ ops.Dx
            + sp.diags(vzz * b2) @ ops.Dz
        ).tocsr()
        vb = v[bot_idx]
        dq = defect.shape_dheight(rho_bot, vb)
        J_bot = (
            sp.diags(sigma * dq * (1.0 + pbz)) @ sp.csr_matrix((np.ones(len(bot_idx)), (np.arange(len(bot_idx)), bot_idx)), shape=(len(bot_idx), N))
            + sp.diags(1.0 + sigma * qv) @ Dz_bot
            - sp.diags(pb1 / np.sqrt(1.0 + pb1 * pb1)) @ Dx_bot
        ).tocsr()
        nf = len(far_idx)
        J_far = sp.csr_matrix((np.ones(nf), (np.arange(nf), far_idx)), shape=(nf, N))
        row_order = np.concatenate([int_idx, bot_idx, far_idx])
        big = sp.vstack([J_pde[int_idx], J_bot, J_far]).tocsr()
        # place rows in natural order
        perm = np.empty(N, dtype=np.int64)
        perm[row_order] = np.arange(N)
        big = big[perm]
        kcol = np.zeros(N)
        kcol[far_idx] = -(dc_dk + G_far)
        top = sp.hstack([big, sp.csr_matrix(kcol.reshape(-1, 1))])
        last = sp.hstack([sp.csr_matrix(-ell.reshape(1, -1)), sp.csr_matrix(np.array([[1.0]]))])
        return sp.vstack([top, last]).tocsc()

    F, aux = residual(v, kh)
    norm = np.max(np.abs(F))
    history = [norm]
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise SolverError(f"no flat solution at this (σ,s) = ({sigma}, {closure.s}); residual {norm:.3e}")
        J = jacobian(v, kh, aux)
        try:
            step = splu(J).solve(-F)
        except RuntimeError as exc:  # singular Jacobian
            raise SolverError(f"no flat solution at this (σ,s) = ({sigma}, {closure.s}): {exc}") from exc
        lam = 1.0
        phi0 = 0.5 * F @ F
        while True:
            v_new = v + lam * step[:N]
            kh_new = kh + lam * step[N]
            pz = ops.Dz @ v_new
            if np.all(1.0 + pz > 0.05):
                F_new, aux_new = residual(v_new, kh_new)
                if 0.5 * F_new @ F_new <= (1.0 - 1e-4 * lam) * phi0 or lam < 1e-3:
                    break
            lam *= 0.5
            if lam < 1e-6:
                raise SolverError(f"no flat solution at this (σ,s) = ({sigma}, {closure.s}); line search failed")
        v, kh, F, aux = v_new, kh_new, F_new, aux_new
        norm = np.max(np.abs(F))
        history.append(norm)
        it += 1
        if not np.isfinite(norm):
            raise SolverError(f"no flat solution at this (σ,s) = ({sigma}, {closure.s}); diverged")

    out = HodographField(domain, defect, closure, ops.xs, ops.zs, v.reshape(nx, nz), kh, c_of(kh), norm, it, history)
    gx, gz = out.gradient()
    if np.max(np.hypot(gx, gz)) >= 0.9:
        raise SolverError("left flat regime")
    return out


# ---------------------------------------------------------------------------
# inversion


@dataclass
class FreeBoundarySolution:
    x1: np.ndarray  # tangential coordinate (y_1, or radius ρ in d = 3)
    xd: np.ndarray
    u: np.ndarray  # shape (len(x1), len(xd)), zero outside the positivity set
    front: np.ndarray  # polyline, rows (tangential, height)
    positive: np.ndarray


def invert_hodograph(field, x1=None, xd=None) -> FreeBoundarySolution:
    """Resample u on a regular physical grid; u(y', y_d + v(y)) = y_d.

    `field` is anything with node vectors xs, zs and values v[len(xs), len(zs)].
    """
    dz = np.gradient(field.v, field.zs, axis=1)
    if np.any(1.0 + dz <= 0.0):
        raise ValueError("non-invertible hodograph field (1 + ∂_d v <= 0)")
    xs, zs, v = field.xs, field.zs, field.v
    if x1 is None:
        x1 = xs
    x1 = np.asarray(x1, dtype=float)
    if xd is None:
        lo = float(np.min(v[:, 0]))
        xd = np.linspace(lo - 0.5, min(zs[-1], 4.0), 161)
    xd = np.asarray(xd, dtype=float)
    spline = RectBivariateSpline(xs, zs, v, kx=3, ky=3)
    vcol = spline(x1, zs)  # columns at requested tangential positions
    u = np.zeros((len(x1), len(xd)))
    front = np.column_stack([x1, vcol[:, 0]])
    for i in range(len(x1)):
        xcol = zs + vcol[i]  # physical heights of hodograph nodes, increasing
        above = xd >= xcol[0]
        # invert x_d = y_d + v(y', y_d) by monotone interpolation, then polish with Newton
        y = np.interp(xd[above], xcol, zs)
        for _ in range(3):
            g = y + spline(np.full_like(y, x1[i]), y, grid=False) - xd[above]
            gp = 1.0 + spline(np.full_like(y, x1[i]), y, dy=1, grid=False)
            y = np.clip(y - g / gp, 0.0, zs[-1])
        u[i, above] = y
    return FreeBoundarySolution(x1, xd, u, front, u > 0)


def physical_slope_at_front(field: HodographField) -> np.ndarray:
    """|∇u| on the free boundary, from the hodograph gradient."""
    gx, gz = field.gradient()
    return np.sqrt(1.0 + gx[:, 0] ** 2) / (1.0 + gz[:, 0])
