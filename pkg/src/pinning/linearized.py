"""Small-amplitude oracle: half-space Neumann kernel convolution and the second-order Picard remainder.

Heights here are hodograph far values: v → s at infinity, the defect is
sampled on the slice at height s, and the physical far-field plane is x_d − s.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import ellipk

from .geometry import DefectProfile, slice_integral
from .hodograph import (
    FarField,
    HodographDomain,
    SolverError,
    _annulus_functional,
    green,
    grid_operators,
    solve_hodograph,
)

GAMMA = {2: math.pi, 3: 2.0 * math.pi}

_U, _W = np.polynomial.legendre.leggauss(96)
_U = 0.5 * (_U + 1.0)
_W = 0.5 * _W


def fundamental(d: int, r):
    """Un-normalized fundamental solution: −log r (d = 2), r^{2−d} (d ≥ 3)."""
    r = np.asarray(r, float)
    return -np.log(r) if d == 2 else r ** (2 - d)


def kernel_constant(d: int, mode: str) -> float:
    if mode == "paper":
        return 1.0
    if mode == "physical":
        return 1.0 / GAMMA[d]
    raise ValueError(f"unknown kernel normalization {mode!r}")


def _graded_nodes(lo: float, hi: float, t0: np.ndarray):
    """Quadrature nodes on [lo, hi] split at t0 and graded cubically towards t0.

    Returns (nodes, weights) of shape (npts, 2·len(_U)); handles the
    logarithmic near-singularity of the kernel at the projection of y.
    """
    t0 = np.clip(t0, lo, hi)[:, None]
    left, right = t0 - lo, hi - t0
    g = _U**3
    dg = 3.0 * _U**2 * _W
    nodes = np.concatenate([t0 - left * g, t0 + right * g], axis=1)
    weights = np.concatenate([left * dg, right * dg], axis=1)
    return nodes, weights


@dataclass
class LinearizedSolution:
    defect: DefectProfile
    s: float
    mode: str
    constant: float
    far_coefficient: float  # coefficient of log|y| (d = 2) or |y|^{2−d} (d = 3) in w
    sigma: float = 0.0
    grid: Optional[tuple] = None  # (xs, zs, values of v = s + σ w + σ² r)
    remainder: Optional[np.ndarray] = None
    remainder_norm: float = math.nan
    capacity: float = math.nan
    iterations: int = 0
    increments: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.defect.d

    def value(self, rho, z) -> np.ndarray:
        return _convolve(self.defect, self.s, rho, z, self.constant, derivative=False)

    def normal_derivative(self, rho, z) -> np.ndarray:
        return _convolve(self.defect, self.s, rho, z, self.constant, derivative=True)


def _convolve(defect: DefectProfile, s: float, rho, z, constant: float, derivative: bool) -> np.ndarray:
    """constant·∫ Φ(y − z') q̃(z', s) dS(z'), or its y_d-derivative; y = (rho, z) with rho the tangential radius."""
    rho = np.atleast_1d(np.asarray(rho, float))
    z = np.atleast_1d(np.asarray(z, float))
    rho, z = np.broadcast_arrays(rho, z)
    shape = rho.shape
    rho, z = rho.ravel(), z.ravel()
    if abs(s) >= 1.0:
        return np.zeros(shape)
    a = math.sqrt(1.0 - s * s)
    d = defect.d
    if d == 2:
        t, wt = _graded_nodes(-a, a, rho)
        q = defect.shape_at(t, s)
        dist2 = (rho[:, None] - t) ** 2 + z[:, None] ** 2
        if derivative:
            # Poisson kernel with the value at the projection subtracted
            q0 = defect.shape_at(np.clip(rho, -a, a), s) * (np.abs(rho) < a)
            body = np.sum(wt * (z[:, None] / dist2) * (q - q0[:, None]), axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ang = np.where(z > 0, np.arctan((a - rho) / z) + np.arctan((a + rho) / z), 0.0)
            out = -(body + q0 * ang)
        else:
            out = -0.5 * np.sum(wt * np.log(np.maximum(dist2, 1e-300)) * q, axis=1)
        return constant * out.reshape(shape)
    # d = 3: integrate over rings of radius t about the axis; angular integral via K(m)
    rho = np.abs(rho)
    t, wt = _graded_nodes(0.0, a, rho)
    q = defect.shape_at(t, s)
    S2 = (rho[:, None] + t) ** 2 + z[:, None] ** 2
    m = np.clip(4.0 * rho[:, None] * t / np.maximum(S2, 1e-300), 0.0, 1.0 - 1e-16)
    K = ellipk(m)
    if derivative:
        # Poisson kernel z/|y − z'|³ in polar coordinates about the projection of y,
        # with q̃ at the projection subtracted; the subtracted part integrates to 2π q̃
        th, wth = np.polynomial.legendre.leggauss(64)
        th = math.pi * (th + 1.0)
        wth = math.pi * wth
        rmax = a + rho[:, None]
        rr = rmax * _U**3
        wr = rmax * 3.0 * _U**2 * _W
        px = rho[:, None, None] + rr[:, :, None] * np.cos(th)
        py = rr[:, :, None] * np.sin(th)
        qq = defect.shape_at(np.hypot(px, py), s)
        q0 = defect.shape_at(rho, s)
        P = z[:, None] / (rr**2 + z[:, None] ** 2) ** 1.5
        body = np.sum(wr * rr * P * np.sum(wth * (qq - q0[:, None, None]), axis=-1), axis=1)
        out = -(body + 2.0 * math.pi * q0)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.sum(np.where(wt > 0, wt * t * q * 4.0 * K / np.sqrt(S2), 0.0), axis=1)
    return constant * out.reshape(shape)


def kernel_convolve(defect: DefectProfile, s: float, kernel_normalization: str = "physical") -> LinearizedSolution:
    """w_s = c·∫ Φ(y − z') q̃(z', s) dS(z') with c = 1 ("paper") or 1/γ_d ("physical").

    The far field of w is c·I(s)·Φ(y), so the coefficient of log|y| (d = 2) is
    −c·I(s) and that of |y|^{2−d} (d = 3) is c·I(s).
    """
    c = kernel_constant(defect.d, kernel_normalization)
    I = slice_integral(defect, s)
    far = -c * I if defect.d == 2 else c * I
    return LinearizedSolution(defect, s, kernel_normalization, c, far)


def boundary_residual(sol: LinearizedSolution, points, height: float = 1e-9) -> np.ndarray:
    """∂_d w + q̃(·, s) just above the boundary at tangential points."""
    points = np.asarray(points, float)
    dw = sol.normal_derivative(points, np.full_like(points, height))
    return dw + sol.defect.shape_at(points, sol.s)


# ---------------------------------------------------------------------------
# second-order remainder


def phi_weights(d: int, rho, z) -> tuple[np.ndarray, np.ndarray]:
    r = 2.0 + np.hypot(rho, z)
    if d == 2:
        return np.abs(np.log(r)), 1.0 / r
    return r ** (2 - d), (d - 2) * r ** (1 - d)


def phi_norm(d: int, X, Z, values, grad) -> float:
    """sup |r| / |Φ(2+|y|)| + |∇r| / |∇Φ(2+|y|)| over the grid."""
    w0, w1 = phi_weights(d, X, Z)
    gx, gz = (np.reshape(g, np.shape(values)) for g in grad)
    return float(np.max(np.abs(values) / w0 + np.hypot(gx, gz) / w1))


def fixed_point_remainder(defect: DefectProfile, s: float, sigma: Optional[float] = None, max_iter: int = 60,
                          tol: float = 1e-8, domain: Optional[HodographDomain] = None) -> LinearizedSolution:
    """Picard iteration for r in v = s + σ w + σ² r on the hodograph grid.

    Each step solves the Laplace/Neumann problem for the new remainder with the
    quadratic defect of the interior operator and of the boundary condition
    frozen at the previous iterate; far-field closure r = k_r Φ on the
    artificial boundary.
    """
    sigma = defect.sigma if sigma is None else sigma
    if sigma == 0.0:
        raise ValueError("sigma must be nonzero for the remainder iteration")
    d = defect.d
    domain = domain or HodographDomain(d=d)
    lin = kernel_convolve(defect, s, "physical")
    ops = grid_operators(domain)
    nx, nz = ops.shape
    N = nx * nz
    X, Z = ops.X, ops.Z
    w = lin.value(X, Z).ravel()
    H = domain.H
    closure = FarField("height", s=-s)

    idx = np.arange(N).reshape(nx, nz)
    far = np.zeros((nx, nz), bool)
    far[:, -1] = True
    far[-1, :] = True
    if not domain.axisymmetric:
        far[0, :] = True
    bottom = np.zeros((nx, nz), bool)
    bottom[:, 0] = True
    bottom &= ~far
    interior = ~(far | bottom)
    far_idx, bot_idx, int_idx = idx[far], idx[bottom], idx[interior]
    G_far = green(d, X[far], Z[far], closure, H)
    ell = _annulus_functional(ops, d, closure, H, 4.0, 0.5 * min(domain.L, H))
    rho_bot = np.abs(X[:, 0])[~far[:, 0]]

    lap = (ops.Lt + ops.Dzz).tocsr()
    nf = len(far_idx)
    rows = sp.vstack([
        lap[int_idx],
        ops.Dz[bot_idx],
        sp.csr_matrix((np.ones(nf), (np.arange(nf), far_idx)), shape=(nf, N)),
    ]).tocsr()
    order = np.concatenate([int_idx, bot_idx, far_idx])
    perm = np.empty(N, dtype=np.int64)
    perm[order] = np.arange(N)
    rows = rows[perm]
    kcol = np.zeros(N)
    kcol[far_idx] = -G_far
    M = sp.vstack([
        sp.hstack([rows, sp.csr_matrix(kcol.reshape(-1, 1))]),
        sp.hstack([sp.csr_matrix(-ell.reshape(1, -1)), sp.csr_matrix(np.array([[1.0]]))]),
    ]).tocsc()
    lu = splu(M)
    q_s = defect.shape_at(rho_bot, s)

    def forcing(r):
        v = s + sigma * w + sigma**2 * r
        p1, p2 = ops.Dx @ v, ops.Dz @ v
        one = 1.0 + p2
        if np.any(one <= 0):
            raise SolverError("σ beyond contraction regime (transform degenerate)")
        a = p1 / one
        b = (1.0 + p1 * p1) / one**2
        trace_defect = 2.0 * a * (ops.Dxz @ v) + (b - 1.0) * (ops.Dzz @ v)
        rhs = np.zeros(N + 1)
        rhs[int_idx] = -trace_defect[int_idx] / sigma**2
        pb = p1[bot_idx]
        qv = defect.shape_at(rho_bot, v[bot_idx])
        rhs[bot_idx] = (np.sqrt(1.0 + pb * pb) / (1.0 + sigma * qv) - 1.0 + sigma * q_s) / sigma**2
        return rhs

    r = np.zeros(N)
    kr = 0.0
    increments = []
    for it in range(1, max_iter + 1):
        sol = lu.solve(forcing(r))
        r_new, kr = sol[:N], sol[N]
        diff = (r_new - r).reshape(nx, nz)
        inc = phi_norm(d, X, Z, diff, (ops.Dx @ diff.ravel(), ops.Dz @ diff.ravel()))
        increments.append(inc)
        r = r_new
        if not np.isfinite(inc) or (len(increments) >= 4 and increments[-1] > increments[-2] > increments[-3]):
            raise SolverError(f"σ beyond contraction regime (σ={sigma}, increments {increments[-3:]})")
        if inc < tol:
            break
    else:
        raise SolverError(f"σ beyond contraction regime (σ={sigma}, no convergence in {max_iter} iterations)")
    v = s + sigma * w + sigma**2 * r
    rgrid = r.reshape(nx, nz)
    norm = phi_norm(d, X, Z, rgrid, (ops.Dx @ r, ops.Dz @ r))
    # hodograph far coefficient of v, converted to the physical capacity
    kh = sigma * lin.far_coefficient + sigma**2 * kr
    cap = -kh if d == 2 else kh
    lin.sigma = sigma
    lin.grid = (ops.xs, ops.zs, v.reshape(nx, nz))
    lin.remainder = rgrid
    lin.remainder_norm = norm
    lin.capacity = cap
    lin.iterations = it
    lin.increments = increments
    return lin


# ---------------------------------------------------------------------------
# calibrated order-σ prediction


@dataclass
class Calibration:
    d: int
    constant: float
    mode: str
    limit: float  # extrapolated k/(σ I(s)) from nonlinear solves
    sigmas: list
    ratios: list
    provenance: str

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def load(cls, path) -> "Calibration":
        return cls(**json.loads(Path(path).read_text()))


_CALIBRATIONS: dict[int, Calibration] = {}


def calibrate(defect: DefectProfile, sigmas=(0.02, 0.01, 0.005), s: float = 0.0,
              domain: Optional[HodographDomain] = None, register: bool = True) -> Calibration:
    """Decide the kernel constant (1 or 1/γ_d) from nonlinear solves at a σ-halving sequence."""
    d = defect.d
    domain = domain or HodographDomain(d=d)
    I = slice_integral(defect, s)
    if I == 0.0:
        raise ValueError("calibration needs a slice with nonzero defect mass")
    ratios = []
    for sg in sigmas:
        f = solve_hodograph(domain, defect.with_sigma(sg), FarField("height", s=-s))
        k = -f.k_h if d == 2 else f.k_h
        ratios.append(k / (sg * I))
    # linear-in-σ Richardson on the last two points
    s1, s2 = sigmas[-2], sigmas[-1]
    limit = (ratios[-1] * s1 - ratios[-2] * s2) / (s1 - s2)
    cands = {"paper": 1.0, "physical": 1.0 / GAMMA[d]}
    mode = min(cands, key=lambda m: abs(cands[m] - limit))
    cal = Calibration(d, cands[mode], mode, limit, list(sigmas), ratios,
                      f"nonlinear hodograph solves, {defect.label}, s={s}, grid h={domain.h}, L={domain.L}")
    if register:
        _CALIBRATIONS[d] = cal
    return cal


def register_calibration(cal: Calibration) -> None:
    _CALIBRATIONS[cal.d] = cal


def predict_capacity(defect: DefectProfile, s: float, sigma: Optional[float] = None,
                     calibration: Optional[Calibration] = None) -> float:
    """σ·c_cal·I(s), with c_cal taken from a stored calibration."""
    cal = calibration or _CALIBRATIONS.get(defect.d)
    if cal is None:
        raise LookupError("calibration missing: run calibrate() or load a stored calibration")
    sigma = defect.sigma if sigma is None else sigma
    return sigma * cal.constant * slice_integral(defect, s)
