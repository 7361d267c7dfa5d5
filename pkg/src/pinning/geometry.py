"""Defect profiles, rational-direction lattices and the periodic coefficient field."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate


def canonical_bump(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return np.where(r < 1.0, (1.0 - r * r) ** 2, 0.0)


def canonical_bump_dr(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return np.where(r < 1.0, -4.0 * r * (1.0 - r * r), 0.0)


@dataclass(frozen=True)
class DefectProfile:
    """A radial defect shape q̃ supported in the closed unit ball, scaled by sigma.

    `radial` maps |x| to q̃; `radial_dr` is its derivative (used by Newton
    Jacobians; finite differences are used when it is None).
    """

    d: int
    sigma: float
    radial: Callable[[np.ndarray], np.ndarray] = canonical_bump
    radial_dr: Optional[Callable[[np.ndarray], np.ndarray]] = canonical_bump_dr
    lipschitz_bound: float = 8.0 / (3.0 * math.sqrt(3.0))
    label: str = "canonical-bump"

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        # positivity of 1 + sigma*q on the sampled support
        r = np.linspace(0.0, 1.0, 2001)
        if np.any(1.0 + self.sigma * self.radial(r) <= 0.0):
            raise ValueError("coefficient 1 + sigma*q must stay positive")

    def shape(self, x: np.ndarray) -> np.ndarray:
        """q̃ at points x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        return self.radial(np.linalg.norm(x, axis=-1))

    def q(self, x: np.ndarray) -> np.ndarray:
        return self.sigma * self.shape(x)

    def shape_at(self, tangential_radius: np.ndarray, height: np.ndarray) -> np.ndarray:
        return self.radial(np.hypot(tangential_radius, height))

    def shape_dheight(self, tangential_radius: np.ndarray, height: np.ndarray) -> np.ndarray:
        """Derivative of q̃(y', t) in the height argument t."""
        rho = np.asarray(tangential_radius, dtype=float)
        t = np.asarray(height, dtype=float)
        r = np.hypot(rho, t)
        if self.radial_dr is not None:
            with np.errstate(invalid="ignore", divide="ignore"):
                out = self.radial_dr(r) * np.where(r > 0, t / np.where(r > 0, r, 1.0), 0.0)
            return out
        eps = 1e-6
        return (self.shape_at(rho, t + eps) - self.shape_at(rho, t - eps)) / (2 * eps)

    def with_sigma(self, sigma: float) -> "DefectProfile":
        return DefectProfile(self.d, sigma, self.radial, self.radial_dr, self.lipschitz_bound, self.label)

    def with_dimension(self, d: int) -> "DefectProfile":
        return DefectProfile(d, self.sigma, self.radial, self.radial_dr, self.lipschitz_bound, self.label)


def tabulated_profile(path: str | Path, d: int, sigma: float) -> DefectProfile:
    """Radial profile from a CSV with columns radius,value (linear interpolation, zero for r >= 1)."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((float(rec["radius"]), float(rec["value"])))
    rows.sort()
    radii = np.array([r for r, _ in rows])
    values = np.array([v for _, v in rows])
    if radii[0] > 0.0 or radii[-1] < 1.0:
        raise ValueError("tabulated profile must cover radii [0, 1]")

    def radial(r):
        r = np.asarray(r, dtype=float)
        return np.where(r < 1.0, np.interp(r, radii, values), 0.0)

    slopes = np.abs(np.diff(values) / np.diff(radii))
    return DefectProfile(d, sigma, radial, None, float(slopes.max(initial=0.0)), f"tabulated:{Path(path).name}")


def make_profile(kind: str, d: int, sigma: float) -> DefectProfile:
    if kind == "canonical-bump":
        return DefectProfile(d, sigma)
    if kind.startswith("tabulated:"):
        return tabulated_profile(kind.split(":", 1)[1], d, sigma)
    raise ValueError(f"unknown profile kind {kind!r}")


def slice_integral(defect: DefectProfile, s: float) -> float:
    """∫ q̃ over the hyperplane x_d = s."""
    if abs(s) >= 1.0:
        return 0.0
    half = math.sqrt(1.0 - s * s)
    opts = dict(epsabs=1e-12, epsrel=1e-10, limit=200)
    if defect.d == 2:
        val, _ = integrate.quad(lambda t: float(defect.shape_at(t, s)), -half, half, **opts)
        return val
    val, _ = integrate.quad(lambda r: 2.0 * math.pi * r * float(defect.shape_at(r, s)), 0.0, half, **opts)
    return val


# ---------------------------------------------------------------------------
# lattices


def _ext_gcd(a: int, b: int) -> tuple[int, int, int]:
    if b == 0:
        return (abs(a), (1 if a >= 0 else -1), 0)
    g, x, y = _ext_gcd(b, a % b)
    return g, y, x - (a // b) * y


def _gauss_reduce(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Lagrange-Gauss reduction: returns a basis of successive minima
    u, v = u.copy(), v.copy()
    if u @ u > v @ v:
        u, v = v, u
    while True:
        m = int(round((u @ v) / (u @ u)))
        v = v - m * u
        if v @ v >= u @ u:
            return u, v
        u, v = v, u


def integer_kernel_basis(xi: tuple[int, ...]) -> np.ndarray:
    """Integer basis (rows) of Z^d ∩ xi^⊥, reduced to successive minima."""
    xi = tuple(int(c) for c in xi)
    if len(xi) == 2:
        return np.array([[xi[1], -xi[0]]], dtype=np.int64)
    a, b, c = xi
    if a == 0 and b == 0:
        v1, v2 = np.array([1, 0, 0]), np.array([0, 1, 0])
    else:
        g, p, q = _ext_gcd(a, b)
        v1 = np.array([b // g, -a // g, 0])
        v2 = np.array([p * c, q * c, -g])
    v1, v2 = _gauss_reduce(v1.astype(np.int64), v2.astype(np.int64))
    return np.vstack([v1, v2])


def rotation_to_normal(xi: np.ndarray) -> np.ndarray:
    """Orthogonal O with O xi/|xi| = e_d, completed by Gram-Schmidt."""
    d = len(xi)
    n = np.asarray(xi, dtype=float) / np.linalg.norm(xi)
    cols = [n]
    for e in np.eye(d):
        w = e - sum((e @ c) * c for c in cols)
        if np.linalg.norm(w) > 1e-8:
            cols.append(w / np.linalg.norm(w))
        if len(cols) == d:
            break
    rows = cols[1:] + [n]
    O = np.array(rows)
    if np.linalg.det(O) < 0:
        O[0] = -O[0]
    return O


@dataclass(frozen=True)
class LatticeSpec:
    xi: tuple[int, ...]
    rotation: np.ndarray
    integer_basis: np.ndarray
    basis: np.ndarray  # rows, rotated into {x_d = 0}
    cell_area: float
    rho0: float

    @property
    def d(self) -> int:
        return len(self.xi)

    @property
    def tangential_basis(self) -> np.ndarray:
        """Basis rows with the (zero) last coordinate dropped."""
        return self.basis[:, :-1]

    def dual_basis(self) -> np.ndarray:
        """Rows k_j with k_j · b_i = 2π δ_ij (tangential coordinates)."""
        B = self.tangential_basis
        return 2.0 * math.pi * np.linalg.inv(B).T

    def nearest_site(self, x: np.ndarray) -> np.ndarray:
        """Nearest lattice point (full coordinates) to each point of x (..., d)."""
        x = np.asarray(x, dtype=float)
        B = self.tangential_basis
        coef = np.linalg.solve(B.T, x[..., :-1].reshape(-1, self.d - 1).T).T
        base = np.floor(coef)
        best = None
        best_dist = None
        shifts = np.array(np.meshgrid(*[[-1, 0, 1, 2]] * (self.d - 1), indexing="ij")).reshape(self.d - 1, -1).T
        xt = x[..., :-1].reshape(-1, self.d - 1)
        for sh in shifts:
            z = (base + sh) @ B
            dist = np.sum((xt - z) ** 2, axis=1)
            if best is None:
                best, best_dist = z, dist
            else:
                better = dist < best_dist
                best = np.where(better[:, None], z, best)
                best_dist = np.where(better, dist, best_dist)
        out = np.zeros((xt.shape[0], self.d))
        out[:, :-1] = best
        return out.reshape(x.shape)


def build_lattice(xi) -> LatticeSpec:
    xi = tuple(int(c) for c in xi)
    if len(xi) not in (2, 3):
        raise ValueError("only d = 2 and d = 3 are supported")
    if all(c == 0 for c in xi):
        raise ValueError("zero direction vector")
    if reduce(math.gcd, (abs(c) for c in xi)) != 1:
        raise ValueError("reducible direction")
    O = rotation_to_normal(np.array(xi, dtype=float))
    ib = integer_kernel_basis(xi)
    basis = (O @ ib.T.astype(float)).T
    basis[:, -1] = 0.0
    area = float(np.linalg.norm(xi))
    lam1 = float(np.min(np.linalg.norm(basis, axis=1)))
    return LatticeSpec(xi, O, ib, basis, area, lam1 / 2.0)


@dataclass(frozen=True)
class CoefficientField:
    defect: DefectProfile
    delta: float
    lattice: LatticeSpec = field(default_factory=lambda: build_lattice((0, 1)))


def eval_Q(fieldspec: CoefficientField, x) -> np.ndarray:
    """Q_δ(x) = 1 + Σ_z q((x − z)/δ); only the nearest site can contribute."""
    if fieldspec.delta > 0.5:
        raise ValueError("overlapping defects")
    x = np.asarray(x, dtype=float)
    z = fieldspec.lattice.nearest_site(x)
    return 1.0 + fieldspec.defect.q((x - z) / fieldspec.delta)
