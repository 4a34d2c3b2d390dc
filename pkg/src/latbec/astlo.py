"""
Adiabatic spacetime localization observables.

A smooth monotone 0-to-1 cutoff with derivative supported in (eps/2, eps) is
swept inward at speed v' = (kappa + v)/2: the weight f((R - v' t - |x|)/s)
interpolates between the indicator of B_R at t = 0 and that of B_r at t = s =
(R - r)/v. Weighted excitation counts against these profiles track transport
of fluctuations, and the module evaluates the geometric sandwich inequalities
and the bound ingredients M_R(t), E_{R,r}(t) used in the light-cone estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .hartree import HartreeTrajectory
from .lattice import ComplexField, LatticeGeometry, RegionMask, ball_mask, kappa, lp_norm

__all__ = [
    "CutoffFunction",
    "AstloConfig",
    "make_cutoff",
    "cutoff_profile",
    "astlo_expectation",
    "geometric_checks",
    "compute_diagnostics",
    "check_local_bound",
    "closure_constant",
]

_GRID_POINTS = 20001


class CutoffFunction:
    """Normalized integral of a squared smooth bump supported in (a, b).

    f is 0 below a, 1 above b, monotone, with f' = h^2 / int h^2 known in
    closed form. The canonical class takes (a, b) = (eps/2, eps).
    """

    def __init__(self, a: float, b: float):
        if not b > a:
            raise ValueError("need b > a")
        self.a = float(a)
        self.b = float(b)
        grid = np.linspace(self.a, self.b, _GRID_POINTS)
        dens = self._bump_sq(grid)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
        self._Z = cum[-1]
        self._grid = grid
        self._cum = cum / self._Z

    def _bump_sq(self, mu: np.ndarray) -> np.ndarray:
        """h(mu)^2 with h the standard compactly supported exponential bump."""
        mu = np.asarray(mu, dtype=np.float64)
        out = np.zeros_like(mu)
        inside = (mu > self.a) & (mu < self.b)
        z = mu[inside]
        out[inside] = np.exp(-2.0 / ((z - self.a) * (self.b - z)))
        return out

    @property
    def eps(self) -> float:
        return self.b

    def __call__(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64)
        out = np.interp(mu, self._grid, self._cum, left=0.0, right=1.0)
        return out

    def derivative(self, mu) -> np.ndarray:
        return self._bump_sq(mu) / self._Z

    def shifted(self, delta: float) -> "CutoffFunction":
        """f(mu - delta); breaks the class membership, used as a fail detector."""
        other = CutoffFunction(self.a + delta, self.b + delta)
        return other


def make_cutoff(eps: float) -> CutoffFunction:
    """The canonical cutoff with derivative supported in (eps/2, eps)."""
    if eps <= 0:
        raise ValueError("need eps > 0")
    return CutoffFunction(eps / 2.0, eps)


def closure_constant(f1: CutoffFunction, f2: CutoffFunction,
                     grid_points: int = 10001) -> tuple[float, CutoffFunction]:
    """Smallest C with f1' + f2' <= C f3' on the grid, f3 built over the union.

    f3 uses the same squared-bump recipe on (min a, max b); the ratio stays
    finite because all bumps vanish at the shared edges at matching order.
    """
    a3 = min(f1.a, f2.a)
    b3 = max(f1.b, f2.b)
    f3 = CutoffFunction(a3, b3)
    grid = np.linspace(a3, b3, grid_points)
    num = f1.derivative(grid) + f2.derivative(grid)
    den = f3.derivative(grid)
    active = num > 0
    if np.any(active & (den == 0.0)):
        return float("inf"), f3
    return float(np.max(num[active] / den[active])), f3


@dataclass
class AstloConfig:
    """Radii, speeds and sharpness of one localization sweep."""

    R: float
    r: float
    v: float
    d: int
    n: int = 1
    s: float | None = None

    def __post_init__(self):
        k = kappa(self.d)
        if self.v <= k:
            raise ValueError(f"need v > kappa = {k}")
        if self.R < self.r + self.v:
            raise ValueError("need R >= r + v")
        if self.s is None:
            self.s = (self.R - self.r) / self.v
        if self.s < 1.0:
            raise ValueError("need s >= 1")
        if self.n < 1:
            raise ValueError("need n >= 1")

    @property
    def kappa(self) -> float:
        return kappa(self.d)

    @property
    def v_prime(self) -> float:
        return 0.5 * (self.kappa + self.v)

    @property
    def delta(self) -> float:
        return self.v_prime - self.kappa

    @property
    def eps(self) -> float:
        return self.v - self.v_prime

    def default_cutoff(self) -> CutoffFunction:
        return make_cutoff(self.eps)


def cutoff_profile(
    f: CutoffFunction,
    geometry: LatticeGeometry,
    t: float,
    cfg: AstloConfig,
) -> np.ndarray:
    """Site weights f((R - v' t - |x|) / s) at time t."""
    dist = geometry.distances_from((0,) * geometry.dimension)
    arg = (cfg.R - cfg.v_prime * t - dist) / cfg.s
    return f(arg)


def astlo_expectation(site_density: np.ndarray, f: CutoffFunction,
                      geometry: LatticeGeometry, t: float, cfg: AstloConfig) -> float:
    """sum_x f_{ts}(x) <n_x> for a given excitation density profile."""
    w = cutoff_profile(f, geometry, t, cfg)
    return float(np.dot(w, site_density))


def geometric_checks(
    f: CutoffFunction,
    geometry: LatticeGeometry,
    cfg: AstloConfig,
    n_times: int = 21,
) -> dict:
    """Pointwise sandwich at every site over a grid of times in [0, s].

    Verifies f_{0s} <= 1_{B_R}, 1_{B_r} <= f_{ts} for 0 <= t <= s, support of
    f_{ts} inside B_R for all t >= 0, and monotone decrease in t.
    """
    dist = geometry.distances_from((0,) * geometry.dimension)
    in_R = ball_mask(geometry, cfg.R).member
    in_r = ball_mask(geometry, cfg.r).member
    w0 = cutoff_profile(f, geometry, 0.0, cfg)
    upper_ok = bool(np.all(w0 <= in_R.astype(float) + 1e-12))
    lower_ok = True
    monotone_ok = True
    support_ok = True
    prev = None
    for t in np.linspace(0.0, cfg.s, n_times):
        w = cutoff_profile(f, geometry, t, cfg)
        if np.any(w[in_r] < 1.0 - 1e-12):
            lower_ok = False
        if np.any(w[~in_R] > 1e-12):
            support_ok = False
        if prev is not None and np.any(w > prev + 1e-12):
            monotone_ok = False
        prev = w
    # support confinement must persist past the sweep window
    for t in (1.5 * cfg.s, 3.0 * cfg.s):
        w = cutoff_profile(f, geometry, t, cfg)
        if np.any(w[~in_R] > 1e-12):
            support_ok = False
    passed = upper_ok and lower_ok and monotone_ok and support_ok
    return {
        "upper": upper_ok,
        "lower": lower_ok,
        "support": support_ok,
        "monotone": monotone_ok,
        "pass": passed,
    }


# ---------------------------------------------------------------------------
# bound diagnostics
# ---------------------------------------------------------------------------


def _trapezoid_cumulative(ts: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(0.5 * (ys[1:] + ys[:-1]) * np.diff(ts))])


def compute_diagnostics(
    traj: HartreeTrajectory,
    cfg: AstloConfig,
    fluct_region_series: np.ndarray,
    fluct_moment2_series: np.ndarray,
    N: int,
    times: np.ndarray | None = None,
) -> dict:
    """Bound ingredients on the snapshot grid.

    M_R(t) = |lam| int_0^t ( ||phi||_inf(B_R) + 5 ||phi||_inf(B_R)^2 );
    E_{R,r}(t) = t (v/(R-r))^{n+1} sup_{tau<=t} <N_{B_{R+1}}>_tau
               + (|lam|/N) sup_{tau<=t} <(Nhat+1)^2>_tau
                 int_0^t ( ||phi||_{l4(B_R)}^4 + ||phi||_inf(B_R) ).
    The fluctuation series must be sampled on the same grid.
    """
    ts = traj.times if times is None else np.asarray(times)
    if len(fluct_region_series) != len(ts) or len(fluct_moment2_series) != len(ts):
        raise ValueError("fluctuation series must match the time grid")
    BR = ball_mask(traj.geometry, cfg.R)
    inf_series = np.array([lp_norm(s, np.inf, BR) for s in traj.snapshots[:len(ts)]])
    l4_series = np.array([lp_norm(s, 4, BR) for s in traj.snapshots[:len(ts)]])
    M = abs(traj.lam) * _trapezoid_cumulative(ts, inf_series + 5.0 * inf_series ** 2)
    quad = _trapezoid_cumulative(ts, l4_series ** 4 + inf_series)
    sup_region = np.maximum.accumulate(fluct_region_series)
    sup_m2 = np.maximum.accumulate(fluct_moment2_series)
    E = ts * (cfg.v / (cfg.R - cfg.r)) ** (cfg.n + 1) * sup_region \
        + abs(traj.lam) / N * sup_m2 * quad
    return {"times": ts, "M_R": M, "E_Rr": E}


def check_local_bound(
    times: np.ndarray,
    n_br_series: np.ndarray,
    n_bR0: float,
    M_series: np.ndarray,
    E_series: np.ndarray,
    cfg: AstloConfig,
) -> dict:
    """Fit the smallest C making the local fluctuation bound hold on the run.

    LHS(t) = exp(-M_R(t)) <N_{B_r}>_t; RHS(t) = (1 + C/(R-r)) <N_{B_R}>_0
    + C E_{R,r}(t). Only times t <= (R-r)/v are in regime.
    """
    horizon = (cfg.R - cfg.r) / cfg.v
    sel = times <= horizon + 1e-9
    lhs = np.exp(-M_series[sel]) * n_br_series[sel]
    denom = n_bR0 / (cfg.R - cfg.r) + E_series[sel]
    with np.errstate(divide="ignore", invalid="ignore"):
        need = (lhs - n_bR0) / denom
    need = need[np.isfinite(need)]
    C = float(max(0.0, need.max())) if need.size else 0.0
    return {
        "C": C,
        "horizon": horizon,
        "in_regime_times": times[sel],
        "lhs": lhs,
        "rhs": (1.0 + C / (cfg.R - cfg.r)) * n_bR0 + C * E_series[sel],
    }
